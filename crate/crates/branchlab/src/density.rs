//! Sampling from densities given as piecewise-linear profiles on the grid.

use rand::Rng;

use crate::error::{Error, Result};
use crate::space::Domain;

/// Draws positions distributed like the piecewise-linear interpolant of a
/// non-negative node profile. Cell masses are exact trapezoid areas and the
/// within-cell draw inverts the linear CDF, so the sampled law is exactly the
/// density the quadrature routines integrate.
#[derive(Debug, Clone)]
pub(crate) struct PiecewiseLinearSampler {
    lo: f64,
    h: f64,
    values: Vec<f64>,
    /// cumulative cell masses, normalized to end at 1
    cdf: Vec<f64>,
    total: f64,
}

impl PiecewiseLinearSampler {
    pub(crate) fn new(domain: &Domain, values: &[f64]) -> Result<Self> {
        if values.len() != domain.n_x() {
            return Err(Error::validation("density row does not match the grid"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::domain(format!(
                "density must be finite and non-negative, got {} at node {i}",
                values[i]
            )));
        }
        let h = domain.h();
        let mut cdf = Vec::with_capacity(values.len() - 1);
        let mut acc = 0.0;
        for w in values.windows(2) {
            acc += 0.5 * h * (w[0] + w[1]);
            cdf.push(acc);
        }
        let total = acc;
        if total <= 0.0 {
            return Err(Error::domain("density integrates to zero"));
        }
        for c in &mut cdf {
            *c /= total;
        }
        Ok(PiecewiseLinearSampler {
            lo: domain.lo(),
            h,
            values: values.to_vec(),
            cdf,
            total,
        })
    }

    /// Integral of the unnormalized profile.
    pub(crate) fn total_mass(&self) -> f64 {
        self.total
    }

    pub(crate) fn sample(&self, rng: &mut impl Rng) -> f64 {
        let u: f64 = rng.gen();
        let cell = self.cdf.partition_point(|&c| c < u).min(self.cdf.len() - 1);
        let mass_before = if cell == 0 { 0.0 } else { self.cdf[cell - 1] };
        let want = (u - mass_before) * self.total;
        let a = self.values[cell];
        let b = self.values[cell + 1];
        let slope = (b - a) / self.h;
        // invert a*t + slope*t^2/2 = want on [0, h]
        let t = if slope.abs() * self.h < 1e-14 * (a + 1e-300) {
            want / a
        } else {
            let disc = (a * a + 2.0 * slope * want).max(0.0);
            (disc.sqrt() - a) / slope
        };
        self.lo + cell as f64 * self.h + t.clamp(0.0, self.h)
    }
}
