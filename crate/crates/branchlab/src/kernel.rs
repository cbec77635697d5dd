//! Branching mechanism: an offspring count law paired with a dispersal
//! kernel, the induced one-step transform on test functions, and validators
//! for the standing assumptions (death-probability floor, bounded mean,
//! weight-compatible dispersal).

use std::sync::Arc;

use rand::Rng;
use rand_distr::Distribution;
use serde::Serialize;

use crate::density::PiecewiseLinearSampler;
use crate::error::{Error, Result};
use crate::space::{Boundary, Domain, GridFunction, PrefixIntegral, TemperingWeight};

/// A per-node scalar parameter, either spatially constant or tabulated.
#[derive(Debug, Clone)]
pub enum Param {
    Constant(f64),
    PerNode(Vec<f64>),
}

impl Param {
    fn resolve(self, domain: &Arc<Domain>) -> Result<GridFunction> {
        match self {
            Param::Constant(v) => GridFunction::constant(domain.clone(), v),
            Param::PerNode(vs) => GridFunction::new(domain.clone(), vs),
        }
    }
}

/// Distribution of the number of offspring a particle leaves behind.
///
/// The count may depend on the parent's position; between nodes, scalar
/// parameters are interpolated linearly and probability rows are taken from
/// the nearest node.
#[derive(Debug, Clone)]
pub struct OffspringLaw {
    domain: Arc<Domain>,
    kind: OffspringKind,
}

#[derive(Debug, Clone)]
enum OffspringKind {
    PureDeath,
    BinarySplit { p: GridFunction },
    PoissonCount { rate: GridFunction },
    FiniteTable { rows: Vec<Vec<f64>> },
}

/// Tolerance for a probability row to sum to one.
const ROW_SUM_TOL: f64 = 1e-12;

impl OffspringLaw {
    /// Every particle dies leaving no offspring.
    pub fn pure_death(domain: Arc<Domain>) -> Self {
        OffspringLaw {
            domain,
            kind: OffspringKind::PureDeath,
        }
    }

    /// With probability `p(x)` the particle splits in two, otherwise it dies.
    pub fn binary_split(domain: Arc<Domain>, p: Param) -> Result<Self> {
        let p = p.resolve(&domain)?;
        if let Some(i) = p.values().iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::validation(format!(
                "split probability {} at node {i} outside [0, 1]",
                p.values()[i]
            )));
        }
        Ok(OffspringLaw {
            domain,
            kind: OffspringKind::BinarySplit { p },
        })
    }

    /// Poisson-distributed count with mean `rate(x)`.
    pub fn poisson(domain: Arc<Domain>, rate: Param) -> Result<Self> {
        let rate = rate.resolve(&domain)?;
        if let Some(i) = rate.values().iter().position(|v| *v < 0.0) {
            return Err(Error::validation(format!(
                "Poisson rate {} at node {i} is negative",
                rate.values()[i]
            )));
        }
        Ok(OffspringLaw {
            domain,
            kind: OffspringKind::PoissonCount { rate },
        })
    }

    /// Poisson count whose rate saturates the death-probability floor:
    /// `rate(x) = -scale * log(1 - psi(x))`, so the no-offspring probability
    /// is `(1 - psi(x))^scale`. Requires `scale` in `(0, 1]` so the floor
    /// still holds.
    pub fn poisson_psi_capped(weight: &TemperingWeight, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale <= 1.0) {
            return Err(Error::validation(format!(
                "psi-capped rate scale must be in (0, 1], got {scale}"
            )));
        }
        let rate = weight.grid().map(|psi| -scale * (1.0 - psi).ln())?;
        Ok(OffspringLaw {
            domain: weight.domain().clone(),
            kind: OffspringKind::PoissonCount { rate },
        })
    }

    /// Explicit probability row(s) `p_0..p_max` for the count. Pass one row
    /// to use it at every node, or one row per node.
    pub fn finite_table(domain: Arc<Domain>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let rows = broadcast_rows(&domain, rows)?;
        for (i, row) in rows.iter().enumerate() {
            if row.is_empty() {
                return Err(Error::validation(format!("empty count row at node {i}")));
            }
            if let Some(j) = row.iter().position(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::validation(format!(
                    "count probability {} (node {i}, count {j}) must be non-negative",
                    row[j]
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::validation(format!(
                    "count probabilities at node {i} sum to {sum}, not 1"
                )));
            }
        }
        Ok(OffspringLaw {
            domain,
            kind: OffspringKind::FiniteTable { rows },
        })
    }

    pub fn domain(&self) -> &Arc<Domain> {
        &self.domain
    }

    /// Probability of zero offspring at node `i`.
    pub fn death_prob(&self, i: usize) -> f64 {
        match &self.kind {
            OffspringKind::PureDeath => 1.0,
            OffspringKind::BinarySplit { p } => 1.0 - p.values()[i],
            OffspringKind::PoissonCount { rate } => (-rate.values()[i]).exp(),
            OffspringKind::FiniteTable { rows } => rows[i][0],
        }
    }

    /// Expected offspring count at node `i`.
    pub fn mean(&self, i: usize) -> f64 {
        match &self.kind {
            OffspringKind::PureDeath => 0.0,
            OffspringKind::BinarySplit { p } => 2.0 * p.values()[i],
            OffspringKind::PoissonCount { rate } => rate.values()[i],
            OffspringKind::FiniteTable { rows } => rows[i]
                .iter()
                .enumerate()
                .map(|(n, p)| n as f64 * p)
                .sum(),
        }
    }

    /// Largest mean offspring count over the grid.
    pub fn n_star(&self) -> f64 {
        (0..self.domain.n_x())
            .map(|i| self.mean(i))
            .fold(0.0, f64::max)
    }

    /// Probability generating function of the count at node `i`.
    pub fn pgf(&self, i: usize, s: f64) -> f64 {
        match &self.kind {
            OffspringKind::PureDeath => 1.0,
            OffspringKind::BinarySplit { p } => {
                let p = p.values()[i];
                (1.0 - p) + p * s * s
            }
            OffspringKind::PoissonCount { rate } => (-rate.values()[i] * (1.0 - s)).exp(),
            OffspringKind::FiniteTable { rows } => {
                // Horner evaluation of sum p_n s^n
                rows[i].iter().rev().fold(0.0, |acc, &p| acc * s + p)
            }
        }
    }

    /// Draw an offspring count for a parent at position `x`.
    pub fn sample_count(&self, x: f64, rng: &mut impl Rng) -> usize {
        match &self.kind {
            OffspringKind::PureDeath => 0,
            OffspringKind::BinarySplit { p } => {
                if rng.gen::<f64>() < p.eval(x) {
                    2
                } else {
                    0
                }
            }
            OffspringKind::PoissonCount { rate } => {
                let r = rate.eval(x);
                if r <= 0.0 {
                    0
                } else {
                    rand_distr::Poisson::new(r).expect("validated rate").sample(rng) as usize
                }
            }
            OffspringKind::FiniteTable { rows } => {
                let row = &rows[self.domain.nearest_node(x)];
                let mut u: f64 = rng.gen();
                for (n, &p) in row.iter().enumerate() {
                    if u < p {
                        return n;
                    }
                    u -= p;
                }
                row.len() - 1
            }
        }
    }
}

fn broadcast_rows(domain: &Domain, rows: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>> {
    if rows.len() == 1 {
        return Ok(vec![rows.into_iter().next().unwrap(); domain.n_x()]
            .into_iter()
            .collect());
    }
    if rows.len() != domain.n_x() {
        return Err(Error::validation(format!(
            "expected 1 or {} rows, got {}",
            domain.n_x(),
            rows.len()
        )));
    }
    Ok(rows)
}

/// Where offspring land relative to their parent. Always a probability
/// measure on the habitat: mass falling outside a truncated window is
/// renormalized back in.
#[derive(Debug, Clone)]
pub struct DispersalKernel {
    domain: Arc<Domain>,
    kind: DispersalKind,
}

#[derive(Debug, Clone)]
enum DispersalKind {
    AtParent,
    UniformRadius {
        r: f64,
    },
    TableDensity {
        samplers: Vec<PiecewiseLinearSampler>,
        rows: Vec<Vec<f64>>,
        mass_error: f64,
    },
}

/// Tolerance for a tabulated dispersal density to integrate to one.
const MASS_TOL: f64 = 1e-10;

impl DispersalKernel {
    /// Offspring appear exactly at the parent position.
    pub fn at_parent(domain: Arc<Domain>) -> Self {
        DispersalKernel {
            domain,
            kind: DispersalKind::AtParent,
        }
    }

    /// Offspring land uniformly within distance `r` of the parent.
    pub fn uniform_radius(domain: Arc<Domain>, r: f64) -> Result<Self> {
        if !r.is_finite() || r <= 0.0 {
            return Err(Error::validation(format!(
                "dispersal radius must be positive, got {r}"
            )));
        }
        Ok(DispersalKernel {
            domain,
            kind: DispersalKind::UniformRadius { r },
        })
    }

    /// Offspring positions drawn from a tabulated density per parent node
    /// (one row broadcasts to all nodes). Each row must integrate to one
    /// within a small tolerance and is then renormalized exactly.
    pub fn table_density(domain: Arc<Domain>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let rows = broadcast_rows(&domain, rows)?;
        let mut samplers = Vec::with_capacity(rows.len());
        let mut mass_error = 0.0f64;
        for (i, row) in rows.iter().enumerate() {
            let s = PiecewiseLinearSampler::new(&domain, row)
                .map_err(|e| Error::validation(format!("dispersal row {i}: {e}")))?;
            let err = (s.total_mass() - 1.0).abs();
            if err > MASS_TOL {
                return Err(Error::validation(format!(
                    "dispersal density at node {i} integrates to {}, not 1",
                    s.total_mass()
                )));
            }
            mass_error = mass_error.max(err);
            samplers.push(s);
        }
        Ok(DispersalKernel {
            domain,
            kind: DispersalKind::TableDensity {
                samplers,
                rows,
                mass_error,
            },
        })
    }

    pub fn domain(&self) -> &Arc<Domain> {
        &self.domain
    }

    /// Worst deviation of any tabulated row from unit mass before
    /// renormalization. Zero for the analytic kernels.
    pub fn mass_error(&self) -> f64 {
        match &self.kind {
            DispersalKind::TableDensity { mass_error, .. } => *mass_error,
            _ => 0.0,
        }
    }

    /// Largest fraction of the uniform ball cut off by a truncated window.
    pub fn truncation_cut(&self) -> f64 {
        match (&self.kind, self.domain.boundary()) {
            (DispersalKind::UniformRadius { r }, Boundary::Truncate) => {
                let mut worst = 0.0f64;
                for x in self.domain.nodes() {
                    let a = (x - r).max(self.domain.lo());
                    let b = (x + r).min(self.domain.hi());
                    worst = worst.max(1.0 - (b - a) / (2.0 * r));
                }
                worst
            }
            _ => 0.0,
        }
    }

    /// `∫ h(y) k_x(dy)` at every grid node `x`, using the piecewise-linear
    /// interpolant of `h`.
    pub fn integral_all(&self, h: &GridFunction) -> Result<Vec<f64>> {
        if h.domain().as_ref() != self.domain.as_ref() {
            return Err(Error::domain("field lives on a different domain"));
        }
        match &self.kind {
            DispersalKind::AtParent => Ok(h.values().to_vec()),
            DispersalKind::UniformRadius { r } => {
                let prefix = PrefixIntegral::new(&self.domain, h.values());
                let out = self
                    .domain
                    .nodes()
                    .map(|x| self.ball_average(&prefix, x, *r))
                    .collect();
                Ok(out)
            }
            DispersalKind::TableDensity { rows, samplers, .. } => {
                let hv = h.values();
                let mut out = Vec::with_capacity(rows.len());
                for (row, s) in rows.iter().zip(samplers) {
                    let prod: Vec<f64> = row.iter().zip(hv).map(|(&d, &v)| d * v).collect();
                    let raw = crate::space::trapezoid(&self.domain, &prod)?;
                    out.push(raw / s.total_mass());
                }
                Ok(out)
            }
        }
    }

    fn ball_average(&self, prefix: &PrefixIntegral, x: f64, r: f64) -> f64 {
        match self.domain.boundary() {
            Boundary::Truncate => {
                let a = (x - r).max(self.domain.lo());
                let b = (x + r).min(self.domain.hi());
                prefix.segment(a, b) / (b - a)
            }
            Boundary::Torus => {
                let width = self.domain.width();
                let len = 2.0 * r;
                if len >= width {
                    let laps = (len / width).floor();
                    let rest = len - laps * width;
                    let total = laps * prefix.total() + prefix.segment_wrapped(x - r, x - r + rest);
                    total / len
                } else {
                    prefix.segment_wrapped(x - r, x + r) / len
                }
            }
        }
    }

    /// Draw an offspring position for a parent at `x`.
    pub fn sample(&self, x: f64, rng: &mut impl Rng) -> f64 {
        match &self.kind {
            DispersalKind::AtParent => x,
            DispersalKind::UniformRadius { r } => match self.domain.boundary() {
                Boundary::Truncate => {
                    let a = (x - r).max(self.domain.lo());
                    let b = (x + r).min(self.domain.hi());
                    rng.gen_range(a..=b)
                }
                Boundary::Torus => self.domain.wrap(x + rng.gen_range(-*r..=*r)),
            },
            DispersalKind::TableDensity { samplers, .. } => {
                samplers[self.domain.nearest_node(x)].sample(rng)
            }
        }
    }
}

/// Offspring law and dispersal combined: a particle at `x` is replaced by a
/// random count of offspring, placed independently around `x`.
#[derive(Debug, Clone)]
pub struct BranchingKernel {
    offspring: OffspringLaw,
    dispersal: DispersalKernel,
}

/// Admissible slack below the death-probability floor, covering rounding in
/// the weight evaluation.
const FLOOR_SLACK: f64 = 1e-12;

/// Rounding slack allowed on test-function values before they are rejected.
const PHI_SLACK: f64 = 1e-9;

impl BranchingKernel {
    pub fn new(offspring: OffspringLaw, dispersal: DispersalKernel) -> Result<Self> {
        if offspring.domain().as_ref() != dispersal.domain().as_ref() {
            return Err(Error::validation(
                "offspring law and dispersal kernel live on different domains",
            ));
        }
        Ok(BranchingKernel {
            offspring,
            dispersal,
        })
    }

    pub fn offspring(&self) -> &OffspringLaw {
        &self.offspring
    }

    pub fn dispersal(&self) -> &DispersalKernel {
        &self.dispersal
    }

    pub fn domain(&self) -> &Arc<Domain> {
        self.offspring.domain()
    }

    pub fn mean_offspring(&self, i: usize) -> f64 {
        self.offspring.mean(i)
    }

    pub fn n_star(&self) -> f64 {
        self.offspring.n_star()
    }

    /// One-step transform of a test function: at each node the count pgf is
    /// evaluated at the dispersal average of `phi`. Returns a field between
    /// the death probability and one.
    pub fn apply_phi(&self, phi: &GridFunction) -> Result<GridFunction> {
        if let Some(i) = phi
            .values()
            .iter()
            .position(|v| *v < -PHI_SLACK || *v > 1.0 + PHI_SLACK)
        {
            return Err(Error::domain(format!(
                "test function value {} at node {i} outside [0, 1]",
                phi.values()[i]
            )));
        }
        let clamped;
        let phi = if phi.values().iter().all(|v| (0.0..=1.0).contains(v)) {
            phi
        } else {
            clamped = phi.map(|v| v.clamp(0.0, 1.0))?;
            &clamped
        };
        let integrals = self.dispersal.integral_all(phi)?;
        let values = integrals
            .iter()
            .enumerate()
            .map(|(i, &s)| self.offspring.pgf(i, s.clamp(0.0, 1.0)))
            .collect();
        GridFunction::new(self.domain().clone(), values)
    }

    /// `n(x) * ∫ h(y) k_x(dy)` at node `i`: the expected sum of `h` over one
    /// offspring cloud.
    pub fn first_moment_integral(&self, i: usize, h: &GridFunction) -> Result<f64> {
        if i >= self.domain().n_x() {
            return Err(Error::domain(format!("node {i} out of range")));
        }
        let integrals = self.dispersal.integral_all(h)?;
        Ok(self.offspring.mean(i) * integrals[i])
    }

    /// Validate the standing assumptions against a tempering weight and
    /// report the constants they produce.
    pub fn check_assumptions(&self, weight: &TemperingWeight) -> Result<AssumptionReport> {
        if weight.domain().as_ref() != self.domain().as_ref() {
            return Err(Error::validation(
                "kernel and tempering weight live on different domains",
            ));
        }
        let psi = weight.grid();
        let n_x = self.domain().n_x();

        let mut delta_margin = f64::INFINITY;
        let mut worst_node = 0;
        for i in 0..n_x {
            let margin = self.offspring.death_prob(i) - (1.0 - psi.values()[i]);
            if margin < delta_margin {
                delta_margin = margin;
                worst_node = i;
            }
        }
        if delta_margin < -FLOOR_SLACK {
            let x = self.domain().node(worst_node);
            return Err(Error::validation(format!(
                "death probability sinks below the weight floor at node {worst_node} \
                 (x = {x}): delta = {}, 1 - psi = {}, margin = {delta_margin:.3e}",
                self.offspring.death_prob(worst_node),
                1.0 - psi.values()[worst_node],
            )));
        }

        let psi_avg = self.dispersal.integral_all(psi)?;
        let m = psi_avg
            .iter()
            .zip(psi.values())
            .map(|(&avg, &p)| avg / p)
            .fold(0.0f64, f64::max);

        let n_star = self.n_star();
        Ok(AssumptionReport {
            n_star,
            delta_margin,
            m,
            subcritical: n_star < 1.0,
            continuity: "not checkable on a grid".to_string(),
            dispersal_mass_error: self.dispersal.mass_error(),
            truncation_cut: self.dispersal.truncation_cut(),
        })
    }
}

/// Constants extracted while validating a kernel against a weight.
#[derive(Debug, Clone, Serialize)]
pub struct AssumptionReport {
    /// Largest mean offspring count over the grid.
    pub n_star: f64,
    /// Smallest value of `delta(x) - (1 - psi(x))`; non-negative when the
    /// death floor holds.
    pub delta_margin: f64,
    /// Smallest constant with `∫ psi dk_x <= m psi(x)` at every node.
    pub m: f64,
    /// Whether `n_star < 1`.
    pub subcritical: bool,
    /// Continuity of the mechanism in the parent position is a statement
    /// about the continuum model, so it is only echoed here.
    pub continuity: String,
    pub dispersal_mass_error: f64,
    pub truncation_cut: f64,
}
