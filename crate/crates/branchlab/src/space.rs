//! One-dimensional habitat: a uniform grid over a window that is either a
//! truncated interval or a circle, scalar fields sampled on that grid, and the
//! exponentially decaying tempering weight used everywhere else in the crate.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the window edges are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// The habitat is the closed interval `[lo, hi]`; mass outside is dropped
    /// and dispersal is renormalized.
    Truncate,
    /// `lo` and `hi` are identified; the habitat is a circle of circumference
    /// `hi - lo` and node `n_x - 1` is the wrap-around image of node 0.
    Torus,
}

/// Uniform spatial grid over `[lo, hi]` with `n_x` nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    lo: f64,
    hi: f64,
    n_x: usize,
    h: f64,
    boundary: Boundary,
}

impl Domain {
    pub fn new(lo: f64, hi: f64, n_x: usize, boundary: Boundary) -> Result<Arc<Self>> {
        if !lo.is_finite() || !hi.is_finite() {
            return Err(Error::validation("window edges must be finite"));
        }
        if hi <= lo {
            return Err(Error::validation(format!(
                "window [{lo}, {hi}] must have hi > lo"
            )));
        }
        if n_x < 3 {
            return Err(Error::validation(format!(
                "grid needs at least 3 nodes, got {n_x}"
            )));
        }
        let h = (hi - lo) / (n_x - 1) as f64;
        Ok(Arc::new(Domain {
            lo,
            hi,
            n_x,
            h,
            boundary,
        }))
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    /// Node spacing `(hi - lo) / (n_x - 1)`.
    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    /// Position of node `i`. The last node is exactly `hi`.
    pub fn node(&self, i: usize) -> f64 {
        debug_assert!(i < self.n_x);
        if i + 1 == self.n_x {
            self.hi
        } else {
            self.lo + i as f64 * self.h
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_x).map(move |i| self.node(i))
    }

    /// Reduce `x` into `[lo, hi)` on the torus; identity on the interval.
    pub fn wrap(&self, x: f64) -> f64 {
        match self.boundary {
            Boundary::Truncate => x,
            Boundary::Torus => {
                let w = self.width();
                let y = (x - self.lo).rem_euclid(w) + self.lo;
                // rem_euclid can return w for inputs a hair below a period edge
                if y >= self.hi {
                    self.lo
                } else {
                    y
                }
            }
        }
    }

    /// Whether `x` is a valid position: inside the window for the interval,
    /// anywhere (after wrapping) for the torus.
    pub fn contains(&self, x: f64) -> bool {
        match self.boundary {
            Boundary::Truncate => x.is_finite() && x >= self.lo && x <= self.hi,
            Boundary::Torus => x.is_finite(),
        }
    }

    /// Index of the grid node closest to `x` (after wrapping on the torus).
    pub(crate) fn nearest_node(&self, x: f64) -> usize {
        let x = self.wrap(x);
        let t = ((x - self.lo) / self.h).round();
        (t.max(0.0) as usize).min(self.n_x - 1)
    }

    /// Cell index and offset fraction for interpolation. `x` must already be
    /// wrapped / inside the window; values at the edges are clamped.
    pub(crate) fn locate(&self, x: f64) -> (usize, f64) {
        let t = (x - self.lo) / self.h;
        if t <= 0.0 {
            return (0, 0.0);
        }
        let max_cell = self.n_x - 2;
        let cell = (t.floor() as usize).min(max_cell);
        let frac = (t - cell as f64).clamp(0.0, 1.0);
        (cell, frac)
    }
}

/// A scalar field sampled at the grid nodes. Values are always finite.
#[derive(Debug, Clone)]
pub struct GridFunction {
    domain: Arc<Domain>,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(domain: Arc<Domain>, values: Vec<f64>) -> Result<Self> {
        if values.len() != domain.n_x() {
            return Err(Error::validation(format!(
                "grid function has {} values for {} nodes",
                values.len(),
                domain.n_x()
            )));
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!(
                "non-finite value {} at node {bad}",
                values[bad]
            )));
        }
        Ok(GridFunction { domain, values })
    }

    pub fn constant(domain: Arc<Domain>, value: f64) -> Result<Self> {
        let n = domain.n_x();
        GridFunction::new(domain, vec![value; n])
    }

    pub fn from_fn(domain: Arc<Domain>, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values: Vec<f64> = domain.nodes().map(f).collect();
        GridFunction::new(domain, values)
    }

    pub fn domain(&self) -> &Arc<Domain> {
        &self.domain
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Piecewise-linear interpolation at an arbitrary position. Positions are
    /// wrapped on the torus and clamped to the window edges on the interval.
    pub fn eval(&self, x: f64) -> f64 {
        let x = self.domain.wrap(x);
        let (cell, frac) = self.domain.locate(x);
        let a = self.values[cell];
        let b = self.values[cell + 1];
        a + (b - a) * frac
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn same_domain(&self, other: &GridFunction) -> bool {
        self.domain.as_ref() == other.domain.as_ref()
    }

    /// Pointwise combination into a new grid function.
    pub fn zip_with(&self, other: &GridFunction, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if !self.same_domain(other) {
            return Err(Error::domain("grid functions live on different domains"));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| f(a, b))
            .collect();
        GridFunction::new(self.domain.clone(), values)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values = self.values.iter().map(|&v| f(v)).collect();
        GridFunction::new(self.domain.clone(), values)
    }
}

/// Trapezoid integral of `f` over the window. On the torus the last cell
/// closes the circle, so a periodic field integrates like a rectangle rule.
pub fn integrate(f: &GridFunction) -> Result<f64> {
    trapezoid(f.domain(), f.values())
}

pub(crate) fn trapezoid(domain: &Domain, values: &[f64]) -> Result<f64> {
    if values.len() != domain.n_x() {
        return Err(Error::validation("value count does not match the grid"));
    }
    let mut sum = 0.0;
    for w in values.windows(2) {
        let (a, b) = (w[0], w[1]);
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::domain("cannot integrate a non-finite field"));
        }
        sum += 0.5 * (a + b);
    }
    Ok(sum * domain.h())
}

/// Composite Simpson rule on a uniform grid of `values.len() - 1` intervals,
/// falling back to a 3/8 block on the tail when the interval count is odd.
/// A single interval degrades to the trapezoid rule.
pub(crate) fn simpson(values: &[f64], dt: f64) -> f64 {
    let n = values.len().saturating_sub(1);
    match n {
        0 => 0.0,
        1 => 0.5 * dt * (values[0] + values[1]),
        _ => {
            let (even_part, tail) = if n % 2 == 0 {
                (n, 0.0)
            } else if n >= 3 {
                // Simpson 3/8 on the last three intervals
                let k = values.len() - 4;
                let t = 3.0 * dt / 8.0
                    * (values[k] + 3.0 * values[k + 1] + 3.0 * values[k + 2] + values[k + 3]);
                (n - 3, t)
            } else {
                unreachable!()
            };
            let mut sum = 0.0;
            if even_part > 0 {
                sum = values[0] + values[even_part];
                let mut i = 1;
                while i < even_part {
                    sum += 4.0 * values[i];
                    if i + 1 < even_part {
                        sum += 2.0 * values[i + 1];
                    }
                    i += 2;
                }
                sum *= dt / 3.0;
            }
            sum + tail
        }
    }
}

/// Exact integral of the piecewise-linear interpolant, queryable over
/// arbitrary subintervals. Backs the moving-window dispersal averages.
pub(crate) struct PrefixIntegral<'a> {
    domain: &'a Domain,
    values: &'a [f64],
    /// cum[i] = integral from lo to node i of the interpolant
    cum: Vec<f64>,
}

impl<'a> PrefixIntegral<'a> {
    pub(crate) fn new(domain: &'a Domain, values: &'a [f64]) -> Self {
        debug_assert_eq!(values.len(), domain.n_x());
        let mut cum = Vec::with_capacity(values.len());
        let mut acc = 0.0;
        cum.push(0.0);
        for w in values.windows(2) {
            acc += 0.5 * domain.h() * (w[0] + w[1]);
            cum.push(acc);
        }
        PrefixIntegral {
            domain,
            values,
            cum,
        }
    }

    pub(crate) fn total(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    /// Integral from `lo` to `u`, with `u` inside the window.
    fn value_at(&self, u: f64) -> f64 {
        let (cell, frac) = self.domain.locate(u);
        if frac == 0.0 {
            return self.cum[cell];
        }
        let a = self.values[cell];
        let b = self.values[cell + 1];
        let fu = a + (b - a) * frac;
        let d = frac * self.domain.h();
        self.cum[cell] + 0.5 * d * (a + fu)
    }

    /// Integral over `[a, b]` with `lo <= a <= b <= hi`.
    pub(crate) fn segment(&self, a: f64, b: f64) -> f64 {
        debug_assert!(b >= a);
        self.value_at(b) - self.value_at(a)
    }

    /// Integral over the circle arc from `a` to `b` (torus only), for
    /// `0 <= b - a <= width`.
    pub(crate) fn segment_wrapped(&self, a: f64, b: f64) -> f64 {
        let len = b - a;
        debug_assert!(len >= 0.0 && len <= self.domain.width() + 1e-12);
        let a = self.domain.wrap(a);
        let b = a + len;
        if b <= self.domain.hi() {
            self.segment(a, b)
        } else {
            let over = b - self.domain.hi();
            self.segment(a, self.domain.hi())
                + self.segment(self.domain.lo(), self.domain.lo() + over)
        }
    }
}

/// Exponentially decaying weight `(1 - delta_star) * exp(-alpha |x|)`,
/// periodized (and renormalized to keep its peak value) on the torus.
///
/// The weight is positive, peaks at the origin with value `1 - delta_star`,
/// and its reciprocal growth controls which test functions and configurations
/// the rest of the crate accepts as tempered.
#[derive(Debug, Clone)]
pub struct TemperingWeight {
    delta_star: f64,
    alpha: f64,
    domain: Arc<Domain>,
    grid: GridFunction,
}

impl TemperingWeight {
    pub fn new(domain: Arc<Domain>, delta_star: f64, alpha: f64) -> Result<Self> {
        if !(delta_star > 0.0 && delta_star < 1.0) {
            return Err(Error::validation(format!(
                "delta_star must lie in (0, 1), got {delta_star}"
            )));
        }
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(Error::validation(format!(
                "tail rate alpha must be >= 0, got {alpha}"
            )));
        }
        if alpha == 0.0 && domain.boundary() == Boundary::Truncate {
            return Err(Error::validation(
                "alpha = 0 (constant weight) is only admissible on the torus",
            ));
        }
        if !(domain.lo() <= 0.0 && domain.hi() >= 0.0) {
            return Err(Error::validation(
                "the window must contain the origin, where the weight peaks",
            ));
        }
        // The |x| kink sits at the origin; a node must land on it so the
        // trapezoid rule keeps its second-order accuracy.
        if alpha > 0.0 && domain.lo() < 0.0 && domain.hi() > 0.0 {
            let on_node = domain.nodes().any(|x| x.abs() < 1e-9 * domain.h().max(1.0));
            if !on_node {
                return Err(Error::validation(
                    "no grid node lies at the origin; use an odd n_x on a symmetric window",
                ));
            }
        }
        let mut w = TemperingWeight {
            delta_star,
            alpha,
            domain: domain.clone(),
            grid: GridFunction::constant(domain.clone(), 0.0)?,
        };
        let values: Vec<f64> = domain.nodes().map(|x| w.closed_form(x)).collect();
        w.grid = GridFunction::new(domain, values)?;
        Ok(w)
    }

    pub fn delta_star(&self) -> f64 {
        self.delta_star
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn domain(&self) -> &Arc<Domain> {
        &self.domain
    }

    /// Weight values at the grid nodes.
    pub fn grid(&self) -> &GridFunction {
        &self.grid
    }

    /// Upper bound for the admissible log-shape of test functions:
    /// `-log(1 - delta_star) / (1 - delta_star)`.
    pub fn g_star(&self) -> f64 {
        -(1.0 - self.delta_star).ln() / (1.0 - self.delta_star)
    }

    fn closed_form(&self, x: f64) -> f64 {
        let peak = 1.0 - self.delta_star;
        match self.domain.boundary() {
            Boundary::Truncate => peak * (-self.alpha * x.abs()).exp(),
            Boundary::Torus => {
                let c = self.domain.width();
                let d = (self.domain.wrap(x) - 0.0).rem_euclid(c);
                let num = (-self.alpha * d).exp() + (-self.alpha * (c - d)).exp();
                let den = 1.0 + (-self.alpha * c).exp();
                peak * num / den
            }
        }
    }

    /// Closed-form evaluation at `x`. Errors when `x` falls outside the
    /// window in interval mode.
    pub fn eval(&self, x: f64) -> Result<f64> {
        if !self.domain.contains(x) {
            return Err(Error::domain(format!(
                "position {x} outside the window [{}, {}]",
                self.domain.lo(),
                self.domain.hi()
            )));
        }
        Ok(self.closed_form(x))
    }
}
