//! Finite particle configurations and the functional calculus on them:
//! product functionals, the branching generator acting on products, the
//! integrated (Kolmogorov) identity along a flow, and resolvents in time.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernel::BranchingKernel;
use crate::loglaplace::{TestFunction, Trajectory};
use crate::space::{simpson, GridFunction, TemperingWeight};

/// Hard cap on configuration size.
pub const MAX_PARTICLES: usize = 10_000;

/// A finite collection of particle positions with its cached weight sum
/// `Ψ(γ) = Σ ψ(x)`.
#[derive(Debug, Clone)]
pub struct Configuration {
    positions: Vec<f64>,
    psi_sum: f64,
}

impl Configuration {
    /// Validate positions against the window and cache the weight sum.
    /// Torus positions are stored wrapped.
    pub fn new(positions: Vec<f64>, w: &TemperingWeight) -> Result<Self> {
        if positions.len() > MAX_PARTICLES {
            return Err(Error::validation(format!(
                "configuration of {} particles exceeds the cap of {MAX_PARTICLES}",
                positions.len()
            )));
        }
        let mut stored = Vec::with_capacity(positions.len());
        let mut psi_sum = 0.0;
        for p in positions {
            if !w.domain().contains(p) {
                return Err(Error::domain(format!(
                    "position {p} outside the window [{}, {}]",
                    w.domain().lo(),
                    w.domain().hi()
                )));
            }
            let p = w.domain().wrap(p);
            psi_sum += w.eval(p)?;
            stored.push(p);
        }
        Ok(Configuration {
            positions: stored,
            psi_sum,
        })
    }

    pub fn empty() -> Self {
        Configuration {
            positions: Vec::new(),
            psi_sum: 0.0,
        }
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// The cached weight sum `Ψ(γ)`.
    pub fn psi_sum(&self) -> f64 {
        self.psi_sum
    }

    /// Recompute `Σ ψ(x)` from scratch against a weight.
    pub fn tempering_sum(&self, w: &TemperingWeight) -> Result<f64> {
        let mut sum = 0.0;
        for &p in &self.positions {
            sum += w.eval(p)?;
        }
        Ok(sum)
    }

    /// Concatenation of two configurations as multisets.
    pub fn disjoint_union(&self, other: &Configuration) -> Result<Self> {
        if self.len() + other.len() > MAX_PARTICLES {
            return Err(Error::validation(format!(
                "union of {} + {} particles exceeds the cap of {MAX_PARTICLES}",
                self.len(),
                other.len()
            )));
        }
        let mut positions = self.positions.clone();
        positions.extend_from_slice(&other.positions);
        Ok(Configuration {
            positions,
            psi_sum: self.psi_sum + other.psi_sum,
        })
    }

    /// `F^φ(γ) = ∏ φ(x)` over the particles, with `φ` interpolated linearly
    /// between grid nodes. The empty product is one.
    pub fn product_functional(&self, phi: &GridFunction) -> Result<f64> {
        let mut product = 1.0;
        for &p in &self.positions {
            let v = phi.eval(p);
            if v <= 0.0 || v > 1.0 + 1e-9 {
                return Err(Error::domain(format!(
                    "product functional needs phi in (0, 1], got {v} at position {p}"
                )));
            }
            product *= v.min(1.0);
        }
        Ok(product)
    }

    /// Generator of the branching dynamics applied to the product functional:
    /// each particle contributes the leave-one-out product times
    /// `Φφ(x) − φ(x)`.
    pub fn apply_generator(&self, phi: &TestFunction, k: &BranchingKernel) -> Result<f64> {
        let transform = k.apply_phi(phi.phi())?;
        Ok(generator_value(
            &self.positions,
            phi.phi(),
            &transform,
        ))
    }

    /// `|F^{φ_t}(γ) − F^{φ_0}(γ) − ∫_0^t LF^{φ_s}(γ) ds|` with the integral
    /// taken by Simpson quadrature on the trajectory grid. Zero at `t = 0`;
    /// otherwise second order in the trajectory step.
    pub fn kolmogorov_residual(
        &self,
        traj: &Trajectory,
        k: &BranchingKernel,
        t: f64,
    ) -> Result<f64> {
        let idx = traj.index_at(t)?;
        let f_start = self.product_functional(traj.state(0))?;
        let f_end = self.product_functional(traj.state(idx))?;
        let mut lvals = Vec::with_capacity(idx + 1);
        for j in 0..=idx {
            let state = traj.state(j);
            let transform = k.apply_phi(state)?;
            lvals.push(generator_value(&self.positions, state, &transform));
        }
        let integral = simpson(&lvals, traj.dt());
        Ok((f_end - f_start - integral).abs())
    }

    /// Time-resolvent of the product functional along a trajectory:
    /// `∫ e^{−λt} F^{φ_t}(γ) dt` with a certified bound on the truncated
    /// tail. The trajectory must reach far enough for the tail bound to meet
    /// `tail_tol`.
    pub fn resolvent(
        &self,
        lambda: f64,
        traj: &Trajectory,
        tail_tol: f64,
    ) -> Result<ResolventValue> {
        if !(lambda > 1.0) || !lambda.is_finite() {
            return Err(Error::validation(format!(
                "resolvent parameter must exceed 1, got {lambda}"
            )));
        }
        if !(tail_tol > 0.0) {
            return Err(Error::validation(format!(
                "tail tolerance must be positive, got {tail_tol}"
            )));
        }
        let t_max = traj.t_end();
        let tail_bound = (-lambda * t_max).exp() / lambda;
        if tail_bound > tail_tol {
            return Err(Error::Horizon {
                available: t_max,
                required: (1.0 / (lambda * tail_tol)).ln() / lambda,
                tail_tol,
            });
        }
        let mut vals = Vec::with_capacity(traj.len());
        for (j, state) in traj.states().iter().enumerate() {
            let f = self.product_functional(state)?;
            vals.push((-lambda * traj.times()[j]).exp() * f);
        }
        Ok(ResolventValue {
            lambda,
            value: simpson(&vals, traj.dt()),
            t_max,
            tail_bound,
        })
    }

    /// Residual of the resolvent identity
    /// `∫ e^{−λt} LF^{φ_t}(γ) dt = −F^{φ_0}(γ) + λ F_λ(γ)`,
    /// both sides evaluated on the trajectory grid.
    pub fn resolvent_identity_residual(
        &self,
        lambda: f64,
        traj: &Trajectory,
        k: &BranchingKernel,
        tail_tol: f64,
    ) -> Result<f64> {
        let r = self.resolvent(lambda, traj, tail_tol)?;
        let mut lvals = Vec::with_capacity(traj.len());
        for (j, state) in traj.states().iter().enumerate() {
            let transform = k.apply_phi(state)?;
            let lv = generator_value(&self.positions, state, &transform);
            lvals.push((-lambda * traj.times()[j]).exp() * lv);
        }
        let lhs = simpson(&lvals, traj.dt());
        let rhs = -self.product_functional(traj.state(0))? + lambda * r.value;
        Ok((lhs - rhs).abs())
    }
}

/// Leave-one-out evaluation of the generator on a product functional, given
/// the test function and its branching transform on the grid.
pub(crate) fn generator_value(
    positions: &[f64],
    phi: &GridFunction,
    transform: &GridFunction,
) -> f64 {
    let n = positions.len();
    if n == 0 {
        return 0.0;
    }
    let evals: Vec<f64> = positions.iter().map(|&x| phi.eval(x)).collect();
    // prefix[i] = product of evals[..i], suffix[i] = product of evals[i+1..]
    let mut prefix = vec![1.0; n];
    for i in 1..n {
        prefix[i] = prefix[i - 1] * evals[i - 1];
    }
    let mut suffix = vec![1.0; n];
    for i in (0..n - 1).rev() {
        suffix[i] = suffix[i + 1] * evals[i + 1];
    }
    positions
        .iter()
        .enumerate()
        .map(|(i, &x)| prefix[i] * suffix[i] * (transform.eval(x) - evals[i]))
        .sum()
}

/// A resolvent evaluation together with its certification.
#[derive(Debug, Clone, Serialize)]
pub struct ResolventValue {
    pub lambda: f64,
    pub value: f64,
    /// Horizon the quadrature actually covered.
    pub t_max: f64,
    /// Certified bound on the discarded tail, `e^{−λ T_max}/λ`.
    pub tail_bound: f64,
}

/// Sup bound on the generator over product functionals built from a test
/// function with coefficient `c_phi`. Not applicable at the boundary
/// (`c_phi = 0`).
pub fn generator_sup_bound(delta_star: f64, c_phi: f64) -> Option<f64> {
    (c_phi > 0.0).then(|| 2.0 / (std::f64::consts::E * delta_star * c_phi))
}

/// Bound on `|F^{φ_{t+u}}(γ) − F^{φ_t}(γ)|` along a flow.
pub fn functional_increment_bound(delta_star: f64, c_phi: f64, t: f64, u: f64) -> Option<f64> {
    generator_sup_bound(delta_star, c_phi).map(|b| b * u * (t + u).exp())
}

/// Bound on `|LF^{φ_{t+u}}(γ) − LF^{φ_t}(γ)|` along a flow.
pub fn generator_increment_bound(
    delta_star: f64,
    c_phi: f64,
    n_star: f64,
    m: f64,
    t: f64,
    u: f64,
) -> Option<f64> {
    if c_phi <= 0.0 {
        return None;
    }
    let b = std::f64::consts::E * delta_star * c_phi;
    let c_hat = 2.0 * (n_star * m + 1.0) / b + 16.0 / (b * b);
    Some(c_hat * u * (2.0 * (t + u)).exp())
}
