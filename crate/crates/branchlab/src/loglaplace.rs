//! The flow on test functions driven by branching: solve `dφ/dt = Φφ − φ`
//! by Picard iteration on its integral form and by explicit Runge–Kutta,
//! continue solutions in time, and monitor the envelope, increment, and decay
//! estimates the solution is known to satisfy.

use std::collections::HashMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernel::BranchingKernel;
use crate::space::{GridFunction, TemperingWeight};

/// A test function `φ` on the grid together with the constants the flow
/// analysis attaches to it: `θ = 1 − φ` and the largest `c` with
/// `c·ψ ≤ θ` everywhere.
///
/// Regular members satisfy `0 < c·ψ ≤ θ ≤ min(1 − δ, ψ)` node by node.
/// The `boundary` flag admits arbitrary `φ` in `[0, 1]` (the constant
/// functions 0 and 1 in particular) for stationary-point and oracle runs;
/// such functions sit outside the validated class and skip the band checks.
#[derive(Debug, Clone)]
pub struct TestFunction {
    phi: GridFunction,
    c_phi: f64,
    boundary: bool,
}

/// Slack allowed when validating band membership, covering rounding in the
/// weight and kernel evaluations.
const BAND_SLACK: f64 = 1e-12;

impl TestFunction {
    /// Validate `φ` directly against the kernel's death probabilities and
    /// the weight.
    pub fn from_phi(
        phi: GridFunction,
        k: &BranchingKernel,
        w: &TemperingWeight,
    ) -> Result<Self> {
        Self::validated(phi, k, w)
    }

    /// Build from `θ = 1 − φ`.
    pub fn from_theta(
        theta: &GridFunction,
        k: &BranchingKernel,
        w: &TemperingWeight,
    ) -> Result<Self> {
        let phi = theta.map(|t| 1.0 - t)?;
        Self::validated(phi, k, w)
    }

    /// Build from the log-shape `g`, with `φ = exp(−g·ψ)`.
    pub fn from_log_shape(
        g: &GridFunction,
        k: &BranchingKernel,
        w: &TemperingWeight,
    ) -> Result<Self> {
        if g.domain().as_ref() != w.domain().as_ref() {
            return Err(Error::domain("log-shape lives on a different domain"));
        }
        let phi = g.zip_with(w.grid(), |gv, psi| (-gv * psi).exp())?;
        Self::validated(phi, k, w)
    }

    /// Admit any `φ` in `[0, 1]` without band validation, for stationary
    /// points and closed-form oracle runs. `c_phi` is still computed.
    pub fn boundary(phi: GridFunction, w: &TemperingWeight) -> Result<Self> {
        if phi.domain().as_ref() != w.domain().as_ref() {
            return Err(Error::domain("test function lives on a different domain"));
        }
        if let Some(i) = phi.values().iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::validation(format!(
                "boundary test function value {} at node {i} outside [0, 1]",
                phi.values()[i]
            )));
        }
        let c_phi = phi
            .values()
            .iter()
            .zip(w.grid().values())
            .map(|(&p, &psi)| (1.0 - p) / psi)
            .fold(f64::INFINITY, f64::min);
        Ok(TestFunction {
            phi,
            c_phi,
            boundary: true,
        })
    }

    fn validated(phi: GridFunction, k: &BranchingKernel, w: &TemperingWeight) -> Result<Self> {
        if phi.domain().as_ref() != k.domain().as_ref()
            || phi.domain().as_ref() != w.domain().as_ref()
        {
            return Err(Error::domain("test function lives on a different domain"));
        }
        let psi = w.grid().values();
        let g_star = w.g_star();
        let mut c_phi = f64::INFINITY;
        for (i, (&p, &ps)) in phi.values().iter().zip(psi).enumerate() {
            let theta = 1.0 - p;
            if theta <= 0.0 {
                return Err(Error::validation(format!(
                    "theta = {theta} at node {i} is not positive; \
                     use a boundary-mode function for phi = 1"
                )));
            }
            let cap = (1.0 - k.offspring().death_prob(i)).min(ps);
            if theta > cap + BAND_SLACK {
                return Err(Error::validation(format!(
                    "theta = {theta} at node {i} exceeds the admissible cap \
                     min(1 - delta, psi) = {cap}"
                )));
            }
            let g = -p.ln() / ps;
            if g > g_star + BAND_SLACK {
                return Err(Error::validation(format!(
                    "log-shape {g} at node {i} exceeds g_star = {g_star}"
                )));
            }
            c_phi = c_phi.min(theta / ps);
        }
        Ok(TestFunction {
            phi,
            c_phi,
            boundary: false,
        })
    }

    pub fn phi(&self) -> &GridFunction {
        &self.phi
    }

    /// Largest constant with `c·ψ ≤ 1 − φ` at every node.
    pub fn c_phi(&self) -> f64 {
        self.c_phi
    }

    pub fn is_boundary(&self) -> bool {
        self.boundary
    }
}

/// Which solver produced a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Picard,
    Ode,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Picard => write!(f, "picard"),
            Method::Ode => write!(f, "ode"),
        }
    }
}

/// A solved flow on a uniform time grid.
#[derive(Debug, Clone)]
pub struct Trajectory {
    times: Vec<f64>,
    states: Vec<GridFunction>,
    dt: f64,
    c_phi: f64,
    boundary: bool,
    method: Method,
    tol: f64,
    max_iter: usize,
}

impl Trajectory {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[GridFunction] {
        &self.states
    }

    pub fn state(&self, k: usize) -> &GridFunction {
        &self.states[k]
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn final_state(&self) -> &GridFunction {
        self.states.last().unwrap()
    }

    /// `c` constant of the function the flow started from.
    pub fn c_phi(&self) -> f64 {
        self.c_phi
    }

    pub fn is_boundary(&self) -> bool {
        self.boundary
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn tol(&self) -> f64 {
        self.tol
    }

    /// State index for time `t`, which must sit on the grid.
    pub fn index_at(&self, t: f64) -> Result<usize> {
        let k = (t / self.dt).round() as usize;
        if k >= self.len() || (t - k as f64 * self.dt).abs() > 1e-9 * (1.0 + t.abs()) {
            return Err(Error::domain(format!(
                "time {t} is not on the trajectory grid (dt = {}, t_end = {})",
                self.dt,
                self.t_end()
            )));
        }
        Ok(k)
    }
}

fn steps_for(t_end: f64, dt: f64) -> Result<usize> {
    if !t_end.is_finite() || t_end < 0.0 {
        return Err(Error::validation(format!(
            "horizon must be finite and non-negative, got {t_end}"
        )));
    }
    if !dt.is_finite() || dt <= 0.0 {
        return Err(Error::validation(format!(
            "time step must be positive, got {dt}"
        )));
    }
    let steps = (t_end / dt).round();
    if (steps * dt - t_end).abs() > 1e-9 * (1.0 + t_end) {
        return Err(Error::validation(format!(
            "horizon {t_end} is not a multiple of dt = {dt}"
        )));
    }
    Ok(steps as usize)
}

/// Steps per Picard window. The window length keeps the contraction factor
/// `n_*(1 − e^{−W})` at or below one half, and is capped outright so iterate
/// buffers stay bounded on long horizons.
fn window_steps(n_star: f64, dt: f64) -> usize {
    let cap: f64 = 2.0;
    let contraction = if n_star > 0.5 {
        -(1.0 - 0.5 / n_star).ln()
    } else {
        f64::INFINITY
    };
    let w = cap.min(contraction);
    (((w / dt).floor() as usize).max(1)) as usize
}

/// Weights of the exponentially weighted trapezoid cell: the integral
/// `∫ e^{−(t_j − s)} Φ(s) ds` over one cell with `Φ` linear in `s` is
/// `wa·Φ_{j−1} + wb·Φ_j`, computed exactly so constant fields (the
/// stationary point in particular) are reproduced without drift.
fn cell_weights(dt: f64) -> (f64, f64, f64) {
    let ed = (-dt).exp();
    let one_minus_ed = -(-dt).exp_m1();
    let wa = (one_minus_ed - dt * ed) / dt;
    let wb = one_minus_ed - wa;
    (ed, wa, wb)
}

/// Solve the integral form of the flow on `[0, t_end]` by Picard iteration,
/// chaining contraction windows when the horizon demands it.
pub fn picard_solve(
    k: &BranchingKernel,
    phi0: &TestFunction,
    t_end: f64,
    dt: f64,
    tol: f64,
    max_iter: usize,
) -> Result<Trajectory> {
    if !(tol > 0.0) {
        return Err(Error::validation(format!("tolerance must be positive, got {tol}")));
    }
    if max_iter == 0 {
        return Err(Error::validation("max_iter must be at least 1"));
    }
    let steps = steps_for(t_end, dt)?;
    let states = picard_run(k, phi0.phi(), steps, dt, tol, max_iter)?;
    Ok(Trajectory {
        times: (0..=steps).map(|j| j as f64 * dt).collect(),
        states,
        dt,
        c_phi: phi0.c_phi(),
        boundary: phi0.is_boundary(),
        method: Method::Picard,
        tol,
        max_iter,
    })
}

fn picard_run(
    k: &BranchingKernel,
    start: &GridFunction,
    total_steps: usize,
    dt: f64,
    tol: f64,
    max_iter: usize,
) -> Result<Vec<GridFunction>> {
    let mut states = Vec::with_capacity(total_steps + 1);
    states.push(start.clone());
    let win = window_steps(k.n_star(), dt);
    let mut remaining = total_steps;
    while remaining > 0 {
        let steps = win.min(remaining);
        let window = picard_window(k, states.last().unwrap(), steps, dt, tol, max_iter)?;
        states.extend(window.into_iter().skip(1));
        remaining -= steps;
    }
    Ok(states)
}

fn picard_window(
    k: &BranchingKernel,
    start: &GridFunction,
    steps: usize,
    dt: f64,
    tol: f64,
    max_iter: usize,
) -> Result<Vec<GridFunction>> {
    let n = start.len();
    let domain = start.domain().clone();
    let (ed, wa, wb) = cell_weights(dt);
    let mut cur: Vec<GridFunction> = vec![start.clone(); steps + 1];
    let mut diff = f64::INFINITY;
    for _ in 0..max_iter {
        let phis: Vec<GridFunction> = cur
            .iter()
            .map(|s| k.apply_phi(s))
            .collect::<Result<Vec<_>>>()?;
        let mut next = Vec::with_capacity(steps + 1);
        next.push(start.clone());
        let mut integral = vec![0.0f64; n];
        let mut decay = 1.0f64;
        diff = 0.0;
        for j in 1..=steps {
            decay *= ed;
            let prev_phi = phis[j - 1].values();
            let this_phi = phis[j].values();
            let old = cur[j].values();
            let sv = start.values();
            let mut vals = Vec::with_capacity(n);
            for x in 0..n {
                integral[x] = ed * integral[x] + wa * prev_phi[x] + wb * this_phi[x];
                let v = sv[x] * decay + integral[x];
                diff = diff.max((v - old[x]).abs());
                vals.push(v);
            }
            next.push(GridFunction::new(domain.clone(), vals)?);
        }
        cur = next;
        if diff < tol {
            return Ok(cur);
        }
    }
    Err(Error::Convergence {
        residual: diff,
        iterations: max_iter,
        tol,
    })
}

/// Solve the flow by classical fourth-order Runge–Kutta.
pub fn ode_solve(
    k: &BranchingKernel,
    phi0: &TestFunction,
    t_end: f64,
    dt: f64,
) -> Result<Trajectory> {
    let steps = steps_for(t_end, dt)?;
    let states = ode_run(k, phi0.phi(), steps, dt)?;
    Ok(Trajectory {
        times: (0..=steps).map(|j| j as f64 * dt).collect(),
        states,
        dt,
        c_phi: phi0.c_phi(),
        boundary: phi0.is_boundary(),
        method: Method::Ode,
        tol: 0.0,
        max_iter: 0,
    })
}

fn ode_run(
    k: &BranchingKernel,
    start: &GridFunction,
    steps: usize,
    dt: f64,
) -> Result<Vec<GridFunction>> {
    let n = start.len();
    let domain = start.domain().clone();
    let mut states = Vec::with_capacity(steps + 1);
    states.push(start.clone());
    for step in 0..steps {
        let y = states.last().unwrap();
        let t = step as f64 * dt;
        let k1 = flow_rhs(k, y)?;
        let y2 = offset_state(&domain, y.values(), &k1, 0.5 * dt, t, dt)?;
        let k2 = flow_rhs(k, &y2)?;
        let y3 = offset_state(&domain, y.values(), &k2, 0.5 * dt, t, dt)?;
        let k3 = flow_rhs(k, &y3)?;
        let y4 = offset_state(&domain, y.values(), &k3, dt, t, dt)?;
        let k4 = flow_rhs(k, &y4)?;
        let mut vals = Vec::with_capacity(n);
        for x in 0..n {
            vals.push(y.values()[x] + dt / 6.0 * (k1[x] + 2.0 * k2[x] + 2.0 * k3[x] + k4[x]));
        }
        check_range(&vals, t + dt, dt)?;
        states.push(GridFunction::new(domain.clone(), vals)?);
    }
    Ok(states)
}

fn flow_rhs(k: &BranchingKernel, y: &GridFunction) -> Result<Vec<f64>> {
    let phi = k.apply_phi(y)?;
    Ok(phi
        .values()
        .iter()
        .zip(y.values())
        .map(|(p, v)| p - v)
        .collect())
}

fn offset_state(
    domain: &std::sync::Arc<crate::space::Domain>,
    base: &[f64],
    slope: &[f64],
    h: f64,
    t: f64,
    dt: f64,
) -> Result<GridFunction> {
    let vals: Vec<f64> = base
        .iter()
        .zip(slope)
        .map(|(&b, &s)| b + h * s)
        .collect();
    check_range(&vals, t, dt)?;
    GridFunction::new(domain.clone(), vals)
}

fn check_range(vals: &[f64], t: f64, dt: f64) -> Result<()> {
    if vals
        .iter()
        .any(|v| !v.is_finite() || *v < -1e-9 || *v > 1.0 + 1e-9)
    {
        return Err(Error::stability(format!(
            "solution left [0, 1] near t = {t:.6}; reduce dt from {dt}"
        )));
    }
    Ok(())
}

/// Continue a trajectory by `delta_t` using the same solver and parameters,
/// restarting the flow from its final state.
pub fn extend_flow(k: &BranchingKernel, traj: &Trajectory, delta_t: f64) -> Result<Trajectory> {
    let steps = steps_for(delta_t, traj.dt)?;
    if steps == 0 {
        return Ok(traj.clone());
    }
    let tail = match traj.method {
        Method::Picard => picard_run(
            k,
            traj.final_state(),
            steps,
            traj.dt,
            traj.tol,
            traj.max_iter,
        )?,
        Method::Ode => ode_run(k, traj.final_state(), steps, traj.dt)?,
    };
    let mut states = traj.states.clone();
    states.extend(tail.into_iter().skip(1));
    let total = states.len();
    Ok(Trajectory {
        times: (0..total).map(|j| j as f64 * traj.dt).collect(),
        states,
        dt: traj.dt,
        c_phi: traj.c_phi,
        boundary: traj.boundary,
        method: traj.method,
        tol: traj.tol,
        max_iter: traj.max_iter,
    })
}

/// Residual of the integral equation the Picard solver fixes, measured with
/// the solver's own window partition and quadrature. Small for converged
/// Picard output; order `dt²` for a Runge–Kutta trajectory.
pub fn picard_residual(k: &BranchingKernel, traj: &Trajectory) -> Result<f64> {
    let (ed, wa, wb) = cell_weights(traj.dt);
    let win = window_steps(k.n_star(), traj.dt);
    let n = traj.state(0).len();
    let mut worst = 0.0f64;
    let mut j0 = 0;
    while j0 + 1 < traj.len() {
        let steps = win.min(traj.len() - 1 - j0);
        let start = traj.state(j0);
        let mut integral = vec![0.0f64; n];
        let mut decay = 1.0f64;
        let mut prev_phi = k.apply_phi(start)?;
        for j in 1..=steps {
            decay *= ed;
            let this_phi = k.apply_phi(traj.state(j0 + j))?;
            let got = traj.state(j0 + j).values();
            let sv = start.values();
            for x in 0..n {
                integral[x] =
                    ed * integral[x] + wa * prev_phi.values()[x] + wb * this_phi.values()[x];
                worst = worst.max((got[x] - (sv[x] * decay + integral[x])).abs());
            }
            prev_phi = this_phi;
        }
        j0 += steps;
    }
    Ok(worst)
}

/// Worst margins of the envelope and increment estimates along a trajectory.
/// Margins are `bound − value`, so every estimate holds when all margins
/// clear `-slack`.
#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    /// `c e^{−t} ψ ≤ θ_t ≤ ψ`, worst side over all times and nodes.
    pub envelope: f64,
    /// `|θ_{t+u} − θ_t| ≤ 2uψ`.
    pub theta_increment: f64,
    /// `|g_{t+u} − g_t| ≤ 2u/δ_*`.
    pub g_increment: f64,
    /// `|Φφ_{t+u} − Φφ_t| ≤ 2u n_* m ψ`.
    pub transform_increment: f64,
    /// Smallest of the four margins.
    pub worst: f64,
    /// Whether every margin clears `-1e-9`.
    pub all_hold: bool,
}

/// Numerical slack granted to the analytic estimates.
pub const BOUND_SLACK: f64 = 1e-9;

/// Evaluate the envelope and the three increment estimates along a
/// trajectory. Increments are sampled at `u ∈ {dt, 2dt, 5dt}` from every
/// tenth time node, the regime where the linear-in-`u` bounds bind.
pub fn check_bounds(
    k: &BranchingKernel,
    traj: &Trajectory,
    w: &TemperingWeight,
) -> Result<BoundReport> {
    let psi = w.grid().values();
    let c = traj.c_phi();
    let n_star = k.n_star();
    let psi_avg = k.dispersal().integral_all(w.grid())?;
    let m = psi_avg
        .iter()
        .zip(psi)
        .map(|(&a, &p)| a / p)
        .fold(0.0f64, f64::max);
    let delta_star = w.delta_star();

    let mut envelope = f64::INFINITY;
    for (j, state) in traj.states().iter().enumerate() {
        let decay = (-traj.times()[j]).exp();
        for (x, &p) in state.values().iter().enumerate() {
            let theta = 1.0 - p;
            envelope = envelope
                .min(theta - c * decay * psi[x])
                .min(psi[x] - theta);
        }
    }

    let mut theta_increment = f64::INFINITY;
    let mut g_increment = f64::INFINITY;
    let mut transform_increment = f64::INFINITY;
    let mut phi_cache: HashMap<usize, GridFunction> = HashMap::new();
    let mut transform_at = |idx: usize, cache: &mut HashMap<usize, GridFunction>| -> Result<()> {
        if !cache.contains_key(&idx) {
            cache.insert(idx, k.apply_phi(traj.state(idx))?);
        }
        Ok(())
    };

    for j in (0..traj.len()).step_by(10) {
        for du in [1usize, 2, 5] {
            let ju = j + du;
            if ju >= traj.len() {
                continue;
            }
            let u = du as f64 * traj.dt();
            let a = traj.state(j).values();
            let b = traj.state(ju).values();

            for x in 0..a.len() {
                let dtheta = ((1.0 - b[x]) - (1.0 - a[x])).abs();
                theta_increment = theta_increment.min(2.0 * u * psi[x] - dtheta);
            }

            let positive =
                a.iter().all(|&v| v > 0.0) && b.iter().all(|&v| v > 0.0);
            if positive {
                for x in 0..a.len() {
                    let ga = -a[x].ln() / psi[x];
                    let gb = -b[x].ln() / psi[x];
                    g_increment = g_increment.min(2.0 * u / delta_star - (gb - ga).abs());
                }
            }

            transform_at(j, &mut phi_cache)?;
            transform_at(ju, &mut phi_cache)?;
            let fa = phi_cache[&j].values();
            let fb = phi_cache[&ju].values();
            for x in 0..fa.len() {
                let dphi = (fb[x] - fa[x]).abs();
                transform_increment =
                    transform_increment.min(2.0 * u * n_star * m * psi[x] - dphi);
            }
        }
    }

    let worst = envelope
        .min(theta_increment)
        .min(g_increment)
        .min(transform_increment);
    Ok(BoundReport {
        envelope,
        theta_increment,
        g_increment,
        transform_increment,
        worst,
        all_hold: worst >= -BOUND_SLACK,
    })
}

/// Outcome of checking the subcritical convergence-to-one estimate.
#[derive(Debug, Clone, Serialize)]
pub struct DecayReport {
    /// Present when the check does not apply (supercritical mean).
    pub skipped: Option<String>,
    /// Decay rate `1 − n_*` appearing in the bound.
    pub rate: f64,
    /// Worst excess of `‖1 − φ_t‖` over `‖1 − φ_0‖ e^{−(1−n_*)t}`;
    /// at most the slack when the estimate holds.
    pub max_violation: f64,
    /// Least-squares slope of `log ‖1 − φ_t‖` against `t`, when defined.
    pub empirical_exponent: Option<f64>,
}

/// Verify `‖1 − φ_t‖ ≤ ‖1 − φ_0‖ e^{−(1−n_*)t}` along the trajectory and
/// estimate the actual decay exponent.
pub fn decay_check(traj: &Trajectory, n_star: f64) -> DecayReport {
    let rate = 1.0 - n_star;
    if n_star >= 1.0 {
        return DecayReport {
            skipped: Some(format!(
                "mean offspring bound {n_star} is not subcritical; no decay is implied"
            )),
            rate,
            max_violation: 0.0,
            empirical_exponent: None,
        };
    }
    let norm0 = traj
        .state(0)
        .values()
        .iter()
        .fold(0.0f64, |m, &v| m.max((1.0 - v).abs()));
    let mut max_violation = f64::NEG_INFINITY;
    let mut pts: Vec<(f64, f64)> = Vec::new();
    for (j, state) in traj.states().iter().enumerate() {
        let t = traj.times()[j];
        let norm = state
            .values()
            .iter()
            .fold(0.0f64, |m, &v| m.max((1.0 - v).abs()));
        max_violation = max_violation.max(norm - norm0 * (-rate * t).exp());
        if norm > 0.0 {
            pts.push((t, norm.ln()));
        }
    }
    let empirical_exponent = if pts.len() >= 2 {
        let n = pts.len() as f64;
        let sx: f64 = pts.iter().map(|p| p.0).sum();
        let sy: f64 = pts.iter().map(|p| p.1).sum();
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        let denom = n * sxx - sx * sx;
        if denom > 0.0 {
            Some((n * sxy - sx * sy) / denom)
        } else {
            None
        }
    } else {
        None
    };
    DecayReport {
        skipped: None,
        rate,
        max_violation,
        empirical_exponent,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{DispersalKernel, OffspringLaw, Param};
    use crate::space::{Boundary, Domain};
    use approx::assert_abs_diff_eq;
    use std::sync::Arc;

    /// Closed form for the binary-split flow from a constant start:
    /// fixed points 1 and 7/3 of `0.3 s² − s + 0.7`.
    fn riccati_phi(t: f64) -> f64 {
        let c = 3.0 / 13.0 * (-0.4 * t).exp();
        (1.0 - 7.0 / 3.0 * c) / (1.0 - c)
    }

    fn flat_weight() -> (Arc<Domain>, TemperingWeight) {
        let d = Domain::new(-1.0, 1.0, 5, Boundary::Torus).unwrap();
        let w = TemperingWeight::new(d.clone(), 0.5, 0.0).unwrap();
        (d, w)
    }

    fn pure_death_kernel(d: &Arc<Domain>) -> BranchingKernel {
        BranchingKernel::new(
            OffspringLaw::pure_death(d.clone()),
            DispersalKernel::at_parent(d.clone()),
        )
        .unwrap()
    }

    fn binary_kernel(d: &Arc<Domain>, p: f64) -> BranchingKernel {
        BranchingKernel::new(
            OffspringLaw::binary_split(d.clone(), Param::Constant(p)).unwrap(),
            DispersalKernel::at_parent(d.clone()),
        )
        .unwrap()
    }

    fn reference_pieces() -> (Arc<Domain>, TemperingWeight, BranchingKernel) {
        let d = Domain::new(-5.0, 5.0, 201, Boundary::Truncate).unwrap();
        let w = TemperingWeight::new(d.clone(), 0.5, 0.5).unwrap();
        let k = BranchingKernel::new(
            OffspringLaw::poisson_psi_capped(&w, 1.0).unwrap(),
            DispersalKernel::uniform_radius(d.clone(), 1.0).unwrap(),
        )
        .unwrap();
        (d, w, k)
    }

    #[test]
    fn scaled_weight_theta_gives_its_coefficient() {
        let (d, w, k) = reference_pieces();
        let theta = w.grid().map(|p| 0.8 * p).unwrap();
        let f = TestFunction::from_theta(&theta, &k, &w).unwrap();
        assert_abs_diff_eq!(f.c_phi(), 0.8, epsilon = 1e-14);
        assert!(!f.is_boundary());
        let _ = d;
    }

    #[test]
    fn theta_needs_room_below_the_death_probability() {
        let (d, w, _) = reference_pieces();
        let k = pure_death_kernel(&d);
        // pure death leaves no admissible theta at all
        let err = TestFunction::from_theta(w.grid(), &k, &w).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn oversized_theta_is_rejected() {
        let (_, w, k) = reference_pieces();
        let theta = w.grid().map(|p| 1.2 * p).unwrap();
        assert!(TestFunction::from_theta(&theta, &k, &w).is_err());
        let nonpos = w.grid().map(|_| 0.0).unwrap();
        assert!(TestFunction::from_theta(&nonpos, &k, &w).is_err());
    }

    #[test]
    fn constant_one_needs_the_boundary_door() {
        let (d, w, k) = reference_pieces();
        let one = GridFunction::constant(d, 1.0).unwrap();
        assert!(TestFunction::from_phi(one.clone(), &k, &w).is_err());
        let f = TestFunction::boundary(one, &w).unwrap();
        assert_eq!(f.c_phi(), 0.0);
        assert!(f.is_boundary());
    }

    #[test]
    fn log_shape_input_round_trips() {
        let (d, w, k) = reference_pieces();
        let g = GridFunction::constant(d, 1.0).unwrap();
        let f = TestFunction::from_log_shape(&g, &k, &w).unwrap();
        for (&p, &psi) in f.phi().values().iter().zip(w.grid().values()) {
            assert_abs_diff_eq!(p, (-psi).exp(), epsilon = 1e-15);
        }
    }

    #[test]
    fn picard_pure_death_matches_closed_form() {
        let (d, w) = flat_weight();
        let k = pure_death_kernel(&d);
        let phi0 =
            TestFunction::boundary(GridFunction::constant(d, 0.6).unwrap(), &w).unwrap();
        let traj = picard_solve(&k, &phi0, 1.0, 1e-3, 1e-8, 100).unwrap();
        let expect = 1.0 - 0.4 * (-1.0f64).exp();
        for &v in traj.final_state().values() {
            assert_abs_diff_eq!(v, expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn picard_riccati_matches_closed_form() {
        let (d, w) = flat_weight();
        let k = binary_kernel(&d, 0.3);
        let phi0 =
            TestFunction::boundary(GridFunction::constant(d, 0.6).unwrap(), &w).unwrap();
        let traj = picard_solve(&k, &phi0, 1.0, 1e-3, 1e-10, 200).unwrap();
        assert_abs_diff_eq!(riccati_phi(1.0), 0.7560041443256124, epsilon = 1e-15);
        for &v in traj.final_state().values() {
            assert_abs_diff_eq!(v, riccati_phi(1.0), epsilon = 1e-7);
        }
    }

    #[test]
    fn stationary_one_stays_put() {
        let (_, w, k) = reference_pieces();
        let one = GridFunction::constant(w.domain().clone(), 1.0).unwrap();
        let phi0 = TestFunction::boundary(one, &w).unwrap();
        let traj = picard_solve(&k, &phi0, 2.0, 0.01, 1e-10, 100).unwrap();
        for state in traj.states() {
            for &v in state.values() {
                assert_abs_diff_eq!(v, 1.0, epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn ode_matches_the_same_closed_forms() {
        let (d, w) = flat_weight();
        let phi0 =
            TestFunction::boundary(GridFunction::constant(d.clone(), 0.6).unwrap(), &w).unwrap();

        let death = ode_solve(&pure_death_kernel(&d), &phi0, 1.0, 1e-3).unwrap();
        let expect = 1.0 - 0.4 * (-1.0f64).exp();
        for &v in death.final_state().values() {
            assert_abs_diff_eq!(v, expect, epsilon = 1e-8);
        }

        let riccati = ode_solve(&binary_kernel(&d, 0.3), &phi0, 1.0, 1e-3).unwrap();
        for &v in riccati.final_state().values() {
            assert_abs_diff_eq!(v, riccati_phi(1.0), epsilon = 1e-8);
        }
    }

    #[test]
    fn zero_horizon_returns_the_start() {
        let (d, w) = flat_weight();
        let k = pure_death_kernel(&d);
        let phi0 =
            TestFunction::boundary(GridFunction::constant(d, 0.6).unwrap(), &w).unwrap();
        for traj in [
            picard_solve(&k, &phi0, 0.0, 1e-3, 1e-8, 10).unwrap(),
            ode_solve(&k, &phi0, 0.0, 1e-3).unwrap(),
        ] {
            assert_eq!(traj.len(), 1);
            assert_eq!(traj.state(0).values(), phi0.phi().values());
        }
    }

    #[test]
    fn oversized_step_fails_with_a_stability_error() {
        let (_, w, k) = reference_pieces();
        let theta = w.grid().map(|p| 0.8 * p).unwrap();
        let phi0 = TestFunction::from_theta(&theta, &k, &w).unwrap();
        let err = ode_solve(&k, &phi0, 10.0, 10.0).unwrap_err();
        assert!(matches!(err, Error::Stability(_)), "{err}");
    }

    #[test]
    fn extend_by_zero_is_identity() {
        let (d, w) = flat_weight();
        let k = binary_kernel(&d, 0.3);
        let phi0 =
            TestFunction::boundary(GridFunction::constant(d, 0.6).unwrap(), &w).unwrap();
        let traj = picard_solve(&k, &phi0, 0.5, 1e-2, 1e-8, 100).unwrap();
        let same = extend_flow(&k, &traj, 0.0).unwrap();
        assert_eq!(same.len(), traj.len());
        for (a, b) in same.states().iter().zip(traj.states()) {
            assert_eq!(a.values(), b.values());
        }
    }

    #[test]
    fn extension_agrees_with_the_direct_solve() {
        let (d, w) = flat_weight();
        let tol = 1e-9;

        let k = pure_death_kernel(&d);
        let phi0 =
            TestFunction::boundary(GridFunction::constant(d.clone(), 0.6).unwrap(), &w).unwrap();
        let part = picard_solve(&k, &phi0, 1.0, 1e-3, tol, 200).unwrap();
        let chained = extend_flow(&k, &part, 1.0).unwrap();
        let expect = 1.0 - 0.4 * (-2.0f64).exp();
        for &v in chained.final_state().values() {
            assert_abs_diff_eq!(v, expect, epsilon = 2.0 * tol + 1e-11);
        }

        let k = binary_kernel(&d, 0.3);
        let part = picard_solve(&k, &phi0, 0.5, 1e-3, tol, 200).unwrap();
        let chained = extend_flow(&k, &part, 0.5).unwrap();
        let direct = picard_solve(&k, &phi0, 1.0, 1e-3, tol, 200).unwrap();
        let diff = chained
            .final_state()
            .values()
            .iter()
            .zip(direct.final_state().values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(diff <= 2.0 * tol, "composition gap {diff}");
    }

    #[test]
    fn fixed_point_residual_stays_within_twice_tol() {
        let (d, w) = flat_weight();
        let k = binary_kernel(&d, 0.3);
        let phi0 =
            TestFunction::boundary(GridFunction::constant(d, 0.6).unwrap(), &w).unwrap();
        let tol = 1e-9;
        let traj = picard_solve(&k, &phi0, 3.0, 1e-3, tol, 300).unwrap();
        let res = picard_residual(&k, &traj).unwrap();
        assert!(res <= 2.0 * tol, "residual {res}");
    }

    #[test]
    fn bounds_hold_trivially_at_the_stationary_point() {
        let (_, w, k) = reference_pieces();
        let one = GridFunction::constant(w.domain().clone(), 1.0).unwrap();
        let phi0 = TestFunction::boundary(one, &w).unwrap();
        let traj = picard_solve(&k, &phi0, 1.0, 0.01, 1e-10, 100).unwrap();
        let report = check_bounds(&k, &traj, &w).unwrap();
        assert!(report.all_hold, "{report:?}");
    }

    #[test]
    fn pure_death_envelope_is_tight_at_time_zero() {
        let d = Domain::new(-5.0, 5.0, 2001, Boundary::Truncate).unwrap();
        let w = TemperingWeight::new(d.clone(), 0.5, 0.5).unwrap();
        let k = pure_death_kernel(&d);
        let phi = w.grid().map(|p| 1.0 - 0.8 * p).unwrap();
        let phi0 = TestFunction::boundary(phi, &w).unwrap();
        assert_abs_diff_eq!(phi0.c_phi(), 0.8, epsilon = 1e-12);
        let traj = picard_solve(&k, &phi0, 2.0, 1e-3, 1e-9, 100).unwrap();
        let report = check_bounds(&k, &traj, &w).unwrap();
        assert!(report.all_hold, "{report:?}");
        // theta decays exactly along the envelope, so the margin is ~zero
        assert!(report.envelope.abs() < 1e-10, "envelope {}", report.envelope);
    }

    #[test]
    fn decay_reports_match_the_closed_forms() {
        let (d, w) = flat_weight();
        let phi0 =
            TestFunction::boundary(GridFunction::constant(d.clone(), 0.6).unwrap(), &w).unwrap();

        let k = pure_death_kernel(&d);
        let traj = picard_solve(&k, &phi0, 4.0, 1e-2, 1e-10, 100).unwrap();
        let report = decay_check(&traj, k.n_star());
        assert!(report.skipped.is_none());
        assert!(report.max_violation <= 1e-9, "{}", report.max_violation);
        assert_abs_diff_eq!(report.empirical_exponent.unwrap(), -1.0, epsilon = 1e-3);

        let k = binary_kernel(&d, 0.3);
        let traj = picard_solve(&k, &phi0, 4.0, 1e-2, 1e-10, 100).unwrap();
        let report = decay_check(&traj, k.n_star());
        assert!(report.max_violation <= 1e-9, "{}", report.max_violation);
        assert!(report.empirical_exponent.unwrap() <= -0.4 + 1e-6);
    }

    #[test]
    fn supercritical_decay_check_is_skipped() {
        let (d, w) = flat_weight();
        let k = binary_kernel(&d, 0.3);
        let phi0 =
            TestFunction::boundary(GridFunction::constant(d, 0.6).unwrap(), &w).unwrap();
        let traj = picard_solve(&k, &phi0, 1.0, 1e-2, 1e-8, 100).unwrap();
        let report = decay_check(&traj, 1.3);
        assert!(report.skipped.is_some());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn flow_preserves_pointwise_ordering(a in 0.1f64..1.0, b in 0.1f64..1.0) {
                let d = Domain::new(-5.0, 5.0, 41, Boundary::Truncate).unwrap();
                let w = TemperingWeight::new(d.clone(), 0.5, 0.5).unwrap();
                let k = BranchingKernel::new(
                    OffspringLaw::poisson_psi_capped(&w, 1.0).unwrap(),
                    DispersalKernel::uniform_radius(d, 1.0).unwrap(),
                )
                .unwrap();
                let (small, big) = if a <= b { (a, b) } else { (b, a) };
                // larger theta coefficient = pointwise smaller phi
                let lo = TestFunction::from_theta(&w.grid().map(|p| big * p).unwrap(), &k, &w).unwrap();
                let hi = TestFunction::from_theta(&w.grid().map(|p| small * p).unwrap(), &k, &w).unwrap();
                let t_lo = picard_solve(&k, &lo, 0.5, 0.01, 1e-9, 100).unwrap();
                let t_hi = picard_solve(&k, &hi, 0.5, 0.01, 1e-9, 100).unwrap();
                for (sa, sb) in t_lo.states().iter().zip(t_hi.states()) {
                    for (va, vb) in sa.values().iter().zip(sb.values()) {
                        prop_assert!(va <= &(vb + 1e-9));
                    }
                }
            }
        }
    }
}
