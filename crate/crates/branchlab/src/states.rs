//! Initial laws of the particle cloud and their evolution through the flow:
//! the two tractable state families, their Laplace functionals, the
//! state-level balance residual, and the approach to extinction.

use serde::Serialize;

use crate::configuration::{generator_value, Configuration};
use crate::error::{Error, Result};
use crate::kernel::BranchingKernel;
use crate::loglaplace::Trajectory;
use crate::space::{integrate, simpson, GridFunction};

/// Law of the particle cloud at time zero.
#[derive(Debug, Clone)]
pub enum InitialState {
    /// The cloud starts from exactly this configuration.
    Deterministic(Configuration),
    /// Poisson point process with the given intensity on the window.
    PoissonPP(GridFunction),
}

impl InitialState {
    pub fn deterministic(gamma: Configuration) -> Self {
        InitialState::Deterministic(gamma)
    }

    pub fn poisson(intensity: GridFunction) -> Result<Self> {
        if let Some(i) = intensity.values().iter().position(|v| *v < 0.0) {
            return Err(Error::validation(format!(
                "Poisson intensity {} at node {i} is negative",
                intensity.values()[i]
            )));
        }
        Ok(InitialState::PoissonPP(intensity))
    }

    /// Expected number of particles at time zero.
    pub fn expected_count(&self) -> Result<f64> {
        match self {
            InitialState::Deterministic(g) => Ok(g.len() as f64),
            InitialState::PoissonPP(rho) => integrate(rho),
        }
    }
}

/// Expectation of the product functional under the initial law:
/// the product itself for a fixed configuration, and
/// `exp(−∫(1−φ)ρ)` for a Poisson state.
pub fn laplace_functional(mu0: &InitialState, phi: &GridFunction) -> Result<f64> {
    if let Some(i) = phi
        .values()
        .iter()
        .position(|v| *v <= 0.0 || *v > 1.0 + 1e-9)
    {
        return Err(Error::domain(format!(
            "Laplace functional needs phi in (0, 1], got {} at node {i}",
            phi.values()[i]
        )));
    }
    match mu0 {
        InitialState::Deterministic(g) => g.product_functional(phi),
        InitialState::PoissonPP(rho) => {
            let integrand = phi.zip_with(rho, |p, r| (1.0 - p) * r)?;
            // the true integrand is non-negative; rounding may dip below
            let arg = integrate(&integrand)?.max(0.0);
            Ok((-arg).exp())
        }
    }
}

/// One functional's scalar trace along the evolution.
#[derive(Debug, Clone, Serialize)]
pub struct FunctionalSeries {
    pub id: String,
    /// Sup norm of `1 − φ_0` for the flow behind this series.
    pub theta0_norm: f64,
    pub values: Vec<f64>,
}

/// Scalar traces `t ↦ μ_t(F^φ)` for a register of test functions, all on a
/// shared time grid.
#[derive(Debug, Clone, Serialize)]
pub struct StateTrajectory {
    times: Vec<f64>,
    /// Expected particle count of the initial state.
    initial_mass: f64,
    series: Vec<FunctionalSeries>,
}

impl StateTrajectory {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn initial_mass(&self) -> f64 {
        self.initial_mass
    }

    pub fn series(&self) -> &[FunctionalSeries] {
        &self.series
    }

    pub fn dt(&self) -> f64 {
        if self.times.len() > 1 {
            self.times[1] - self.times[0]
        } else {
            0.0
        }
    }
}

/// Evolve the state against a register of solved flows: the value at time
/// `t` is the initial law applied to `F^{φ_t}`.
pub fn evolve(mu0: &InitialState, register: &[(&str, &Trajectory)]) -> Result<StateTrajectory> {
    let (_, first) = register
        .first()
        .ok_or_else(|| Error::validation("the functional register is empty"))?;
    for (id, traj) in register {
        if traj.len() != first.len() || (traj.dt() - first.dt()).abs() > 1e-12 {
            return Err(Error::validation(format!(
                "flow '{id}' is solved on a different time grid"
            )));
        }
    }
    let mut series = Vec::with_capacity(register.len());
    for (id, traj) in register {
        let theta0_norm = traj
            .state(0)
            .values()
            .iter()
            .fold(0.0f64, |m, &v| m.max((1.0 - v).abs()));
        let mut values = Vec::with_capacity(traj.len());
        for state in traj.states() {
            let v = laplace_functional(mu0, state)?;
            values.push(v.min(1.0));
        }
        series.push(FunctionalSeries {
            id: id.to_string(),
            theta0_norm,
            values,
        });
    }
    Ok(StateTrajectory {
        times: first.times().to_vec(),
        initial_mass: mu0.expected_count()?,
        series,
    })
}

/// Residual of the state-level balance identity
/// `μ_t(F^φ) = μ_0(F^φ) + ∫_0^t μ_s(LF^φ) ds`,
/// with the integrand in closed form: the generator value at the fixed
/// configuration for a deterministic start, and
/// `[∫(Φφ_s − φ_s)ρ] · μ_s(F^φ)` for a Poisson start.
pub fn fpe_residual(
    mu0: &InitialState,
    traj: &Trajectory,
    k: &BranchingKernel,
    t: f64,
) -> Result<f64> {
    let idx = traj.index_at(t)?;
    let start = laplace_functional(mu0, traj.state(0))?;
    let end = laplace_functional(mu0, traj.state(idx))?;
    let mut integrand = Vec::with_capacity(idx + 1);
    for j in 0..=idx {
        let state = traj.state(j);
        let transform = k.apply_phi(state)?;
        let v = match mu0 {
            InitialState::Deterministic(g) => generator_value(g.positions(), state, &transform),
            InitialState::PoissonPP(rho) => {
                let growth = transform.zip_with(state, |a, b| a - b)?;
                let weighted = growth.zip_with(rho, |g, r| g * r)?;
                integrate(&weighted)? * laplace_functional(mu0, state)?
            }
        };
        integrand.push(v);
    }
    Ok((end - start - simpson(&integrand, traj.dt())).abs())
}

/// Convergence-to-one diagnostic for one functional series.
#[derive(Debug, Clone, Serialize)]
pub struct ExtinctionReport {
    pub id: String,
    /// Present when the diagnostic does not apply (supercritical mean).
    pub skipped: Option<String>,
    /// Worst excess of `1 − μ_t` over the envelope
    /// `mass · ‖1 − φ_0‖ · e^{−(1−n_*)t}`.
    pub envelope_violation: f64,
    /// Largest single-step decrease of the series; zero when the approach
    /// to one is monotone.
    pub max_decrease: f64,
    /// `1 − μ_T` at the horizon.
    pub final_gap: f64,
}

/// Check every registered series against the extinction envelope.
pub fn extinction_diagnostic(st: &StateTrajectory, n_star: f64) -> Vec<ExtinctionReport> {
    st.series()
        .iter()
        .map(|s| {
            if n_star >= 1.0 {
                return ExtinctionReport {
                    id: s.id.clone(),
                    skipped: Some(format!(
                        "mean offspring bound {n_star} is not subcritical; no extinction is implied"
                    )),
                    envelope_violation: 0.0,
                    max_decrease: 0.0,
                    final_gap: 1.0 - s.values.last().copied().unwrap_or(1.0),
                };
            }
            let rate = 1.0 - n_star;
            let scale = st.initial_mass() * s.theta0_norm;
            let mut envelope_violation = f64::NEG_INFINITY;
            for (t, v) in st.times().iter().zip(&s.values) {
                envelope_violation =
                    envelope_violation.max((1.0 - v) - scale * (-rate * t).exp());
            }
            let max_decrease = s
                .values
                .windows(2)
                .map(|w| w[0] - w[1])
                .fold(0.0f64, f64::max);
            ExtinctionReport {
                id: s.id.clone(),
                skipped: None,
                envelope_violation,
                max_decrease,
                final_gap: 1.0 - s.values.last().copied().unwrap(),
            }
        })
        .collect()
}

/// `∫ e^{−λt} μ_t(F^φ) dt` for one registered series, with the same horizon
/// certification as the configuration-level resolvent.
pub fn series_resolvent(
    st: &StateTrajectory,
    series_idx: usize,
    lambda: f64,
    tail_tol: f64,
) -> Result<f64> {
    if series_idx >= st.series().len() {
        return Err(Error::domain(format!("no series at index {series_idx}")));
    }
    if !(lambda > 1.0) || !lambda.is_finite() {
        return Err(Error::validation(format!(
            "resolvent parameter must exceed 1, got {lambda}"
        )));
    }
    let t_max = *st.times().last().unwrap();
    let tail_bound = (-lambda * t_max).exp() / lambda;
    if tail_bound > tail_tol {
        return Err(Error::Horizon {
            available: t_max,
            required: (1.0 / (lambda * tail_tol)).ln() / lambda,
            tail_tol,
        });
    }
    let vals: Vec<f64> = st
        .times()
        .iter()
        .zip(&st.series()[series_idx].values)
        .map(|(&t, &v)| (-lambda * t).exp() * v)
        .collect();
    Ok(simpson(&vals, st.dt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{DispersalKernel, OffspringLaw, Param};
    use crate::loglaplace::{picard_solve, TestFunction};
    use crate::space::{Boundary, Domain, TemperingWeight};
    use approx::assert_abs_diff_eq;
    use std::sync::Arc;

    fn wide_flat() -> (Arc<Domain>, TemperingWeight) {
        let d = Domain::new(-5.0, 5.0, 11, Boundary::Torus).unwrap();
        let w = TemperingWeight::new(d.clone(), 0.5, 0.0).unwrap();
        (d, w)
    }

    fn pure_death(d: &Arc<Domain>) -> BranchingKernel {
        BranchingKernel::new(
            OffspringLaw::pure_death(d.clone()),
            DispersalKernel::at_parent(d.clone()),
        )
        .unwrap()
    }

    fn reference_201() -> (TemperingWeight, BranchingKernel) {
        let d = Domain::new(-5.0, 5.0, 201, Boundary::Truncate).unwrap();
        let w = TemperingWeight::new(d.clone(), 0.5, 0.5).unwrap();
        let k = BranchingKernel::new(
            OffspringLaw::poisson_psi_capped(&w, 1.0).unwrap(),
            DispersalKernel::uniform_radius(d, 1.0).unwrap(),
        )
        .unwrap();
        (w, k)
    }

    #[test]
    fn laplace_functional_closed_forms() {
        let d = Domain::new(-5.0, 5.0, 2001, Boundary::Truncate).unwrap();
        let w = TemperingWeight::new(d.clone(), 0.5, 0.5).unwrap();
        let one = GridFunction::constant(d.clone(), 1.0).unwrap();
        let point6 = GridFunction::constant(d.clone(), 0.6).unwrap();

        let det = InitialState::deterministic(
            Configuration::new(vec![0.0, 2.0], &w).unwrap(),
        );
        assert_eq!(laplace_functional(&det, &one).unwrap(), 1.0);
        assert_abs_diff_eq!(laplace_functional(&det, &point6).unwrap(), 0.36, epsilon = 1e-15);

        let ppp =
            InitialState::poisson(GridFunction::constant(d.clone(), 0.5).unwrap()).unwrap();
        assert_eq!(laplace_functional(&ppp, &one).unwrap(), 1.0);
        assert_abs_diff_eq!(
            laplace_functional(&ppp, &point6).unwrap(),
            (-2.0f64).exp(),
            epsilon = 1e-14
        );

        let zero = GridFunction::constant(d, 0.0).unwrap();
        assert!(laplace_functional(&det, &zero).is_err());
    }

    #[test]
    fn negative_intensities_are_rejected() {
        let d = Domain::new(0.0, 1.0, 11, Boundary::Truncate).unwrap();
        let rho = GridFunction::constant(d, -0.1).unwrap();
        assert!(InitialState::poisson(rho).is_err());
    }

    #[test]
    fn expected_counts() {
        let (_, w) = wide_flat();
        let det = InitialState::deterministic(
            Configuration::new(vec![0.0, 1.0, 2.0], &w).unwrap(),
        );
        assert_eq!(det.expected_count().unwrap(), 3.0);
        let ppp = InitialState::poisson(
            GridFunction::constant(w.domain().clone(), 0.5).unwrap(),
        )
        .unwrap();
        assert_abs_diff_eq!(ppp.expected_count().unwrap(), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn evolution_starts_at_the_laplace_functional_and_tracks_the_oracle() {
        let (d, w) = wide_flat();
        let k = pure_death(&d);
        let phi0 =
            TestFunction::boundary(GridFunction::constant(d.clone(), 0.6).unwrap(), &w).unwrap();
        let traj = picard_solve(&k, &phi0, 1.0, 1e-3, 1e-11, 100).unwrap();

        let det =
            InitialState::deterministic(Configuration::new(vec![0.0], &w).unwrap());
        let st = evolve(&det, &[("main", &traj)]).unwrap();
        let vals = &st.series()[0].values;
        assert_abs_diff_eq!(vals[0], 0.6, epsilon = 1e-15);
        let expect = 1.0 - 0.4 * (-1.0f64).exp();
        assert_abs_diff_eq!(*vals.last().unwrap(), expect, epsilon = 1e-11);
        assert!(vals.iter().all(|v| *v > 0.0 && *v <= 1.0));

        // Poisson start composes through the exponential formula
        let ppp = InitialState::poisson(
            GridFunction::constant(d.clone(), 0.5).unwrap(),
        )
        .unwrap();
        let st = evolve(&ppp, &[("main", &traj)]).unwrap();
        let got = *st.series()[0].values.last().unwrap();
        let expect = (-0.4 * (-1.0f64).exp() * 5.0).exp();
        assert_abs_diff_eq!(got, expect, epsilon = 1e-10);
    }

    #[test]
    fn mismatched_register_grids_are_rejected() {
        let (d, w) = wide_flat();
        let k = pure_death(&d);
        let phi0 =
            TestFunction::boundary(GridFunction::constant(d.clone(), 0.6).unwrap(), &w).unwrap();
        let a = picard_solve(&k, &phi0, 1.0, 1e-2, 1e-9, 100).unwrap();
        let b = picard_solve(&k, &phi0, 1.0, 2e-2, 1e-9, 100).unwrap();
        let det = InitialState::deterministic(Configuration::empty());
        assert!(evolve(&det, &[("a", &a), ("b", &b)]).is_err());
        assert!(evolve(&det, &[]).is_err());
    }

    #[test]
    fn balance_residual_vanishes_at_time_zero() {
        let (d, w) = wide_flat();
        let k = pure_death(&d);
        let phi0 =
            TestFunction::boundary(GridFunction::constant(d.clone(), 0.6).unwrap(), &w).unwrap();
        let traj = picard_solve(&k, &phi0, 1.0, 1e-2, 1e-9, 100).unwrap();
        let det =
            InitialState::deterministic(Configuration::new(vec![0.0], &w).unwrap());
        assert_eq!(fpe_residual(&det, &traj, &k, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn balance_residual_is_quadrature_small_on_the_scalar_oracle() {
        let (d, w) = wide_flat();
        let k = pure_death(&d);
        let phi0 =
            TestFunction::boundary(GridFunction::constant(d.clone(), 0.6).unwrap(), &w).unwrap();
        let traj = picard_solve(&k, &phi0, 1.0, 1e-3, 1e-11, 100).unwrap();
        let det =
            InitialState::deterministic(Configuration::new(vec![0.0], &w).unwrap());
        let res = fpe_residual(&det, &traj, &k, 1.0).unwrap();
        assert!(res <= 1e-10, "residual {res}");
    }

    #[test]
    fn balance_residual_small_for_a_poisson_start_on_the_reference_kernel() {
        let (w, k) = reference_201();
        let theta = w.grid().map(|p| 0.8 * p).unwrap();
        let phi0 = TestFunction::from_theta(&theta, &k, &w).unwrap();
        let traj = picard_solve(&k, &phi0, 1.0, 1e-3, 1e-11, 200).unwrap();
        let ppp = InitialState::poisson(
            GridFunction::constant(w.domain().clone(), 0.2).unwrap(),
        )
        .unwrap();
        let res = fpe_residual(&ppp, &traj, &k, 1.0).unwrap();
        assert!(res <= 1e-6, "residual {res}");
    }

    #[test]
    fn extinction_gap_matches_the_scalar_oracle_at_t_ten() {
        let (d, w) = wide_flat();
        let k = pure_death(&d);
        let phi0 =
            TestFunction::boundary(GridFunction::constant(d.clone(), 0.6).unwrap(), &w).unwrap();
        let traj = picard_solve(&k, &phi0, 10.0, 1e-2, 1e-11, 100).unwrap();
        let det =
            InitialState::deterministic(Configuration::new(vec![0.0], &w).unwrap());
        let st = evolve(&det, &[("main", &traj)]).unwrap();
        let reports = extinction_diagnostic(&st, k.n_star());
        let r = &reports[0];
        assert!(r.skipped.is_none());
        assert_abs_diff_eq!(r.final_gap, 0.4 * (-10.0f64).exp(), epsilon = 1e-9);
        assert!(r.envelope_violation <= 1e-9, "{}", r.envelope_violation);
        assert!(r.max_decrease <= 1e-12);
    }

    #[test]
    fn stationary_start_has_zero_gap_throughout() {
        let (d, w) = wide_flat();
        let k = pure_death(&d);
        let one =
            TestFunction::boundary(GridFunction::constant(d.clone(), 1.0).unwrap(), &w).unwrap();
        let traj = picard_solve(&k, &one, 2.0, 1e-2, 1e-9, 100).unwrap();
        let det =
            InitialState::deterministic(Configuration::new(vec![0.0, 1.0], &w).unwrap());
        let st = evolve(&det, &[("one", &traj)]).unwrap();
        let r = &extinction_diagnostic(&st, k.n_star())[0];
        assert!(r.final_gap.abs() <= 1e-12);
        assert!(st.series()[0].values.iter().all(|v| (v - 1.0).abs() <= 1e-12));
    }

    #[test]
    fn branching_oracle_decays_inside_its_envelope() {
        let (d, w) = wide_flat();
        let k = BranchingKernel::new(
            OffspringLaw::binary_split(d.clone(), Param::Constant(0.3)).unwrap(),
            DispersalKernel::at_parent(d.clone()),
        )
        .unwrap();
        let phi0 =
            TestFunction::boundary(GridFunction::constant(d.clone(), 0.6).unwrap(), &w).unwrap();
        let traj = picard_solve(&k, &phi0, 6.0, 1e-2, 1e-11, 200).unwrap();
        let det =
            InitialState::deterministic(Configuration::new(vec![0.0], &w).unwrap());
        let st = evolve(&det, &[("main", &traj)]).unwrap();
        let r = &extinction_diagnostic(&st, k.n_star())[0];
        assert!(r.envelope_violation <= 1e-9, "{}", r.envelope_violation);
    }

    #[test]
    fn supercritical_diagnostic_is_skipped() {
        let (d, w) = wide_flat();
        let k = pure_death(&d);
        let phi0 =
            TestFunction::boundary(GridFunction::constant(d.clone(), 0.6).unwrap(), &w).unwrap();
        let traj = picard_solve(&k, &phi0, 1.0, 1e-2, 1e-9, 100).unwrap();
        let det = InitialState::deterministic(Configuration::empty());
        let st = evolve(&det, &[("main", &traj)]).unwrap();
        let r = &extinction_diagnostic(&st, 1.2)[0];
        assert!(r.skipped.is_some());
    }

    #[test]
    fn series_resolvent_agrees_with_the_configuration_route() {
        let (d, w) = wide_flat();
        let k = pure_death(&d);
        let phi0 =
            TestFunction::boundary(GridFunction::constant(d.clone(), 0.6).unwrap(), &w).unwrap();
        let traj = picard_solve(&k, &phi0, 12.0, 1e-3, 1e-10, 100).unwrap();
        let gamma = Configuration::new(vec![0.0], &w).unwrap();
        let det = InitialState::deterministic(gamma.clone());
        let st = evolve(&det, &[("main", &traj)]).unwrap();
        for lambda in [2.0, 5.0, 10.0] {
            let via_series = series_resolvent(&st, 0, lambda, 1e-5).unwrap();
            let via_config = gamma.resolvent(lambda, &traj, 1e-5).unwrap().value;
            assert_abs_diff_eq!(via_series, via_config, epsilon = 1e-12);
        }
        // short horizon refused the same way
        let short = picard_solve(&k, &phi0, 1.0, 1e-2, 1e-9, 100).unwrap();
        let st_short = evolve(&det, &[("main", &short)]).unwrap();
        assert!(series_resolvent(&st_short, 0, 2.0, 1e-7).is_err());
    }

    #[test]
    fn deterministic_series_increments_respect_the_flow_bound() {
        let (w, k) = reference_201();
        let theta = w.grid().map(|p| 0.8 * p).unwrap();
        let phi0 = TestFunction::from_theta(&theta, &k, &w).unwrap();
        let traj = picard_solve(&k, &phi0, 1.0, 1e-2, 1e-10, 200).unwrap();
        let det = InitialState::deterministic(
            Configuration::new(vec![-2.0, -0.5, 0.3, 1.1, 3.4], &w).unwrap(),
        );
        let st = evolve(&det, &[("main", &traj)]).unwrap();
        let vals = &st.series()[0].values;
        for j in (0..vals.len()).step_by(10) {
            for du in [1usize, 2, 5] {
                if j + du >= vals.len() {
                    continue;
                }
                let t = st.times()[j];
                let u = du as f64 * st.dt();
                let diff = (vals[j + du] - vals[j]).abs();
                let bound = crate::configuration::functional_increment_bound(
                    0.5,
                    phi0.c_phi(),
                    t,
                    u,
                )
                .unwrap();
                assert!(diff <= bound + 1e-12, "t={t}, u={u}: {diff} > {bound}");
            }
        }
    }
}
