//! The acceptance suite: ten end-to-end checks of the numerical pipeline
//! against closed forms, independent ODE oracles and Monte Carlo.
//!
//! Each criterion is deterministic given the base seed. The `Strict`
//! profile runs the full sizes; `Quick` scales every Monte Carlo replica
//! count down by four and widens the statistical tolerances by the
//! matching factor of two, for smoke runs.

use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DMatrix;

use crate::er;
use crate::error::{Error, Result};
use crate::graph::{
    density_fluctuations, macro_fluctuations, run_ensemble, AssignmentMode, EnsembleConfig, GraphState,
};
use crate::linalg::max_abs;
use crate::mbp::{critical_time, dual_measure, BranchingSpec};
use crate::model::ModelSpec;
use crate::mst::{
    default_tmax, kruskal_weight, mst_clt_experiment, sample_dense_graph, sigma_infinity,
    weight_via_component_integral, DenseModel,
};
use crate::ode::{solve_densities, MacroLimits, DEFAULT_STEP};
use crate::rng::{derived_seed, replica_rng};
use crate::sde::{
    build_coefficients, covariance_closed_form, covariance_lyapunov, initial_mean, mean_closed_form,
    mean_field, two_time_covariance, CoefficientOptions,
};
use crate::stats;
use crate::types::{Kernel, TypeMeasure, TypeSlice};

pub const DEFAULT_SEED: u64 = 20_260_917;
pub const CRITERIA: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Strict,
    Quick,
}

impl Profile {
    fn replicas(self, full: usize) -> usize {
        match self {
            Profile::Strict => full,
            Profile::Quick => full / 4,
        }
    }

    fn widen(self, tol: f64) -> f64 {
        match self {
            Profile::Strict => tol,
            Profile::Quick => 2.0 * tol,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CriterionResult {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for CriterionResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {:>2} {:<28} {} ({:.1}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail,
            self.seconds
        )
    }
}

pub fn name(id: usize) -> &'static str {
    match id {
        1 => "ode-borel",
        2 => "covariance-lyapunov",
        3 => "mean-finite-difference",
        4 => "microscopic-clt",
        5 => "giant-clt",
        6 => "two-time-covariance",
        7 => "mst-identity",
        8 => "mst-zeta3",
        9 => "mst-variance",
        10 => "structural-invariants",
        _ => "unknown",
    }
}

/// Outcome of one check: pass flag and a one-line measurement summary.
type Check = Result<(bool, String)>;

pub fn run_criterion(id: usize, profile: Profile, seed: u64) -> CriterionResult {
    let start = Instant::now();
    let seed = derived_seed(seed, id as u64);
    let outcome = match id {
        1 => ode_borel(),
        2 => covariance_vs_lyapunov(),
        3 => mean_vs_finite_difference(),
        4 => microscopic_clt(profile, seed),
        5 => giant_clt(profile, seed),
        6 => cross_time_covariance(profile, seed),
        7 => mst_identity(seed),
        8 => mst_zeta3(profile, seed),
        9 => mst_variance(profile, seed),
        10 => structural_invariants(seed),
        _ => Err(Error::InvalidArgument(format!("no criterion {id}"))),
    };
    let (passed, detail) = match outcome {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    CriterionResult {
        id,
        name: name(id),
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

pub fn run_all(profile: Profile, seed: u64) -> Vec<CriterionResult> {
    (1..=CRITERIA).map(|id| run_criterion(id, profile, seed)).collect()
}

fn relative(measured: f64, reference: f64) -> f64 {
    (measured - reference).abs() / reference.abs()
}

fn two_type_spec() -> ModelSpec {
    ModelSpec::with_perturbations(
        Kernel::new(vec![vec![2.0, 1.0], vec![1.0, 2.0]]).expect("valid kernel"),
        TypeMeasure::probability(vec![0.6, 0.4]).expect("valid measure"),
        Kernel::perturbation(vec![vec![0.3, -0.1], vec![-0.1, 0.2]]).expect("valid perturbation"),
        vec![0.2, -0.2],
        4,
        0.0,
    )
    .expect("valid spec")
}

/// `0.8 t_c`, rounded down to the transport step `2e-3`.
fn subcritical_horizon(spec: &ModelSpec) -> Result<f64> {
    let tc = critical_time(&spec.kernel, &spec.measure)?;
    Ok((0.8 * tc / (2.0 * DEFAULT_STEP)).floor() * 2.0 * DEFAULT_STEP)
}

fn ode_borel() -> Check {
    let spec = ModelSpec::erdos_renyi(12, 3.0);
    let field = solve_densities(&spec, DEFAULT_STEP, 3.0)?;
    let mut worst: f64 = 0.0;
    for i in 0..field.len() {
        let t = field.times()[i];
        let row = field.at_index(i);
        for k in 1..=10u64 {
            worst = worst.max((row[k as usize] - er::borel_pmf(t, k) / k as f64).abs());
        }
    }
    Ok((worst <= 1e-8, format!("max |pi - Borel/k| = {worst:.2e} (<= 1e-8)")))
}

fn covariance_vs_lyapunov() -> Check {
    let spec = two_type_spec();
    let horizon = subcritical_horizon(&spec)?;
    let field = solve_densities(&spec, DEFAULT_STEP, horizon)?;
    let coeffs = build_coefficients(&field, &spec, CoefficientOptions { stride: 1, square_roots: false })?;
    let path = covariance_lyapunov(&coeffs, None)?;
    let mut worst: f64 = 0.0;
    for (t, s) in path.times.iter().zip(&path.values) {
        worst = worst.max(max_abs(&(s - covariance_closed_form(&field, *t)?)));
    }
    Ok((
        worst <= 1e-6,
        format!("max |Lyapunov - closed form| = {worst:.2e} on [0, {horizon}] (<= 1e-6)"),
    ))
}

fn mean_vs_finite_difference() -> Check {
    let spec = two_type_spec();
    let horizon = subcritical_horizon(&spec)?;
    let field = solve_densities(&spec, DEFAULT_STEP, horizon)?;
    let coeffs = build_coefficients(&field, &spec, CoefficientOptions { stride: 1, square_roots: false })?;
    let ode = mean_field(&coeffs, &initial_mean(field.slice(), &spec.psi))?;
    let fd = mean_closed_form(&spec, DEFAULT_STEP, horizon, &ode.times, 1e-5)?;
    let scale = ode.values.iter().map(max_abs).fold(0.0, f64::max);
    let diff = ode
        .values
        .iter()
        .zip(&fd)
        .map(|(a, b)| max_abs(&(a - DMatrix::from_column_slice(b.len(), 1, b.as_slice()))))
        .fold(0.0, f64::max);
    let rel = diff / scale;
    Ok((rel <= 1e-4, format!("relative error {rel:.2e} (<= 1e-4)")))
}

fn microscopic_clt(profile: Profile, seed: u64) -> Check {
    let t = 0.7;
    let n = 20_000;
    let spec = ModelSpec::erdos_renyi(1, t);
    let config = EnsembleConfig {
        n,
        replicas: profile.replicas(2000),
        times: vec![t],
        truncation: 1,
        mode: AssignmentMode::Proportional,
        seed,
    };
    let records = run_ensemble(&spec, &config)?;
    let x: Vec<f64> = density_fluctuations(&records, 0, n, &[t / 2.0, (-t).exp()])
        .iter()
        .map(|v| v[1])
        .collect();
    let var = stats::variance(&x);
    let reference = (-t).exp() + (-2.0 * t).exp() * (t - 1.0);
    let rel = relative(var, reference);
    let tol = profile.widen(0.05);
    Ok((
        rel <= tol,
        format!("Var X_n(1) = {var:.4} vs {reference:.4}, rel {rel:.3} (<= {tol})"),
    ))
}

fn giant_clt(profile: Profile, seed: u64) -> Check {
    let t = 2.0;
    let n = 50_000;
    let spec = ModelSpec::erdos_renyi(1, t);
    let config = EnsembleConfig {
        n,
        replicas: profile.replicas(1000),
        times: vec![t],
        truncation: 1,
        mode: AssignmentMode::Proportional,
        seed,
    };
    let records = run_ensemble(&spec, &config)?;
    let curves = er::curves(t);
    let sigma = er::covariance(t)?;
    let limits = MacroLimits {
        components: curves.eta,
        giant: curves.giant,
        surplus: curves.surplus,
    };
    let m = macro_fluctuations(&records, 0, n, &limits);
    let comps: Vec<f64> = m.iter().map(|v| v[0]).collect();
    let giant: Vec<f64> = m.iter().map(|v| v[1]).collect();
    let var = stats::variance(&giant);
    let cov = stats::covariance(&comps, &giant);
    let rel_var = relative(var, sigma[1][1]);
    let rel_cov = relative(cov, sigma[0][1]);
    let (tv, tc) = (profile.widen(0.10), profile.widen(0.15));
    let passed = rel_var <= tv && rel_cov <= tc && cov.signum() == sigma[0][1].signum();
    Ok((
        passed,
        format!(
            "Var = {var:.4} vs {:.4} (rel {rel_var:.3} <= {tv}); Cov = {cov:.4} vs {:.4} (rel {rel_cov:.3} <= {tc})",
            sigma[1][1], sigma[0][1]
        ),
    ))
}

fn cross_time_covariance(profile: Profile, seed: u64) -> Check {
    let (s, t) = (0.4, 0.7);
    let n = 20_000;
    let truncation = 10;
    let spec = ModelSpec::erdos_renyi(truncation, t);
    let field = solve_densities(&spec, DEFAULT_STEP, t)?;
    let coeffs = build_coefficients(&field, &spec, CoefficientOptions { stride: 1, square_roots: false })?;
    let cross = two_time_covariance(&coeffs, s, t, &covariance_closed_form(&field, s)?)?;
    let w = field.slice().len();
    let reference: f64 = (1..w).flat_map(|l| (1..w).map(move |k| (l, k))).map(|(l, k)| cross[(l, k)]).sum();

    let config = EnsembleConfig {
        n,
        replicas: profile.replicas(2000),
        times: vec![s, t],
        truncation,
        mode: AssignmentMode::Proportional,
        seed,
    };
    let records = run_ensemble(&spec, &config)?;
    let total = |i: usize, time: f64| -> Result<Vec<f64>> {
        Ok(density_fluctuations(&records, i, n, field.at_time(time)?)
            .iter()
            .map(|v| v[1..].iter().sum())
            .collect())
    };
    let (xs, xt) = (total(0, s)?, total(1, t)?);
    let cov = stats::covariance(&xs, &xt);
    let rel = relative(cov, reference);
    let tol = profile.widen(0.10);
    Ok((
        rel <= tol,
        format!("Cov = {cov:.4} vs {reference:.4}, rel {rel:.3} (<= {tol})"),
    ))
}

fn mst_identity(seed: u64) -> Check {
    let spec = ModelSpec::new(
        Kernel::new(vec![vec![0.8, 0.3], vec![0.3, 0.6]])?,
        TypeMeasure::probability(vec![0.6, 0.4])?,
        1,
        1.0,
    )?;
    let mut worst: f64 = 0.0;
    let mut disconnected = 0;
    for i in 0..1000u64 {
        let mut rng = replica_rng(seed, i);
        let model = if i % 2 == 0 { DenseModel::Exponential } else { DenseModel::Bernoulli };
        let n = 2 + (i as usize * 7919) % 199;
        let sample = sample_dense_graph(&spec, n, model, &mut rng)?;
        let mst = kruskal_weight(&sample)?;
        match weight_via_component_integral(&sample) {
            Ok(integral) => worst = worst.max(relative(integral, mst.weight)),
            Err(Error::Disconnected) if !mst.connected => disconnected += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((
        worst <= 1e-9,
        format!("max relative gap {worst:.2e} over 1000 instances ({disconnected} disconnected, both infinite)"),
    ))
}

const ZETA3: f64 = 1.202_056_903_159_594;

fn mst_zeta3(profile: Profile, seed: u64) -> Check {
    let spec = ModelSpec::erdos_renyi(1, 1.0);
    let exp = mst_clt_experiment(&spec, 1000, profile.replicas(200), DenseModel::Exponential, seed)?;
    let gap = (exp.mean - ZETA3).abs();
    let tol = profile.widen(0.024);
    Ok((
        gap <= tol,
        format!("mean W = {:.5} (SE {:.5}), |mean - zeta(3)| = {gap:.4} (<= {tol})", exp.mean, exp.mean_std_error),
    ))
}

fn mst_variance(profile: Profile, seed: u64) -> Check {
    let janson = er::janson_sigma2(200).value;
    let spec = ModelSpec::erdos_renyi(1, 1.0);
    let exp = mst_clt_experiment(&spec, 4000, profile.replicas(400), DenseModel::Exponential, seed)?;
    let rel_mc = relative(exp.scaled_variance, janson);
    let kernel = Kernel::constant(1, 1.0);
    let tmax = default_tmax(&kernel, 1.0);
    let sigma = sigma_infinity(&kernel, &[1.0], 12, tmax, 0.05)?;
    let rel_sigma = relative(sigma.value, janson);
    let tol = profile.widen(0.15);
    Ok((
        rel_mc <= tol && rel_sigma <= 0.05,
        format!(
            "n Var W = {:.4}, sigma_inf(N=12, T={tmax}) = {:.4}, Janson = {janson:.4}; rel {rel_mc:.3} (<= {tol}), {rel_sigma:.4} (<= 0.05)",
            exp.scaled_variance, sigma.value
        ),
    ))
}

fn structural_invariants(seed: u64) -> Check {
    let mut notes = Vec::new();
    let mut ok = true;

    let two = two_type_spec();
    let two_horizon = subcritical_horizon(&two)?;
    for (spec, horizon) in [(ModelSpec::erdos_renyi(6, 2.5), 2.5), (two.clone(), two_horizon)] {
        let field = solve_densities(&spec, DEFAULT_STEP, horizon)?;
        let stride = if (field.len() - 1) % 10 == 0 { 10 } else { 1 };
        let coeffs = build_coefficients(&field, &spec, CoefficientOptions { stride, square_roots: true })?;
        let r = coeffs.check_invariants();
        ok &= r.holds();
        notes.push(format!(
            "K={}: Gamma upper {:.0e}, min eig {:.1e}, root res {:.1e}",
            spec.types(),
            r.gamma_upper,
            r.phi_min_eigenvalue,
            r.root_residual.unwrap_or(f64::NAN)
        ));
    }

    let mut rng = replica_rng(seed, 0);
    let n = 2000;
    let mut g = GraphState::init(n, &two, AssignmentMode::Iid, &mut rng)?;
    let slice = Arc::new(TypeSlice::new(2, 4)?);
    for t in [0.1, 0.3, 0.6, 1.0] {
        g.advance_to(t, &mut rng)?;
        g.check_invariants()?;
        let snap = g.density_snapshot(&slice)?;
        let mass = snap.vertex_mass(&slice, n);
        if (mass - 1.0).abs() > 1e-12 {
            ok = false;
            notes.push(format!("vertex mass {mass} at t = {t}"));
        }
    }
    notes.push("vertex conservation exact".into());

    let mut worst_dual: f64 = 0.0;
    for (kernel, measure) in [
        (Kernel::constant(1, 1.0), TypeMeasure::uniform(1)),
        (two.kernel.clone(), two.measure.clone()),
    ] {
        for t in [0.5, 2.0] {
            let d = dual_measure(&BranchingSpec::new(kernel.clone(), measure.clone(), t)?, 1e-13)?;
            worst_dual = worst_dual.max(d.dual_norm);
        }
    }
    ok &= worst_dual < 1.0;
    notes.push(format!("max dual norm {worst_dual:.4} (< 1)"));
    Ok((ok, notes.join("; ")))
}
