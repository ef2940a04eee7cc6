//! Gaussian fluctuation limit on a truncated slice: drift `a(t)`, linear
//! part `Gamma(t)`, diffusion `Phi(t)` and its square root `G(t)`; the
//! Euler-Maruyama simulator; means and covariances from ODEs, from the
//! closed form, and across two times.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{max_abs, min_eigenvalue, psd_sqrt, PSD_TOLERANCE};
use crate::model::ModelSpec;
use crate::ode::{solve_on_slice, DensityField, Drift};
use crate::rng::replica_rng;
use crate::types::TypeSlice;

/// Allowed `||G G - Phi||_max`.
pub const ROOT_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug)]
pub struct CoefficientOptions {
    /// Coefficients are taken at every `stride`-th density grid point.
    pub stride: usize,
    /// Compute `G = Phi^{1/2}`; only the simulator needs it.
    pub square_roots: bool,
}

impl Default for CoefficientOptions {
    fn default() -> Self {
        CoefficientOptions {
            stride: 1,
            square_roots: true,
        }
    }
}

/// Coefficients on a uniform time grid. The drift is stored split as
/// `a(t) = a_lambda(t) + a_psi(t) psi` so that a random initial fluctuation
/// can be fed in per path.
#[derive(Clone, Debug)]
pub struct SdeCoefficients {
    slice: Arc<TypeSlice>,
    measure: Vec<f64>,
    psi: Vec<f64>,
    step: f64,
    times: Vec<f64>,
    a_lambda: Vec<DVector<f64>>,
    a_psi: Vec<DMatrix<f64>>,
    gamma: Vec<DMatrix<f64>>,
    phi: Vec<DMatrix<f64>>,
    g: Option<Vec<DMatrix<f64>>>,
}

/// Worst values of the structural checks over the grid.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct InvariantReport {
    /// Largest `|Gamma(k, l)|` with `k` before `l`; must be exactly zero.
    pub gamma_upper: f64,
    pub phi_min_eigenvalue: f64,
    pub phi_asymmetry: f64,
    /// `||G G - Phi||_max`, when roots were computed.
    pub root_residual: Option<f64>,
}

impl InvariantReport {
    pub fn holds(&self) -> bool {
        self.gamma_upper == 0.0
            && self.phi_min_eigenvalue >= -PSD_TOLERANCE
            && self.phi_asymmetry == 0.0
            && self.root_residual.is_none_or(|r| r <= ROOT_TOLERANCE)
    }
}

impl SdeCoefficients {
    pub fn slice(&self) -> &Arc<TypeSlice> {
        &self.slice
    }

    pub fn measure(&self) -> &[f64] {
        &self.measure
    }

    pub fn psi(&self) -> &[f64] {
        &self.psi
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().expect("non-empty grid")
    }

    pub fn index_of(&self, t: f64) -> Result<usize> {
        let i = (t / self.step).round();
        if i < 0.0 || i as usize >= self.times.len() || (i * self.step - t).abs() > 1e-9 * (1.0 + t) {
            return Err(Error::OffGrid(t));
        }
        Ok(i as usize)
    }

    pub fn gamma(&self, i: usize) -> &DMatrix<f64> {
        &self.gamma[i]
    }

    pub fn phi(&self, i: usize) -> &DMatrix<f64> {
        &self.phi[i]
    }

    pub fn g(&self, i: usize) -> Option<&DMatrix<f64>> {
        self.g.as_ref().map(|g| &g[i])
    }

    pub fn a_lambda(&self, i: usize) -> &DVector<f64> {
        &self.a_lambda[i]
    }

    pub fn a_psi(&self, i: usize) -> &DMatrix<f64> {
        &self.a_psi[i]
    }

    /// `a(t_i)` for a given measure fluctuation.
    pub fn drift_with(&self, i: usize, psi: &[f64]) -> DVector<f64> {
        &self.a_lambda[i] + &self.a_psi[i] * DVector::from_column_slice(psi)
    }

    /// `a(t_i)` for the configured measure fluctuation.
    pub fn a(&self, i: usize) -> DVector<f64> {
        self.drift_with(i, &self.psi)
    }

    pub fn check_invariants(&self) -> InvariantReport {
        let w = self.slice.len();
        let mut report = InvariantReport {
            phi_min_eigenvalue: f64::INFINITY,
            ..Default::default()
        };
        for i in 0..self.len() {
            let gm = &self.gamma[i];
            for r in 0..w {
                for c in r + 1..w {
                    report.gamma_upper = report.gamma_upper.max(gm[(r, c)].abs());
                }
            }
            let phi = &self.phi[i];
            report.phi_asymmetry = report.phi_asymmetry.max(max_abs(&(phi - phi.transpose())));
            report.phi_min_eigenvalue = report.phi_min_eigenvalue.min(min_eigenvalue(phi));
            if let Some(g) = &self.g {
                let res = max_abs(&(&g[i] * &g[i] - phi));
                report.root_residual = Some(report.root_residual.unwrap_or(0.0).max(res));
            }
        }
        report
    }

    /// Linear interpolation of `(Gamma, G, a)` at an arbitrary time.
    fn interpolated(&self, t: f64, psi: &DVector<f64>) -> (DMatrix<f64>, Option<DMatrix<f64>>, DVector<f64>) {
        let last = self.len() - 1;
        let x = (t / self.step).clamp(0.0, last as f64);
        let i = (x.floor() as usize).min(last.saturating_sub(1));
        let f = if last == 0 { 0.0 } else { x - i as f64 };
        let j = (i + 1).min(last);
        let lerp_m = |a: &DMatrix<f64>, b: &DMatrix<f64>| a * (1.0 - f) + b * f;
        let gamma = lerp_m(&self.gamma[i], &self.gamma[j]);
        let g = self.g.as_ref().map(|g| lerp_m(&g[i], &g[j]));
        let a_i = &self.a_lambda[i] + &self.a_psi[i] * psi;
        let a_j = &self.a_lambda[j] + &self.a_psi[j] * psi;
        (gamma, g, a_i * (1.0 - f) + a_j * f)
    }
}

/// Pairwise `theta(l, k)` and the rank of `l + k` (if inside the slice).
struct PairTables {
    theta: DMatrix<f64>,
    sum_rank: Vec<Option<usize>>,
}

impl PairTables {
    fn new(slice: &TypeSlice, kernel: &crate::types::Kernel) -> Self {
        let w = slice.len();
        let theta = DMatrix::from_fn(w, w, |l, k| kernel.theta_unchecked(slice.coords(l), slice.coords(k)));
        let mut sum_rank = vec![None; w * w];
        let mut buf = vec![0u32; slice.types()];
        for l in 0..w {
            for k in 0..w {
                for (b, (x, y)) in buf
                    .iter_mut()
                    .zip(slice.vector(l).counts().iter().zip(slice.vector(k).counts()))
                {
                    *b = x + y;
                }
                sum_rank[l * w + k] = slice.rank_of_counts(&buf);
            }
        }
        PairTables { theta, sum_rank }
    }
}

/// Build `a, Gamma, Phi` (and optionally `G`) from a density solution whose
/// kernel and measure are those of `spec`.
pub fn build_coefficients(
    field: &DensityField,
    spec: &ModelSpec,
    options: CoefficientOptions,
) -> Result<SdeCoefficients> {
    let slice = field.slice().clone();
    if slice.types() != spec.types() {
        return Err(Error::DimensionMismatch {
            expected: spec.types(),
            got: slice.types(),
        });
    }
    if field.kernel() != &spec.kernel || field.measure() != spec.measure.mass() {
        return Err(Error::InvalidArgument(
            "density field was solved for a different kernel or measure".into(),
        ));
    }
    if options.stride == 0 || (field.len() - 1) % options.stride != 0 {
        return Err(Error::InvalidArgument(format!(
            "stride {} does not divide the {} density steps",
            options.stride,
            field.len() - 1
        )));
    }
    let k = slice.types();
    let w = slice.len();
    let mu = spec.measure.mass();
    let kernel = &spec.kernel;
    let lambda_drift = Drift::new(slice.clone(), &spec.lambda, mu)?;
    let base = Drift::new(slice.clone(), kernel, mu)?;
    let linear = base.linear_rates();
    let pairs = PairTables::new(&slice, kernel);
    // (kernel l)_j per rank, for the psi part of the drift
    let kernel_l: Vec<Vec<f64>> = (0..w)
        .map(|r| {
            (0..k)
                .map(|j| (0..k).map(|i| slice.coords(r)[i] * kernel.get(i, j)).sum())
                .collect()
        })
        .collect();
    let kernel_mu: Vec<f64> = (0..k).map(|j| (0..k).map(|i| mu[i] * kernel.get(i, j)).sum()).collect();
    let theta_mu_mu = kernel.theta_unchecked(mu, mu);

    let n = (field.len() - 1) / options.stride + 1;
    let step = field.step() * options.stride as f64;
    let mut out = SdeCoefficients {
        slice: slice.clone(),
        measure: mu.to_vec(),
        psi: spec.psi.clone(),
        step,
        times: Vec::with_capacity(n),
        a_lambda: Vec::with_capacity(n),
        a_psi: Vec::with_capacity(n),
        gamma: Vec::with_capacity(n),
        phi: Vec::with_capacity(n),
        g: options.square_roots.then(|| Vec::with_capacity(n)),
    };
    let mut a_buf = vec![0.0; w];
    for idx in 0..n {
        let i = idx * options.stride;
        let pi = field.at_index(i);
        out.times.push(field.times()[i]);

        lambda_drift.eval(pi, &mut a_buf);
        out.a_lambda.push(DVector::from_column_slice(&a_buf));
        let mut a_psi = DMatrix::zeros(w, k);
        for j in 0..k {
            a_psi[(0, j)] = kernel_mu[j];
            for r in 1..w {
                a_psi[(r, j)] = -pi[r] * kernel_l[r][j];
            }
        }
        out.a_psi.push(a_psi);

        let mut gamma = DMatrix::zeros(w, w);
        for (m, th) in slice.merges().iter().zip(base.merge_thetas()) {
            gamma[(m.sum, m.right)] += pi[m.left] * th;
        }
        for r in 1..w {
            gamma[(r, r)] -= linear[r];
        }
        out.gamma.push(gamma);

        let phi = diffusion_matrix(pi, linear, theta_mu_mu, &pairs);
        if let Some(g) = out.g.as_mut() {
            let root = psd_sqrt(&phi)?;
            let residual = max_abs(&(&root * &root - &phi));
            if residual > ROOT_TOLERANCE {
                return Err(Error::Invariant(format!(
                    "square root residual {residual:e} at t = {}",
                    field.times()[i]
                )));
            }
            g.push(root);
        } else if min_eigenvalue(&phi) < -PSD_TOLERANCE {
            return Err(Error::NotPsd(min_eigenvalue(&phi)));
        }
        out.phi.push(phi);
    }
    Ok(out)
}

/// `Phi` as a sum of rank-one terms: an edge term on `e_0`, a
/// `Delta_l = e_0 - e_l` term per component type, and a
/// `e_0 + e_{l+k} 1{l+k in slice} - e_l - e_k` term per ordered pair.
fn diffusion_matrix(pi: &[f64], linear: &[f64], theta_mu_mu: f64, pairs: &PairTables) -> DMatrix<f64> {
    let w = pi.len();
    let th = &pairs.theta;
    // sum_k pi(k) theta(l, k)
    let mut pi_theta = vec![0.0; w];
    for l in 1..w {
        pi_theta[l] = (1..w).map(|k| pi[k] * th[(l, k)]).sum();
    }
    let pi_lin: f64 = (1..w).map(|l| pi[l] * linear[l]).sum();
    let pi_pi: f64 = (1..w).map(|l| pi[l] * pi_theta[l]).sum();

    let mut phi = DMatrix::zeros(w, w);
    phi[(0, 0)] = 0.5 * (theta_mu_mu - 2.0 * pi_lin + pi_pi);
    for l in 1..w {
        let c = pi[l] * (linear[l] - pi_theta[l]);
        phi[(0, 0)] += c;
        phi[(0, l)] -= c;
        phi[(l, 0)] -= c;
        phi[(l, l)] += c;
    }
    let mut entries: [(usize, f64); 4] = [(0, 0.0); 4];
    for l in 1..w {
        for k in 1..w {
            let c = 0.5 * pi[l] * pi[k] * th[(l, k)];
            if c == 0.0 {
                continue;
            }
            let mut n = 0;
            let mut push = |r: usize, v: f64| {
                if let Some(e) = entries[..n].iter_mut().find(|e| e.0 == r) {
                    e.1 += v;
                } else {
                    entries[n] = (r, v);
                    n += 1;
                }
            };
            push(0, 1.0);
            push(l, -1.0);
            push(k, -1.0);
            if let Some(s) = pairs.sum_rank[l * w + k] {
                push(s, 1.0);
            }
            for &(r, vr) in &entries[..n] {
                for &(q, vq) in &entries[..n] {
                    phi[(r, q)] += c * vr * vq;
                }
            }
        }
    }
    phi
}

/// Values of a linear ODE on the even grid points `t_0, t_2, t_4, ...`
/// starting from a given index.
#[derive(Clone, Debug)]
pub struct MatrixPath {
    pub times: Vec<f64>,
    pub values: Vec<DMatrix<f64>>,
}

impl MatrixPath {
    pub fn at(&self, t: f64) -> Result<&DMatrix<f64>> {
        self.times
            .iter()
            .position(|s| (s - t).abs() <= 1e-9 * (1.0 + t))
            .map(|i| &self.values[i])
            .ok_or(Error::OffGrid(t))
    }
}

/// RK4 with step `2 * coeffs.step()` so that every stage lands on the
/// coefficient grid.
fn rk4_on_grid<F>(coeffs: &SdeCoefficients, start: usize, end: usize, y0: DMatrix<f64>, rhs: F) -> Result<MatrixPath>
where
    F: Fn(usize, &DMatrix<f64>) -> DMatrix<f64>,
{
    if end >= coeffs.len() || start > end || (end - start) % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "grid indices {start}..{end} must be an even span inside 0..{}",
            coeffs.len()
        )));
    }
    let h = 2.0 * coeffs.step();
    let mut times = vec![coeffs.times[start]];
    let mut values = vec![y0.clone()];
    let mut y = y0;
    let mut i = start;
    while i < end {
        let k1 = rhs(i, &y);
        let k2 = rhs(i + 1, &(&y + &k1 * (0.5 * h)));
        let k3 = rhs(i + 1, &(&y + &k2 * (0.5 * h)));
        let k4 = rhs(i + 2, &(&y + &k3 * h));
        y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        i += 2;
        times.push(coeffs.times[i]);
        values.push(y.clone());
    }
    Ok(MatrixPath { times, values })
}

fn last_even(coeffs: &SdeCoefficients) -> usize {
    (coeffs.len() - 1) / 2 * 2
}

/// `m' = Gamma m + a`, `m(0) = m0`, for the configured `psi`.
pub fn mean_field(coeffs: &SdeCoefficients, m0: &[f64]) -> Result<MatrixPath> {
    if m0.len() != coeffs.slice.len() {
        return Err(Error::DimensionMismatch {
            expected: coeffs.slice.len(),
            got: m0.len(),
        });
    }
    let drifts: Vec<DMatrix<f64>> = (0..coeffs.len())
        .map(|i| {
            let a = coeffs.a(i);
            DMatrix::from_column_slice(a.len(), 1, a.as_slice())
        })
        .collect();
    rk4_on_grid(coeffs, 0, last_even(coeffs), DMatrix::from_column_slice(m0.len(), 1, m0), |i, y| {
        &coeffs.gamma[i] * y + &drifts[i]
    })
}

/// The mean's starting value: `psi` on the single-vertex types.
pub fn initial_mean(slice: &TypeSlice, psi: &[f64]) -> Vec<f64> {
    let mut m = vec![0.0; slice.len()];
    for (j, p) in psi.iter().enumerate() {
        m[slice.basis_rank(j)] = *p;
    }
    m
}

/// Directional derivative of the density solution in the direction
/// `(lambda, psi)`, by central differences with step `eps`. Returned at the
/// requested grid times.
pub fn mean_closed_form(spec: &ModelSpec, step: f64, horizon: f64, times: &[f64], eps: f64) -> Result<Vec<DVector<f64>>> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step {eps}")));
    }
    let slice = Arc::new(TypeSlice::new(spec.types(), spec.truncation)?);
    let shifted = |sign: f64| -> Result<DensityField> {
        let kernel = spec.kernel.axpy(sign * eps, &spec.lambda)?;
        let measure: Vec<f64> = spec
            .measure
            .mass()
            .iter()
            .zip(&spec.psi)
            .map(|(m, p)| m + sign * eps * p)
            .collect();
        solve_on_slice(slice.clone(), &kernel, &measure, step, horizon)
    };
    let plus = shifted(1.0)?;
    let minus = shifted(-1.0)?;
    times
        .iter()
        .map(|&t| {
            let p = plus.at_time(t)?;
            let m = minus.at_time(t)?;
            Ok(DVector::from_iterator(
                p.len(),
                p.iter().zip(m).map(|(a, b)| (a - b) / (2.0 * eps)),
            ))
        })
        .collect()
}

/// Closed-form covariance of the zero-started fluctuation at grid time `t`:
/// `Sigma_00 = t theta(mu, mu) / 2`,
/// `Sigma_0l = pi_l (|l| - 1 - t theta(l, mu))`,
/// `Sigma_lk = delta_lk pi_l + pi_l pi_k (t theta(l, k) - sum_i l_i k_i / mu_i)`.
pub fn covariance_closed_form(field: &DensityField, t: f64) -> Result<DMatrix<f64>> {
    let mu = field.measure();
    if let Some(i) = mu.iter().position(|m| !(*m > 0.0)) {
        return Err(Error::InvalidMeasure(format!("mu({i}) = {} is not positive", mu[i])));
    }
    let slice = field.slice();
    let kernel = field.kernel();
    let pi = field.at_time(t)?;
    let w = slice.len();
    let mut s = DMatrix::zeros(w, w);
    s[(0, 0)] = 0.5 * t * kernel.theta_unchecked(mu, mu);
    for l in 1..w {
        let cl = slice.coords(l);
        let v = pi[l] * (slice.norm(l) as f64 - 1.0 - t * kernel.theta_unchecked(cl, mu));
        s[(0, l)] = v;
        s[(l, 0)] = v;
        for k in l..w {
            let ck = slice.coords(k);
            let inner: f64 = cl.iter().zip(ck).zip(mu).map(|((a, b), m)| a * b / m).sum();
            let mut v = pi[l] * pi[k] * (t * kernel.theta_unchecked(cl, ck) - inner);
            if l == k {
                v += pi[l];
            }
            s[(l, k)] = v;
            s[(k, l)] = v;
        }
    }
    Ok(s)
}

/// `Sigma' = Gamma Sigma + Sigma Gamma^T + Phi` from `sigma0` (zero if absent).
pub fn covariance_lyapunov(coeffs: &SdeCoefficients, sigma0: Option<&DMatrix<f64>>) -> Result<MatrixPath> {
    let w = coeffs.slice.len();
    let start = sigma0.cloned().unwrap_or_else(|| DMatrix::zeros(w, w));
    if start.shape() != (w, w) {
        return Err(Error::DimensionMismatch {
            expected: w,
            got: start.nrows(),
        });
    }
    rk4_on_grid(coeffs, 0, last_even(coeffs), start, |i, s| {
        let gs = &coeffs.gamma[i] * s;
        &gs + gs.transpose() + &coeffs.phi[i]
    })
}

/// Solve `Y' = Gamma Y` from grid index `from` with `Y(from) = y0`; values
/// at `from, from + 2, ...` up to the last even offset.
pub fn transport(coeffs: &SdeCoefficients, from: usize, y0: DMatrix<f64>) -> Result<MatrixPath> {
    if from >= coeffs.len() {
        return Err(Error::InvalidArgument(format!("start index {from} beyond the grid")));
    }
    let end = from + (coeffs.len() - 1 - from) / 2 * 2;
    rk4_on_grid(coeffs, from, end, y0, |i, y| &coeffs.gamma[i] * y)
}

/// `Cov(U(t), U(s)) = Phi(t, s) Sigma(s)` for `s <= t`, where `Phi(t, s)`
/// is the fundamental matrix of `Gamma`. Entry `(l, k)` is
/// `E[U(l, t) U(k, s)]`.
pub fn two_time_covariance(coeffs: &SdeCoefficients, s: f64, t: f64, sigma_s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if s > t {
        return Err(Error::InvalidArgument(format!("s = {s} after t = {t}")));
    }
    let i = coeffs.index_of(s)?;
    let j = coeffs.index_of(t)?;
    if (j - i) % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "t - s = {} is not a multiple of the transport step {}",
            t - s,
            2.0 * coeffs.step()
        )));
    }
    let path = rk4_on_grid(coeffs, i, j, sigma_s.clone(), |k, y| &coeffs.gamma[k] * y)?;
    Ok(path.values.into_iter().last().expect("non-empty path"))
}

/// Where the initial measure fluctuation of simulated paths comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PsiMode {
    /// `psi ~ N(0, diag(mu) - mu mu^T)`, fresh per path.
    Iid,
    /// The configured `psi`, identical for all paths.
    Deterministic,
    /// `psi = 0` and a zero start: the homogeneous process.
    Zero,
}

/// `sqrt(mu_j) Z_j - mu_j sum_i sqrt(mu_i) Z_i` has covariance
/// `diag(mu) - mu mu^T` for a probability vector `mu`.
pub fn sample_multinomial_fluctuation<R: Rng + ?Sized>(mu: &[f64], rng: &mut R) -> Vec<f64> {
    let z: Vec<f64> = mu.iter().map(|_| rng.sample(StandardNormal)).collect();
    let s: f64 = mu.iter().zip(&z).map(|(m, z)| m.sqrt() * z).sum();
    mu.iter().zip(&z).map(|(m, z)| m.sqrt() * z - m * s).collect()
}

#[derive(Clone, Debug)]
pub struct SdePath {
    pub times: Vec<f64>,
    /// One rank-indexed vector per recorded time.
    pub values: Vec<Vec<f64>>,
}

/// Euler-Maruyama with step `dt` up to `horizon`, recording every
/// `record_every` steps (and the start).
pub fn simulate_limit_sde<R: Rng + ?Sized>(
    coeffs: &SdeCoefficients,
    x0: &[f64],
    psi: &[f64],
    dt: f64,
    horizon: f64,
    record_every: usize,
    rng: &mut R,
) -> Result<SdePath> {
    let w = coeffs.slice.len();
    if x0.len() != w || psi.len() != coeffs.slice.types() {
        return Err(Error::DimensionMismatch {
            expected: w,
            got: x0.len(),
        });
    }
    if !(dt > 0.0) || record_every == 0 {
        return Err(Error::InvalidArgument(format!("dt {dt}, record interval {record_every}")));
    }
    if horizon > coeffs.horizon() + 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "horizon {horizon} beyond the coefficient grid end {}",
            coeffs.horizon()
        )));
    }
    let steps = (horizon / dt).round() as usize;
    let psi = DVector::from_column_slice(psi);
    let mut x = DVector::from_column_slice(x0);
    let mut times = vec![0.0];
    let mut values = vec![x0.to_vec()];
    let sq = dt.sqrt();
    let mut xi = DVector::zeros(w);
    for n in 0..steps {
        let t = n as f64 * dt;
        let (gamma, g, a) = coeffs.interpolated(t, &psi);
        let mut dx = (&gamma * &x + a) * dt;
        if let Some(g) = g {
            for v in xi.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            dx += g * &xi * sq;
        } else {
            return Err(Error::InvalidArgument(
                "coefficients were built without square roots".into(),
            ));
        }
        x += dx;
        if (n + 1) % record_every == 0 {
            times.push((n + 1) as f64 * dt);
            values.push(x.iter().copied().collect());
        }
    }
    Ok(SdePath { times, values })
}

/// Independent paths in parallel; path `p` uses stream `p` of `seed`.
pub fn simulate_ensemble(
    coeffs: &SdeCoefficients,
    mode: PsiMode,
    dt: f64,
    horizon: f64,
    record_every: usize,
    paths: usize,
    seed: u64,
) -> Result<Vec<SdePath>> {
    (0..paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = replica_rng(seed, p as u64);
            let k = coeffs.slice.types();
            let psi = match mode {
                PsiMode::Iid => sample_multinomial_fluctuation(&coeffs.measure, &mut rng),
                PsiMode::Deterministic => coeffs.psi.clone(),
                PsiMode::Zero => vec![0.0; k],
            };
            let x0 = initial_mean(&coeffs.slice, &psi);
            simulate_limit_sde(coeffs, &x0, &psi, dt, horizon, record_every, &mut rng)
        })
        .collect()
}

/// Refuse time windows that come within `eps` of the critical time, where
/// the coefficients blow up.
pub fn check_critical_window(times: &[f64], critical: f64, eps: f64) -> Result<()> {
    match times.iter().find(|t| (**t - critical).abs() < eps) {
        Some(t) => Err(Error::InvalidArgument(format!(
            "time {t} lies within {eps} of the critical time {critical}"
        ))),
        None => Ok(()),
    }
}

/// Rows `t, rank, l1..lK, value` for a rank-indexed series.
pub fn write_vector_series_csv<W: Write>(
    slice: &TypeSlice,
    times: &[f64],
    values: &[DVector<f64>],
    mut out: W,
) -> Result<()> {
    let mut header = String::from("t,rank");
    for j in 1..=slice.types() {
        header.push_str(&format!(",l{j}"));
    }
    header.push_str(",value");
    writeln!(out, "{header}")?;
    for (t, v) in times.iter().zip(values) {
        for (r, x) in v.iter().enumerate() {
            let counts: Vec<String> = slice.vector(r).counts().iter().map(|c| c.to_string()).collect();
            writeln!(out, "{t},{r},{},{x:e}", counts.join(","))?;
        }
    }
    Ok(())
}

/// Row-major matrix with a rank header row and a rank column.
pub fn write_matrix_csv<W: Write>(m: &DMatrix<f64>, mut out: W) -> Result<()> {
    let header: Vec<String> = (0..m.ncols()).map(|c| format!("r{c}")).collect();
    writeln!(out, "rank,{}", header.join(","))?;
    for r in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|c| format!("{:e}", m[(r, c)])).collect();
        writeln!(out, "{r},{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mbp::critical_time;
    use crate::ode::solve_densities;
    use crate::rng::base_rng;
    use crate::stats;
    use crate::types::{Kernel, TypeMeasure};

    fn er_coeffs(n: usize, horizon: f64) -> (DensityField, SdeCoefficients) {
        let spec = ModelSpec::erdos_renyi(n, horizon);
        let field = solve_densities(&spec, 1e-3, horizon).unwrap();
        let c = build_coefficients(&field, &spec, CoefficientOptions::default()).unwrap();
        (field, c)
    }

    fn two_type_spec(horizon: f64) -> ModelSpec {
        ModelSpec::with_perturbations(
            Kernel::new(vec![vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap(),
            TypeMeasure::probability(vec![0.6, 0.4]).unwrap(),
            Kernel::perturbation(vec![vec![0.3, -0.1], vec![-0.1, 0.2]]).unwrap(),
            vec![0.2, -0.2],
            4,
            horizon,
        )
        .unwrap()
    }

    #[test]
    fn er_gamma_at_zero() {
        let (_, c) = er_coeffs(2, 0.1);
        let g = c.gamma(0);
        // ranks 0, (1), (2)
        assert_eq!(g.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0; 3]);
        assert_eq!((g[(1, 1)], g[(1, 2)]), (-1.0, 0.0));
        assert_eq!((g[(2, 1)], g[(2, 2)]), (1.0, -2.0));
    }

    #[test]
    fn er_phi_at_zero() {
        let (_, c) = er_coeffs(1, 0.1);
        let p = c.phi(0);
        let expected = [[0.5, -1.0], [-1.0, 2.0]];
        for r in 0..2 {
            for q in 0..2 {
                assert!((p[(r, q)] - expected[r][q]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn er_drift_vanishes() {
        let (_, c) = er_coeffs(6, 1.0);
        for i in 0..c.len() {
            assert_eq!(max_abs(&DMatrix::from_column_slice(7, 1, c.a(i).as_slice())), 0.0);
        }
    }

    #[test]
    fn phi_edge_entry_is_half_theta() {
        let spec = two_type_spec(0.5);
        let field = solve_densities(&spec, 1e-3, 0.5).unwrap();
        let c = build_coefficients(&field, &spec, CoefficientOptions::default()).unwrap();
        let half = 0.5 * spec.kernel.theta(spec.measure.mass(), spec.measure.mass()).unwrap();
        for i in (0..c.len()).step_by(50) {
            assert!((c.phi(i)[(0, 0)] - half).abs() < 1e-12);
        }
    }

    #[test]
    fn structural_invariants_hold() {
        let spec = two_type_spec(0.5);
        let field = solve_densities(&spec, 1e-3, 0.5).unwrap();
        let c = build_coefficients(&field, &spec, CoefficientOptions { stride: 10, square_roots: true }).unwrap();
        let r = c.check_invariants();
        assert!(r.holds(), "{r:?}");
        assert!(r.root_residual.is_some());
    }

    #[test]
    fn truncated_phi_is_marginal_of_larger_slice() {
        let spec4 = two_type_spec(0.3);
        let mut spec7 = spec4.clone();
        spec7.truncation = 7;
        let f4 = solve_densities(&spec4, 1e-3, 0.3).unwrap();
        let f7 = solve_densities(&spec7, 1e-3, 0.3).unwrap();
        let opts = CoefficientOptions { stride: 100, square_roots: false };
        let c4 = build_coefficients(&f4, &spec4, opts).unwrap();
        let c7 = build_coefficients(&f7, &spec7, opts).unwrap();
        let w = f4.slice().len();
        let last = c4.len() - 1;
        let p7 = c7.phi(last).view((0, 0), (w, w)).into_owned();
        assert!(max_abs(&(p7 - c4.phi(last))) < 1e-12);
    }

    #[test]
    fn stride_must_divide_grid() {
        let spec = ModelSpec::erdos_renyi(2, 0.1);
        let field = solve_densities(&spec, 1e-3, 0.1).unwrap();
        assert!(build_coefficients(&field, &spec, CoefficientOptions { stride: 3, square_roots: false }).is_err());
        assert!(build_coefficients(&field, &spec, CoefficientOptions { stride: 0, square_roots: false }).is_err());
    }

    #[test]
    fn er_closed_form_single_vertex_variance() {
        let (field, _) = er_coeffs(3, 1.0);
        for t in [0.0, 0.3, 0.7, 1.0] {
            let s = covariance_closed_form(&field, t).unwrap();
            let expected = (-t).exp() + (-2.0 * t).exp() * (t - 1.0);
            assert!((s[(1, 1)] - expected).abs() < 1e-10, "t={t}");
            assert!((s[(0, 0)] - t / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn closed_form_vanishes_at_zero() {
        let spec = two_type_spec(0.1);
        let field = solve_densities(&spec, 1e-3, 0.1).unwrap();
        let s = covariance_closed_form(&field, 0.0).unwrap();
        assert!(max_abs(&s) < 1e-15);
    }

    #[test]
    fn lyapunov_matches_closed_form() {
        let spec = two_type_spec(0.0);
        let tc = critical_time(&spec.kernel, &spec.measure).unwrap();
        let horizon = (0.8 * tc / 2e-3).floor() * 2e-3;
        let field = solve_densities(&spec, 1e-3, horizon).unwrap();
        let c = build_coefficients(&field, &spec, CoefficientOptions { stride: 1, square_roots: false }).unwrap();
        let path = covariance_lyapunov(&c, None).unwrap();
        let mut worst: f64 = 0.0;
        for (t, s) in path.times.iter().zip(&path.values) {
            let closed = covariance_closed_form(&field, *t).unwrap();
            worst = worst.max(max_abs(&(s - closed)));
            assert!(max_abs(&(s - s.transpose())) < 1e-12);
        }
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn trivial_coefficients_keep_lyapunov_constant() {
        let (_, mut c) = er_coeffs(2, 0.2);
        for i in 0..c.len() {
            c.gamma[i].fill(0.0);
            c.phi[i].fill(0.0);
        }
        let s0 = DMatrix::from_fn(3, 3, |r, q| (r + q) as f64);
        let path = covariance_lyapunov(&c, Some(&s0)).unwrap();
        assert!(path.values.iter().all(|s| s == &s0));
    }

    #[test]
    fn mean_ode_matches_finite_differences() {
        let spec = two_type_spec(0.0);
        let tc = critical_time(&spec.kernel, &spec.measure).unwrap();
        let horizon = (0.8 * tc / 2e-3).floor() * 2e-3;
        let field = solve_densities(&spec, 1e-3, horizon).unwrap();
        let c = build_coefficients(&field, &spec, CoefficientOptions { stride: 1, square_roots: false }).unwrap();
        let m0 = initial_mean(field.slice(), &spec.psi);
        let ode = mean_field(&c, &m0).unwrap();
        let fd = mean_closed_form(&spec, 1e-3, horizon, &ode.times, 1e-5).unwrap();
        let scale = ode.values.iter().map(max_abs).fold(0.0, f64::max);
        let diff = ode
            .values
            .iter()
            .zip(&fd)
            .map(|(a, b)| max_abs(&(a - DMatrix::from_column_slice(b.len(), 1, b.as_slice()))))
            .fold(0.0, f64::max);
        assert!(diff / scale < 1e-4, "{}", diff / scale);
        // single-vertex coordinates start at psi
        assert_eq!(ode.values[0][(field.slice().basis_rank(0), 0)], 0.2);
    }

    #[test]
    fn zero_perturbation_has_zero_mean() {
        let (_, c) = er_coeffs(4, 0.5);
        let m = mean_field(&c, &[0.0; 5]).unwrap();
        assert!(m.values.iter().all(|v| max_abs(v) == 0.0));
    }

    #[test]
    fn two_time_edge_cases() {
        let (field, c) = er_coeffs(4, 0.6);
        let s = covariance_closed_form(&field, 0.3).unwrap();
        assert_eq!(two_time_covariance(&c, 0.3, 0.3, &s).unwrap(), s);
        let zero = DMatrix::zeros(5, 5);
        assert_eq!(two_time_covariance(&c, 0.0, 0.6, &zero).unwrap(), zero);
        assert!(two_time_covariance(&c, 0.6, 0.3, &s).is_err());
        assert!(two_time_covariance(&c, 0.3, 0.301, &s).is_err());
    }

    #[test]
    fn degenerate_sde_is_constant() {
        let (_, mut c) = er_coeffs(2, 0.2);
        for i in 0..c.len() {
            c.gamma[i].fill(0.0);
            c.g.as_mut().unwrap()[i].fill(0.0);
        }
        let mut rng = base_rng(1);
        let path = simulate_limit_sde(&c, &[1.0, 2.0, 3.0], &[0.0], 1e-3, 0.2, 10, &mut rng).unwrap();
        assert!(path.values.iter().all(|v| v == &vec![1.0, 2.0, 3.0]));
        assert_eq!(path.times.len(), 21);
    }

    #[test]
    fn multinomial_fluctuation_covariance() {
        let mu = [0.6, 0.4];
        let mut rng = base_rng(2);
        let draws: Vec<Vec<f64>> = (0..50_000).map(|_| sample_multinomial_fluctuation(&mu, &mut rng)).collect();
        for d in &draws {
            assert!((d[0] + d[1]).abs() < 1e-12);
        }
        let a: Vec<f64> = draws.iter().map(|d| d[0]).collect();
        let v = stats::variance(&a);
        assert!((v - 0.24).abs() < 4.0 * 0.24 * (2.0 / 50_000f64).sqrt());
    }

    #[test]
    fn ensemble_is_thread_count_independent() {
        let (_, c) = er_coeffs(2, 0.1);
        let a = simulate_ensemble(&c, PsiMode::Zero, 1e-3, 0.1, 50, 8, 9).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| simulate_ensemble(&c, PsiMode::Zero, 1e-3, 0.1, 50, 8, 9).unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.values, y.values);
        }
    }

    #[test]
    fn ensemble_moments_match_mean_and_covariance() {
        let spec = two_type_spec(0.4);
        let field = solve_densities(&spec, 1e-3, 0.4).unwrap();
        let c = build_coefficients(&field, &spec, CoefficientOptions::default()).unwrap();
        let paths = simulate_ensemble(&c, PsiMode::Deterministic, 1e-3, 0.4, 400, 10_000, 11).unwrap();
        let m0 = initial_mean(field.slice(), &spec.psi);
        let mean = mean_field(&c, &m0).unwrap();
        let m_end = mean.at(0.4).unwrap();
        let sigma = covariance_closed_form(&field, 0.4).unwrap();
        let w = field.slice().len();
        for r in 0..w {
            let xs: Vec<f64> = paths.iter().map(|p| p.values[1][r]).collect();
            let se = stats::std_error(&xs);
            assert!((stats::mean(&xs) - m_end[(r, 0)]).abs() < 4.0 * se + 1e-12, "mean rank {r}");
            for q in r..w {
                let ys: Vec<f64> = paths.iter().map(|p| p.values[1][q]).collect();
                let cov = stats::covariance(&xs, &ys);
                let cse = stats::covariance_std_error(&xs, &ys);
                assert!((cov - sigma[(r, q)]).abs() < 4.0 * cse + 1e-3 * sigma[(r, q)].abs() + 1e-12, "cov ({r},{q}): {cov} vs {}", sigma[(r, q)]);
            }
        }
    }

    #[test]
    fn ensemble_two_time_covariance() {
        let (field, c) = er_coeffs(4, 0.6);
        let paths = simulate_ensemble(&c, PsiMode::Zero, 1e-3, 0.6, 300, 10_000, 12).unwrap();
        let s = covariance_closed_form(&field, 0.3).unwrap();
        let cross = two_time_covariance(&c, 0.3, 0.6, &s).unwrap();
        for l in 1..5 {
            for k in 1..5 {
                let at_t: Vec<f64> = paths.iter().map(|p| p.values[2][l]).collect();
                let at_s: Vec<f64> = paths.iter().map(|p| p.values[1][k]).collect();
                let cov = stats::covariance(&at_t, &at_s);
                let se = stats::covariance_std_error(&at_t, &at_s);
                assert!((cov - cross[(l, k)]).abs() < 4.0 * se + 1e-12, "({l},{k}): {cov} vs {}", cross[(l, k)]);
            }
        }
    }

    #[test]
    fn marginals_are_gaussian() {
        let (_, c) = er_coeffs(2, 0.5);
        let paths = simulate_ensemble(&c, PsiMode::Zero, 1e-3, 0.5, 500, 10_000, 13).unwrap();
        for r in 0..3 {
            let xs: Vec<f64> = paths.iter().map(|p| p.values[1][r]).collect();
            assert!(stats::skewness(&xs).abs() <= 0.1, "skew rank {r}");
            assert!(stats::excess_kurtosis(&xs).abs() <= 0.2, "kurtosis rank {r}");
        }
    }

    #[test]
    fn critical_window_is_enforced() {
        assert!(check_critical_window(&[0.5, 0.98], 1.0, 0.05).is_err());
        assert!(check_critical_window(&[0.5, 0.94, 1.06], 1.0, 0.05).is_ok());
    }

    #[test]
    fn csv_layouts() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let mut buf = Vec::new();
        write_matrix_csv(&m, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next(), Some("rank,r0,r1"));
        assert_eq!(text.lines().nth(2), Some("1,3e0,4e0"));
        let slice = TypeSlice::new(1, 1).unwrap();
        let mut buf = Vec::new();
        write_vector_series_csv(&slice, &[0.5], &[DVector::from_vec(vec![0.25, 1.0])], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().collect::<Vec<_>>(), vec!["t,rank,l1,value", "0.5,0,0,2.5e-1", "0.5,1,1,1e0"]);
    }
}
