//! Minimum spanning trees of graphon-sampled dense graphs: sampling,
//! Kruskal, the component-count integral, the limit constant, the
//! asymptotic variance and the Monte Carlo CLT experiment.
//!
//! Model [0] is the complete graph with edge `{i, j}` weighted
//! `Exp(kappa_n(x_i, x_j))`; model [1] keeps edge `{i, j}` with probability
//! `kappa_n(x_i, x_j)` and weights it `Exp(1)`.

use std::io::Write;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::er;
use crate::error::{Error, Result};
use crate::graph::finite_kernel;
use crate::model::ModelSpec;
use crate::ode::{solve_on_slice, DensityField, DEFAULT_STEP};
use crate::rng::{replica_rng, Rng as ReplicaRng};
use crate::sde::{build_coefficients, covariance_closed_form, transport, CoefficientOptions};
use crate::stats;
use crate::types::{Kernel, TypeSlice};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum DenseModel {
    /// Complete graph, type-dependent exponential rates.
    Exponential,
    /// Bernoulli(`kappa_n`) edges with `Exp(1)` weights.
    Bernoulli,
}

impl std::str::FromStr for DenseModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "0" | "exponential" => Ok(DenseModel::Exponential),
            "1" | "bernoulli" => Ok(DenseModel::Bernoulli),
            other => Err(Error::Config(format!("unknown dense model {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DenseGraphSample {
    pub n: usize,
    /// Latent uniforms; the type of `v` is the interval of the measure's
    /// partition of `(0, 1]` that contains `uniforms[v]`.
    pub uniforms: Vec<f64>,
    pub types: Vec<usize>,
    pub edges: Vec<(u32, u32, f64)>,
    /// Edges heavier than this were not generated.
    pub threshold: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MstResult {
    /// `+inf` when the graph is disconnected.
    pub weight: f64,
    pub edges_used: usize,
    pub connected: bool,
    /// Heaviest accepted edge.
    pub bottleneck: f64,
}

/// Type of a latent uniform under the partition `I_j = (sum_{i<j} mu_i, sum_{i<=j} mu_i]`.
pub fn type_of(u: f64, mu: &[f64]) -> usize {
    let mut acc = 0.0;
    for (j, m) in mu.iter().enumerate() {
        acc += m;
        if u <= acc {
            return j;
        }
    }
    mu.len() - 1
}

fn check_model(kernel: &Kernel, model: DenseModel) -> Result<()> {
    if model == DenseModel::Bernoulli && kernel.row_major().iter().any(|&p| !(p > 0.0 && p < 1.0)) {
        return Err(Error::InvalidKernel(
            "model [1] needs every kernel entry in (0, 1)".into(),
        ));
    }
    Ok(())
}

fn latent_types<R: Rng + ?Sized>(n: usize, mu: &[f64], rng: &mut R) -> (Vec<f64>, Vec<usize>) {
    // uniforms on (0, 1]
    let uniforms: Vec<f64> = (0..n).map(|_| 1.0 - rng.random::<f64>()).collect();
    let types = uniforms.iter().map(|&u| type_of(u, mu)).collect();
    (uniforms, types)
}

/// Every edge of the model (all pairs for model [0]).
pub fn sample_dense_graph<R: Rng + ?Sized>(spec: &ModelSpec, n: usize, model: DenseModel, rng: &mut R) -> Result<DenseGraphSample> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 vertices, got {n}")));
    }
    let kernel = finite_kernel(spec, n)?;
    check_model(&kernel, model)?;
    let (uniforms, types) = latent_types(n, spec.measure.mass(), rng);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let k = kernel.get(types[i], types[j]);
            match model {
                DenseModel::Exponential => {
                    if k > 0.0 {
                        edges.push((i as u32, j as u32, exp1(rng) / k));
                    }
                }
                DenseModel::Bernoulli => {
                    if rng.random::<f64>() < k {
                        edges.push((i as u32, j as u32, exp1(rng)));
                    }
                }
            }
        }
    }
    Ok(DenseGraphSample {
        n,
        uniforms,
        types,
        edges,
        threshold: None,
    })
}

fn exp1<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    -(1.0 - rng.random::<f64>()).ln()
}

/// Only the edges of weight at most `threshold`, generated by geometric
/// skipping over the pairs of each type block. The law of the kept edges
/// equals that of the full model restricted to weights `<= threshold`.
pub fn sample_thresholded<R: Rng + ?Sized>(
    spec: &ModelSpec,
    n: usize,
    model: DenseModel,
    threshold: f64,
    rng: &mut R,
) -> Result<DenseGraphSample> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 vertices, got {n}")));
    }
    if !(threshold > 0.0) {
        return Err(Error::InvalidArgument(format!("threshold {threshold}")));
    }
    let kernel = finite_kernel(spec, n)?;
    check_model(&kernel, model)?;
    let k = kernel.dim();
    let (uniforms, types) = latent_types(n, spec.measure.mass(), rng);
    let mut blocks: Vec<Vec<u32>> = vec![Vec::new(); k];
    for (v, &t) in types.iter().enumerate() {
        blocks[t].push(v as u32);
    }
    // per type pair: log of the per-pair miss probability, and the
    // truncated-weight sampler parameters
    let mut ln_miss = vec![0.0; k * k];
    let mut rate = vec![0.0; k * k];
    for a in 0..k {
        for b in 0..k {
            let kab = kernel.get(a, b);
            let (lq, r) = match model {
                DenseModel::Exponential => (-kab * threshold, kab),
                DenseModel::Bernoulli => ((-kab * -(-threshold).exp_m1()).ln_1p(), 1.0),
            };
            ln_miss[a * k + b] = lq;
            rate[a * k + b] = r;
        }
    }
    let mut edges = Vec::new();
    for a in 0..k {
        for (pos, &u) in blocks[a].iter().enumerate() {
            for b in a..k {
                let lq = ln_miss[a * k + b];
                if lq == 0.0 {
                    continue;
                }
                let r = rate[a * k + b];
                let cap = (r * threshold).exp_m1();
                let targets = if a == b { &blocks[b][pos + 1..] } else { &blocks[b][..] };
                let mut j = 0usize;
                loop {
                    let skip = if lq == f64::NEG_INFINITY {
                        0.0
                    } else {
                        ((1.0 - rng.random::<f64>()).ln() / lq).floor()
                    };
                    if skip >= (targets.len() - j.min(targets.len())) as f64 {
                        break;
                    }
                    j += skip as usize;
                    // Exp(r) conditioned on <= threshold
                    let x: f64 = rng.random();
                    let w = -(-x * cap / (1.0 + cap)).ln_1p() / r;
                    edges.push((u, targets[j], w.min(threshold)));
                    j += 1;
                }
            }
        }
    }
    Ok(DenseGraphSample {
        n,
        uniforms,
        types,
        edges,
        threshold: Some(threshold),
    })
}

fn find(parent: &mut [u32], v: u32) -> u32 {
    let mut x = v;
    while parent[x as usize] != x {
        let p = parent[x as usize];
        parent[x as usize] = parent[p as usize];
        x = p;
    }
    x
}

fn sorted_edges(sample: &DenseGraphSample) -> Result<Vec<(u32, u32, f64)>> {
    let mut edges = sample.edges.clone();
    edges.sort_by(|a, b| a.2.total_cmp(&b.2));
    if let Some(w) = edges.windows(2).find(|w| w[0].2 == w[1].2) {
        return Err(Error::Invariant(format!("tied edge weights {}", w[0].2)));
    }
    Ok(edges)
}

/// Kruskal's greedy acceptance on the sorted edge list, returning the MST
/// weight and the component-count integral in one pass.
fn kruskal_pass(n: usize, edges: &[(u32, u32, f64)]) -> (MstResult, f64) {
    let mut parent: Vec<u32> = (0..n as u32).collect();
    let mut size = vec![1u32; n];
    let mut components = n;
    let mut weight = 0.0;
    let mut integral = 0.0;
    let mut last = 0.0;
    let mut used = 0;
    let mut bottleneck = 0.0;
    for &(u, v, w) in edges {
        if components == 1 {
            break;
        }
        let (ru, rv) = (find(&mut parent, u), find(&mut parent, v));
        if ru == rv {
            continue;
        }
        integral += (components - 1) as f64 * (w - last);
        last = w;
        let (big, small) = if size[ru as usize] >= size[rv as usize] { (ru, rv) } else { (rv, ru) };
        parent[small as usize] = big;
        size[big as usize] += size[small as usize];
        components -= 1;
        weight += w;
        used += 1;
        bottleneck = w;
    }
    let connected = components == 1;
    (
        MstResult {
            weight: if connected { weight } else { f64::INFINITY },
            edges_used: used,
            connected,
            bottleneck,
        },
        integral,
    )
}

pub fn kruskal_weight(sample: &DenseGraphSample) -> Result<MstResult> {
    Ok(kruskal_pass(sample.n, &sorted_edges(sample)?).0)
}

/// `int_0^inf (N(G_w) - 1) dw`, where `G_w` keeps the edges of weight
/// `<= w`; `N` drops by one at each merging edge.
pub fn weight_via_component_integral(sample: &DenseGraphSample) -> Result<f64> {
    let (mst, integral) = kruskal_pass(sample.n, &sorted_edges(sample)?);
    if !mst.connected {
        return Err(Error::Disconnected);
    }
    Ok(integral)
}

/// `2 (ln n + 2) / (n min_x sum_y kappa(x, y) mu(y))`: well past the
/// connectivity threshold of the sparse graph that the MST lives on.
pub fn initial_threshold(kernel: &Kernel, mu: &[f64], n: usize) -> f64 {
    let k = kernel.dim();
    let degree = (0..k)
        .map(|x| (0..k).map(|y| kernel.get(x, y) * mu[y]).sum::<f64>())
        .fold(f64::INFINITY, f64::min);
    2.0 * ((n as f64).ln() + 2.0) / (n as f64 * degree.max(1e-300))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ReplicaWeight {
    pub replica: u64,
    pub weight: f64,
    /// `|integral - kruskal| / kruskal`.
    pub identity_residual: f64,
    pub threshold: f64,
    pub connected: bool,
}

/// One replica: thresholded sampling, doubling the threshold (and
/// regenerating from the replica's own stream) until the kept graph is
/// connected or every edge is kept.
pub fn replica_weight(spec: &ModelSpec, n: usize, model: DenseModel, seed: u64, replica: u64) -> Result<ReplicaWeight> {
    let kernel = finite_kernel(spec, n)?;
    let mut threshold = initial_threshold(&kernel, spec.measure.mass(), n);
    loop {
        let mut rng: ReplicaRng = replica_rng(seed, replica);
        let sample = sample_thresholded(spec, n, model, threshold, &mut rng)?;
        let (mst, integral) = kruskal_pass(n, &sorted_edges(&sample)?);
        let saturated = match model {
            DenseModel::Exponential => false,
            DenseModel::Bernoulli => (-threshold).exp() == 0.0,
        };
        if mst.connected || saturated {
            let residual = if mst.connected {
                (integral - mst.weight).abs() / mst.weight
            } else {
                0.0
            };
            return Ok(ReplicaWeight {
                replica,
                weight: mst.weight,
                identity_residual: residual,
                threshold,
                connected: mst.connected,
            });
        }
        threshold *= 2.0;
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MstExperiment {
    pub n: usize,
    pub model: DenseModel,
    pub seed: u64,
    pub replicas: Vec<ReplicaWeight>,
    /// Disconnected replicas (model [1] only), excluded from the moments.
    pub discarded: usize,
    pub mean: f64,
    pub mean_std_error: f64,
    /// Sample variance of `sqrt(n) (W - mean)`.
    pub scaled_variance: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    pub max_identity_residual: f64,
}

pub fn mst_clt_experiment(spec: &ModelSpec, n: usize, replicas: usize, model: DenseModel, seed: u64) -> Result<MstExperiment> {
    if replicas < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 replicas, got {replicas}")));
    }
    let runs: Vec<ReplicaWeight> = (0..replicas as u64)
        .into_par_iter()
        .map(|r| replica_weight(spec, n, model, seed, r))
        .collect::<Result<_>>()?;
    let weights: Vec<f64> = runs.iter().filter(|r| r.connected).map(|r| r.weight).collect();
    if weights.len() < 2 {
        return Err(Error::Disconnected);
    }
    Ok(MstExperiment {
        n,
        model,
        seed,
        discarded: runs.len() - weights.len(),
        mean: stats::mean(&weights),
        mean_std_error: stats::std_error(&weights),
        scaled_variance: n as f64 * stats::variance(&weights),
        skewness: stats::skewness(&weights),
        excess_kurtosis: stats::excess_kurtosis(&weights),
        max_identity_residual: runs.iter().map(|r| r.identity_residual).fold(0.0, f64::max),
        replicas: runs,
    })
}

pub fn write_replicas_csv<W: Write>(exp: &MstExperiment, mut out: W) -> Result<()> {
    writeln!(out, "replica,seed,weight,identity_residual,threshold")?;
    for r in &exp.replicas {
        writeln!(out, "{},{},{},{:e},{}", r.replica, exp.seed, r.weight, r.identity_residual, r.threshold)?;
    }
    Ok(())
}

/// Bound on `int_T^inf sum_{l != 0} pi(l, t) dt` by the extinction
/// probability of a single-type process with the smallest kernel entry:
/// `exp(-a T rho(a T)) / (a rho(a T))`, infinite when `a = 0` or `aT <= 1`.
pub fn time_tail_bound(kernel: &Kernel, tmax: f64) -> f64 {
    let a = kernel.min_entry();
    if !(a > 0.0) || a * tmax <= 1.0 {
        return f64::INFINITY;
    }
    let r = er::rho(a * tmax, er::DEFAULT_TOL);
    (-a * tmax * r).exp() / (a * r)
}

/// `int_0^T sum_{|l| = k} pi(l, t) dt` for `k = 1..=N` by Simpson's rule
/// (trapezoid on the last interval when the step count is odd).
pub fn size_layer_integrals(field: &DensityField) -> Vec<f64> {
    let slice = field.slice();
    let n = field.len();
    let h = field.step();
    let mut layers = vec![0.0; slice.truncation()];
    let weight = |i: usize| -> f64 {
        let steps = n - 1;
        let even = steps - steps % 2;
        if i > even {
            // trapezoid on the leftover interval
            return h / 2.0;
        }
        let simpson = if i == 0 || i == even {
            h / 3.0
        } else if i % 2 == 1 {
            4.0 * h / 3.0
        } else {
            2.0 * h / 3.0
        };
        simpson + if i == even && even < steps { h / 2.0 } else { 0.0 }
    };
    for i in 0..n {
        let w = weight(i);
        for (r, p) in field.at_index(i).iter().enumerate().skip(1) {
            layers[slice.norm(r) as usize - 1] += w * p;
        }
    }
    layers
}

#[derive(Clone, Debug, Serialize)]
pub struct LimitConstant {
    pub value: f64,
    /// Integral over the slice, before the size-tail correction.
    pub slice_integral: f64,
    /// Estimate of the sizes beyond the slice, from the last layer
    /// assuming `k^-3` decay.
    pub size_tail: f64,
    pub time_tail_bound: f64,
    pub layers: Vec<f64>,
}

/// `K = int_0^inf sum_{l != 0} pi(l, t) dt`.
pub fn limit_constant(kernel: &Kernel, mu: &[f64], kmax: usize, tmax: f64, tol: f64) -> Result<LimitConstant> {
    let bound = time_tail_bound(kernel, tmax);
    if bound > tol {
        return Err(Error::TailTooLarge { bound, tol });
    }
    let slice = Arc::new(TypeSlice::new(kernel.dim(), kmax)?);
    let field = solve_on_slice(slice, kernel, mu, DEFAULT_STEP, tmax)?;
    let layers = size_layer_integrals(&field);
    let slice_integral: f64 = layers.iter().sum();
    let size_tail = layers.last().copied().unwrap_or(0.0) * kmax as f64 / 2.0;
    Ok(LimitConstant {
        value: slice_integral + size_tail,
        slice_integral,
        size_tail,
        time_tail_bound: bound,
        layers,
    })
}

/// Smallest multiple of 0.5, at least twice the critical time, with the
/// time-tail bound below `1e-5`; `20 t_c` when no bound is available.
pub fn default_tmax(kernel: &Kernel, critical: f64) -> f64 {
    let mut t = (2.0 * critical * 2.0).ceil() / 2.0;
    while t < 20.0 * critical.max(1.0) {
        if time_tail_bound(kernel, t) <= 1e-5 {
            return t;
        }
        t += 0.5;
    }
    (20.0 * critical * 2.0).ceil() / 2.0
}

#[derive(Clone, Debug, Serialize)]
pub struct SigmaInfinity {
    pub value: f64,
    pub truncation: usize,
    pub tmax: f64,
    pub grid_step: f64,
    /// Largest vertex share of the outermost size layer over the grid.
    pub last_layer_mass: f64,
    /// `sum_{l != 0} pi(l, tmax)`.
    pub terminal_density: f64,
    pub time_tail_bound: f64,
}

/// `sum_{l, k != 0} int int_{[0, T]^2} Cov(U(l, t), U(k, s)) ds dt` by the
/// trapezoid rule on a uniform grid, the two-time covariance being
/// transported from the closed-form one-time covariance.
pub fn sigma_infinity(kernel: &Kernel, mu: &[f64], truncation: usize, tmax: f64, grid_step: f64) -> Result<SigmaInfinity> {
    let stride_f = grid_step / 2.0 / DEFAULT_STEP;
    let stride = stride_f.round() as usize;
    if stride == 0 || (stride_f - stride as f64).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "grid step {grid_step} must be an even multiple of {DEFAULT_STEP}"
        )));
    }
    let cells = (tmax / grid_step).round() as usize;
    if cells == 0 || (cells as f64 * grid_step - tmax).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("tmax {tmax} is not a multiple of {grid_step}")));
    }
    let spec = ModelSpec::new(
        kernel.clone(),
        crate::types::TypeMeasure::probability(mu.to_vec())?,
        truncation,
        tmax,
    )?;
    let slice = Arc::new(TypeSlice::new(kernel.dim(), truncation)?);
    let field = solve_on_slice(slice.clone(), kernel, mu, DEFAULT_STEP, tmax)?;
    let coeffs = build_coefficients(&field, &spec, CoefficientOptions { stride, square_roots: false })?;
    let w = slice.len();
    let ones = DMatrix::from_fn(w, 1, |r, _| if r == 0 { 0.0 } else { 1.0 });
    let trap = |q: usize| if q == 0 || q == cells { 0.5 } else { 1.0 };

    let total: f64 = (0..=cells)
        .into_par_iter()
        .map(|q| -> Result<f64> {
            let t = coeffs.times()[2 * q];
            let sigma = covariance_closed_form(&field, t)?;
            let path = transport(&coeffs, 2 * q, &sigma * &ones)?;
            let mut acc = 0.0;
            for (m, y) in path.values.iter().enumerate() {
                let f = (ones.transpose() * y)[(0, 0)];
                let sym = if m == 0 { 1.0 } else { 2.0 };
                acc += sym * trap(q) * trap(q + m) * f;
            }
            Ok(acc)
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .sum();

    let last_layer_mass = (0..field.len())
        .map(|i| {
            field
                .at_index(i)
                .iter()
                .enumerate()
                .filter(|(r, _)| slice.norm(*r) as usize == truncation)
                .map(|(_, p)| truncation as f64 * p)
                .sum::<f64>()
        })
        .fold(0.0, f64::max);
    Ok(SigmaInfinity {
        value: total * grid_step * grid_step,
        truncation,
        tmax,
        grid_step,
        last_layer_mass,
        terminal_density: field.at_index(field.len() - 1)[1..].iter().sum(),
        time_tail_bound: time_tail_bound(kernel, tmax),
    })
}
