//! Event-driven simulation of the dynamic inhomogeneous random multigraph
//! with exact component-type tracking.
//!
//! Every unordered vertex pair `{u, v}` receives edges at the times of an
//! independent Poisson process of rate `kappa_n(x_u, x_v) / n`. By
//! superposition it is enough to run one exponential clock at the total
//! rate, pick a type pair proportionally to its aggregate rate, then a
//! uniform distinct vertex pair within those types.

use std::io::Write;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::ode::{macroscopic_limits, solve_on_slice, DensityField, MacroLimits, DEFAULT_STEP};
use crate::rng::replica_rng;
use crate::stats;
use crate::types::{Kernel, TypeSlice};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AssignmentMode {
    /// Types drawn independently from `mu`.
    Iid,
    /// Type counts are the largest-remainder rounding of `n mu`.
    Proportional,
}

impl std::str::FromStr for AssignmentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iid" => Ok(AssignmentMode::Iid),
            "proportional" => Ok(AssignmentMode::Proportional),
            other => Err(Error::Config(format!("unknown assignment mode {other:?}"))),
        }
    }
}

/// Realized vertex types.
#[derive(Clone, Debug)]
pub struct TypeAssignment {
    pub mode: AssignmentMode,
    pub types: Vec<usize>,
    /// `mu_n(k) = n_k / n`.
    pub mu_n: Vec<f64>,
    /// `sqrt(n) (mu_n - mu)`.
    pub psi_n: Vec<f64>,
}

impl TypeAssignment {
    pub fn draw<R: Rng + ?Sized>(n: usize, mu: &[f64], mode: AssignmentMode, rng: &mut R) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 vertices, got {n}")));
        }
        let k = mu.len();
        let types = match mode {
            AssignmentMode::Iid => {
                let total: f64 = mu.iter().sum();
                (0..n)
                    .map(|_| {
                        let u = rng.random::<f64>() * total;
                        let mut acc = 0.0;
                        mu.iter()
                            .position(|m| {
                                acc += m;
                                u < acc
                            })
                            .unwrap_or(k - 1)
                    })
                    .collect()
            }
            AssignmentMode::Proportional => {
                let counts = largest_remainder(n, mu);
                counts.iter().enumerate().flat_map(|(j, &c)| std::iter::repeat_n(j, c)).collect()
            }
        };
        Self::from_types(types, mu, mode)
    }

    pub fn from_types(types: Vec<usize>, mu: &[f64], mode: AssignmentMode) -> Result<Self> {
        let n = types.len();
        let k = mu.len();
        if n < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 vertices, got {n}")));
        }
        let mut counts = vec![0usize; k];
        for &t in &types {
            if t >= k {
                return Err(Error::InvalidArgument(format!("vertex type {t} with K = {k}")));
            }
            counts[t] += 1;
        }
        let mu_n: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
        let psi_n = mu_n.iter().zip(mu).map(|(a, b)| (n as f64).sqrt() * (a - b)).collect();
        Ok(TypeAssignment {
            mode,
            types,
            mu_n,
            psi_n,
        })
    }
}

/// Integer counts summing to `n`, each within one of `n mu(k)`.
pub fn largest_remainder(n: usize, mu: &[f64]) -> Vec<usize> {
    let total: f64 = mu.iter().sum();
    let exact: Vec<f64> = mu.iter().map(|m| n as f64 * m / total).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..mu.len()).collect();
    // largest fractional part first; ties to the lower type index
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &j in order.iter().take(n.saturating_sub(assigned)) {
        counts[j] += 1;
    }
    counts
}

/// `kappa_n = kappa + lambda / sqrt(n)`, which must stay non-negative.
pub fn finite_kernel(spec: &ModelSpec, n: usize) -> Result<Kernel> {
    let kn = spec.kernel.axpy(1.0 / (n as f64).sqrt(), &spec.lambda)?;
    if kn.min_entry() < 0.0 {
        return Err(Error::InvalidKernel(format!(
            "kernel plus fluctuation has a negative entry at n = {n}"
        )));
    }
    Ok(kn)
}

/// Component-count, largest component, its surplus and its type counts.
#[derive(Clone, Debug, PartialEq)]
pub struct Macroscopic {
    pub components: usize,
    pub largest: usize,
    pub surplus: u64,
    pub largest_types: Vec<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryRow {
    pub t: f64,
    pub event: u64,
    pub components: usize,
    pub largest: usize,
    pub surplus: u64,
    pub edges: u64,
}

#[derive(Clone, Debug)]
struct PairRate {
    a: usize,
    b: usize,
    rate: f64,
}

#[derive(Clone, Debug)]
pub struct GraphState {
    n: usize,
    k: usize,
    types: Vec<usize>,
    by_type: Vec<Vec<u32>>,
    parent: Vec<u32>,
    size: Vec<u32>,
    type_counts: Vec<u32>,
    internal: Vec<u64>,
    edges: u64,
    events: u64,
    t: f64,
    components: usize,
    largest: u32,
    pairs: Vec<PairRate>,
    total_rate: f64,
    assignment: TypeAssignment,
}

impl GraphState {
    pub fn init(n: usize, spec: &ModelSpec, mode: AssignmentMode, rng: &mut impl Rng) -> Result<Self> {
        let assignment = TypeAssignment::draw(n, spec.measure.mass(), mode, rng)?;
        let kernel = finite_kernel(spec, n)?;
        Self::with_assignment(assignment, &kernel)
    }

    pub fn with_assignment(assignment: TypeAssignment, kernel: &Kernel) -> Result<Self> {
        let n = assignment.types.len();
        let k = kernel.dim();
        if assignment.mu_n.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: assignment.mu_n.len(),
            });
        }
        if n > u32::MAX as usize {
            return Err(Error::InvalidArgument(format!("{n} vertices is too many")));
        }
        let mut by_type = vec![Vec::new(); k];
        let mut type_counts = vec![0u32; n * k];
        for (v, &t) in assignment.types.iter().enumerate() {
            by_type[t].push(v as u32);
            type_counts[v * k + t] = 1;
        }
        let mut pairs = Vec::new();
        for a in 0..k {
            for b in a..k {
                let (na, nb) = (by_type[a].len() as f64, by_type[b].len() as f64);
                let count = if a == b { na * (na - 1.0) / 2.0 } else { na * nb };
                let rate = kernel.get(a, b) * count / n as f64;
                if rate > 0.0 {
                    pairs.push(PairRate { a, b, rate });
                }
            }
        }
        let total_rate = pairs.iter().map(|p| p.rate).sum();
        Ok(GraphState {
            n,
            k,
            types: assignment.types.clone(),
            by_type,
            parent: (0..n as u32).collect(),
            size: vec![1; n],
            type_counts,
            internal: vec![0; n],
            edges: 0,
            events: 0,
            t: 0.0,
            components: n,
            largest: 0,
            pairs,
            total_rate,
            assignment,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn edges(&self) -> u64 {
        self.edges
    }

    pub fn events(&self) -> u64 {
        self.events
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn total_rate(&self) -> f64 {
        self.total_rate
    }

    pub fn assignment(&self) -> &TypeAssignment {
        &self.assignment
    }

    pub fn vertex_type(&self, v: usize) -> usize {
        self.types[v]
    }

    pub fn find(&mut self, v: usize) -> usize {
        let mut x = v as u32;
        while self.parent[x as usize] != x {
            let p = self.parent[x as usize];
            self.parent[x as usize] = self.parent[p as usize];
            x = p;
        }
        x as usize
    }

    pub fn same_component(&mut self, u: usize, v: usize) -> bool {
        self.find(u) == self.find(v)
    }

    /// Run all arrivals in `(t, target]`. The clock is memoryless, so the
    /// pending arrival beyond `target` is discarded.
    pub fn advance_to<R: Rng + ?Sized>(&mut self, target: f64, rng: &mut R) -> Result<()> {
        self.advance(target, rng, None)
    }

    /// As [`GraphState::advance_to`], appending one row per arrival.
    pub fn advance_recording<R: Rng + ?Sized>(
        &mut self,
        target: f64,
        rng: &mut R,
        rows: &mut Vec<TrajectoryRow>,
    ) -> Result<()> {
        self.advance(target, rng, Some(rows))
    }

    fn advance<R: Rng + ?Sized>(&mut self, target: f64, rng: &mut R, mut rows: Option<&mut Vec<TrajectoryRow>>) -> Result<()> {
        if target < self.t {
            return Err(Error::InvalidArgument(format!(
                "cannot go back from t = {} to {target}",
                self.t
            )));
        }
        if self.total_rate == 0.0 {
            self.t = target;
            return Ok(());
        }
        let clock = Exp::new(self.total_rate).expect("positive rate");
        loop {
            let next = self.t + clock.sample(rng);
            if next > target {
                self.t = target;
                return Ok(());
            }
            self.t = next;
            let (u, v) = self.sample_pair(rng);
            self.add_edge(u, v);
            if let Some(rows) = rows.as_deref_mut() {
                let m = self.largest_summary();
                rows.push(TrajectoryRow {
                    t: self.t,
                    event: self.events,
                    components: self.components,
                    largest: m.0,
                    surplus: m.1,
                    edges: self.edges,
                });
            }
        }
    }

    fn sample_pair<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        let mut u = rng.random::<f64>() * self.total_rate;
        let mut pick = self.pairs.len() - 1;
        for (i, p) in self.pairs.iter().enumerate() {
            if u < p.rate {
                pick = i;
                break;
            }
            u -= p.rate;
        }
        let p = &self.pairs[pick];
        let va = &self.by_type[p.a];
        if p.a == p.b {
            let i = rng.random_range(0..va.len());
            let mut j = rng.random_range(0..va.len() - 1);
            if j >= i {
                j += 1;
            }
            (va[i] as usize, va[j] as usize)
        } else {
            let vb = &self.by_type[p.b];
            (va[rng.random_range(0..va.len())] as usize, vb[rng.random_range(0..vb.len())] as usize)
        }
    }

    /// Add one multigraph edge between distinct vertices.
    pub fn add_edge(&mut self, u: usize, v: usize) {
        debug_assert_ne!(u, v);
        self.edges += 1;
        self.events += 1;
        let (ru, rv) = (self.find(u), self.find(v));
        if ru == rv {
            self.internal[ru] += 1;
            return;
        }
        // union by size; equal sizes keep the smaller index as root
        let (root, child) = match self.size[ru].cmp(&self.size[rv]) {
            std::cmp::Ordering::Greater => (ru, rv),
            std::cmp::Ordering::Less => (rv, ru),
            std::cmp::Ordering::Equal => (ru.min(rv), ru.max(rv)),
        };
        self.parent[child] = root as u32;
        self.size[root] += self.size[child];
        self.internal[root] += self.internal[child] + 1;
        let k = self.k;
        for j in 0..k {
            self.type_counts[root * k + j] += self.type_counts[child * k + j];
        }
        self.components -= 1;
        let (best, size) = (self.largest as usize, self.size[root]);
        let best_root = self.find(best);
        let best_size = self.size[best_root];
        if size > best_size || (size == best_size && root < best_root) {
            self.largest = root as u32;
        } else {
            self.largest = best_root as u32;
        }
        debug_assert_eq!(
            self.type_counts[root * k..(root + 1) * k].iter().sum::<u32>(),
            self.size[root],
            "type tally out of step with component size"
        );
    }

    fn largest_summary(&mut self) -> (usize, u64) {
        let r = self.find(self.largest as usize);
        let size = self.size[r] as usize;
        (size, self.internal[r] + 1 - size as u64)
    }

    pub fn macroscopic(&mut self) -> Macroscopic {
        let r = self.find(self.largest as usize);
        let size = self.size[r] as usize;
        Macroscopic {
            components: self.components,
            largest: size,
            surplus: self.internal[r] + 1 - size as u64,
            largest_types: self.type_counts[r * self.k..(r + 1) * self.k].to_vec(),
        }
    }

    /// Roots in increasing index order.
    fn roots(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).filter(|&v| self.parent[v] as usize == v)
    }

    /// Check vertex conservation, edge tallies and the component count.
    pub fn check_invariants(&self) -> Result<()> {
        let mut vertices = 0u64;
        let mut edges = 0u64;
        let mut roots = 0usize;
        for r in self.roots() {
            let tally: u32 = self.type_counts[r * self.k..(r + 1) * self.k].iter().sum();
            if tally != self.size[r] {
                return Err(Error::Invariant(format!("root {r}: type tally {tally} != size {}", self.size[r])));
            }
            vertices += tally as u64;
            edges += self.internal[r];
            roots += 1;
        }
        if vertices != self.n as u64 {
            return Err(Error::Invariant(format!("{vertices} vertices tracked, {} expected", self.n)));
        }
        if edges != self.edges {
            return Err(Error::Invariant(format!("{edges} internal edges, {} arrivals", self.edges)));
        }
        if roots != self.components {
            return Err(Error::Invariant(format!("{roots} roots, {} components", self.components)));
        }
        Ok(())
    }

    /// Empirical densities on the slice: `pi_n(0) = E / n` and
    /// `pi_n(l) = #{components of type l} / n`. Larger components are
    /// tallied separately.
    pub fn density_snapshot(&self, slice: &TypeSlice) -> Result<DensitySnapshot> {
        if slice.types() != self.k {
            return Err(Error::DimensionMismatch {
                expected: self.k,
                got: slice.types(),
            });
        }
        self.check_invariants()?;
        let n = self.n as f64;
        let mut densities = vec![0.0; slice.len()];
        densities[0] = self.edges as f64 / n;
        let mut overflow_components = 0;
        let mut overflow_vertices = 0;
        for r in self.roots() {
            let counts = &self.type_counts[r * self.k..(r + 1) * self.k];
            let size = self.size[r] as usize;
            match (size <= slice.truncation()).then(|| slice.rank_of_counts(counts)).flatten() {
                Some(rank) => densities[rank] += 1.0 / n,
                None => {
                    overflow_components += 1;
                    overflow_vertices += size as u64;
                }
            }
        }
        Ok(DensitySnapshot {
            t: self.t,
            densities,
            overflow_components,
            overflow_vertices,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensitySnapshot {
    pub t: f64,
    /// Rank-indexed `pi_n(l, t)`.
    pub densities: Vec<f64>,
    pub overflow_components: u64,
    pub overflow_vertices: u64,
}

impl DensitySnapshot {
    /// `sum_l |l| pi_n(l)` over the slice plus the overflow share; exactly 1.
    pub fn vertex_mass(&self, slice: &TypeSlice, n: usize) -> f64 {
        let inside: f64 = self
            .densities
            .iter()
            .zip(slice.norms())
            .skip(1)
            .map(|(p, k)| *k as f64 * p)
            .sum();
        inside + self.overflow_vertices as f64 / n as f64
    }
}

#[derive(Clone, Debug)]
pub struct ReplicaRecord {
    pub psi_n: Vec<f64>,
    pub snapshots: Vec<DensitySnapshot>,
    pub macroscopic: Vec<Macroscopic>,
}

#[derive(Clone, Debug)]
pub struct EnsembleConfig {
    pub n: usize,
    pub replicas: usize,
    /// Increasing snapshot times.
    pub times: Vec<f64>,
    pub truncation: usize,
    pub mode: AssignmentMode,
    pub seed: u64,
}

/// Independent replicas in parallel; replica `r` uses stream `r` of the seed.
pub fn run_ensemble(spec: &ModelSpec, config: &EnsembleConfig) -> Result<Vec<ReplicaRecord>> {
    if config.times.windows(2).any(|w| w[1] < w[0]) || config.times.iter().any(|t| !(*t >= 0.0)) {
        return Err(Error::InvalidArgument("snapshot times must be non-negative and sorted".into()));
    }
    let slice = TypeSlice::new(spec.types(), config.truncation)?;
    let kernel = finite_kernel(spec, config.n)?;
    (0..config.replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = replica_rng(config.seed, r as u64);
            let assignment = TypeAssignment::draw(config.n, spec.measure.mass(), config.mode, &mut rng)?;
            let psi_n = assignment.psi_n.clone();
            let mut g = GraphState::with_assignment(assignment, &kernel)?;
            let mut snapshots = Vec::with_capacity(config.times.len());
            let mut macroscopic = Vec::with_capacity(config.times.len());
            for &t in &config.times {
                g.advance_to(t, &mut rng)?;
                snapshots.push(g.density_snapshot(&slice)?);
                macroscopic.push(g.macroscopic());
            }
            Ok(ReplicaRecord {
                psi_n,
                snapshots,
                macroscopic,
            })
        })
        .collect()
}

/// Sample moments of `X_n(l, t) = sqrt(n) (pi_n(l, t) - pi(l, t))` and of
/// the scaled macroscopic triple (components, largest, surplus) per time.
#[derive(Clone, Debug)]
pub struct FluctuationSummary {
    pub times: Vec<f64>,
    pub mean: Vec<Vec<f64>>,
    pub covariance: Vec<DMatrix<f64>>,
    pub macro_mean: Vec<[f64; 3]>,
    pub macro_covariance: Vec<[[f64; 3]; 3]>,
    pub replicas: usize,
}

/// Per-replica fluctuation vectors at snapshot `i`.
pub fn density_fluctuations(records: &[ReplicaRecord], i: usize, n: usize, limit: &[f64]) -> Vec<Vec<f64>> {
    let s = (n as f64).sqrt();
    records
        .iter()
        .map(|r| {
            r.snapshots[i]
                .densities
                .iter()
                .zip(limit)
                .map(|(a, b)| s * (a - b))
                .collect()
        })
        .collect()
}

/// Per-replica `sqrt(n) (N_n / n - eta, L_n / n - l, S_n / n - s)`.
pub fn macro_fluctuations(records: &[ReplicaRecord], i: usize, n: usize, limit: &MacroLimits) -> Vec<[f64; 3]> {
    let nf = n as f64;
    let s = nf.sqrt();
    records
        .iter()
        .map(|r| {
            let m = &r.macroscopic[i];
            [
                s * (m.components as f64 / nf - limit.components),
                s * (m.largest as f64 / nf - limit.giant),
                s * (m.surplus as f64 / nf - limit.surplus),
            ]
        })
        .collect()
}

/// Moments against a density solution on the same slice and the given
/// macroscopic limits (one per snapshot time).
pub fn summarize(
    records: &[ReplicaRecord],
    config: &EnsembleConfig,
    field: &DensityField,
    macro_limits: &[MacroLimits],
) -> Result<FluctuationSummary> {
    if records.len() < 2 {
        return Err(Error::InvalidArgument("need at least 2 replicas".into()));
    }
    if macro_limits.len() != config.times.len() {
        return Err(Error::DimensionMismatch {
            expected: config.times.len(),
            got: macro_limits.len(),
        });
    }
    let mut out = FluctuationSummary {
        times: config.times.clone(),
        mean: Vec::new(),
        covariance: Vec::new(),
        macro_mean: Vec::new(),
        macro_covariance: Vec::new(),
        replicas: records.len(),
    };
    for (i, &t) in config.times.iter().enumerate() {
        let x = density_fluctuations(records, i, config.n, field.at_time(t)?);
        let w = x[0].len();
        let cols: Vec<Vec<f64>> = (0..w).map(|r| x.iter().map(|v| v[r]).collect()).collect();
        out.mean.push(cols.iter().map(|c| stats::mean(c)).collect());
        out.covariance
            .push(DMatrix::from_fn(w, w, |r, q| stats::covariance(&cols[r], &cols[q])));
        let m = macro_fluctuations(records, i, config.n, &macro_limits[i]);
        let mcols: Vec<Vec<f64>> = (0..3).map(|j| m.iter().map(|v| v[j]).collect()).collect();
        out.macro_mean.push([stats::mean(&mcols[0]), stats::mean(&mcols[1]), stats::mean(&mcols[2])]);
        let mut c = [[0.0; 3]; 3];
        for a in 0..3 {
            for b in 0..3 {
                c[a][b] = stats::covariance(&mcols[a], &mcols[b]);
            }
        }
        out.macro_covariance.push(c);
    }
    Ok(out)
}

/// Simulate, solve the limit densities on the same slice, and summarize.
/// Macroscopic references come from the truncated limit densities.
pub fn fluctuation_ensemble(spec: &ModelSpec, config: &EnsembleConfig) -> Result<FluctuationSummary> {
    let records = run_ensemble(spec, config)?;
    let horizon = config.times.iter().copied().fold(0.0, f64::max);
    let slice = Arc::new(TypeSlice::new(spec.types(), config.truncation)?);
    let field = solve_on_slice(slice, &spec.kernel, spec.measure.mass(), DEFAULT_STEP, horizon)?;
    let limits = config
        .times
        .iter()
        .map(|&t| macroscopic_limits(&field, t))
        .collect::<Result<Vec<_>>>()?;
    summarize(&records, config, &field, &limits)
}

/// Shuffle vertex labels, keeping the type counts.
pub fn relabeled(types: &[usize], rng: &mut impl Rng) -> Vec<usize> {
    let mut t = types.to_vec();
    t.shuffle(rng);
    t
}

pub fn write_trajectory_csv<W: Write>(rows: &[TrajectoryRow], mut out: W) -> Result<()> {
    writeln!(out, "t,event,components,largest,surplus,edges")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{},{}", r.t, r.event, r.components, r.largest, r.surplus, r.edges)?;
    }
    Ok(())
}
