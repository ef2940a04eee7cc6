//! Multi-type Poisson branching process: operator norm, critical time,
//! survival fixed point, dual measure, simulation and total-size law.

use std::collections::VecDeque;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Poisson};

use crate::er::borel_pmf;
use crate::error::{Error, Result};
use crate::linalg::spectral_radius_symmetric;
use crate::ode::{solve_on_slice, DensityField, DEFAULT_STEP};
use crate::types::{Kernel, TypeMeasure, TypeSlice, TypeVector};

pub const MAX_SURVIVAL_ITERATIONS: usize = 1_000_000;
pub const DEFAULT_NODE_CAP: usize = 1_000_000;

/// `MBP(t kernel, measure)`: a type-`x` node has Poisson(`t kernel(x,y) measure(y)`)
/// children of type `y`.
#[derive(Clone, Debug)]
pub struct BranchingSpec {
    pub kernel: Kernel,
    pub measure: TypeMeasure,
    pub t: f64,
}

impl BranchingSpec {
    pub fn new(kernel: Kernel, measure: TypeMeasure, t: f64) -> Result<Self> {
        if kernel.dim() != measure.dim() {
            return Err(Error::DimensionMismatch {
                expected: kernel.dim(),
                got: measure.dim(),
            });
        }
        if !(t >= 0.0) {
            return Err(Error::InvalidArgument(format!("time {t}")));
        }
        Ok(BranchingSpec { kernel, measure, t })
    }

    pub fn types(&self) -> usize {
        self.kernel.dim()
    }

    fn offspring_means(&self) -> Vec<f64> {
        let k = self.types();
        let mu = self.measure.mass();
        let mut out = vec![0.0; k * k];
        for x in 0..k {
            for y in 0..k {
                out[x * k + y] = self.t * self.kernel.get(x, y) * mu[y];
            }
        }
        out
    }
}

/// Norm of the integral operator `T_{kernel,measure}`: the spectral radius of
/// `sqrt(mu_i) kernel(i,j) sqrt(mu_j)`.
pub fn operator_norm(kernel: &Kernel, measure: &TypeMeasure) -> Result<f64> {
    if !kernel.is_symmetric() {
        return Err(Error::InvalidKernel("operator norm needs a symmetric kernel".into()));
    }
    if kernel.dim() != measure.dim() {
        return Err(Error::DimensionMismatch {
            expected: kernel.dim(),
            got: measure.dim(),
        });
    }
    let k = kernel.dim();
    let s: Vec<f64> = measure.mass().iter().map(|m| m.sqrt()).collect();
    let m = DMatrix::from_fn(k, k, |i, j| s[i] * kernel.get(i, j) * s[j]);
    Ok(spectral_radius_symmetric(&m))
}

pub fn critical_time(kernel: &Kernel, measure: &TypeMeasure) -> Result<f64> {
    let norm = operator_norm(kernel, measure)?;
    if norm == 0.0 {
        return Err(Error::InvalidKernel("zero operator norm, no critical time".into()));
    }
    Ok(1.0 / norm)
}

#[derive(Clone, Debug)]
pub struct Survival {
    pub rho: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// Maximal fixed point of `rho = 1 - exp(-T_{t kernel, measure} rho)`, by
/// monotone iteration from the all-ones vector.
pub fn survival_probability(spec: &BranchingSpec, tol: f64) -> Result<Survival> {
    let k = spec.types();
    let norm = operator_norm(&spec.kernel, &spec.measure)?;
    if spec.t * norm <= 1.0 {
        return Ok(Survival {
            rho: vec![0.0; k],
            iterations: 0,
            residual: 0.0,
        });
    }
    let means = spec.offspring_means();
    let mut rho = vec![1.0; k];
    let mut next = vec![0.0; k];
    let mut residual = f64::INFINITY;
    for it in 1..=MAX_SURVIVAL_ITERATIONS {
        for x in 0..k {
            let rate: f64 = (0..k).map(|y| means[x * k + y] * rho[y]).sum();
            next[x] = 1.0 - (-rate).exp();
        }
        residual = rho.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        std::mem::swap(&mut rho, &mut next);
        if rho.iter().all(|v| v.abs() < tol) {
            return Ok(Survival {
                rho: vec![0.0; k],
                iterations: it,
                residual,
            });
        }
        if residual <= tol {
            return Ok(Survival {
                rho,
                iterations: it,
                residual,
            });
        }
    }
    Err(Error::NoConvergence {
        iterations: MAX_SURVIVAL_ITERATIONS,
        residual,
    })
}

#[derive(Clone, Debug)]
pub struct DualMeasure {
    pub measure: TypeMeasure,
    /// `|| T_{t kernel, dual} ||`, below 1 away from criticality.
    pub dual_norm: f64,
}

/// `mu_hat(x) = (1 - rho(x)) mu(x)`.
pub fn dual_measure(spec: &BranchingSpec, tol: f64) -> Result<DualMeasure> {
    let surv = survival_probability(spec, tol)?;
    let mass = spec
        .measure
        .mass()
        .iter()
        .zip(&surv.rho)
        .map(|(m, r)| (1.0 - r) * m)
        .collect();
    let measure = TypeMeasure::new(mass)?;
    let dual_norm = operator_norm(&spec.kernel.scaled(spec.t), &measure)?;
    Ok(DualMeasure { measure, dual_norm })
}

/// Realized finite tree in breadth-first order.
#[derive(Clone, Debug)]
pub struct MbpTree {
    /// `(type, parent)`; the root has no parent and parents precede children.
    pub nodes: Vec<(usize, Option<usize>)>,
    pub type_count: TypeVector,
}

impl MbpTree {
    pub fn size(&self) -> usize {
        self.nodes.len()
    }
}

#[derive(Clone, Debug)]
pub enum MbpOutcome {
    Finite(MbpTree),
    /// Population exceeded the node cap; treated as surviving.
    Overflow { nodes: usize },
}

pub fn sample_root_type<R: Rng + ?Sized>(measure: &TypeMeasure, rng: &mut R) -> usize {
    let u: f64 = rng.random::<f64>() * measure.total();
    let mut acc = 0.0;
    for (i, m) in measure.mass().iter().enumerate() {
        acc += m;
        if u < acc {
            return i;
        }
    }
    measure.dim() - 1
}

pub fn simulate_mbp<R: Rng + ?Sized>(
    spec: &BranchingSpec,
    root_type: usize,
    rng: &mut R,
    node_cap: usize,
) -> Result<MbpOutcome> {
    let k = spec.types();
    if root_type >= k {
        return Err(Error::InvalidArgument(format!("root type {root_type} with K = {k}")));
    }
    if node_cap == 0 {
        return Err(Error::InvalidArgument("node cap must be positive".into()));
    }
    let means = spec.offspring_means();
    let dists: Vec<Option<Poisson<f64>>> = means
        .iter()
        .map(|&m| if m > 0.0 { Poisson::new(m).ok() } else { None })
        .collect();

    let mut nodes = vec![(root_type, None)];
    let mut counts = vec![0u32; k];
    counts[root_type] = 1;
    let mut queue = VecDeque::from([0usize]);
    while let Some(parent) = queue.pop_front() {
        let ptype = nodes[parent].0;
        for y in 0..k {
            let Some(d) = &dists[ptype * k + y] else { continue };
            let children = d.sample(rng) as usize;
            for _ in 0..children {
                if nodes.len() >= node_cap {
                    return Ok(MbpOutcome::Overflow { nodes: nodes.len() + 1 });
                }
                nodes.push((y, Some(parent)));
                counts[y] += 1;
                queue.push_back(nodes.len() - 1);
            }
        }
    }
    Ok(MbpOutcome::Finite(MbpTree {
        nodes,
        type_count: TypeVector::new(counts),
    }))
}

/// `P(|MBP| = k)` for `k = 1..=kmax`, from the density identity
/// `P(MBP has type l) = |l| pi(l, t)`.
pub fn total_size_distribution(spec: &BranchingSpec, kmax: usize) -> Result<Vec<f64>> {
    if kmax == 0 {
        return Err(Error::InvalidArgument("kmax must be at least 1".into()));
    }
    let slice = Arc::new(TypeSlice::new(spec.types(), kmax)?);
    let field = solve_on_slice(slice, &spec.kernel, spec.measure.mass(), DEFAULT_STEP, spec.t)?;
    total_size_from_field(&field, spec.t, kmax)
}

pub fn total_size_from_field(field: &DensityField, t: f64, kmax: usize) -> Result<Vec<f64>> {
    let slice = field.slice();
    if kmax > slice.truncation() {
        return Err(Error::InvalidArgument(format!(
            "kmax {kmax} exceeds the ODE truncation {}",
            slice.truncation()
        )));
    }
    let row = field.at_time(t)?;
    let mut out = vec![0.0; kmax];
    for (r, p) in row.iter().enumerate().skip(1) {
        let n = slice.norm(r) as usize;
        if n <= kmax {
            out[n - 1] += n as f64 * p;
        }
    }
    Ok(out)
}

/// Single-type fast path: Poisson(`rate`) offspring give the Borel law.
pub fn borel_total_size(rate: f64, kmax: usize) -> Vec<f64> {
    (1..=kmax as u64).map(|k| borel_pmf(rate, k)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::base_rng;

    fn er(t: f64) -> BranchingSpec {
        BranchingSpec::new(Kernel::constant(1, 1.0), TypeMeasure::uniform(1), t).unwrap()
    }

    fn twos(t: f64) -> BranchingSpec {
        BranchingSpec::new(Kernel::constant(2, 2.0), TypeMeasure::uniform(2), t).unwrap()
    }

    // oracle: scalar fixed point iteration
    fn scalar_rho(t: f64) -> f64 {
        let mut r = 1.0f64;
        for _ in 0..1_000_000 {
            let n = 1.0 - (-t * r).exp();
            if (n - r).abs() < 1e-15 {
                return n;
            }
            r = n;
        }
        r
    }

    #[test]
    fn operator_norm_examples() {
        let one = operator_norm(&Kernel::constant(1, 1.0), &TypeMeasure::uniform(1)).unwrap();
        assert!((one - 1.0).abs() < 1e-14);
        let two = operator_norm(&Kernel::constant(2, 2.0), &TypeMeasure::uniform(2)).unwrap();
        assert!((two - 2.0).abs() < 1e-14);
        let k = Kernel::new(vec![vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let mu = TypeMeasure::probability(vec![0.6, 0.4]).unwrap();
        let base = operator_norm(&k, &mu).unwrap();
        assert!((operator_norm(&k.scaled(3.0), &mu).unwrap() - 3.0 * base).abs() < 1e-13);
        let tc = critical_time(&k, &mu).unwrap();
        assert!((critical_time(&k.scaled(2.0), &mu).unwrap() - tc / 2.0).abs() < 1e-14);
        assert!((critical_time(&Kernel::constant(2, 2.0), &TypeMeasure::uniform(2)).unwrap() - 0.5).abs() < 1e-14);
        assert!(critical_time(&Kernel::zeros(1), &TypeMeasure::uniform(1)).is_err());
    }

    #[test]
    fn nonsymmetric_kernel_rejected() {
        let k = Kernel::from_row_major(2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        assert!(operator_norm(&k, &TypeMeasure::uniform(2)).is_ok());
        // from_row_major already refuses asymmetric input
        assert!(Kernel::from_row_major(2, vec![1.0, 2.0, 3.0, 1.0]).is_err());
    }

    #[test]
    fn survival_examples() {
        assert_eq!(survival_probability(&er(1.0), 1e-12).unwrap().rho, vec![0.0]);
        let r2 = survival_probability(&er(2.0), 1e-13).unwrap();
        assert!((r2.rho[0] - scalar_rho(2.0)).abs() < 1e-12);
        assert!((r2.rho[0] - 0.79681).abs() < 1e-5);
        let sym = survival_probability(&twos(1.0), 1e-13).unwrap();
        // kernel 2, mass 1/2 per type at t = 1: total offspring Poisson(2)
        for r in &sym.rho {
            assert!((r - scalar_rho(2.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn survival_residual_and_monotone_iterates() {
        let k = Kernel::new(vec![vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let mu = TypeMeasure::probability(vec![0.6, 0.4]).unwrap();
        let spec = BranchingSpec::new(k.clone(), mu.clone(), 2.0).unwrap();
        let s = survival_probability(&spec, 1e-13).unwrap();
        let means = spec.offspring_means();
        let mut iter = vec![1.0; 2];
        for _ in 0..50 {
            let next: Vec<f64> = (0..2)
                .map(|x| 1.0 - (-(0..2).map(|y| means[x * 2 + y] * iter[y]).sum::<f64>()).exp())
                .collect();
            assert!(next.iter().zip(&iter).all(|(n, o)| n <= o));
            iter = next;
        }
        for x in 0..2 {
            let rate: f64 = (0..2).map(|y| means[x * 2 + y] * s.rho[y]).sum();
            assert!((s.rho[x] - (1.0 - (-rate).exp())).abs() <= 1e-13);
        }
    }

    #[test]
    fn dual_measure_examples() {
        let sub = dual_measure(&er(0.5), 1e-12).unwrap();
        assert_eq!(sub.measure.mass(), &[1.0]);
        let sup = dual_measure(&er(2.0), 1e-13).unwrap();
        assert!((sup.measure.mass()[0] - 0.20319).abs() < 1e-5);
        assert!((sup.dual_norm - 0.40638).abs() < 1e-4);
        assert!(sup.dual_norm < 1.0);
    }

    #[test]
    fn zero_time_gives_single_node() {
        let mut rng = base_rng(1);
        for _ in 0..100 {
            match simulate_mbp(&er(0.0), 0, &mut rng, 10).unwrap() {
                MbpOutcome::Finite(t) => assert_eq!(t.size(), 1),
                MbpOutcome::Overflow { .. } => panic!("overflow at t = 0"),
            }
        }
    }

    #[test]
    fn trees_are_topological_and_tallied() {
        let mut rng = base_rng(2);
        let spec = BranchingSpec::new(
            Kernel::new(vec![vec![1.0, 0.5], vec![0.5, 1.0]]).unwrap(),
            TypeMeasure::uniform(2),
            0.9,
        )
        .unwrap();
        for _ in 0..200 {
            if let MbpOutcome::Finite(tree) = simulate_mbp(&spec, 1, &mut rng, 10_000).unwrap() {
                for (i, (_, p)) in tree.nodes.iter().enumerate() {
                    assert!(p.map_or(i == 0, |p| p < i));
                }
                let mut counts = [0u32; 2];
                for (ty, _) in &tree.nodes {
                    counts[*ty] += 1;
                }
                assert_eq!(tree.type_count.counts(), &counts);
            }
        }
    }

    #[test]
    fn overflow_is_flagged() {
        let mut rng = base_rng(3);
        let outcomes: Vec<_> = (0..50).map(|_| simulate_mbp(&er(5.0), 0, &mut rng, 100).unwrap()).collect();
        assert!(outcomes.iter().any(|o| matches!(o, MbpOutcome::Overflow { .. })));
    }

    #[test]
    fn singleton_frequency_matches_borel() {
        let mut rng = base_rng(4);
        let runs = 100_000;
        let singles = (0..runs)
            .filter(|_| matches!(simulate_mbp(&er(0.5), 0, &mut rng, 1000).unwrap(), MbpOutcome::Finite(t) if t.size() == 1))
            .count();
        let p = (-0.5f64).exp();
        let se = (p * (1.0 - p) / runs as f64).sqrt();
        assert!(((singles as f64 / runs as f64) - p).abs() < 3.0 * se);
    }

    #[test]
    fn mean_offspring_of_root() {
        let mut rng = base_rng(5);
        let spec = BranchingSpec::new(
            Kernel::new(vec![vec![1.0, 0.5], vec![0.5, 2.0]]).unwrap(),
            TypeMeasure::probability(vec![0.3, 0.7]).unwrap(),
            0.4,
        )
        .unwrap();
        let runs = 40_000;
        let mut first_gen = vec![Vec::with_capacity(runs); 2];
        for _ in 0..runs {
            if let MbpOutcome::Finite(tree) = simulate_mbp(&spec, 0, &mut rng, 100_000).unwrap() {
                let mut c = [0.0; 2];
                for (ty, p) in &tree.nodes {
                    if *p == Some(0) {
                        c[*ty] += 1.0;
                    }
                }
                first_gen[0].push(c[0]);
                first_gen[1].push(c[1]);
            }
        }
        for y in 0..2 {
            let expected = 0.4 * spec.kernel.get(0, y) * spec.measure.mass()[y];
            let m = crate::stats::mean(&first_gen[y]);
            let se = crate::stats::std_error(&first_gen[y]);
            assert!((m - expected).abs() < 3.0 * se, "type {y}: {m} vs {expected}");
        }
    }

    #[test]
    fn ode_total_size_matches_borel() {
        for t in [0.5, 2.0, 3.0] {
            let ode = total_size_distribution(&er(t), 10).unwrap();
            let borel = borel_total_size(t, 10);
            for (a, b) in ode.iter().zip(&borel) {
                assert!((a - b).abs() < 1e-8, "t={t}");
            }
        }
        assert!((borel_total_size(0.5, 2)[1] - 0.183940).abs() < 1e-6);
        let mass: f64 = borel_total_size(0.5, 200).iter().sum();
        assert!((mass - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kmax_beyond_truncation_errors() {
        let slice = Arc::new(TypeSlice::new(1, 5).unwrap());
        let field = solve_on_slice(slice, &Kernel::constant(1, 1.0), &[1.0], 1e-3, 0.5).unwrap();
        assert!(total_size_from_field(&field, 0.5, 6).is_err());
        assert!(total_size_from_field(&field, 0.5, 5).is_ok());
    }
}
