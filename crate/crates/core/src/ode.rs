//! Limiting component-type densities: the truncated, lower-triangular
//! coagulation system `d pi(l)/dt = F_l(pi, kappa, mu)` integrated with
//! fixed-step RK4, plus the macroscopic curves derived from it.

use std::io::Write;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::types::{Kernel, TypeSlice, TypeVector};

pub const DEFAULT_STEP: f64 = 1e-3;
const NEGATIVITY_TOL: f64 = 1e-10;
const MASS_TOL: f64 = 1e-9;

/// Precomputed drift `F_l(., kernel, measure)` on one slice.
#[derive(Clone, Debug)]
pub struct Drift {
    slice: Arc<TypeSlice>,
    merge_theta: Vec<f64>,
    linear: Vec<f64>,
    edge_rate: f64,
}

impl Drift {
    pub fn new(slice: Arc<TypeSlice>, kernel: &Kernel, measure: &[f64]) -> Result<Self> {
        if kernel.dim() != slice.types() || measure.len() != slice.types() {
            return Err(Error::DimensionMismatch {
                expected: slice.types(),
                got: kernel.dim().min(measure.len()),
            });
        }
        let merge_theta = slice
            .merges()
            .iter()
            .map(|m| kernel.theta_unchecked(slice.coords(m.left), slice.coords(m.right)))
            .collect();
        let linear = (0..slice.len())
            .map(|r| kernel.theta_unchecked(slice.coords(r), measure))
            .collect();
        let edge_rate = 0.5 * kernel.theta_unchecked(measure, measure);
        Ok(Drift {
            slice,
            merge_theta,
            linear,
            edge_rate,
        })
    }

    pub fn slice(&self) -> &Arc<TypeSlice> {
        &self.slice
    }

    /// `theta(l, mu)` per rank.
    pub fn linear_rates(&self) -> &[f64] {
        &self.linear
    }

    /// `theta(k1, k2)` per merge pair, aligned with `slice.merges()`.
    pub fn merge_thetas(&self) -> &[f64] {
        &self.merge_theta
    }

    /// `F_0 = theta(mu, mu) / 2`.
    pub fn edge_rate(&self) -> f64 {
        self.edge_rate
    }

    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        out[0] = self.edge_rate;
        for r in 1..out.len() {
            out[r] = -x[r] * self.linear[r];
        }
        for (m, th) in self.slice.merges().iter().zip(&self.merge_theta) {
            out[m.sum] += 0.5 * x[m.left] * x[m.right] * th;
        }
    }
}

/// `F_l(x, kernel, measure)` for a single type vector.
pub fn f_ell(slice: &TypeSlice, x: &[f64], kernel: &Kernel, measure: &[f64], l: &TypeVector) -> Result<f64> {
    if x.len() != slice.len() {
        return Err(Error::DimensionMismatch {
            expected: slice.len(),
            got: x.len(),
        });
    }
    kernel.theta(measure, measure)?;
    let rank = slice.rank(l)?;
    if rank == 0 {
        return Ok(0.5 * kernel.theta_unchecked(measure, measure));
    }
    let mut acc = -x[rank] * kernel.theta_unchecked(slice.coords(rank), measure);
    for m in slice.merges().iter().filter(|m| m.sum == rank) {
        acc += 0.5 * x[m.left] * x[m.right] * kernel.theta_unchecked(slice.coords(m.left), slice.coords(m.right));
    }
    Ok(acc)
}

/// Initial condition: `pi(e_k, 0) = mu(k)`, zero elsewhere.
pub fn initial_densities(slice: &TypeSlice, measure: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; slice.len()];
    for (j, m) in measure.iter().enumerate() {
        x[slice.basis_rank(j)] = *m;
    }
    x
}

/// Solution of the limit ODE on a uniform grid `t_i = i * step`.
#[derive(Clone, Debug)]
pub struct DensityField {
    slice: Arc<TypeSlice>,
    kernel: Kernel,
    measure: Vec<f64>,
    step: f64,
    times: Vec<f64>,
    values: Vec<f64>,
}

impl DensityField {
    pub fn slice(&self) -> &Arc<TypeSlice> {
        &self.slice
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn measure(&self) -> &[f64] {
        &self.measure
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().expect("non-empty grid")
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Densities at grid index `i`, rank-indexed.
    pub fn at_index(&self, i: usize) -> &[f64] {
        let w = self.slice.len();
        &self.values[i * w..(i + 1) * w]
    }

    pub fn index_of(&self, t: f64) -> Result<usize> {
        let i = (t / self.step).round();
        if i < 0.0 || i as usize >= self.times.len() || (i * self.step - t).abs() > 1e-9 * (1.0 + t) {
            return Err(Error::OffGrid(t));
        }
        Ok(i as usize)
    }

    pub fn at_time(&self, t: f64) -> Result<&[f64]> {
        Ok(self.at_index(self.index_of(t)?))
    }

    /// `sum_l |l| pi(l, t)` over the slice.
    pub fn vertex_mass(&self, i: usize) -> f64 {
        self.at_index(i)
            .iter()
            .zip(self.slice.norms())
            .map(|(p, n)| *n as f64 * p)
            .sum()
    }

    /// CSV with columns `t, rank, l1..lK, pi`; t-major, rank-minor.
    pub fn write_csv<W: Write>(&self, times: &[f64], mut out: W) -> Result<()> {
        let k = self.slice.types();
        let mut header = String::from("t,rank");
        for j in 1..=k {
            header.push_str(&format!(",l{j}"));
        }
        header.push_str(",pi");
        writeln!(out, "{header}")?;
        for &t in times {
            let row = self.at_time(t)?;
            for (r, v) in row.iter().enumerate() {
                let counts: Vec<String> = self.slice.vector(r).counts().iter().map(|c| c.to_string()).collect();
                writeln!(out, "{t},{r},{},{v:e}", counts.join(","))?;
            }
        }
        Ok(())
    }
}

pub fn solve_densities(spec: &ModelSpec, step: f64, horizon: f64) -> Result<DensityField> {
    let slice = Arc::new(TypeSlice::new(spec.types(), spec.truncation)?);
    solve_on_slice(slice, &spec.kernel, spec.measure.mass(), step, horizon)
}

/// Integrate on a given slice with arbitrary (possibly perturbed) kernel
/// and measure. The step is shrunk so that the grid ends exactly at
/// `horizon`.
pub fn solve_on_slice(
    slice: Arc<TypeSlice>,
    kernel: &Kernel,
    measure: &[f64],
    step: f64,
    horizon: f64,
) -> Result<DensityField> {
    if !(step > 0.0) || !(horizon >= 0.0) {
        return Err(Error::InvalidArgument(format!("step {step}, horizon {horizon}")));
    }
    let drift = Drift::new(slice.clone(), kernel, measure)?;
    let steps = ((horizon / step) - 1e-9).ceil().max(0.0) as usize;
    let h = if steps == 0 { step } else { horizon / steps as f64 };
    let w = slice.len();

    let mut times = Vec::with_capacity(steps + 1);
    let mut values = Vec::with_capacity((steps + 1) * w);
    let mut x = initial_densities(&slice, measure);
    times.push(0.0);
    values.extend_from_slice(&x);

    let mut k1 = vec![0.0; w];
    let mut k2 = vec![0.0; w];
    let mut k3 = vec![0.0; w];
    let mut k4 = vec![0.0; w];
    let mut tmp = vec![0.0; w];
    for i in 1..=steps {
        drift.eval(&x, &mut k1);
        axpy_into(&mut tmp, &x, 0.5 * h, &k1);
        drift.eval(&tmp, &mut k2);
        axpy_into(&mut tmp, &x, 0.5 * h, &k2);
        drift.eval(&tmp, &mut k3);
        axpy_into(&mut tmp, &x, h, &k3);
        drift.eval(&tmp, &mut k4);
        for r in 0..w {
            x[r] += h / 6.0 * (k1[r] + 2.0 * k2[r] + 2.0 * k3[r] + k4[r]);
        }
        let t = i as f64 * h;
        x[0] = t * drift.edge_rate();
        times.push(t);
        values.extend_from_slice(&x);
    }

    let field = DensityField {
        slice,
        kernel: kernel.clone(),
        measure: measure.to_vec(),
        step: h,
        times,
        values,
    };
    check_invariants(&field)?;
    Ok(field)
}

fn axpy_into(out: &mut [f64], x: &[f64], a: f64, y: &[f64]) {
    for ((o, xi), yi) in out.iter_mut().zip(x).zip(y) {
        *o = xi + a * yi;
    }
}

fn check_invariants(field: &DensityField) -> Result<()> {
    let total: f64 = field.measure.iter().sum();
    for i in 0..field.len() {
        let row = field.at_index(i);
        if let Some((r, v)) = row
            .iter()
            .enumerate()
            .skip(1)
            .filter(|(_, v)| **v < -NEGATIVITY_TOL || !v.is_finite())
            .min_by(|a, b| a.1.total_cmp(b.1))
        {
            return Err(Error::Invariant(format!(
                "pi({}, {}) = {v:e} is negative",
                field.slice.vector(r),
                field.times[i]
            )));
        }
        let mass = field.vertex_mass(i);
        if mass > total + MASS_TOL {
            return Err(Error::Invariant(format!(
                "vertex mass {mass} exceeds {total} at t = {}",
                field.times[i]
            )));
        }
    }
    Ok(())
}

/// Number of components, giant size and surplus densities in the limit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MacroLimits {
    /// `eta = sum_{l != 0} pi(l)`
    pub components: f64,
    /// `l = 1 - sum |l| pi(l)`
    pub giant: f64,
    /// `s = sum_l pi(l) - 1`, including the edge coordinate
    pub surplus: f64,
}

pub fn macroscopic_limits(field: &DensityField, t: f64) -> Result<MacroLimits> {
    let i = field.index_of(t)?;
    let row = field.at_index(i);
    let components: f64 = row[1..].iter().sum();
    Ok(MacroLimits {
        components,
        giant: 1.0 - field.vertex_mass(i),
        surplus: row[0] + components - 1.0,
    })
}

/// `sum_{|l| > cutoff} |l|^delta pi(l, t)`.
pub fn tail_mass(field: &DensityField, t: f64, delta: f64, cutoff: usize) -> Result<f64> {
    if cutoff > field.slice.truncation() {
        return Err(Error::InvalidArgument(format!(
            "cutoff {cutoff} exceeds truncation {}",
            field.slice.truncation()
        )));
    }
    let row = field.at_time(t)?;
    Ok(row
        .iter()
        .zip(field.slice.norms())
        .filter(|(_, &n)| n as usize > cutoff)
        .map(|(p, &n)| (n as f64).powf(delta) * p)
        .sum())
}
