//! Type vectors, kernels, type measures and the truncated type slice.
//!
//! Dense arrays over a truncated slice are addressed by the rank of a type
//! vector in the sorted enumeration; rank 0 is always the zero vector, which
//! carries the edge-density coordinate.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};

/// Per-type vertex counts of a component, an element of `N_0^K`.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct TypeVector(Vec<u32>);

impl TypeVector {
    pub fn new(counts: Vec<u32>) -> Self {
        TypeVector(counts)
    }

    pub fn zero(k: usize) -> Self {
        TypeVector(vec![0; k])
    }

    /// Basis vector `e_j` (0-based type index).
    pub fn basis(k: usize, j: usize) -> Self {
        let mut v = vec![0; k];
        v[j] = 1;
        TypeVector(v)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn counts(&self) -> &[u32] {
        &self.0
    }

    /// Component size `sum_i l_i`.
    pub fn norm(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&c| c == 0)
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&c| c as f64).collect()
    }

    pub fn checked_add(&self, other: &TypeVector) -> Result<TypeVector> {
        check_dim(self.dim(), other.dim())?;
        Ok(TypeVector(
            self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect(),
        ))
    }

    /// Size first, then the first differing coordinate decides.
    pub fn compare(&self, other: &TypeVector) -> Result<Ordering> {
        check_dim(self.dim(), other.dim())?;
        Ok(self
            .norm()
            .cmp(&other.norm())
            .then_with(|| self.0.cmp(&other.0)))
    }
}

impl PartialOrd for TypeVector {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

// Vectors of different dimension are ordered by dimension so that `Ord` stays
// total; within one dimension this is the component-type order.
impl Ord for TypeVector {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dim()
            .cmp(&other.dim())
            .then_with(|| self.norm().cmp(&other.norm()))
            .then_with(|| self.0.cmp(&other.0))
    }
}

impl fmt::Debug for TypeVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl fmt::Display for TypeVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, ")")
    }
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// Symmetric `K x K` matrix of pairwise type rates.
///
/// Interaction kernels are non-negative; perturbation kernels (the second
/// order kernel fluctuation) may be signed and are built with
/// [`Kernel::perturbation`].
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    k: usize,
    entries: Vec<f64>,
}

impl Kernel {
    /// Non-negative symmetric kernel from a row-major matrix.
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let kernel = Self::perturbation(rows)?;
        if let Some(v) = kernel.entries.iter().find(|v| **v < 0.0) {
            return Err(Error::InvalidKernel(format!("negative entry {v}")));
        }
        Ok(kernel)
    }

    /// Symmetric, possibly signed matrix.
    pub fn perturbation(rows: Vec<Vec<f64>>) -> Result<Self> {
        let k = rows.len();
        if k == 0 {
            return Err(Error::InvalidKernel("empty matrix".into()));
        }
        let mut entries = Vec::with_capacity(k * k);
        for row in &rows {
            if row.len() != k {
                return Err(Error::InvalidKernel(format!(
                    "row of length {} in a {k}x{k} matrix",
                    row.len()
                )));
            }
            entries.extend_from_slice(row);
        }
        Self::from_row_major(k, entries)
    }

    pub fn from_row_major(k: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != k * k {
            return Err(Error::DimensionMismatch {
                expected: k * k,
                got: entries.len(),
            });
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidKernel("non-finite entry".into()));
        }
        for i in 0..k {
            for j in 0..i {
                let (a, b) = (entries[i * k + j], entries[j * k + i]);
                if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                    return Err(Error::InvalidKernel(format!(
                        "not symmetric at ({i},{j}): {a} vs {b}"
                    )));
                }
            }
        }
        Ok(Kernel { k, entries })
    }

    pub fn constant(k: usize, value: f64) -> Self {
        Kernel {
            k,
            entries: vec![value; k * k],
        }
    }

    pub fn zeros(k: usize) -> Self {
        Self::constant(k, 0.0)
    }

    pub fn dim(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.k + j]
    }

    pub fn row_major(&self) -> &[f64] {
        &self.entries
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.entries.chunks(self.k).map(|r| r.to_vec()).collect()
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.k).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }

    /// All entries strictly positive.
    pub fn is_irreducible(&self) -> bool {
        self.entries.iter().all(|&v| v > 0.0)
    }

    pub fn min_entry(&self) -> f64 {
        self.entries.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn scaled(&self, c: f64) -> Kernel {
        Kernel {
            k: self.k,
            entries: self.entries.iter().map(|v| v * c).collect(),
        }
    }

    /// `self + c * other`, no sign check.
    pub fn axpy(&self, c: f64, other: &Kernel) -> Result<Kernel> {
        check_dim(self.k, other.k)?;
        Ok(Kernel {
            k: self.k,
            entries: self
                .entries
                .iter()
                .zip(&other.entries)
                .map(|(a, b)| a + c * b)
                .collect(),
        })
    }

    /// The quadratic form `sum_{i,j} u_i v_j kernel(i,j)`.
    pub fn theta(&self, u: &[f64], v: &[f64]) -> Result<f64> {
        check_dim(self.k, u.len())?;
        check_dim(self.k, v.len())?;
        Ok(self.theta_unchecked(u, v))
    }

    #[inline]
    pub(crate) fn theta_unchecked(&self, u: &[f64], v: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (i, ui) in u.iter().enumerate() {
            if *ui == 0.0 {
                continue;
            }
            let row = &self.entries[i * self.k..(i + 1) * self.k];
            let inner: f64 = row.iter().zip(v).map(|(k, vj)| k * vj).sum();
            acc += ui * inner;
        }
        acc
    }
}

/// Free-function form of [`Kernel::theta`].
pub fn theta(kernel: &Kernel, u: &[f64], v: &[f64]) -> Result<f64> {
    kernel.theta(u, v)
}

/// Non-negative mass on the `K` types.
#[derive(Clone, Debug, PartialEq)]
pub struct TypeMeasure(Vec<f64>);

impl TypeMeasure {
    pub fn new(mass: Vec<f64>) -> Result<Self> {
        if mass.is_empty() {
            return Err(Error::InvalidMeasure("no types".into()));
        }
        if let Some(v) = mass.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidMeasure(format!("entry {v}")));
        }
        Ok(TypeMeasure(mass))
    }

    /// Probability measure: non-negative and summing to one within 1e-12.
    pub fn probability(mass: Vec<f64>) -> Result<Self> {
        let m = Self::new(mass)?;
        let total: f64 = m.0.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidMeasure(format!("total mass {total}")));
        }
        Ok(m)
    }

    pub fn uniform(k: usize) -> Self {
        TypeMeasure(vec![1.0 / k as f64; k])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn mass(&self) -> &[f64] {
        &self.0
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn is_positive(&self) -> bool {
        self.0.iter().all(|&v| v > 0.0)
    }
}

/// `{ l : |l| <= N }` in increasing order, with the rank table in both
/// directions and the list of ordered merge pairs `(k1, k2)` with
/// `k1 + k2 = l`, both non-zero.
#[derive(Clone, Debug)]
pub struct TypeSlice {
    k: usize,
    n: usize,
    vectors: Vec<TypeVector>,
    norms: Vec<u32>,
    coords: Vec<Vec<f64>>,
    lookup: RankLookup,
    merges: Vec<Merge>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub sum: usize,
}

#[derive(Clone, Debug)]
enum RankLookup {
    // Mixed-radix code with radix N + 1.
    Dense(Vec<u32>),
    Sparse(HashMap<Vec<u32>, usize>),
}

const DENSE_LOOKUP_LIMIT: usize = 1 << 22;
const NO_RANK: u32 = u32::MAX;

/// All type vectors of dimension `k` with norm at most `n`, sorted.
pub fn enumerate_slice(k: usize, n: usize) -> Vec<TypeVector> {
    let mut out = Vec::new();
    let mut current = vec![0u32; k];
    for size in 0..=n {
        let start = out.len();
        fill(&mut current, 0, size as u32, &mut out);
        out[start..].sort();
    }
    out
}

fn fill(current: &mut [u32], pos: usize, remaining: u32, out: &mut Vec<TypeVector>) {
    if pos + 1 == current.len() {
        current[pos] = remaining;
        out.push(TypeVector(current.to_vec()));
        return;
    }
    for c in 0..=remaining {
        current[pos] = c;
        fill(current, pos + 1, remaining - c, out);
    }
    current[pos] = 0;
}

impl TypeSlice {
    pub fn new(k: usize, n: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("K must be at least 1".into()));
        }
        let vectors = enumerate_slice(k, n);
        let norms: Vec<u32> = vectors.iter().map(|v| v.norm()).collect();
        let coords = vectors.iter().map(|v| v.as_f64()).collect();

        let radix = n + 1;
        let table_len = radix.checked_pow(k as u32).filter(|&l| l <= DENSE_LOOKUP_LIMIT);
        let lookup = match table_len {
            Some(len) => {
                let mut table = vec![NO_RANK; len];
                for (rank, v) in vectors.iter().enumerate() {
                    table[encode(v.counts(), radix)] = rank as u32;
                }
                RankLookup::Dense(table)
            }
            None => RankLookup::Sparse(
                vectors
                    .iter()
                    .enumerate()
                    .map(|(r, v)| (v.counts().to_vec(), r))
                    .collect(),
            ),
        };

        let mut slice = TypeSlice {
            k,
            n,
            vectors,
            norms,
            coords,
            lookup,
            merges: Vec::new(),
        };
        let mut merges = Vec::new();
        let mut buf = vec![0u32; k];
        for left in 1..slice.len() {
            for right in 1..slice.len() {
                if (slice.norms[left] + slice.norms[right]) as usize > n {
                    // ranks are sorted by norm
                    break;
                }
                for (b, (a, c)) in buf.iter_mut().zip(
                    slice.vectors[left]
                        .counts()
                        .iter()
                        .zip(slice.vectors[right].counts()),
                ) {
                    *b = a + c;
                }
                let sum = slice.rank_of_counts(&buf).expect("sum inside slice");
                merges.push(Merge { left, right, sum });
            }
        }
        merges.sort_by_key(|m| (m.sum, m.left, m.right));
        slice.merges = merges;
        Ok(slice)
    }

    pub fn types(&self) -> usize {
        self.k
    }

    pub fn truncation(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vectors(&self) -> &[TypeVector] {
        &self.vectors
    }

    pub fn vector(&self, rank: usize) -> &TypeVector {
        &self.vectors[rank]
    }

    pub fn norm(&self, rank: usize) -> u32 {
        self.norms[rank]
    }

    pub fn norms(&self) -> &[u32] {
        &self.norms
    }

    /// Counts of the vector at `rank` as reals.
    pub fn coords(&self, rank: usize) -> &[f64] {
        &self.coords[rank]
    }

    /// Ordered merge pairs, grouped by increasing `sum` rank.
    pub fn merges(&self) -> &[Merge] {
        &self.merges
    }

    pub fn rank(&self, v: &TypeVector) -> Result<usize> {
        check_dim(self.k, v.dim())?;
        self.rank_of_counts(v.counts())
            .ok_or_else(|| Error::OutsideSlice(v.to_string()))
    }

    pub fn rank_of_counts(&self, counts: &[u32]) -> Option<usize> {
        match &self.lookup {
            RankLookup::Dense(table) => {
                let radix = self.n + 1;
                if counts.iter().any(|&c| c as usize >= radix) {
                    return None;
                }
                match table[encode(counts, radix)] {
                    NO_RANK => None,
                    r => Some(r as usize),
                }
            }
            RankLookup::Sparse(map) => map.get(counts).copied(),
        }
    }

    /// Rank of the basis vector `e_j`.
    pub fn basis_rank(&self, j: usize) -> usize {
        // slice always contains all basis vectors once N >= 1
        self.rank(&TypeVector::basis(self.k, j))
            .expect("basis vector in slice")
    }
}

fn encode(counts: &[u32], radix: usize) -> usize {
    counts
        .iter()
        .rev()
        .fold(0usize, |acc, &c| acc * radix + c as usize)
}

/// `|z_0| + sum_{l != 0} |l|^delta |z_l|` for a finitely supported map.
pub fn weighted_norm<'a, I>(z: I, delta: f64) -> f64
where
    I: IntoIterator<Item = (&'a TypeVector, f64)>,
{
    z.into_iter()
        .map(|(l, v)| {
            if l.is_zero() {
                v.abs()
            } else {
                (l.norm() as f64).powf(delta) * v.abs()
            }
        })
        .sum()
}

/// [`weighted_norm`] for a rank-indexed array over a slice.
pub fn weighted_norm_dense(slice: &TypeSlice, z: &[f64], delta: f64) -> f64 {
    z.iter()
        .enumerate()
        .map(|(r, v)| {
            if r == 0 {
                v.abs()
            } else {
                (slice.norm(r) as f64).powf(delta) * v.abs()
            }
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tv(c: &[u32]) -> TypeVector {
        TypeVector::new(c.to_vec())
    }

    #[test]
    fn compare_examples() {
        assert_eq!(tv(&[1, 0]).compare(&tv(&[1, 0])).unwrap(), Ordering::Equal);
        assert_eq!(tv(&[0, 1]).compare(&tv(&[1, 0])).unwrap(), Ordering::Less);
        assert_eq!(tv(&[2, 0]).compare(&tv(&[1, 0])).unwrap(), Ordering::Greater);
        assert!(matches!(
            tv(&[1]).compare(&tv(&[1, 0])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn order_is_total_on_slice() {
        let s = enumerate_slice(2, 4);
        for a in &s {
            for b in &s {
                let ab = a.compare(b).unwrap();
                let ba = b.compare(a).unwrap();
                assert_eq!(ab, ba.reverse());
                assert_eq!(ab == Ordering::Equal, a == b);
                for c in &s {
                    if ab == Ordering::Less && b.compare(c).unwrap() == Ordering::Less {
                        assert_eq!(a.compare(c).unwrap(), Ordering::Less);
                    }
                }
            }
        }
    }

    #[test]
    fn enumerate_examples() {
        assert_eq!(
            enumerate_slice(2, 1),
            vec![tv(&[0, 0]), tv(&[0, 1]), tv(&[1, 0])]
        );
        assert_eq!(enumerate_slice(1, 5).len(), 6);
        assert_eq!(enumerate_slice(3, 4).len(), 35);
    }

    #[test]
    fn slice_sizes_are_binomial() {
        fn binom(n: usize, k: usize) -> usize {
            (1..=k).fold(1, |acc, i| acc * (n + 1 - i) / i)
        }
        for k in 1..=4 {
            for n in 0..=8 {
                let s = enumerate_slice(k, n);
                assert_eq!(s.len(), binom(n + k, k), "K={k} N={n}");
                assert!(s.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }

    #[test]
    fn rank_table_round_trips() {
        for (k, n) in [(1, 10), (2, 6), (3, 4)] {
            let slice = TypeSlice::new(k, n).unwrap();
            assert!(slice.vector(0).is_zero());
            for (r, v) in slice.vectors().iter().enumerate() {
                assert_eq!(slice.rank(v).unwrap(), r);
            }
            let outside = TypeVector::basis(k, 0).checked_add(&TypeVector::new(vec![n as u32; k])).unwrap();
            assert!(slice.rank(&outside).is_err());
        }
    }

    #[test]
    fn merges_cover_all_decompositions() {
        let slice = TypeSlice::new(2, 4).unwrap();
        for m in slice.merges() {
            let s = slice.vector(m.left).checked_add(slice.vector(m.right)).unwrap();
            assert_eq!(slice.rank(&s).unwrap(), m.sum);
            assert!(m.left != 0 && m.right != 0);
        }
        // (1,1) = (0,1)+(1,0) = (1,0)+(0,1)
        let r = slice.rank(&tv(&[1, 1])).unwrap();
        assert_eq!(slice.merges().iter().filter(|m| m.sum == r).count(), 2);
    }

    #[test]
    fn theta_examples() {
        let one = Kernel::constant(1, 1.0);
        assert_eq!(one.theta(&[1.0], &[1.0]).unwrap(), 1.0);
        let twos = Kernel::constant(2, 2.0);
        assert!((twos.theta(&[0.5, 0.5], &[0.5, 0.5]).unwrap() - 2.0).abs() < 1e-15);
        assert!(twos.theta(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn kernel_validation() {
        assert!(Kernel::new(vec![vec![1.0, 2.0], vec![1.0, 1.0]]).is_err());
        assert!(Kernel::new(vec![vec![-1.0]]).is_err());
        assert!(Kernel::perturbation(vec![vec![-1.0]]).is_ok());
        assert!(TypeMeasure::probability(vec![0.5, 0.4]).is_err());
    }

    #[test]
    fn weighted_norm_examples() {
        let zero = TypeVector::zero(1);
        let three = tv(&[3]);
        let two = tv(&[2]);
        assert_eq!(weighted_norm([(&zero, 1.0)], 0.5), 1.0);
        assert_eq!(weighted_norm([(&three, 1.0)], 2.0), 9.0);
        assert_eq!(weighted_norm([(&zero, 1.0), (&two, 1.0)], 1.0), 3.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn kernel3() -> impl Strategy<Value = Kernel> {
            prop::collection::vec(0.0f64..5.0, 6).prop_map(|u| {
                let idx = |i: usize, j: usize| {
                    let (a, b) = if i <= j { (i, j) } else { (j, i) };
                    u[a * 3 - a * (a + 1) / 2 + b]
                };
                let rows = (0..3).map(|i| (0..3).map(|j| idx(i, j)).collect()).collect();
                Kernel::new(rows).unwrap()
            })
        }

        fn vec3() -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(-3.0f64..3.0, 3)
        }

        proptest! {
            #[test]
            fn theta_symmetric_and_bilinear(k in kernel3(), u in vec3(), v in vec3(), w in vec3(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
                let uv = k.theta(&u, &v).unwrap();
                prop_assert!((uv - k.theta(&v, &u).unwrap()).abs() < 1e-12);
                let comb: Vec<f64> = u.iter().zip(&w).map(|(x, y)| a * x + b * y).collect();
                let lhs = k.theta(&comb, &v).unwrap();
                let rhs = a * uv + b * k.theta(&w, &v).unwrap();
                prop_assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()));
            }

            #[test]
            fn weighted_norm_is_a_norm(x in prop::collection::vec(-5.0f64..5.0, 10), y in prop::collection::vec(-5.0f64..5.0, 10), c in -3.0f64..3.0, delta in 0.0f64..3.0) {
                let slice = TypeSlice::new(2, 3).unwrap();
                let sum: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
                let scaled: Vec<f64> = x.iter().map(|a| c * a).collect();
                let nx = weighted_norm_dense(&slice, &x, delta);
                let ny = weighted_norm_dense(&slice, &y, delta);
                prop_assert!(weighted_norm_dense(&slice, &sum, delta) <= nx + ny + 1e-9);
                prop_assert!((weighted_norm_dense(&slice, &scaled, delta) - c.abs() * nx).abs() < 1e-9 * (1.0 + nx));
            }
        }
    }
}
