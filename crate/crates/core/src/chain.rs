//! Finite-state node dynamics and the induced law of the empirical distribution.
//!
//! Nodes live in a [`StateSpace`]; the data of interest is the
//! [`EmpiricalDistribution`] of node states, a point of `M(n)`. A
//! [`LocalKernel`] gives the per-node law `T(s' | s, m)` and a
//! [`TransitionKernel`] the law of the next empirical distribution, `T_m`.
//!
//! Two independent constructions of `T_m` are provided: the per-state
//! marginal as a convolution of binomials ([`deep_ck_marginal`]) and the full
//! joint row as a convolution of multinomial allocations
//! ([`build_kernel_exact`]). They must agree on every marginal.

use std::borrow::Cow;
use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::sync::{Arc, RwLock};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Binomial, Distribution};

use crate::{Error, Result};

/// Default cap on `|M(n)|`.
pub const DEFAULT_ATOM_CAP: u64 = 10_000_000;

/// Largest `|M(n)|` for which a dense `T_m` is built.
pub const EXACT_KERNEL_ATOM_CAP: usize = 10_000;

const LOCAL_ROW_TOL: f64 = 1e-12;
const KERNEL_ROW_TOL: f64 = 1e-10;
const LABEL_TOL: f64 = 1e-9;

/// Ordered set of distinct real state labels.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace {
    labels: Vec<f64>,
}

impl StateSpace {
    pub fn new(labels: Vec<f64>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::invalid("state space must have at least one label"));
        }
        for (i, a) in labels.iter().enumerate() {
            if !a.is_finite() {
                return Err(Error::invalid(format!("state label {a} is not finite")));
            }
            if labels[..i].iter().any(|b| (a - b).abs() <= LABEL_TOL) {
                return Err(Error::invalid(format!("duplicate state label {a}")));
            }
        }
        Ok(Self { labels })
    }

    /// Integer labels `lo..=hi`.
    pub fn integer_range(lo: i64, hi: i64) -> Result<Self> {
        if hi < lo {
            return Err(Error::invalid(format!("empty range {lo}..={hi}")));
        }
        Self::new((lo..=hi).map(|s| s as f64).collect())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn label(&self, index: usize) -> f64 {
        self.labels[index]
    }

    pub fn index_of(&self, label: f64) -> Option<usize> {
        self.labels.iter().position(|l| (l - label).abs() <= LABEL_TOL)
    }
}

/// State counts of `n` nodes; the probability view is `counts / n`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EmpiricalDistribution {
    counts: Vec<u32>,
}

impl EmpiricalDistribution {
    pub fn new(counts: Vec<u32>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::invalid("empirical distribution needs at least one state"));
        }
        if counts.iter().all(|&c| c == 0) {
            return Err(Error::invalid("empirical distribution of an empty population"));
        }
        Ok(Self { counts })
    }

    /// Empirical distribution of explicit node states (state indices).
    pub fn from_node_states(states: &[usize], dim: usize) -> Self {
        let mut counts = vec![0u32; dim];
        for &s in states {
            counts[s] += 1;
        }
        Self { counts }
    }

    pub fn point_mass(dim: usize, state: usize, n: u32) -> Self {
        let mut counts = vec![0u32; dim];
        counts[state] = n;
        Self { counts }
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn count(&self, state: usize) -> u32 {
        self.counts[state]
    }

    pub fn population(&self) -> u32 {
        self.counts.iter().sum()
    }

    pub fn dim(&self) -> usize {
        self.counts.len()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let n = self.population() as f64;
        self.counts.iter().map(|&c| c as f64 / n).collect()
    }
}

impl fmt::Display for EmpiricalDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.counts.iter().map(|c| c.to_string()).collect();
        write!(f, "{}", parts.join(":"))
    }
}

/// `C(n + d - 1, d - 1)`, saturating at `u128::MAX`.
pub fn composition_count(n: u32, dim: usize) -> u128 {
    if dim == 0 {
        return 0;
    }
    let k = (dim - 1) as u128;
    let total = n as u128 + k;
    let k = k.min(total - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = match acc.checked_mul(total - i) {
            Some(v) => v / (i + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// All points of `M(n)` in canonical order: descending lexicographic on the
/// count vector, so `(n, 0, ..)` comes first and `(.., 0, n)` last.
pub fn enumerate_empirical_distributions(
    n: u32,
    space: &StateSpace,
    cap: u64,
) -> Result<Vec<EmpiricalDistribution>> {
    if n == 0 {
        return Err(Error::invalid("population size must be at least 1"));
    }
    let size = composition_count(n, space.len());
    if size > cap as u128 {
        return Err(Error::StateSpaceTooLarge { size, cap });
    }
    let mut out = Vec::with_capacity(size as usize);
    let mut buf = vec![0u32; space.len()];
    push_compositions(n, 0, &mut buf, &mut |c| {
        out.push(EmpiricalDistribution { counts: c.to_vec() })
    });
    Ok(out)
}

fn push_compositions(remaining: u32, pos: usize, buf: &mut [u32], emit: &mut impl FnMut(&[u32])) {
    if pos + 1 == buf.len() {
        buf[pos] = remaining;
        emit(buf);
        return;
    }
    for c in (0..=remaining).rev() {
        buf[pos] = c;
        push_compositions(remaining - c, pos + 1, buf, emit);
    }
    buf[pos] = 0;
}

/// Indexed `M(n)`; the index basis of every table and kernel.
#[derive(Debug, Clone)]
pub struct EmpiricalSpace {
    n: u32,
    dim: usize,
    atoms: Vec<EmpiricalDistribution>,
    probabilities: Vec<Vec<f64>>,
    index: HashMap<EmpiricalDistribution, usize>,
}

impl EmpiricalSpace {
    pub fn new(n: u32, space: &StateSpace) -> Result<Self> {
        Self::with_cap(n, space, DEFAULT_ATOM_CAP)
    }

    pub fn with_cap(n: u32, space: &StateSpace, cap: u64) -> Result<Self> {
        let atoms = enumerate_empirical_distributions(n, space, cap)?;
        let probabilities = atoms.iter().map(|a| a.probabilities()).collect();
        let index = atoms.iter().cloned().enumerate().map(|(i, a)| (a, i)).collect();
        Ok(Self { n, dim: space.len(), atoms, probabilities, index })
    }

    pub fn population(&self) -> u32 {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn atoms(&self) -> &[EmpiricalDistribution] {
        &self.atoms
    }

    pub fn atom(&self, index: usize) -> &EmpiricalDistribution {
        &self.atoms[index]
    }

    pub fn probabilities(&self, index: usize) -> &[f64] {
        &self.probabilities[index]
    }

    pub fn index_of(&self, atom: &EmpiricalDistribution) -> Option<usize> {
        self.index.get(atom).copied()
    }

    /// Index of the atom whose probability vector equals `p` (up to rounding
    /// `p * n` to integers within 1e-6).
    pub fn index_of_probabilities(&self, p: &[f64]) -> Option<usize> {
        if p.len() != self.dim {
            return None;
        }
        let mut counts = Vec::with_capacity(p.len());
        for &v in p {
            let c = v * self.n as f64;
            let r = c.round();
            if (c - r).abs() > 1e-6 || r < 0.0 {
                return None;
            }
            counts.push(r as u32);
        }
        self.index.get(&EmpiricalDistribution { counts }).copied()
    }

    /// Atom closest (Euclidean) to the uniform pmf; ties go to the lowest index.
    pub fn nearest_to_uniform(&self) -> usize {
        let u = 1.0 / self.dim as f64;
        let mut best = (0, f64::INFINITY);
        for (i, p) in self.probabilities.iter().enumerate() {
            let d: f64 = p.iter().map(|v| (v - u).powi(2)).sum();
            if d < best.1 - 1e-15 {
                best = (i, d);
            }
        }
        best.0
    }
}

/// Probability mass function of a node's local noise.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePmf {
    values: Vec<f64>,
    probs: Vec<f64>,
}

impl NoisePmf {
    pub fn new(values: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        if values.len() != probs.len() || values.is_empty() {
            return Err(Error::invalid("noise values and probabilities must have equal, nonzero length"));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("noise probabilities must lie in [0, 1]"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::NotStochastic { row: 0, sum: total });
        }
        Ok(Self { values, probs })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.values[sample_index(&self.probs, rng)]
    }
}

type CoupledFn = dyn Fn(&[f64]) -> Result<DMatrix<f64>> + Send + Sync;

/// Per-node transition law `T(s' | s, m)`, stored row-wise: entry `(s, s')`.
#[derive(Clone)]
pub struct LocalKernel {
    dim: usize,
    repr: LocalRepr,
}

#[derive(Clone)]
enum LocalRepr {
    Decoupled(DMatrix<f64>),
    Coupled(Arc<CoupledFn>),
}

impl fmt::Debug for LocalKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.repr {
            LocalRepr::Decoupled(m) => f.debug_tuple("LocalKernel::Decoupled").field(m).finish(),
            LocalRepr::Coupled(_) => write!(f, "LocalKernel::Coupled(dim = {})", self.dim),
        }
    }
}

impl LocalKernel {
    /// `m`-independent kernel.
    pub fn decoupled(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() || matrix.nrows() == 0 {
            return Err(Error::invalid("local kernel must be a nonempty square matrix"));
        }
        validate_local(&matrix)?;
        Ok(Self { dim: matrix.nrows(), repr: LocalRepr::Decoupled(matrix) })
    }

    /// Kernel that depends on the current distribution `p` through `f`.
    /// Rows are validated at every evaluation.
    pub fn coupled<F>(dim: usize, f: F) -> Self
    where
        F: Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    {
        let repr = LocalRepr::Coupled(Arc::new(move |p: &[f64]| {
            let m = f(p);
            if m.nrows() != dim || m.ncols() != dim {
                return Err(Error::DimensionMismatch { expected: dim, actual: m.nrows() });
            }
            validate_local(&m)?;
            Ok(m)
        }));
        Self { dim, repr }
    }

    /// Coupled kernel given as one matrix per atom of `M(n)`. Evaluating at a
    /// non-atom rounds to the nearest atom.
    pub fn tabulated(space: &EmpiricalSpace, matrices: Vec<DMatrix<f64>>) -> Result<Self> {
        if matrices.len() != space.len() {
            return Err(Error::DimensionMismatch { expected: space.len(), actual: matrices.len() });
        }
        let dim = space.dim();
        for m in &matrices {
            if m.nrows() != dim || m.ncols() != dim {
                return Err(Error::DimensionMismatch { expected: dim, actual: m.nrows() });
            }
            validate_local(m)?;
        }
        let space = space.clone();
        let table = Arc::new(matrices);
        let repr = LocalRepr::Coupled(Arc::new(move |p: &[f64]| {
            let n = space.population() as f64;
            let mut counts: Vec<u32> = p.iter().map(|v| (v * n).round().max(0.0) as u32).collect();
            let total: u32 = counts.iter().sum();
            // rounding can miss the population by a node; fix on the largest entry
            if total != space.population() {
                let (argmax, _) = counts.iter().enumerate().max_by_key(|(_, c)| **c).unwrap();
                counts[argmax] = (counts[argmax] as i64 + space.population() as i64 - total as i64).max(0) as u32;
            }
            let idx = EmpiricalDistribution::new(counts)
                .ok()
                .and_then(|a| space.index_of(&a))
                .ok_or_else(|| Error::invalid("distribution is not a point of M(n)"))?;
            Ok(table[idx].clone())
        }));
        Ok(Self { dim, repr })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_decoupled(&self) -> bool {
        matches!(self.repr, LocalRepr::Decoupled(_))
    }

    /// `T(. | ., p)` as a row-stochastic matrix.
    pub fn matrix_at(&self, p: &[f64]) -> Result<Cow<'_, DMatrix<f64>>> {
        match &self.repr {
            LocalRepr::Decoupled(m) => Ok(Cow::Borrowed(m)),
            LocalRepr::Coupled(f) => {
                if p.len() != self.dim {
                    return Err(Error::DimensionMismatch { expected: self.dim, actual: p.len() });
                }
                f(p).map(Cow::Owned)
            }
        }
    }
}

fn validate_local(m: &DMatrix<f64>) -> Result<()> {
    for (r, row) in m.row_iter().enumerate() {
        if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::NotStochastic { row: r, sum: row.sum() });
        }
        let sum = row.sum();
        if (sum - 1.0).abs() > LOCAL_ROW_TOL {
            return Err(Error::NotStochastic { row: r, sum });
        }
    }
    Ok(())
}

/// `T(s' | s) = sum_w P_W(w) 1{s' = f(s, w)}` for decoupled dynamics.
pub fn local_kernel_from_noise<F>(space: &StateSpace, noise: &NoisePmf, f: F) -> Result<LocalKernel>
where
    F: Fn(f64, f64) -> f64,
{
    let matrix = kernel_rows_from_noise(space, noise, f)?;
    LocalKernel::decoupled(matrix)
}

/// Coupled version: `f(s, m, w)`, tabulated over every atom of `M(n)`.
pub fn coupled_kernel_from_noise<F>(
    space: &StateSpace,
    atoms: &EmpiricalSpace,
    noise: &NoisePmf,
    f: F,
) -> Result<LocalKernel>
where
    F: Fn(f64, &[f64], f64) -> f64,
{
    let matrices = (0..atoms.len())
        .map(|i| {
            let p = atoms.probabilities(i);
            kernel_rows_from_noise(space, noise, |s, w| f(s, p, w))
        })
        .collect::<Result<Vec<_>>>()?;
    LocalKernel::tabulated(atoms, matrices)
}

fn kernel_rows_from_noise(
    space: &StateSpace,
    noise: &NoisePmf,
    f: impl Fn(f64, f64) -> f64,
) -> Result<DMatrix<f64>> {
    let d = space.len();
    let mut m = DMatrix::zeros(d, d);
    for (i, &s) in space.labels().iter().enumerate() {
        for (&w, &p) in noise.values().iter().zip(noise.probs()) {
            let out = f(s, w);
            let j = space
                .index_of(out)
                .ok_or(Error::DynamicsLeavesStateSpace { state: s, noise: w, output: out })?;
            m[(i, j)] += p;
        }
        // the noise pmf is validated to 1e-9; land rows exactly on the simplex
        let sum: f64 = m.row(i).sum();
        m.row_mut(i).scale_mut(1.0 / sum);
    }
    Ok(m)
}

/// Law `T_m(m' | m)` of the next empirical distribution, indexed by the
/// canonical order of an [`EmpiricalSpace`], with memoized powers.
pub struct TransitionKernel {
    space: Arc<EmpiricalSpace>,
    matrix: DMatrix<f64>,
    powers: RwLock<Vec<Arc<DMatrix<f64>>>>,
}

impl fmt::Debug for TransitionKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TransitionKernel")
            .field("atoms", &self.space.len())
            .field("cached_powers", &self.powers.read().map(|p| p.len()).unwrap_or(0))
            .finish()
    }
}

impl Clone for TransitionKernel {
    fn clone(&self) -> Self {
        let powers = self.powers.read().expect("power cache poisoned").clone();
        Self { space: self.space.clone(), matrix: self.matrix.clone(), powers: RwLock::new(powers) }
    }
}

impl TransitionKernel {
    /// Wraps a matrix after floating-point hygiene: entries down to -1e-10
    /// are clamped to zero and rows within 1e-10 of unit mass renormalized.
    pub fn from_matrix(space: Arc<EmpiricalSpace>, mut matrix: DMatrix<f64>) -> Result<Self> {
        let n = space.len();
        if matrix.nrows() != n || matrix.ncols() != n {
            return Err(Error::DimensionMismatch { expected: n, actual: matrix.nrows() });
        }
        for r in 0..n {
            let mut row = matrix.row_mut(r);
            for v in row.iter_mut() {
                if *v < 0.0 {
                    if *v < -KERNEL_ROW_TOL {
                        return Err(Error::NotStochastic { row: r, sum: f64::NAN });
                    }
                    *v = 0.0;
                }
            }
            let sum = row.sum();
            if (sum - 1.0).abs() > KERNEL_ROW_TOL {
                return Err(Error::NotStochastic { row: r, sum });
            }
            row.scale_mut(1.0 / sum);
        }
        let identity = Arc::new(DMatrix::identity(n, n));
        let first = Arc::new(matrix.clone());
        Ok(Self { space, matrix, powers: RwLock::new(vec![identity, first]) })
    }

    pub fn space(&self) -> &Arc<EmpiricalSpace> {
        &self.space
    }

    pub fn len(&self) -> usize {
        self.space.len()
    }

    pub fn is_empty(&self) -> bool {
        self.space.is_empty()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// `T_m^y`, computed by repeated multiplication and cached.
    pub fn power(&self, y: usize) -> Arc<DMatrix<f64>> {
        if let Some(p) = self.powers.read().expect("power cache poisoned").get(y) {
            return p.clone();
        }
        let mut cache = self.powers.write().expect("power cache poisoned");
        while cache.len() <= y {
            let next = cache.last().unwrap().as_ref() * &self.matrix;
            cache.push(Arc::new(next));
        }
        cache[y].clone()
    }

    /// Fills the power cache up to and including `y`.
    pub fn precompute(&self, y: usize) {
        let _ = self.power(y);
    }

    /// Row `T_m^y(x, .)`: the posterior over `m_t` given `(x, y)`.
    pub fn posterior(&self, x: usize, y: usize) -> DVector<f64> {
        self.power(y).row(x).transpose()
    }

    /// Writes the matrix as CSV: header `from,0,1,..`, one row per source atom.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let n = self.len();
        let header: Vec<String> = (0..n).map(|j| j.to_string()).collect();
        writeln!(w, "from,{}", header.join(","))?;
        for i in 0..n {
            let row: Vec<String> = self.matrix.row(i).iter().map(|v| format!("{v:.17e}")).collect();
            writeln!(w, "{i},{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(space: Arc<EmpiricalSpace>, r: R) -> Result<Self> {
        let n = space.len();
        let mut matrix = DMatrix::zeros(n, n);
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty kernel CSV".into()))??;
        if header.split(',').count() != n + 1 {
            return Err(Error::Parse(format!("kernel CSV header has wrong width for {n} atoms")));
        }
        let mut seen = 0;
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let i: usize = parse_field(fields.next())?;
            if i >= n {
                return Err(Error::Parse(format!("row index {i} out of range")));
            }
            for j in 0..n {
                matrix[(i, j)] = parse_field(fields.next())?;
            }
            seen += 1;
        }
        if seen != n {
            return Err(Error::Parse(format!("expected {n} kernel rows, found {seen}")));
        }
        Self::from_matrix(space, matrix)
    }
}

fn parse_field<T: std::str::FromStr>(field: Option<&str>) -> Result<T> {
    let s = field.ok_or_else(|| Error::Parse("missing field".into()))?.trim();
    s.parse().map_err(|_| Error::Parse(format!("cannot parse field {s:?}")))
}

/// Exact `T_m`: for each source atom, the `n m(s)` nodes in state `s` are
/// allocated multinomially under row `T(. | s, m)`, and the allocations are
/// convolved across source states.
pub fn build_kernel_exact(local: &LocalKernel, space: Arc<EmpiricalSpace>) -> Result<TransitionKernel> {
    if local.dim() != space.dim() {
        return Err(Error::DimensionMismatch { expected: space.dim(), actual: local.dim() });
    }
    let n_atoms = space.len();
    if n_atoms > EXACT_KERNEL_ATOM_CAP {
        return Err(Error::KernelTooLarge { atoms: n_atoms });
    }
    let ln_fact = ln_factorials(space.population() as usize);
    let mut matrix = DMatrix::zeros(n_atoms, n_atoms);
    for i in 0..n_atoms {
        let row_law = local.matrix_at(space.probabilities(i))?;
        let counts = space.atom(i).counts();
        let mut dist: HashMap<Vec<u32>, f64> = HashMap::from([(vec![0u32; space.dim()], 1.0)]);
        for (s, &c) in counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let probs: Vec<f64> = row_law.row(s).iter().copied().collect();
            let alloc = multinomial_allocations(c, &probs, &ln_fact);
            let mut next: HashMap<Vec<u32>, f64> = HashMap::with_capacity(dist.len() * alloc.len());
            for (partial, p) in &dist {
                for (split, q) in &alloc {
                    let key: Vec<u32> = partial.iter().zip(split).map(|(a, b)| a + b).collect();
                    *next.entry(key).or_insert(0.0) += p * q;
                }
            }
            dist = next;
        }
        for (counts, p) in dist {
            let j = space
                .index_of(&EmpiricalDistribution { counts })
                .expect("allocation preserves the population");
            matrix[(i, j)] += p;
        }
    }
    TransitionKernel::from_matrix(space, matrix)
}

fn ln_factorials(n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    out.push(0.0);
    for k in 1..=n {
        out.push(out[k - 1] + (k as f64).ln());
    }
    out
}

/// Every split of `c` nodes over the targets with its multinomial probability;
/// zero-probability splits are dropped.
fn multinomial_allocations(c: u32, probs: &[f64], ln_fact: &[f64]) -> Vec<(Vec<u32>, f64)> {
    let mut out = Vec::new();
    let mut buf = vec![0u32; probs.len()];
    push_compositions(c, 0, &mut buf, &mut |split| {
        let mut p = ln_fact[c as usize];
        let mut mass = 1.0;
        for (&k, &pr) in split.iter().zip(probs) {
            if k == 0 {
                continue;
            }
            if pr == 0.0 {
                return;
            }
            p -= ln_fact[k as usize];
            mass *= pr.powi(k as i32);
        }
        let prob = p.exp() * mass;
        if prob > 0.0 {
            out.push((split.to_vec(), prob));
        }
    });
    out
}

/// `Binomial(trials, p)` pmf of length `trials + 1`.
pub fn binomial_pmf(trials: u32, p: f64) -> Vec<f64> {
    let t = trials as usize;
    let mut out = vec![0.0; t + 1];
    if p <= 0.0 {
        out[0] = 1.0;
        return out;
    }
    if p >= 1.0 {
        out[t] = 1.0;
        return out;
    }
    let ln_fact = ln_factorials(t);
    let (lp, lq) = (p.ln(), (1.0 - p).ln());
    for (k, slot) in out.iter_mut().enumerate() {
        *slot = (ln_fact[t] - ln_fact[k] - ln_fact[t - k] + k as f64 * lp + (t - k) as f64 * lq).exp();
    }
    out
}

fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        if *x == 0.0 {
            continue;
        }
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

/// Law of `n m_{t+1}(target)` given `m_t = m`: entry `y` is
/// `P(m_{t+1}(target) = y / n | m)`. Built as the convolution over source
/// states of `Binomial(n m(s), T(target | s, m))`, a point mass at zero when
/// `m(s) = 0`.
pub fn deep_ck_marginal(m: &EmpiricalDistribution, target: usize, local: &LocalKernel) -> Result<Vec<f64>> {
    if m.dim() != local.dim() {
        return Err(Error::DimensionMismatch { expected: local.dim(), actual: m.dim() });
    }
    if target >= m.dim() {
        return Err(Error::invalid(format!("target state {target} out of range")));
    }
    let law = local.matrix_at(&m.probabilities())?;
    let mut acc = vec![1.0];
    for (s, &c) in m.counts().iter().enumerate() {
        let phi = if c == 0 { vec![1.0] } else { binomial_pmf(c, law[(s, target)]) };
        acc = convolve(&acc, &phi);
    }
    acc.resize(m.population() as usize + 1, 0.0);
    Ok(acc)
}

/// Monte-Carlo estimate of `T_m` from a pathwise one-step sampler; the only
/// construction available when node noises are exchangeable but not i.i.d.
pub fn estimate_kernel_monte_carlo<R, F>(
    space: Arc<EmpiricalSpace>,
    samples_per_row: usize,
    rng: &mut R,
    mut step: F,
) -> Result<TransitionKernel>
where
    R: Rng + ?Sized,
    F: FnMut(&EmpiricalDistribution, &mut R) -> EmpiricalDistribution,
{
    if samples_per_row == 0 {
        return Err(Error::invalid("need at least one sample per row"));
    }
    let n = space.len();
    let mut matrix = DMatrix::zeros(n, n);
    for i in 0..n {
        let from = space.atom(i).clone();
        for _ in 0..samples_per_row {
            let to = step(&from, rng);
            let j = space
                .index_of(&to)
                .ok_or_else(|| Error::invalid("sampler produced a distribution outside M(n)"))?;
            matrix[(i, j)] += 1.0;
        }
    }
    matrix /= samples_per_row as f64;
    TransitionKernel::from_matrix(space, matrix)
}

/// One pathwise step at the count level: given `m`, the nodes in each state
/// move independently under `T(. | s, m)`, i.e. a multinomial split per
/// source state drawn as successive binomials.
pub fn sample_next_counts<R: Rng + ?Sized>(
    m: &EmpiricalDistribution,
    local: &LocalKernel,
    rng: &mut R,
) -> Result<EmpiricalDistribution> {
    let law = local.matrix_at(&m.probabilities())?;
    let d = m.dim();
    let mut next = vec![0u32; d];
    for (s, &c) in m.counts().iter().enumerate() {
        let mut left = c as u64;
        let mut mass = 1.0;
        for t in 0..d {
            if left == 0 {
                break;
            }
            let p = law[(s, t)];
            let drawn = if t + 1 == d || mass <= p {
                left
            } else {
                let ratio = (p / mass).clamp(0.0, 1.0);
                Binomial::new(left, ratio).map_err(|e| Error::invalid(e.to_string()))?.sample(rng)
            };
            next[t] += drawn as u32;
            left -= drawn;
            mass -= p;
        }
    }
    Ok(EmpiricalDistribution { counts: next })
}

/// Draws an index from a pmf by inversion.
pub(crate) fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Cumulative table for repeated inversion sampling from one pmf.
#[derive(Debug, Clone)]
pub(crate) struct CumulativePmf {
    cdf: Vec<f64>,
    last_positive: usize,
}

impl CumulativePmf {
    pub(crate) fn new<'a>(probs: impl IntoIterator<Item = &'a f64>) -> Self {
        let mut acc = 0.0;
        let mut last_positive = 0;
        let cdf = probs
            .into_iter()
            .enumerate()
            .map(|(i, p)| {
                if *p > 0.0 {
                    last_positive = i;
                }
                acc += p;
                acc
            })
            .collect();
        Self { cdf, last_positive }
    }

    pub(crate) fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let i = self.cdf.partition_point(|&c| c <= u);
        i.min(self.last_positive)
    }
}
