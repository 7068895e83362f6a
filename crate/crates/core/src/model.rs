//! Problem-domain types: supports, outcomes, the measurement matrix, the
//! noise channel and the prior, plus the OR measurement and its likelihood.

use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use crate::error::{invalid, Result};
use crate::rng::RandomStream;

/// Smallest flip probability used in any log or ratio.
pub const RHO_MIN: f64 = 1e-9;

/// Fixed-length packed bit vector.
#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct BitVector {
    words: Vec<u64>,
    len: usize,
}

impl BitVector {
    pub fn zeros(len: usize) -> Self {
        Self {
            words: vec![0; len.div_ceil(64)],
            len,
        }
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        let mut v = Self::zeros(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            if b {
                v.set(i, true);
            }
        }
        v
    }

    /// # Panics
    /// If an index is out of range.
    pub fn from_indices(len: usize, ones: impl IntoIterator<Item = usize>) -> Self {
        let mut v = Self::zeros(len);
        for i in ones {
            assert!(i < len, "bit index {i} out of range {len}");
            v.set(i, true);
        }
        v
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        (self.words[i >> 6] >> (i & 63)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, value: bool) {
        debug_assert!(i < self.len);
        let mask = 1u64 << (i & 63);
        if value {
            self.words[i >> 6] |= mask;
        } else {
            self.words[i >> 6] &= !mask;
        }
    }

    #[inline]
    pub fn flip(&mut self, i: usize) {
        debug_assert!(i < self.len);
        self.words[i >> 6] ^= 1u64 << (i & 63);
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Indices of set bits in ascending order.
    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &w)| {
            let mut w = w;
            std::iter::from_fn(move || {
                if w == 0 {
                    return None;
                }
                let b = w.trailing_zeros() as usize;
                w &= w - 1;
                Some(wi * 64 + b)
            })
        })
    }

    pub fn hamming_distance(&self, other: &BitVector) -> usize {
        assert_eq!(self.len, other.len);
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones() as usize)
            .sum()
    }

    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.len).map(|i| self.get(i)).collect()
    }
}

impl fmt::Debug for BitVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: String = (0..self.len).map(|i| if self.get(i) { '1' } else { '0' }).collect();
        write!(f, "BitVector({s})")
    }
}

/// `x ∈ {0,1}^N`; bit `i` is set iff item `i` is defective.
#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub struct SupportVector(pub BitVector);

impl SupportVector {
    pub fn empty(items: usize) -> Self {
        Self(BitVector::zeros(items))
    }

    pub fn from_defectives(items: usize, defectives: impl IntoIterator<Item = usize>) -> Self {
        Self(BitVector::from_indices(items, defectives))
    }

    pub fn items(&self) -> usize {
        self.0.len()
    }

    pub fn is_defective(&self, i: usize) -> bool {
        self.0.get(i)
    }

    pub fn defective_count(&self) -> usize {
        self.0.count_ones()
    }

    pub fn defectives(&self) -> Vec<usize> {
        self.0.ones().collect()
    }
}

/// `y ∈ {0,1}^M`, one bit per test.
#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub struct TestOutcomes(pub BitVector);

impl TestOutcomes {
    pub fn tests(&self) -> usize {
        self.0.len()
    }

    pub fn is_positive(&self, t: usize) -> bool {
        self.0.get(t)
    }
}

/// An `M × N` binary design held as two sorted sparse adjacencies.
///
/// Edges are numbered in test-major order: the edges of test `t` occupy
/// `test_edges(t)`, ascending by item. `item_edges(i)` gives the ids of the
/// same edges seen from the item side, ascending by test.
#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub struct MeasurementMatrix {
    tests: usize,
    items: usize,
    row_start: Vec<usize>,
    row_items: Vec<usize>,
    col_start: Vec<usize>,
    col_tests: Vec<usize>,
    col_edges: Vec<usize>,
}

impl MeasurementMatrix {
    /// Builds from one list of item indices per test. Lists may be unsorted;
    /// out-of-range or repeated items are rejected.
    pub fn from_rows(items: usize, rows: Vec<Vec<usize>>) -> Result<Self> {
        let mut row_start = Vec::with_capacity(rows.len() + 1);
        let mut row_items = Vec::new();
        row_start.push(0);
        for (t, mut row) in rows.into_iter().enumerate() {
            row.sort_unstable();
            for w in row.windows(2) {
                if w[0] == w[1] {
                    return Err(invalid(format!("test {t} lists item {} twice", w[0])));
                }
            }
            if let Some(&last) = row.last() {
                if last >= items {
                    return Err(invalid(format!(
                        "test {t} lists item {last}, but there are only {items} items"
                    )));
                }
            }
            row_items.extend(row);
            row_start.push(row_items.len());
        }
        Ok(Self::from_csr(items, row_start, row_items))
    }

    /// Dense `M × N` 0/1 rows.
    pub fn from_dense(dense: &[Vec<u8>]) -> Result<Self> {
        let items = dense.first().map_or(0, Vec::len);
        let mut rows = Vec::with_capacity(dense.len());
        for (t, r) in dense.iter().enumerate() {
            if r.len() != items {
                return Err(invalid(format!("dense row {t} has length {}", r.len())));
            }
            rows.push(r.iter().enumerate().filter(|(_, &a)| a != 0).map(|(i, _)| i).collect());
        }
        Self::from_rows(items, rows)
    }

    /// Assembles from a validated CSR (sorted, in range, no duplicates).
    pub(crate) fn from_csr(items: usize, row_start: Vec<usize>, row_items: Vec<usize>) -> Self {
        let tests = row_start.len() - 1;
        let mut degree = vec![0usize; items];
        for &i in &row_items {
            degree[i] += 1;
        }
        let mut col_start = Vec::with_capacity(items + 1);
        col_start.push(0);
        for d in &degree {
            col_start.push(col_start.last().unwrap() + d);
        }
        let mut fill = col_start[..items].to_vec();
        let mut col_tests = vec![0; row_items.len()];
        let mut col_edges = vec![0; row_items.len()];
        // tests visited in ascending order, so each column comes out sorted
        for t in 0..tests {
            for (e, &i) in row_items.iter().enumerate().take(row_start[t + 1]).skip(row_start[t]) {
                col_tests[fill[i]] = t;
                col_edges[fill[i]] = e;
                fill[i] += 1;
            }
        }
        let m = Self {
            tests,
            items,
            row_start,
            row_items,
            col_start,
            col_tests,
            col_edges,
        };
        debug_assert!(m.is_consistent());
        m
    }

    pub fn tests(&self) -> usize {
        self.tests
    }

    pub fn items(&self) -> usize {
        self.items
    }

    pub fn edge_count(&self) -> usize {
        self.row_items.len()
    }

    /// 𝒩(t), ascending.
    #[inline]
    pub fn test_items(&self, t: usize) -> &[usize] {
        &self.row_items[self.row_start[t]..self.row_start[t + 1]]
    }

    #[inline]
    pub fn test_edges(&self, t: usize) -> Range<usize> {
        self.row_start[t]..self.row_start[t + 1]
    }

    /// 𝒩(i), ascending.
    #[inline]
    pub fn item_tests(&self, i: usize) -> &[usize] {
        &self.col_tests[self.col_start[i]..self.col_start[i + 1]]
    }

    /// Edge ids of item `i`, aligned with [`Self::item_tests`].
    #[inline]
    pub fn item_edges(&self, i: usize) -> &[usize] {
        &self.col_edges[self.col_start[i]..self.col_start[i + 1]]
    }

    #[inline]
    pub fn edge_item(&self, e: usize) -> usize {
        self.row_items[e]
    }

    pub fn test_degree(&self, t: usize) -> usize {
        self.row_start[t + 1] - self.row_start[t]
    }

    pub fn item_degree(&self, i: usize) -> usize {
        self.col_start[i + 1] - self.col_start[i]
    }

    pub fn contains(&self, t: usize, i: usize) -> bool {
        self.test_items(t).binary_search(&i).is_ok()
    }

    /// Checks that both adjacencies are sorted, in range, duplicate free and
    /// exact transposes of each other.
    pub fn is_consistent(&self) -> bool {
        if self.row_start.len() != self.tests + 1 || self.col_start.len() != self.items + 1 {
            return false;
        }
        let mut seen = 0usize;
        for t in 0..self.tests {
            let row = self.test_items(t);
            if row.windows(2).any(|w| w[0] >= w[1]) || row.iter().any(|&i| i >= self.items) {
                return false;
            }
            seen += row.len();
        }
        if seen != self.col_tests.len() {
            return false;
        }
        for i in 0..self.items {
            let col = self.item_tests(i);
            if col.windows(2).any(|w| w[0] >= w[1]) {
                return false;
            }
            for (&t, &e) in col.iter().zip(self.item_edges(i)) {
                if t >= self.tests || !self.test_edges(t).contains(&e) || self.row_items[e] != i {
                    return false;
                }
            }
        }
        true
    }

    /// Test-major lists of item indices.
    pub fn rows(&self) -> Vec<Vec<usize>> {
        (0..self.tests).map(|t| self.test_items(t).to_vec()).collect()
    }
}

/// Binary symmetric channel: every noiseless outcome flips independently
/// with probability `rho`.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct NoiseChannel {
    rho: f64,
}

impl NoiseChannel {
    pub fn new(rho: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(invalid(format!("flip probability {rho} is outside [0, 1]")));
        }
        Ok(Self { rho })
    }

    /// Flip probability as given; used when sampling noise.
    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// Flip probability clamped to `[RHO_MIN, 1 - RHO_MIN]`; used for inference.
    pub fn effective_rho(&self) -> f64 {
        self.rho.clamp(RHO_MIN, 1.0 - RHO_MIN)
    }

    /// `ln(1 - ρ)`, clamped ρ.
    pub fn ln_agree(&self) -> f64 {
        (-self.effective_rho()).ln_1p()
    }

    /// `ln ρ`, clamped ρ.
    pub fn ln_flip(&self) -> f64 {
        self.effective_rho().ln()
    }
}

/// Prior over supports. `k` is the exact defective count (combinatorial) or
/// the expected one (probabilistic).
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum Prior {
    Combinatorial { k: usize, n: usize },
    Probabilistic { k: usize, n: usize },
}

impl Prior {
    /// Accepts `0 ≤ k ≤ n`; inference additionally needs `0 < k < n`, which
    /// [`ProblemInstance::new`] enforces.
    pub fn combinatorial(k: usize, n: usize) -> Result<Self> {
        check_prior(k, n)?;
        Ok(Prior::Combinatorial { k, n })
    }

    pub fn probabilistic(k: usize, n: usize) -> Result<Self> {
        check_prior(k, n)?;
        Ok(Prior::Probabilistic { k, n })
    }

    pub fn k(&self) -> usize {
        match *self {
            Prior::Combinatorial { k, .. } | Prior::Probabilistic { k, .. } => k,
        }
    }

    pub fn n(&self) -> usize {
        match *self {
            Prior::Combinatorial { n, .. } | Prior::Probabilistic { n, .. } => n,
        }
    }

    pub fn is_combinatorial(&self) -> bool {
        matches!(self, Prior::Combinatorial { .. })
    }

    /// K/N.
    pub fn defect_probability(&self) -> f64 {
        self.k() as f64 / self.n() as f64
    }

    /// `ln(K / (N − K))`.
    pub fn log_prior_odds(&self) -> f64 {
        (self.k() as f64 / (self.n() - self.k()) as f64).ln()
    }
}

fn check_prior(k: usize, n: usize) -> Result<()> {
    if n == 0 || k > n {
        return Err(invalid(format!(
            "prior needs 0 <= K <= N with N >= 1, got K = {k}, N = {n}"
        )));
    }
    Ok(())
}

/// One trial: design, hidden truth, observed outcomes and model parameters.
#[derive(Clone, Debug)]
pub struct ProblemInstance {
    pub matrix: Arc<MeasurementMatrix>,
    pub truth: SupportVector,
    pub outcomes: TestOutcomes,
    pub channel: NoiseChannel,
    pub prior: Prior,
}

impl ProblemInstance {
    pub fn new(
        matrix: Arc<MeasurementMatrix>,
        truth: SupportVector,
        outcomes: TestOutcomes,
        channel: NoiseChannel,
        prior: Prior,
    ) -> Result<Self> {
        if truth.items() != matrix.items() || prior.n() != matrix.items() {
            return Err(invalid(format!(
                "item count mismatch: matrix {}, truth {}, prior {}",
                matrix.items(),
                truth.items(),
                prior.n()
            )));
        }
        if outcomes.tests() != matrix.tests() {
            return Err(invalid(format!(
                "test count mismatch: matrix {}, outcomes {}",
                matrix.tests(),
                outcomes.tests()
            )));
        }
        if prior.k() == 0 || prior.k() >= prior.n() {
            return Err(invalid(format!(
                "inference needs 0 < K < N, got K = {}, N = {}",
                prior.k(),
                prior.n()
            )));
        }
        Ok(Self {
            matrix,
            truth,
            outcomes,
            channel,
            prior,
        })
    }

    /// Builds an instance whose outcomes are the noiseless OR of `truth`.
    pub fn noiseless(
        matrix: Arc<MeasurementMatrix>,
        truth: SupportVector,
        channel: NoiseChannel,
        prior: Prior,
    ) -> Result<Self> {
        let y = or_measure(&matrix, &truth)?;
        Self::new(matrix, truth, y, channel, prior)
    }

    pub fn items(&self) -> usize {
        self.matrix.items()
    }

    pub fn tests(&self) -> usize {
        self.matrix.tests()
    }
}

/// Noiseless outcomes `y_t = OR_i a_ti x_i`. Empty tests read 0.
pub fn or_measure(matrix: &MeasurementMatrix, x: &SupportVector) -> Result<TestOutcomes> {
    if x.items() != matrix.items() {
        return Err(invalid(format!(
            "support has {} items, matrix has {}",
            x.items(),
            matrix.items()
        )));
    }
    let mut y = BitVector::zeros(matrix.tests());
    for i in x.0.ones() {
        for &t in matrix.item_tests(i) {
            y.set(t, true);
        }
    }
    Ok(TestOutcomes(y))
}

/// Flips each outcome independently with probability `channel.rho()`.
/// Consumes exactly one uniform draw per test, in test order.
pub fn apply_noise(y: &TestOutcomes, channel: &NoiseChannel, rng: &mut RandomStream) -> TestOutcomes {
    let mut out = y.clone();
    for t in 0..y.tests() {
        if rng.bernoulli(channel.rho()) {
            out.0.flip(t);
        }
    }
    out
}

/// `ln P(y | x)` under the binary symmetric channel (clamped ρ).
///
/// # Panics
/// On dimension mismatch.
pub fn log_likelihood(y: &TestOutcomes, x: &SupportVector, matrix: &MeasurementMatrix, channel: &NoiseChannel) -> f64 {
    assert_eq!(y.tests(), matrix.tests(), "outcome length mismatch");
    let clean = or_measure(matrix, x).expect("support length mismatch");
    let flips = clean.0.hamming_distance(&y.0);
    (matrix.tests() - flips) as f64 * channel.ln_agree() + flips as f64 * channel.ln_flip()
}
