//! Exhaustive reference decoders.
//!
//! - [`ml_combinatorial`]: maximum likelihood over all K-subsets.
//! - [`map_probabilistic`]: MAP under the i.i.d. Bernoulli(K/N) prior,
//!   restricted to supports of weight at most `w_max`.
//! - [`exact_llrs`]: exact posterior marginals by enumerating all `2^N`
//!   supports.
//!
//! Candidates are visited in lexicographic order, adding and removing one
//! item at a time while per-test cover counts are kept up to date, so a
//! candidate costs `O(deg(item))` instead of `O(M·K)`. Under a
//! binary symmetric channel the likelihood of a support depends only on its
//! number of mismatching tests, so scores are compared through that integer
//! and ties are exact.

use crate::bp::LlrVector;
use crate::error::{Error, Result};
use crate::model::{MeasurementMatrix, NoiseChannel, Prior, TestOutcomes};
use crate::select::DefectiveSet;

pub const DEFAULT_CANDIDATE_CAP: u64 = 10_000_000;

/// Largest `N` accepted by [`exact_llrs`].
pub const EXACT_MAX_ITEMS: usize = 20;

/// `C(n, k)`, saturating at `u128::MAX`.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut c: u128 = 1;
    for j in 0..k {
        // c * (n - j) / (j + 1) stays integral at every step
        c = match c.checked_mul((n - j) as u128) {
            Some(v) => v / (j as u128 + 1),
            None => return u128::MAX,
        };
    }
    c
}

/// Incrementally maintained OR outcome of a candidate support.
struct Cover<'a> {
    matrix: &'a MeasurementMatrix,
    y: &'a TestOutcomes,
    hits: Vec<u32>,
    /// Negative tests the candidate covers.
    neg_covered: usize,
    /// Positive tests the candidate leaves uncovered.
    pos_uncovered: usize,
}

impl<'a> Cover<'a> {
    fn new(matrix: &'a MeasurementMatrix, y: &'a TestOutcomes) -> Self {
        Self {
            matrix,
            y,
            hits: vec![0; matrix.tests()],
            neg_covered: 0,
            pos_uncovered: y.0.count_ones(),
        }
    }

    #[inline]
    fn mismatches(&self) -> usize {
        self.neg_covered + self.pos_uncovered
    }

    #[inline]
    fn add(&mut self, i: usize) {
        for &t in self.matrix.item_tests(i) {
            if self.hits[t] == 0 {
                if self.y.is_positive(t) {
                    self.pos_uncovered -= 1;
                } else {
                    self.neg_covered += 1;
                }
            }
            self.hits[t] += 1;
        }
    }

    #[inline]
    fn remove(&mut self, i: usize) {
        for &t in self.matrix.item_tests(i) {
            self.hits[t] -= 1;
            if self.hits[t] == 0 {
                if self.y.is_positive(t) {
                    self.pos_uncovered += 1;
                } else {
                    self.neg_covered -= 1;
                }
            }
        }
    }
}

fn check_dims(y: &TestOutcomes, matrix: &MeasurementMatrix) -> Result<()> {
    if y.tests() != matrix.tests() {
        return Err(Error::InvalidArgument(format!(
            "{} outcomes for {} tests",
            y.tests(),
            matrix.tests()
        )));
    }
    Ok(())
}

/// Whether mismatch count `a` is a strictly better likelihood than `b`.
fn fewer_is_better(channel: &NoiseChannel) -> Option<bool> {
    let rho = channel.effective_rho();
    if rho < 0.5 {
        Some(true)
    } else if rho > 0.5 {
        Some(false)
    } else {
        None
    }
}

/// Maximum-likelihood K-subset; ties resolve to the lexicographically
/// smallest subset.
pub fn ml_combinatorial(
    y: &TestOutcomes,
    matrix: &MeasurementMatrix,
    channel: &NoiseChannel,
    k: usize,
    cap: u64,
) -> Result<DefectiveSet> {
    check_dims(y, matrix)?;
    let n = matrix.items();
    if k > n {
        return Err(Error::InvalidArgument(format!("K = {k} exceeds N = {n}")));
    }
    let space = binomial(n, k);
    if space > cap as u128 {
        return Err(Error::Capacity(format!(
            "C({n}, {k}) = {space} candidates exceeds the cap of {cap}; reduce K or N"
        )));
    }
    let direction = fewer_is_better(channel);

    struct Search<'a> {
        cover: Cover<'a>,
        n: usize,
        k: usize,
        direction: Option<bool>,
        chosen: Vec<usize>,
        best: Option<(usize, Vec<usize>)>,
    }
    impl Search<'_> {
        fn visit(&mut self, start: usize) {
            if self.chosen.len() == self.k {
                let d = self.cover.mismatches();
                let improves = match (&self.best, self.direction) {
                    (None, _) => true,
                    (Some((bd, _)), Some(true)) => d < *bd,
                    (Some((bd, _)), Some(false)) => d > *bd,
                    (Some(_), None) => false,
                };
                if improves {
                    self.best = Some((d, self.chosen.clone()));
                }
                return;
            }
            let last = self.n - (self.k - self.chosen.len());
            for i in start..=last {
                self.cover.add(i);
                self.chosen.push(i);
                self.visit(i + 1);
                self.chosen.pop();
                self.cover.remove(i);
            }
        }
    }

    let mut search = Search {
        cover: Cover::new(matrix, y),
        n,
        k,
        direction,
        chosen: Vec::with_capacity(k),
        best: None,
    };
    search.visit(0);
    let (_, best) = search.best.expect("at least one K-subset exists");
    Ok(DefectiveSet::new(best))
}

/// Bounded-weight MAP under the Bernoulli(K/N) prior.
///
/// Returns the support `S` with `|S| ≤ w_max` maximizing
/// `|S|·ln(K/N) + (N − |S|)·ln(1 − K/N) + ln P(y | S)`; ties prefer smaller
/// weight, then the lexicographically smaller set.
///
/// Weights are searched in increasing order and subsets lexicographically
/// within a weight. When `ρ < 1/2` a subtree is skipped if even the most
/// optimistic completion (every remaining slot covering as many still
/// uncovered positive tests as the best remaining item can) cannot beat the
/// incumbent, which leaves the result unchanged. `cap` bounds the number of
/// complete candidates actually scored.
pub fn map_probabilistic(
    y: &TestOutcomes,
    matrix: &MeasurementMatrix,
    channel: &NoiseChannel,
    prior: &Prior,
    w_max: usize,
    cap: u64,
) -> Result<DefectiveSet> {
    check_dims(y, matrix)?;
    let n = matrix.items();
    if prior.n() != n {
        return Err(Error::InvalidArgument(format!(
            "prior over {} items, matrix has {n}",
            prior.n()
        )));
    }
    let w_max = w_max.min(n);
    let tests = matrix.tests();
    let p = prior.defect_probability();
    let (ln_p1, ln_p0) = (p.ln(), (-p).ln_1p());
    let (ln_agree, ln_flip) = (channel.ln_agree(), channel.ln_flip());
    let cost = move |w: usize, d: usize| -> f64 {
        -(w as f64 * ln_p1 + (n - w) as f64 * ln_p0 + (tests - d) as f64 * ln_agree + d as f64 * ln_flip)
    };
    let prune = fewer_is_better(channel) == Some(true);

    // largest positive degree among items j.., for the optimistic bound
    let mut pos_reach = vec![0usize; n + 1];
    for i in (0..n).rev() {
        let pos = matrix.item_tests(i).iter().filter(|&&t| y.is_positive(t)).count();
        pos_reach[i] = pos_reach[i + 1].max(pos);
    }

    struct Search<'a, F: Fn(usize, usize) -> f64> {
        cover: Cover<'a>,
        n: usize,
        weight: usize,
        cost: F,
        prune: bool,
        pos_reach: Vec<usize>,
        chosen: Vec<usize>,
        best: Option<(f64, Vec<usize>)>,
        scored: u64,
        cap: u64,
    }
    impl<F: Fn(usize, usize) -> f64> Search<'_, F> {
        fn hopeless(&self, d_lower: usize) -> bool {
            matches!(&self.best, Some((bc, _)) if (self.cost)(self.weight, d_lower) >= *bc)
        }

        fn visit(&mut self, start: usize) -> Result<()> {
            let left = self.weight - self.chosen.len();
            if left == 0 {
                self.scored += 1;
                if self.scored > self.cap {
                    return Err(Error::Capacity(format!(
                        "bounded-weight MAP scored more than {} candidates; reduce w_max or N",
                        self.cap
                    )));
                }
                let c = (self.cost)(self.weight, self.cover.mismatches());
                if self.best.as_ref().is_none_or(|(bc, _)| c < *bc) {
                    self.best = Some((c, self.chosen.clone()));
                }
                return Ok(());
            }
            if self.prune {
                let reach = left * self.pos_reach[start];
                let d_lower = self.cover.neg_covered + self.cover.pos_uncovered.saturating_sub(reach);
                if self.hopeless(d_lower) {
                    return Ok(());
                }
            }
            for i in start..=self.n - left {
                self.cover.add(i);
                self.chosen.push(i);
                let r = self.visit(i + 1);
                self.chosen.pop();
                self.cover.remove(i);
                r?;
            }
            Ok(())
        }
    }

    let mut search = Search {
        cover: Cover::new(matrix, y),
        n,
        weight: 0,
        cost,
        prune,
        pos_reach,
        chosen: Vec::with_capacity(w_max),
        best: None,
        scored: 0,
        cap,
    };
    for w in 0..=w_max {
        search.weight = w;
        if search.prune && search.hopeless(0) {
            continue;
        }
        search.visit(0)?;
    }
    let (_, best) = search.best.expect("the empty support is always scored");
    Ok(DefectiveSet::new(best))
}

/// Streaming log-sum-exp accumulator.
#[derive(Clone, Copy)]
struct LogSum {
    max: f64,
    sum: f64,
}

impl LogSum {
    const EMPTY: LogSum = LogSum {
        max: f64::NEG_INFINITY,
        sum: 0.0,
    };

    #[inline]
    fn add(&mut self, v: f64) {
        if v == f64::NEG_INFINITY {
            return;
        }
        if v <= self.max {
            self.sum += (v - self.max).exp();
        } else {
            self.sum = self.sum * (self.max - v).exp() + 1.0;
            self.max = v;
        }
    }

    fn value(&self) -> f64 {
        if self.sum == 0.0 {
            f64::NEG_INFINITY
        } else {
            self.max + self.sum.ln()
        }
    }
}

/// Exact posterior LLRs `ln P(x_i = 1 | y) / P(x_i = 0 | y)` by enumerating
/// every support (`N ≤ 20`).
///
/// Combinatorial prior: uniform over K-subsets. Probabilistic prior: i.i.d.
/// Bernoulli(K/N).
pub fn exact_llrs(
    y: &TestOutcomes,
    matrix: &MeasurementMatrix,
    channel: &NoiseChannel,
    prior: &Prior,
) -> Result<LlrVector> {
    check_dims(y, matrix)?;
    let n = matrix.items();
    if n > EXACT_MAX_ITEMS {
        return Err(Error::Capacity(format!(
            "exact marginals enumerate 2^N supports; N = {n} exceeds {EXACT_MAX_ITEMS}"
        )));
    }
    if prior.n() != n {
        return Err(Error::InvalidArgument(format!(
            "prior over {} items, matrix has {n}",
            prior.n()
        )));
    }
    let row_masks: Vec<u32> = (0..matrix.tests())
        .map(|t| matrix.test_items(t).iter().fold(0u32, |m, &i| m | 1 << i))
        .collect();
    let positives: Vec<bool> = (0..matrix.tests()).map(|t| y.is_positive(t)).collect();
    let (ln_agree, ln_flip) = (channel.ln_agree(), channel.ln_flip());
    let p = prior.defect_probability();
    let (ln_p1, ln_p0) = (p.ln(), (-p).ln_1p());

    let mut on = vec![LogSum::EMPTY; n];
    let mut off = vec![LogSum::EMPTY; n];
    for x in 0u32..(1u32 << n) {
        let w = x.count_ones() as usize;
        let log_prior = match prior {
            Prior::Combinatorial { k, .. } => {
                if w != *k {
                    continue;
                }
                0.0
            }
            Prior::Probabilistic { .. } => w as f64 * ln_p1 + (n - w) as f64 * ln_p0,
        };
        let flips = row_masks
            .iter()
            .zip(&positives)
            .filter(|(&mask, &pos)| (mask & x != 0) != pos)
            .count();
        let lw = log_prior + (row_masks.len() - flips) as f64 * ln_agree + flips as f64 * ln_flip;
        for i in 0..n {
            if x >> i & 1 == 1 {
                on[i].add(lw);
            } else {
                off[i].add(lw);
            }
        }
    }
    Ok(LlrVector(
        on.iter().zip(&off).map(|(a, b)| a.value() - b.value()).collect(),
    ))
}
