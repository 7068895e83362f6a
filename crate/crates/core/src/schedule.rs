//! Sequential message-passing schedules.
//!
//! Both schedules start from the sequential initialization (item messages
//! K/N, test messages 1/2) and spend a budget of single-test updates:
//!
//! - [`rsbp`] picks the test uniformly at random, then refreshes every
//!   message leaving each of its items.
//! - [`nwrbp`] picks the test with the largest pending residual, commits its
//!   messages, refreshes the affected item messages and re-scores every test
//!   whose residuals could have moved.

use crate::bp::{message_llr, InitMode, LlrVector, MessageState};
use crate::model::ProblemInstance;
use crate::rng::RandomStream;

/// Number of test-node updates a sequential schedule performs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SequentialBudget {
    pub updates: usize,
}

impl SequentialBudget {
    pub fn new(updates: usize) -> Self {
        Self { updates }
    }

    /// Same message work as `flooding_iterations` flooding rounds on `tests` tests.
    pub fn matching_flooding(flooding_iterations: usize, tests: usize) -> Self {
        Self {
            updates: flooding_iterations * tests,
        }
    }
}

/// How RSBP draws its tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RsbpSampling {
    /// Uniform over all tests at every step.
    #[default]
    WithReplacement,
    /// A fresh uniform permutation of the tests per sweep of `M` steps.
    PermutedSweeps,
}

/// Random-scheduling BP. With replacement (the default) one `below(M)` draw
/// is made per step.
pub fn rsbp(instance: &ProblemInstance, budget: SequentialBudget, rng: &mut RandomStream) -> LlrVector {
    rsbp_with(instance, budget, RsbpSampling::WithReplacement, rng)
}

pub fn rsbp_with(
    instance: &ProblemInstance,
    budget: SequentialBudget,
    sampling: RsbpSampling,
    rng: &mut RandomStream,
) -> LlrVector {
    let mut state = MessageState::new(instance, InitMode::Sequential);
    let tests = instance.tests();
    if tests > 0 {
        let mut sweep: Vec<usize> = (0..tests).collect();
        for step in 0..budget.updates {
            let t = match sampling {
                RsbpSampling::WithReplacement => rng.below(tests as u64) as usize,
                RsbpSampling::PermutedSweeps => {
                    let pos = step % tests;
                    if pos == 0 {
                        for j in (1..tests).rev() {
                            let r = rng.below(j as u64 + 1) as usize;
                            sweep.swap(j, r);
                        }
                    }
                    sweep[pos]
                }
            };
            state.update_test_to_item(instance, t);
            for &i in instance.matrix.test_items(t) {
                state.update_item_to_test(instance, i);
            }
        }
    }
    state.compute_llrs(instance)
}

/// Max-heap of tests keyed by their largest residual, with in-place key
/// updates. Equal keys order by lower test index.
#[derive(Clone, Debug)]
pub struct IndexedMaxHeap {
    heap: Vec<usize>,
    pos: Vec<usize>,
    key: Vec<f64>,
}

impl IndexedMaxHeap {
    pub fn new(keys: Vec<f64>) -> Self {
        let n = keys.len();
        let mut h = Self {
            heap: (0..n).collect(),
            pos: (0..n).collect(),
            key: keys,
        };
        for p in (0..n / 2).rev() {
            h.sift_down(p);
        }
        h
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// `(index, key)` of the maximum.
    pub fn peek(&self) -> Option<(usize, f64)> {
        self.heap.first().map(|&i| (i, self.key[i]))
    }

    pub fn key(&self, idx: usize) -> f64 {
        self.key[idx]
    }

    pub fn update(&mut self, idx: usize, key: f64) {
        let old = self.key[idx];
        self.key[idx] = key;
        let p = self.pos[idx];
        if key > old {
            self.sift_up(p);
        } else if key < old {
            self.sift_down(p);
        }
    }

    #[inline]
    fn above(&self, a: usize, b: usize) -> bool {
        let (ka, kb) = (self.key[a], self.key[b]);
        ka > kb || (ka == kb && a < b)
    }

    fn swap(&mut self, p: usize, q: usize) {
        self.heap.swap(p, q);
        self.pos[self.heap[p]] = p;
        self.pos[self.heap[q]] = q;
    }

    fn sift_up(&mut self, mut p: usize) {
        while p > 0 {
            let parent = (p - 1) / 2;
            if self.above(self.heap[p], self.heap[parent]) {
                self.swap(p, parent);
                p = parent;
            } else {
                break;
            }
        }
    }

    fn sift_down(&mut self, mut p: usize) {
        let n = self.heap.len();
        loop {
            let (l, r) = (2 * p + 1, 2 * p + 2);
            let mut best = p;
            if l < n && self.above(self.heap[l], self.heap[best]) {
                best = l;
            }
            if r < n && self.above(self.heap[r], self.heap[best]) {
                best = r;
            }
            if best == p {
                break;
            }
            self.swap(p, best);
            p = best;
        }
    }
}

/// Per-edge residuals and the per-test maxima that drive NW-RBP.
#[derive(Clone, Debug)]
pub struct ResidualTable {
    residuals: Vec<f64>,
    queue: IndexedMaxHeap,
}

impl ResidualTable {
    /// Residual of edge `e` (test-major id).
    pub fn residual(&self, e: usize) -> f64 {
        self.residuals[e]
    }

    pub fn residuals(&self) -> &[f64] {
        &self.residuals
    }

    pub fn per_test_max(&self, t: usize) -> f64 {
        self.queue.key(t)
    }

    /// Test with the largest residual, lowest index on ties.
    pub fn argmax(&self) -> Option<usize> {
        self.queue.peek().map(|(t, _)| t)
    }
}

/// Node-wise residual BP as a steppable decoder.
#[derive(Clone, Debug)]
pub struct NwRbp<'a> {
    instance: &'a ProblemInstance,
    state: MessageState,
    table: ResidualTable,
    /// `ln(μ_{t→i}(1)/μ_{t→i}(0))` of the committed messages, per edge.
    committed_llr: Vec<f64>,
    stamp: Vec<usize>,
    touched: Vec<usize>,
    test_updates: usize,
}

impl<'a> NwRbp<'a> {
    pub fn new(instance: &'a ProblemInstance) -> Self {
        let state = MessageState::new(instance, InitMode::Sequential);
        let edges = instance.matrix.edge_count();
        let committed_llr: Vec<f64> = state.test_to_item().iter().map(|&m| message_llr(m)).collect();
        let mut this = Self {
            instance,
            state,
            table: ResidualTable {
                residuals: vec![0.0; edges],
                queue: IndexedMaxHeap::new(vec![0.0; instance.tests()]),
            },
            committed_llr,
            stamp: vec![usize::MAX; instance.tests()],
            touched: Vec::new(),
            test_updates: 0,
        };
        for t in 0..instance.tests() {
            this.rescore(t);
        }
        this
    }

    pub fn state(&self) -> &MessageState {
        &self.state
    }

    pub fn residuals(&self) -> &ResidualTable {
        &self.table
    }

    /// Test-node updates performed so far.
    pub fn test_updates(&self) -> usize {
        self.test_updates
    }

    /// Recomputes every residual of test `t` from the current messages.
    fn rescore(&mut self, t: usize) {
        let start = self.instance.matrix.test_edges(t).start;
        let cand = self.state.test_candidates(self.instance, t);
        let mut row_max = 0.0f64;
        for (j, &c) in cand.iter().enumerate() {
            let e = start + j;
            let r = (message_llr(c) - self.committed_llr[e]).abs();
            self.table.residuals[e] = r;
            row_max = row_max.max(r);
        }
        self.table.queue.update(t, row_max);
    }

    /// One scheduling step; returns the test that was updated, or `None`
    /// when there are no tests.
    pub fn step(&mut self) -> Option<usize> {
        let inst = self.instance;
        let chosen = self.table.argmax()?;
        let edges = inst.matrix.test_edges(chosen);

        // Commit every μ_{t'→i}. The items' messages into t' do not change
        // during the step, so committing the row at once is the same as
        // committing edge by edge.
        self.state.update_test_to_item(inst, chosen);
        for e in edges.clone() {
            self.committed_llr[e] = message_llr(self.state.test_to_item[e]);
            self.table.residuals[e] = 0.0;
        }
        self.table.queue.update(chosen, 0.0);

        self.touched.clear();
        for &i in inst.matrix.test_items(chosen) {
            self.state.update_item_messages(inst, i, Some(chosen));
            for &t2 in inst.matrix.item_tests(i) {
                if t2 != chosen && self.stamp[t2] != self.test_updates {
                    self.stamp[t2] = self.test_updates;
                    self.touched.push(t2);
                }
            }
        }
        // Each touched row is re-scored once against the final messages of
        // the step. r_{t''→i} for the updated item i does not depend on
        // μ_{i→t''}, so re-scoring it reproduces its current value.
        let touched = std::mem::take(&mut self.touched);
        for &t2 in &touched {
            self.rescore(t2);
        }
        self.touched = touched;
        self.test_updates += 1;
        Some(chosen)
    }

    pub fn run(&mut self, budget: SequentialBudget) {
        for _ in 0..budget.updates {
            if self.step().is_none() {
                break;
            }
        }
    }

    pub fn llrs(&mut self) -> LlrVector {
        self.state.compute_llrs(self.instance)
    }
}

/// Node-wise residual BP. Deterministic: no randomness is consumed.
pub fn nwrbp(instance: &ProblemInstance, budget: SequentialBudget) -> LlrVector {
    let mut dec = NwRbp::new(instance);
    dec.run(budget);
    dec.llrs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bp::compute_residual;
    use crate::design::{bernoulli_design, sample_support};
    use crate::model::{apply_noise, or_measure, MeasurementMatrix, NoiseChannel, Prior, SupportVector};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn random_instance(n: usize, m: usize, k: usize, rho: f64, seed: u64) -> ProblemInstance {
        let matrix = Arc::new(bernoulli_design(n, m, k, std::f64::consts::LN_2, seed));
        let prior = Prior::combinatorial(k, n).unwrap();
        let mut rng = RandomStream::new(seed ^ 0xabc);
        let truth = sample_support(&prior, &mut rng);
        let channel = NoiseChannel::new(rho).unwrap();
        let y = apply_noise(&or_measure(&matrix, &truth).unwrap(), &channel, &mut rng);
        ProblemInstance::new(matrix, truth, y, channel, prior).unwrap()
    }

    #[test]
    fn heap_orders_by_key_then_index() {
        let mut h = IndexedMaxHeap::new(vec![1.0, 3.0, 3.0, 0.5]);
        assert_eq!(h.peek(), Some((1, 3.0)));
        h.update(1, 0.0);
        assert_eq!(h.peek(), Some((2, 3.0)));
        h.update(0, 3.0);
        assert_eq!(h.peek(), Some((0, 3.0)));
        h.update(3, 9.0);
        assert_eq!(h.peek(), Some((3, 9.0)));
        assert!(IndexedMaxHeap::new(vec![]).peek().is_none());
    }

    proptest! {
        #[test]
        fn heap_matches_linear_scan(init in proptest::collection::vec(0u8..5, 1..30),
                                    ops in proptest::collection::vec((0usize..30, 0u8..5), 0..60)) {
            let mut keys: Vec<f64> = init.iter().map(|&k| k as f64).collect();
            let mut h = IndexedMaxHeap::new(keys.clone());
            for (idx, k) in ops {
                let idx = idx % keys.len();
                keys[idx] = k as f64;
                h.update(idx, k as f64);
                let best = (0..keys.len()).fold(0, |b, i| if keys[i] > keys[b] { i } else { b });
                prop_assert_eq!(h.peek(), Some((best, keys[best])));
            }
        }
    }

    #[test]
    fn zero_budget_is_prior() {
        let inst = random_instance(100, 30, 2, 0.05, 1);
        let base = (2.0f64 / 98.0).ln();
        let l = rsbp(&inst, SequentialBudget::new(0), &mut RandomStream::new(0));
        assert!(l.iter().all(|&x| (x - base).abs() < 1e-12));
        let l = nwrbp(&inst, SequentialBudget::new(0));
        assert!(l.iter().all(|&x| (x - base).abs() < 1e-12));
    }

    #[test]
    fn single_test_reaches_fixed_point() {
        let matrix = Arc::new(MeasurementMatrix::from_rows(6, vec![vec![0, 2, 3, 5]]).unwrap());
        let truth = SupportVector::from_defectives(6, [2]);
        let inst = ProblemInstance::noiseless(
            matrix,
            truth,
            NoiseChannel::new(0.05).unwrap(),
            Prior::combinatorial(1, 6).unwrap(),
        )
        .unwrap();
        let l2 = rsbp(&inst, SequentialBudget::new(2), &mut RandomStream::new(4));
        for b in 3..8 {
            let lb = rsbp(&inst, SequentialBudget::new(b), &mut RandomStream::new(4));
            for (a, c) in l2.iter().zip(lb.iter()) {
                assert!((a - c).abs() < 1e-12, "budget {b}: {a} vs {c}");
            }
        }
    }

    #[test]
    fn rsbp_is_seed_deterministic() {
        let inst = random_instance(100, 40, 2, 0.05, 2);
        let a = rsbp(&inst, SequentialBudget::new(400), &mut RandomStream::new(9));
        let b = rsbp(&inst, SequentialBudget::new(400), &mut RandomStream::new(9));
        assert_eq!(a, b);
        let c = rsbp_with(
            &inst,
            SequentialBudget::new(400),
            RsbpSampling::PermutedSweeps,
            &mut RandomStream::new(9),
        );
        assert_eq!(c.len(), 100);
    }

    #[test]
    fn nwrbp_is_deterministic() {
        let inst = random_instance(100, 40, 2, 0.05, 3);
        assert_eq!(
            nwrbp(&inst, SequentialBudget::new(400)),
            nwrbp(&inst, SequentialBudget::new(400))
        );
    }

    #[test]
    fn first_pick_is_brute_force_argmax() {
        for seed in 0..50 {
            let inst = random_instance(4, 3, 1, 0.1, seed);
            let mut st = MessageState::new(&inst, InitMode::Sequential);
            let mut best = (0usize, -1.0f64);
            for t in 0..3 {
                for &i in inst.matrix.test_items(t) {
                    let r = compute_residual(&mut st, &inst, t, i);
                    if r > best.1 {
                        best = (t, r);
                    }
                }
            }
            let mut dec = NwRbp::new(&inst);
            if inst.matrix.edge_count() == 0 {
                continue;
            }
            assert_eq!(dec.step(), Some(best.0), "seed {seed}");
        }
    }

    #[test]
    fn table_stays_fresh_every_step() {
        for seed in 0..10 {
            let inst = random_instance(12, 7, 2, 0.08, seed);
            let mut dec = NwRbp::new(&inst);
            for _ in 0..40 {
                let Some(t) = dec.step() else { break };
                for e in inst.matrix.test_edges(t) {
                    assert_eq!(dec.residuals().residual(e), 0.0);
                }
                let mut fresh = dec.state().clone();
                for t2 in 0..inst.tests() {
                    let mut row_max = 0.0f64;
                    for (j, &i) in inst.matrix.test_items(t2).iter().enumerate() {
                        let r = compute_residual(&mut fresh, &inst, t2, i);
                        let e = inst.matrix.test_edges(t2).start + j;
                        assert!((dec.residuals().residual(e) - r).abs() < 1e-12);
                        row_max = row_max.max(r);
                    }
                    assert!((dec.residuals().per_test_max(t2) - row_max).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn converged_decoder_picks_test_zero_and_stays_put() {
        let inst = random_instance(10, 5, 1, 0.05, 5);
        let mut dec = NwRbp::new(&inst);
        dec.run(SequentialBudget::new(2000));
        assert!(dec.residuals().residuals().iter().all(|&r| r < 1e-9));
        let before = dec.llrs();
        let msgs = dec.state().test_to_item().to_vec();
        if dec.residuals().residuals().iter().all(|&r| r == 0.0) {
            assert_eq!(dec.step(), Some(0));
            assert_eq!(dec.state().test_to_item(), &msgs[..]);
        }
        dec.run(SequentialBudget::new(10));
        for (a, b) in before.iter().zip(dec.llrs().iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn budget_counts_test_updates() {
        let inst = random_instance(50, 20, 2, 0.05, 6);
        let mut dec = NwRbp::new(&inst);
        let budget = SequentialBudget::matching_flooding(10, inst.tests());
        dec.run(budget);
        assert_eq!(dec.test_updates(), 10 * 20);
    }

    #[test]
    fn no_tests_is_harmless() {
        let matrix = Arc::new(MeasurementMatrix::from_rows(5, vec![]).unwrap());
        let inst = ProblemInstance::noiseless(
            matrix,
            SupportVector::from_defectives(5, [1]),
            NoiseChannel::new(0.1).unwrap(),
            Prior::probabilistic(1, 5).unwrap(),
        )
        .unwrap();
        assert_eq!(nwrbp(&inst, SequentialBudget::new(10)).len(), 5);
        assert_eq!(
            rsbp(&inst, SequentialBudget::new(10), &mut RandomStream::new(0)).len(),
            5
        );
    }
}
