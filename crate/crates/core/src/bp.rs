//! Sum-product message passing on the item/test factor graph.
//!
//! Messages are stored as the probability of "defective" on every edge:
//! `item_to_test[e] = μ_{i→t}(1)` and `test_to_item[e] = μ_{t→i}(1)`, with
//! the zero component implied. Edge ids follow [`MeasurementMatrix`]'s
//! test-major numbering.
//!
//! All products and sums over a node's neighbourhood are accumulated in
//! ascending order of the incoming message value (not of the neighbour
//! label), so results are bit-identical under any relabelling of items and
//! tests.
//!
//! [`MeasurementMatrix`]: crate::model::MeasurementMatrix

use std::ops::Deref;

use crate::model::ProblemInstance;

/// Every stored message lies in `[MESSAGE_EPS, 1 − MESSAGE_EPS]`.
pub const MESSAGE_EPS: f64 = 1e-12;

/// Below this, a linear-domain item product is recomputed in the log domain.
const UNDERFLOW_GUARD: f64 = 1e-300;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitMode {
    Flooding,
    Sequential,
}

/// Posterior log-likelihood ratios `λ_i = ln q(x_i = 1) / q(x_i = 0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LlrVector(pub Vec<f64>);

impl Deref for LlrVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BpConfig {
    pub iterations: usize,
    /// Stop once no LLR moves by more than this between rounds.
    pub early_stop_delta: Option<f64>,
}

impl Default for BpConfig {
    fn default() -> Self {
        Self {
            iterations: 10,
            early_stop_delta: None,
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Scratch {
    order: Vec<(f64, usize)>,
    prod0: Vec<f64>,
    prod1: Vec<f64>,
    cand: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct MessageState {
    pub(crate) item_to_test: Vec<f64>,
    pub(crate) test_to_item: Vec<f64>,
    saturation_warnings: usize,
    scratch: Scratch,
}

#[inline]
pub(crate) fn clamp_message(m: f64) -> f64 {
    m.clamp(MESSAGE_EPS, 1.0 - MESSAGE_EPS)
}

/// `ln(m / (1 − m))`.
#[inline]
pub fn message_llr(m: f64) -> f64 {
    (m / (1.0 - m)).ln()
}

/// Writes `∏_{k ≠ j} factor(key_k)` to `out[pos_j]` for every `(key_j, pos_j)`
/// in `order`, which must be sorted by key. Equal keys share one result.
fn leave_one_out(order: &[(f64, usize)], factor: impl Fn(f64) -> f64, out: &mut [f64]) {
    let mut acc = 1.0;
    for &(key, pos) in order {
        out[pos] = acc;
        acc *= factor(key);
    }
    let mut acc = 1.0;
    for &(key, pos) in order.iter().rev() {
        out[pos] *= acc;
        acc *= factor(key);
    }
    share_ties(order, out);
}

/// Log-domain twin of [`leave_one_out`]: `Σ_{k ≠ j} ln factor(key_k)`.
fn leave_one_out_ln(order: &[(f64, usize)], factor: impl Fn(f64) -> f64, out: &mut [f64]) {
    let mut acc = 0.0;
    for &(key, pos) in order {
        out[pos] = acc;
        acc += factor(key).ln();
    }
    let mut acc = 0.0;
    for &(key, pos) in order.iter().rev() {
        out[pos] += acc;
        acc += factor(key).ln();
    }
    share_ties(order, out);
}

fn share_ties(order: &[(f64, usize)], out: &mut [f64]) {
    for w in 1..order.len() {
        if order[w].0 == order[w - 1].0 {
            out[order[w].1] = out[order[w - 1].1];
        }
    }
}

fn sort_by_key(order: &mut [(f64, usize)]) {
    order.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
}

impl MessageState {
    /// Item→test messages start at K/N. Test→item messages start at 1/2 in
    /// both modes; flooding overwrites them before the first read.
    pub fn new(instance: &ProblemInstance, _mode: InitMode) -> Self {
        let edges = instance.matrix.edge_count();
        let prior = clamp_message(instance.prior.defect_probability());
        Self {
            item_to_test: vec![prior; edges],
            test_to_item: vec![0.5; edges],
            saturation_warnings: 0,
            scratch: Scratch::default(),
        }
    }

    pub fn item_to_test(&self) -> &[f64] {
        &self.item_to_test
    }

    pub fn test_to_item(&self) -> &[f64] {
        &self.test_to_item
    }

    /// Number of item updates where neither domain produced a usable value
    /// and the prior was substituted.
    pub fn saturation_warnings(&self) -> usize {
        self.saturation_warnings
    }

    /// Fresh `μ_{t→i}(1)` for every edge of `t` (edge order), computed from
    /// the current item→test messages without committing anything.
    pub(crate) fn test_candidates(&mut self, instance: &ProblemInstance, t: usize) -> &[f64] {
        let edges = instance.matrix.test_edges(t);
        let deg = edges.len();
        let rho = instance.channel.effective_rho();
        let positive = instance.outcomes.is_positive(t);

        let s = &mut self.scratch;
        s.order.clear();
        s.order
            .extend(edges.clone().enumerate().map(|(j, e)| (self.item_to_test[e], j)));
        sort_by_key(&mut s.order);
        s.prod0.clear();
        s.prod0.resize(deg, 0.0);
        // P_j = ∏_{i' ∈ 𝒩(t)∖{i}} μ_{i'→t}(0)
        leave_one_out(&s.order, |m| 1.0 - m, &mut s.prod0);

        s.cand.clear();
        for &p in &s.prod0 {
            let (u0, u1) = if positive {
                (1.0 - rho - (1.0 - 2.0 * rho) * p, 1.0 - rho)
            } else {
                (rho + (1.0 - 2.0 * rho) * p, rho)
            };
            let z = u0 + u1;
            assert!(z > 0.0 && z.is_finite(), "test message normalizer {z} for test {t}");
            s.cand.push(clamp_message(u1 / z));
        }
        &s.cand
    }

    /// Recomputes and commits `μ_{t→i}` for every `i ∈ 𝒩(t)`.
    pub fn update_test_to_item(&mut self, instance: &ProblemInstance, t: usize) {
        let start = instance.matrix.test_edges(t).start;
        self.test_candidates(instance, t);
        let cand = std::mem::take(&mut self.scratch.cand);
        self.test_to_item[start..start + cand.len()].copy_from_slice(&cand);
        self.scratch.cand = cand;
    }

    /// Recomputes and commits `μ_{i→t}` for every `t ∈ 𝒩(i)`.
    pub fn update_item_to_test(&mut self, instance: &ProblemInstance, i: usize) {
        self.update_item_messages(instance, i, None);
    }

    /// Like [`Self::update_item_to_test`], leaving the message towards test
    /// `skip` (if adjacent) untouched.
    pub(crate) fn update_item_messages(&mut self, instance: &ProblemInstance, i: usize, skip: Option<usize>) {
        let tests = instance.matrix.item_tests(i);
        let edges = instance.matrix.item_edges(i);
        let deg = edges.len();
        let prior = instance.prior.defect_probability();

        let s = &mut self.scratch;
        s.order.clear();
        s.order
            .extend(edges.iter().enumerate().map(|(j, &e)| (self.test_to_item[e], j)));
        sort_by_key(&mut s.order);
        s.prod0.clear();
        s.prod0.resize(deg, 0.0);
        s.prod1.clear();
        s.prod1.resize(deg, 0.0);
        leave_one_out(&s.order, |m| 1.0 - m, &mut s.prod0);
        leave_one_out(&s.order, |m| m, &mut s.prod1);

        let underflow = s.prod0.iter().chain(&s.prod1).any(|&p| p < UNDERFLOW_GUARD);
        if underflow {
            leave_one_out_ln(&s.order, |m| 1.0 - m, &mut s.prod0);
            leave_one_out_ln(&s.order, |m| m, &mut s.prod1);
        }
        let (ln_p0, ln_p1) = ((1.0 - prior).ln(), prior.ln());

        for (j, &e) in edges.iter().enumerate() {
            if skip == Some(tests[j]) {
                continue;
            }
            let m = if underflow {
                let d = (ln_p0 + s.prod0[j]) - (ln_p1 + s.prod1[j]);
                1.0 / (1.0 + d.exp())
            } else {
                let u0 = (1.0 - prior) * s.prod0[j];
                let u1 = prior * s.prod1[j];
                u1 / (u0 + u1)
            };
            let m = if m.is_finite() {
                m
            } else {
                self.saturation_warnings += 1;
                prior
            };
            self.item_to_test[e] = clamp_message(m);
        }
    }

    /// `λ_i = ln(K/(N−K)) + Σ_{t ∈ 𝒩(i)} ln(μ_{t→i}(1) / μ_{t→i}(0))`.
    pub fn compute_llrs(&mut self, instance: &ProblemInstance) -> LlrVector {
        let base = instance.prior.log_prior_odds();
        let order = &mut self.scratch.order;
        let llrs = (0..instance.items())
            .map(|i| {
                order.clear();
                order.extend(instance.matrix.item_edges(i).iter().map(|&e| (self.test_to_item[e], 0)));
                sort_by_key(order);
                order.iter().fold(base, |acc, &(m, _)| acc + message_llr(m))
            })
            .collect();
        LlrVector(llrs)
    }

    #[cfg(debug_assertions)]
    pub(crate) fn assert_bounds(&self) {
        for &m in self.item_to_test.iter().chain(&self.test_to_item) {
            debug_assert!((MESSAGE_EPS..=1.0 - MESSAGE_EPS).contains(&m), "message {m}");
        }
    }
}

/// Flooding schedule: each round updates every test (reading the item
/// messages from the previous round), then every item (reading the test
/// messages just computed).
pub fn bp_flood(instance: &ProblemInstance, config: &BpConfig) -> LlrVector {
    bp_flood_state(instance, config).1
}

/// [`bp_flood`] that also hands back the final message state.
pub fn bp_flood_state(instance: &ProblemInstance, config: &BpConfig) -> (MessageState, LlrVector) {
    let mut state = MessageState::new(instance, InitMode::Flooding);
    let mut prev = config.early_stop_delta.map(|_| state.compute_llrs(instance));
    for _ in 0..config.iterations {
        for t in 0..instance.tests() {
            state.update_test_to_item(instance, t);
        }
        for i in 0..instance.items() {
            state.update_item_to_test(instance, i);
        }
        #[cfg(debug_assertions)]
        state.assert_bounds();
        if let (Some(delta), Some(p)) = (config.early_stop_delta, prev.as_mut()) {
            let now = state.compute_llrs(instance);
            let moved = now.iter().zip(p.iter()).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
            *p = now;
            if moved < delta {
                break;
            }
        }
    }
    let llrs = state.compute_llrs(instance);
    (state, llrs)
}

/// `|λ*_{t→i} − λ_{t→i}|`: LLR distance between the message test `t` would
/// send to item `i` if updated now and the one last committed.
///
/// # Panics
/// If `(t, i)` is not an edge.
pub fn compute_residual(state: &mut MessageState, instance: &ProblemInstance, t: usize, i: usize) -> f64 {
    let j = instance
        .matrix
        .test_items(t)
        .binary_search(&i)
        .unwrap_or_else(|_| panic!("item {i} is not in test {t}"));
    let e = instance.matrix.test_edges(t).start + j;
    let stored = state.test_to_item[e];
    let cand = state.test_candidates(instance, t)[j];
    (message_llr(cand) - message_llr(stored)).abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BitVector, MeasurementMatrix, NoiseChannel, Prior, SupportVector, TestOutcomes};
    use std::sync::Arc;

    fn instance(rows: Vec<Vec<usize>>, items: usize, y: &[bool], rho: f64, k: usize) -> ProblemInstance {
        let m = MeasurementMatrix::from_rows(items, rows).unwrap();
        ProblemInstance::new(
            Arc::new(m),
            SupportVector::empty(items),
            TestOutcomes(BitVector::from_bools(y)),
            NoiseChannel::new(rho).unwrap(),
            Prior::probabilistic(k, items).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn init_sets_prior_and_half() {
        let inst = instance(vec![(0..100).collect()], 100, &[true], 0.05, 2);
        let st = MessageState::new(&inst, InitMode::Sequential);
        assert!(st.item_to_test().iter().all(|&m| m == 0.02));
        assert!(st.test_to_item().iter().all(|&m| m == 0.5));
        let inst = instance(vec![(0..10).collect()], 10, &[true], 0.05, 5);
        let st = MessageState::new(&inst, InitMode::Flooding);
        assert!(st.item_to_test().iter().all(|&m| m == 0.5));
    }

    #[test]
    fn negative_test_with_silent_neighbours() {
        let inst = instance(vec![vec![0, 1, 2]], 10, &[false], 0.05, 2);
        let mut st = MessageState::new(&inst, InitMode::Sequential);
        st.item_to_test.iter_mut().for_each(|m| *m = MESSAGE_EPS);
        st.update_test_to_item(&inst, 0);
        for &m in st.test_to_item() {
            assert!((m - 0.05).abs() < 1e-10, "{m}");
        }
    }

    #[test]
    fn positive_test_with_silent_neighbours() {
        let inst = instance(vec![vec![0, 1, 2]], 10, &[true], 0.05, 2);
        let mut st = MessageState::new(&inst, InitMode::Sequential);
        st.item_to_test.iter_mut().for_each(|m| *m = MESSAGE_EPS);
        st.update_test_to_item(&inst, 0);
        for &m in st.test_to_item() {
            assert!((m - 0.95).abs() < 1e-10, "{m}");
        }
    }

    #[test]
    fn positive_test_with_half_product() {
        // other neighbour sends μ(1) = 0.5, so P = 0.5; u0 = 0.95 − 0.9·0.5 = 0.5, u1 = 0.95
        let inst = instance(vec![vec![0, 1]], 10, &[true], 0.05, 2);
        let mut st = MessageState::new(&inst, InitMode::Sequential);
        st.item_to_test.iter_mut().for_each(|m| *m = 0.5);
        st.update_test_to_item(&inst, 0);
        let want = 0.95 / 1.45;
        assert!((st.test_to_item()[0] - want).abs() < 1e-12);
        assert!((want - 0.655_172_413_8).abs() < 1e-9);
    }

    #[test]
    fn singleton_test_uses_empty_product() {
        let inst = instance(vec![vec![3]], 10, &[true], 0.05, 2);
        let mut st = MessageState::new(&inst, InitMode::Sequential);
        st.update_test_to_item(&inst, 0);
        assert!((st.test_to_item()[0] - 0.95).abs() < 1e-12);
    }

    #[test]
    fn uniform_incoming_leaves_prior() {
        let inst = instance(vec![vec![0], vec![0], vec![0]], 100, &[true, false, true], 0.05, 2);
        let mut st = MessageState::new(&inst, InitMode::Sequential);
        st.update_item_to_test(&inst, 0);
        assert!(st.item_to_test().iter().all(|&m| (m - 0.02).abs() < 1e-15));
    }

    #[test]
    fn single_test_item_keeps_prior() {
        let inst = instance(vec![vec![0, 1]], 100, &[true], 0.05, 2);
        let mut st = MessageState::new(&inst, InitMode::Sequential);
        st.test_to_item.iter_mut().for_each(|m| *m = 0.99);
        st.update_item_to_test(&inst, 0);
        assert!((st.item_to_test()[0] - 0.02).abs() < 1e-15);
    }

    #[test]
    fn item_update_hand_value() {
        // K/N = 0.02; other incoming 0.9 and 0.8 → u1 = 0.0144, u0 = 0.0196
        let inst = instance(vec![vec![0], vec![0], vec![0]], 100, &[true, true, true], 0.05, 2);
        let mut st = MessageState::new(&inst, InitMode::Sequential);
        let e = inst.matrix.item_edges(0).to_vec();
        st.test_to_item[e[0]] = 0.3;
        st.test_to_item[e[1]] = 0.9;
        st.test_to_item[e[2]] = 0.8;
        st.update_item_to_test(&inst, 0);
        let want = 0.0144 / (0.0144 + 0.0196);
        assert!((st.item_to_test()[e[0]] - want).abs() < 1e-12);
        assert!((want - 0.423_529_411_8).abs() < 1e-9);
    }

    #[test]
    fn saturated_item_switches_to_log_domain() {
        let deg = 40;
        let rows = vec![vec![0]; deg];
        let inst = instance(rows, 100, &vec![true; deg], 0.05, 2);
        let mut st = MessageState::new(&inst, InitMode::Sequential);
        // 39 factors of 1e-12 underflow the linear product of μ(1)
        st.test_to_item.iter_mut().for_each(|m| *m = MESSAGE_EPS);
        st.update_item_to_test(&inst, 0);
        for &m in st.item_to_test() {
            assert_eq!(m, MESSAGE_EPS);
        }
        // mixed saturation, compared with an independent log-domain evaluation
        for (j, m) in st.test_to_item.iter_mut().enumerate() {
            *m = if j % 2 == 0 { MESSAGE_EPS } else { 1.0 - MESSAGE_EPS };
        }
        st.update_item_to_test(&inst, 0);
        let e = MESSAGE_EPS;
        // edge 0 excludes an even slot: 19 small + 20 large remain
        let ln_u1 = 0.02f64.ln() + 19.0 * e.ln() + 20.0 * (1.0 - e).ln();
        let ln_u0 = 0.98f64.ln() + 19.0 * (1.0 - e).ln() + 20.0 * e.ln();
        let want = clamp_message(1.0 / (1.0 + (ln_u0 - ln_u1).exp()));
        assert!((st.item_to_test()[0] - want).abs() < 1e-12);
        assert_eq!(st.saturation_warnings(), 0);
    }

    #[test]
    fn llr_examples() {
        let inst = instance(vec![vec![0], vec![]], 100, &[true, false], 0.05, 2);
        let mut st = MessageState::new(&inst, InitMode::Sequential);
        let l = st.compute_llrs(&inst);
        let base = (1.0f64 / 49.0).ln();
        assert!((base - -3.891_820_298).abs() < 1e-9);
        assert!(l.iter().all(|&x| (x - base).abs() < 1e-15));
        st.test_to_item[0] = 0.95;
        let l = st.compute_llrs(&inst);
        assert!((l[0] - (base + 19f64.ln())).abs() < 1e-12);
        assert!((l[0] - -0.947_381).abs() < 1e-5);
        // item 5 has no tests
        assert_eq!(l[5], base);
    }

    #[test]
    fn zero_iterations_is_prior() {
        let inst = instance(vec![vec![0, 1, 2], vec![2, 3]], 100, &[true, false], 0.05, 2);
        let l = bp_flood(
            &inst,
            &BpConfig {
                iterations: 0,
                early_stop_delta: None,
            },
        );
        assert!(l.iter().all(|&x| (x - (1.0f64 / 49.0).ln()).abs() < 1e-12));
    }

    #[test]
    fn residual_examples() {
        let inst = instance(vec![vec![0]], 100, &[true], 0.05, 2);
        let mut st = MessageState::new(&inst, InitMode::Sequential);
        let r = compute_residual(&mut st, &inst, 0, 0);
        assert!((r - 19f64.ln()).abs() < 1e-12);
        assert!((r - 2.944_438_979).abs() < 1e-9);
        st.update_test_to_item(&inst, 0);
        assert_eq!(compute_residual(&mut st, &inst, 0, 0), 0.0);
    }

    #[test]
    fn early_stop_matches_full_run_once_converged() {
        let inst = instance(
            vec![vec![0, 1], vec![1, 2], vec![2, 3]],
            20,
            &[true, false, true],
            0.05,
            2,
        );
        let full = bp_flood(
            &inst,
            &BpConfig {
                iterations: 60,
                early_stop_delta: None,
            },
        );
        let early = bp_flood(
            &inst,
            &BpConfig {
                iterations: 60,
                early_stop_delta: Some(1e-14),
            },
        );
        for (a, b) in full.iter().zip(early.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tree_with_unique_consistent_support_is_recovered() {
        // a path item0 - t0 - item1 - t1 - item2 - t2 - item3 plus private tests
        let rows = vec![vec![0, 1], vec![1, 2], vec![2, 3], vec![0], vec![3]];
        let truth = SupportVector::from_defectives(4, [1, 3]);
        let m = Arc::new(MeasurementMatrix::from_rows(4, rows).unwrap());
        let inst = ProblemInstance::noiseless(
            m,
            truth.clone(),
            NoiseChannel::new(0.0).unwrap(),
            Prior::probabilistic(2, 4).unwrap(),
        )
        .unwrap();
        let llrs = bp_flood(
            &inst,
            &BpConfig {
                iterations: 20,
                early_stop_delta: None,
            },
        );
        assert_eq!(
            crate::select::top_k_select(&llrs, 2),
            crate::select::DefectiveSet::from_support(&truth)
        );
    }

    fn random_instance(
        dense: &[Vec<bool>],
        y: &[bool],
        rho: f64,
        k: usize,
        item_perm: &[usize],
        test_perm: &[usize],
    ) -> ProblemInstance {
        let items = item_perm.len();
        let mut rows = vec![Vec::new(); dense.len()];
        let mut yy = vec![false; dense.len()];
        for (t, row) in dense.iter().enumerate() {
            rows[test_perm[t]] = (0..items).filter(|&i| row[i]).map(|i| item_perm[i]).collect();
            yy[test_perm[t]] = y[t];
        }
        instance(rows, items, &yy, rho, k)
    }

    fn shuffled(n: usize, seed: u64) -> Vec<usize> {
        let mut rng = crate::rng::RandomStream::new(seed);
        let mut p: Vec<usize> = (0..n).collect();
        for j in (1..n).rev() {
            p.swap(j, rng.below(j as u64 + 1) as usize);
        }
        p
    }

    fn arb_graph() -> impl Strategy<Value = (Vec<Vec<bool>>, Vec<bool>)> {
        (2usize..14, 1usize..10).prop_flat_map(|(n, m)| {
            (
                proptest::collection::vec(proptest::collection::vec(proptest::bool::weighted(0.35), n), m),
                proptest::collection::vec(any::<bool>(), m),
            )
        })
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn flooding_is_relabelling_invariant(
            (dense, y) in arb_graph(),
            rho in 0.0f64..0.5,
            iters in 0usize..15,
            seed in any::<u64>(),
        ) {
            let n = dense[0].len();
            let identity: Vec<usize> = (0..n).collect();
            let tests: Vec<usize> = (0..dense.len()).collect();
            let cfg = BpConfig { iterations: iters, early_stop_delta: None };
            let base = bp_flood(&random_instance(&dense, &y, rho, 1, &identity, &tests), &cfg);
            let ip = shuffled(n, seed);
            let tp = shuffled(dense.len(), seed ^ 1);
            let moved = bp_flood(&random_instance(&dense, &y, rho, 1, &ip, &tp), &cfg);
            for i in 0..n {
                prop_assert_eq!(base[i].to_bits(), moved[ip[i]].to_bits());
            }
        }

        #[test]
        fn messages_stay_in_bounds(
            (dense, y) in arb_graph(),
            rho in prop_oneof![Just(0.0), Just(1.0), Just(1e-9), 0.0f64..1.0],
            steps in proptest::collection::vec((any::<bool>(), any::<prop::sample::Index>()), 0..60),
        ) {
            let n = dense[0].len();
            let inst = random_instance(&dense, &y, rho, 1, &(0..n).collect::<Vec<_>>(), &(0..dense.len()).collect::<Vec<_>>());
            let mut st = MessageState::new(&inst, InitMode::Sequential);
            for (test_side, idx) in steps {
                if test_side {
                    st.update_test_to_item(&inst, idx.index(inst.tests()));
                } else {
                    st.update_item_to_test(&inst, idx.index(n));
                }
                for &m in st.item_to_test().iter().chain(st.test_to_item()) {
                    prop_assert!((MESSAGE_EPS..=1.0 - MESSAGE_EPS).contains(&m));
                }
            }
            prop_assert!(st.compute_llrs(&inst).iter().all(|l| l.is_finite()));
        }
    }
}
