#![allow(dead_code)]

use std::sync::Arc;

use noisy_gt::model::{
    BitVector, MeasurementMatrix, NoiseChannel, Prior, ProblemInstance, SupportVector, TestOutcomes,
};
use noisy_gt::rng::RandomStream;

/// A random bipartite forest: every new node attaches to at most one node of
/// the other side that is already placed, so no cycle can form.
pub fn random_forest(rng: &mut RandomStream, max_items: usize) -> MeasurementMatrix {
    let items = 2 + rng.below(max_items as u64 - 1) as usize;
    let tests = 1 + rng.below(2 * items as u64) as usize;
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); tests];
    let (mut placed_items, mut placed_tests): (Vec<usize>, Vec<usize>) = (Vec::new(), Vec::new());
    let (mut next_item, mut next_test) = (0, 0);
    while next_item < items || next_test < tests {
        let take_item = next_test == tests || (next_item < items && rng.bernoulli(0.5));
        let isolated = rng.bernoulli(0.1);
        if take_item {
            if !placed_tests.is_empty() && !isolated {
                let t = placed_tests[rng.below(placed_tests.len() as u64) as usize];
                rows[t].push(next_item);
            }
            placed_items.push(next_item);
            next_item += 1;
        } else {
            if !placed_items.is_empty() && !isolated {
                let i = placed_items[rng.below(placed_items.len() as u64) as usize];
                rows[next_test].push(i);
            }
            placed_tests.push(next_test);
            next_test += 1;
        }
    }
    MeasurementMatrix::from_rows(items, rows).unwrap()
}

/// True when the factor graph has no cycle (edges < nodes within each
/// component, checked with union-find).
pub fn is_forest(m: &MeasurementMatrix) -> bool {
    let n = m.items() + m.tests();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for t in 0..m.tests() {
        for &i in m.test_items(t) {
            let (a, b) = (find(&mut parent, i), find(&mut parent, m.items() + t));
            if a == b {
                return false;
            }
            parent[a] = b;
        }
    }
    true
}

pub fn random_outcomes(rng: &mut RandomStream, tests: usize) -> TestOutcomes {
    TestOutcomes(BitVector::from_bools(
        &(0..tests).map(|_| rng.bernoulli(0.5)).collect::<Vec<_>>(),
    ))
}

pub fn probabilistic_instance(m: MeasurementMatrix, y: TestOutcomes, rho: f64, k: usize) -> ProblemInstance {
    let n = m.items();
    ProblemInstance::new(
        Arc::new(m),
        SupportVector::empty(n),
        y,
        NoiseChannel::new(rho).unwrap(),
        Prior::probabilistic(k, n).unwrap(),
    )
    .unwrap()
}

/// Largest |BP − exact| LLR gap over the 50 seeded forest instances.
pub fn tree_exactness_gap(seed: u64, cases: usize) -> f64 {
    use noisy_gt::bp::{bp_flood, BpConfig};
    use noisy_gt::oracle::exact_llrs;

    let mut rng = RandomStream::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let m = random_forest(&mut rng, 12);
        assert!(is_forest(&m));
        let y = random_outcomes(&mut rng, m.tests());
        let rho = 0.02 + 0.3 * rng.uniform();
        let k = 1 + rng.below(m.items() as u64 - 1) as usize;
        let inst = probabilistic_instance(m, y, rho, k);
        let bp = bp_flood(
            &inst,
            &BpConfig {
                iterations: 50,
                early_stop_delta: None,
            },
        );
        let exact = exact_llrs(&inst.outcomes, &inst.matrix, &inst.channel, &inst.prior).unwrap();
        for (a, b) in bp.iter().zip(exact.iter()) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

/// Maximum-likelihood K-subset by a plain double loop over item pairs on the
/// dense matrix; ties keep the first pair in lexicographic order. Scores are
/// sums of per-test log terms in test order, so equal likelihoods can differ
/// in the last bits; gaps below 1e-9 count as ties.
pub fn brute_force_ml_pairs(dense: &[Vec<bool>], y: &[bool], rho: f64) -> (usize, usize) {
    let n = dense[0].len();
    let score = |a: usize, b: usize| -> f64 {
        let mut s = 0.0;
        for (row, &obs) in dense.iter().zip(y) {
            let clean = row[a] || row[b];
            s += if clean == obs { (1.0 - rho).ln() } else { rho.ln() };
        }
        s
    };
    let mut best = (0, 1);
    let mut best_score = score(0, 1);
    for a in 0..n {
        for b in a + 1..n {
            let s = score(a, b);
            if s > best_score + 1e-9 {
                best_score = s;
                best = (a, b);
            }
        }
    }
    best
}

/// Number of the 200 seeded N = 10, K = 2 instances where the oracle and the
/// double loop disagree.
pub fn ml_mismatches(seed: u64, cases: usize) -> usize {
    use noisy_gt::oracle::{ml_combinatorial, DEFAULT_CANDIDATE_CAP};

    let mut rng = RandomStream::new(seed);
    let mut mismatches = 0;
    for case in 0..cases {
        let n = 10;
        let tests = 4 + rng.below(12) as usize;
        let dense: Vec<Vec<bool>> = (0..tests)
            .map(|_| (0..n).map(|_| rng.bernoulli(0.35)).collect())
            .collect();
        let rho = [0.01, 0.05, 0.1, 0.3][case % 4];
        let y: Vec<bool> = if case % 2 == 0 {
            (0..tests).map(|_| rng.bernoulli(0.5)).collect()
        } else {
            let (a, b) = (rng.below(n as u64) as usize, rng.below(n as u64) as usize);
            dense
                .iter()
                .map(|row| (row[a] || row[b]) != rng.bernoulli(rho))
                .collect()
        };
        let rows = dense.iter().map(|row| (0..n).filter(|&i| row[i]).collect()).collect();
        let m = MeasurementMatrix::from_rows(n, rows).unwrap();
        let yv = TestOutcomes(BitVector::from_bools(&y));
        let got = ml_combinatorial(&yv, &m, &NoiseChannel::new(rho).unwrap(), 2, DEFAULT_CANDIDATE_CAP).unwrap();
        let (a, b) = brute_force_ml_pairs(&dense, &y, rho);
        if got.indices() != [a, b] {
            mismatches += 1;
        }
    }
    mismatches
}
