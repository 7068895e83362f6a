//! Bernoulli test designs, support sampling and the plain-text matrix format.
//!
//! Text format: the first line is `M N`, followed by exactly `M` lines, one
//! per test, each listing the 0-based item indices in that test separated by
//! spaces. An empty test is an empty line.

use std::io::{self, Write};

use crate::error::{Error, Result};
use crate::model::{BitVector, MeasurementMatrix, Prior, SupportVector};
use crate::rng::RandomStream;

/// Each entry is an independent Bernoulli(min(ν/K, 1)) draw, taken row-major
/// (test outer, item inner) from `RandomStream::new(seed)`.
///
/// Tests with no items are legal output.
pub fn bernoulli_design(items: usize, tests: usize, k: usize, nu: f64, seed: u64) -> MeasurementMatrix {
    assert!(k >= 1 && nu > 0.0, "bernoulli_design needs K >= 1 and nu > 0");
    let p = (nu / k as f64).min(1.0);
    let mut rng = RandomStream::new(seed);
    let mut row_start = Vec::with_capacity(tests + 1);
    let mut row_items = Vec::with_capacity((p * (items * tests) as f64) as usize + 16);
    row_start.push(0);
    for _ in 0..tests {
        for i in 0..items {
            if rng.bernoulli(p) {
                row_items.push(i);
            }
        }
        row_start.push(row_items.len());
    }
    let m = MeasurementMatrix::from_csr(items, row_start, row_items);
    assert!(m.is_consistent());
    m
}

/// Draws a true support.
///
/// Combinatorial: partial Fisher–Yates over `0..N`; step `j` (for `j < K`)
/// draws `r = j + below(N − j)` and swaps positions `j` and `r`. The first
/// `K` positions are the defectives.
///
/// Probabilistic: `N` Bernoulli(K/N) draws in item order.
pub fn sample_support(prior: &Prior, rng: &mut RandomStream) -> SupportVector {
    let n = prior.n();
    match *prior {
        Prior::Combinatorial { k, .. } => {
            let mut idx: Vec<usize> = (0..n).collect();
            for j in 0..k {
                let r = j + rng.below((n - j) as u64) as usize;
                idx.swap(j, r);
            }
            SupportVector::from_defectives(n, idx[..k].iter().copied())
        }
        Prior::Probabilistic { .. } => {
            let p = prior.defect_probability();
            let mut bits = BitVector::zeros(n);
            for i in 0..n {
                if rng.bernoulli(p) {
                    bits.set(i, true);
                }
            }
            SupportVector(bits)
        }
    }
}

pub fn write_matrix<W: Write>(matrix: &MeasurementMatrix, mut out: W) -> io::Result<()> {
    writeln!(out, "{} {}", matrix.tests(), matrix.items())?;
    let mut line = String::new();
    for t in 0..matrix.tests() {
        line.clear();
        for (j, i) in matrix.test_items(t).iter().enumerate() {
            if j > 0 {
                line.push(' ');
            }
            line.push_str(&i.to_string());
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn matrix_to_string(matrix: &MeasurementMatrix) -> String {
    let mut buf = Vec::new();
    write_matrix(matrix, &mut buf).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("ascii")
}

/// Parses the text format. Errors carry the 1-based offending line.
pub fn parse_matrix(text: &str) -> Result<MeasurementMatrix> {
    let bad = |line: usize, message: String| Error::MatrixFormat { line, message };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad(1, "missing header line".into()))?;
    let dims: Vec<&str> = header.split_whitespace().collect();
    let parse_dim = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| bad(1, format!("header field {s:?} is not a count")))
    };
    let (tests, items) = match dims.as_slice() {
        [m, n] => (parse_dim(m)?, parse_dim(n)?),
        _ => return Err(bad(1, format!("header must be \"M N\", got {header:?}"))),
    };

    let mut rows = Vec::with_capacity(tests);
    for t in 0..tests {
        let lineno = t + 2;
        let line = lines
            .next()
            .ok_or_else(|| bad(lineno, format!("expected {tests} test lines, file ends after {t}")))?;
        let mut row = Vec::new();
        for tok in line.split_whitespace() {
            let i: usize = tok
                .parse()
                .map_err(|_| bad(lineno, format!("item {tok:?} is not an index")))?;
            if i >= items {
                return Err(bad(lineno, format!("item {i} out of range for N = {items}")));
            }
            row.push(i);
        }
        row.sort_unstable();
        if let Some(w) = row.windows(2).find(|w| w[0] == w[1]) {
            return Err(bad(lineno, format!("item {} listed twice", w[0])));
        }
        rows.push(row);
    }
    for (extra, line) in lines.enumerate() {
        if !line.trim().is_empty() {
            return Err(bad(tests + 2 + extra, "unexpected content after the last test".into()));
        }
    }
    MeasurementMatrix::from_rows(items, rows)
}
