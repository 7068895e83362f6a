//! Declaring defectives from posterior LLRs.

use std::cmp::Ordering;

use crate::model::SupportVector;

/// Sorted, duplicate-free item indices declared defective.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct DefectiveSet(Vec<usize>);

impl DefectiveSet {
    /// Sorts and deduplicates.
    pub fn new(mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        Self(indices)
    }

    pub fn from_support(x: &SupportVector) -> Self {
        Self(x.defectives())
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0.binary_search(&i).is_ok()
    }

    pub fn is_subset(&self, other: &DefectiveSet) -> bool {
        self.0.iter().all(|&i| other.contains(i))
    }
}

/// The `min(k, N)` largest LLRs; ties go to the lower item index.
pub fn top_k_select(llrs: &[f64], k: usize) -> DefectiveSet {
    let mut idx: Vec<usize> = (0..llrs.len()).collect();
    let by_llr = |&a: &usize, &b: &usize| -> Ordering { llrs[b].total_cmp(&llrs[a]).then(a.cmp(&b)) };
    let k = k.min(llrs.len());
    if k < idx.len() && k > 0 {
        idx.select_nth_unstable_by(k - 1, by_llr);
    }
    idx.truncate(k);
    DefectiveSet::new(idx)
}

/// `{ i : λ_i ≥ τ }`.
pub fn threshold_select(llrs: &[f64], tau: f64) -> DefectiveSet {
    DefectiveSet(
        llrs.iter()
            .enumerate()
            .filter(|(_, &l)| l >= tau)
            .map(|(i, _)| i)
            .collect(),
    )
}
