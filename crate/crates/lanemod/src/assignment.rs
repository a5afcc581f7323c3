//! Proposal-to-label matching.
//!
//! Two matchers are exposed. [`hungarian_assign`] picks the minimum-cost
//! one-to-one assignment between the `M` labels and `K` proposals and
//! defines the positives for regression and classification.
//! [`dense_match`] assigns *every* proposal its nearest label so the dense
//! location and diversity terms have targets, then caps each label's
//! cluster at `U` active members (default `U = max(1, floor(4K/25))`).

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::geometry::{lane_l1_distance, LanePolyline};

/// An `M x K` grid of matching costs; rows are ground-truth lanes, columns
/// are proposals. Entries are mean per-point L1 lane distances.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != rows * cols {
            return Err(invalid("cost matrix entry count must be rows * cols"));
        }
        if entries.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(invalid("cost matrix entries must be finite and non-negative"));
        }
        Ok(CostMatrix { rows, cols, entries })
    }

    /// Pairwise lane L1 distances between labels (rows) and proposals
    /// (columns).
    pub fn from_lanes(gts: &[LanePolyline], proposals: &[LanePolyline]) -> Result<Self> {
        let mut entries = Vec::with_capacity(gts.len() * proposals.len());
        for g in gts {
            for p in proposals {
                entries.push(lane_l1_distance(g, p)?);
            }
        }
        Ok(CostMatrix {
            rows: gts.len(),
            cols: proposals.len(),
            entries,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.cols + col]
    }
}

/// The optimal one-to-one matching: exactly `min(M, K)` disjoint
/// (label, proposal) pairs, sorted by label index.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PositiveAssignment {
    pairs: Vec<(usize, usize)>,
}

impl PositiveAssignment {
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Sum of `costs` over the assigned pairs, accumulated in label order.
    pub fn total_cost(&self, costs: &CostMatrix) -> f64 {
        self.pairs.iter().map(|&(i, k)| costs.get(i, k)).sum()
    }

    /// The label matched to `proposal`, if any.
    pub fn label_for(&self, proposal: usize) -> Option<usize> {
        self.pairs.iter().find(|&&(_, k)| k == proposal).map(|&(i, _)| i)
    }
}

/// Minimum-total-cost one-to-one assignment of `M` labels to `K >= M`
/// proposals (shortest augmenting path, O(M^2 K)).
///
/// Scan order is fixed — labels in index order, equal slack resolved to the
/// lowest column — so identical inputs always produce identical pairs.
pub fn hungarian_assign(costs: &CostMatrix) -> Result<PositiveAssignment> {
    let m = costs.rows();
    let k = costs.cols();
    if m > k {
        return Err(invalid("one-to-one assignment needs M <= K"));
    }
    if m == 0 {
        return Ok(PositiveAssignment { pairs: Vec::new() });
    }

    // Potentials and matching are 1-indexed; column 0 is the virtual source.
    let mut u = vec![0.0; m + 1];
    let mut v = vec![0.0; k + 1];
    let mut matched_row = vec![0usize; k + 1]; // column -> row
    let mut way = vec![0usize; k + 1];

    for i in 1..=m {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut min_slack = vec![f64::INFINITY; k + 1];
        let mut used = vec![false; k + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=k {
                if used[j] {
                    continue;
                }
                let cur = costs.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < min_slack[j] {
                    min_slack[j] = cur;
                    way[j] = j0;
                }
                if min_slack[j] < delta {
                    delta = min_slack[j];
                    j1 = j;
                }
            }
            for j in 0..=k {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_slack[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        // Walk the augmenting path back to the source.
        while j0 != 0 {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=k)
        .filter(|&j| matched_row[j] != 0)
        .map(|j| (matched_row[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    Ok(PositiveAssignment { pairs })
}

/// The dense many-to-one matching: per-proposal nearest label, per-label
/// clusters sorted by distance, and the capped active set.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DenseMatch {
    target: Vec<Option<usize>>,
    active: Vec<bool>,
    clusters: Vec<Vec<usize>>,
}

impl DenseMatch {
    /// Nearest label of `proposal`, `None` in label-free scenes.
    pub fn target(&self, proposal: usize) -> Option<usize> {
        self.target[proposal]
    }

    /// Whether `proposal` survived the cluster cap and receives dense
    /// location/diversity supervision.
    pub fn is_active(&self, proposal: usize) -> bool {
        self.active[proposal]
    }

    pub fn n_proposals(&self) -> usize {
        self.target.len()
    }

    /// Member proposals of label `label`, ascending by distance.
    pub fn cluster(&self, label: usize) -> &[usize] {
        &self.clusters[label]
    }

    pub fn clusters(&self) -> &[Vec<usize>] {
        &self.clusters
    }

    /// Active members per cluster, in cluster order.
    pub fn active_per_cluster(&self) -> Vec<usize> {
        self.clusters
            .iter()
            .map(|c| c.iter().filter(|&&k| self.active[k]).count())
            .collect()
    }

    /// All unordered active pairs sharing a cluster, lexicographic.
    pub fn active_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for cluster in &self.clusters {
            let act: Vec<usize> = cluster.iter().copied().filter(|&k| self.active[k]).collect();
            for a in 0..act.len() {
                for b in a + 1..act.len() {
                    let (x, y) = (act[a].min(act[b]), act[a].max(act[b]));
                    pairs.push((x, y));
                }
            }
        }
        pairs.sort_unstable();
        pairs
    }
}

/// Match every proposal to its nearest label and keep at most `cap` active
/// members per cluster. Label-free scenes (`M = 0`) are valid: everything
/// is untargeted and inactive.
pub fn dense_match(costs: &CostMatrix, cap: usize) -> Result<DenseMatch> {
    if cap == 0 {
        return Err(invalid("cluster cap must be at least 1"));
    }
    let m = costs.rows();
    let k = costs.cols();
    if m == 0 {
        return Ok(DenseMatch {
            target: vec![None; k],
            active: vec![false; k],
            clusters: Vec::new(),
        });
    }

    let mut target = Vec::with_capacity(k);
    let mut clusters: Vec<Vec<usize>> = vec![Vec::new(); m];
    for col in 0..k {
        let mut best = 0usize;
        for row in 1..m {
            // Strict < keeps the lowest label index on ties.
            if costs.get(row, col) < costs.get(best, col) {
                best = row;
            }
        }
        target.push(Some(best));
        clusters[best].push(col);
    }

    let mut active = vec![false; k];
    for (label, cluster) in clusters.iter_mut().enumerate() {
        // Ascending distance; index order breaks exact ties.
        cluster.sort_by(|&a, &b| {
            costs
                .get(label, a)
                .partial_cmp(&costs.get(label, b))
                .expect("finite costs")
                .then(a.cmp(&b))
        });
        for &member in cluster.iter().take(cap) {
            active[member] = true;
        }
    }

    Ok(DenseMatch { target, active, clusters })
}

/// Default cluster cap for a bank of `k` proposals: `floor(4k/25)`, clamped
/// to 1 so every label keeps at least one supervised proposal.
pub fn default_cap(k: usize) -> usize {
    (4 * k / 25).max(1)
}
