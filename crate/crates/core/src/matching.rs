//! Optimal one-to-one assignment between predictions and labels.

use crate::geometry::{giou, BBox};

/// Ground-truth or pseudo boxes with 1-based class ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Labels {
    pub boxes: Vec<BBox>,
    pub classes: Vec<usize>,
}

impl Labels {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Assignment {
    /// `(query, target)` pairs, sorted by query index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_queries: Vec<usize>,
}

impl Assignment {
    pub fn total_cost(&self, cost: &[Vec<f64>]) -> f64 {
        self.pairs.iter().map(|&(i, j)| cost[i][j]).sum()
    }

    /// Target index matched to each query, if any.
    pub fn target_of(&self, n_queries: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n_queries];
        for &(q, t) in &self.pairs {
            out[q] = Some(t);
        }
        out
    }
}

/// Minimum-cost assignment of size `min(n, m)` for an `n × m` cost matrix.
///
/// Rectangular inputs are padded to square with the largest entry; pairs
/// that land on padding are reported as unmatched. Runs the O(N³)
/// shortest-augmenting-path form of the Hungarian method with row/column
/// potentials.
pub fn hungarian(cost: &[Vec<f64>]) -> Assignment {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    if n == 0 || m == 0 {
        return Assignment {
            pairs: vec![],
            unmatched_queries: (0..n).collect(),
        };
    }
    let size = n.max(m);
    let pad = cost
        .iter()
        .flatten()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let at = |i: usize, j: usize| -> f64 {
        if i < n && j < m {
            cost[i][j]
        } else {
            pad
        }
    };

    // 1-based potentials; column 0 is the virtual source.
    let mut u = vec![0.0; size + 1];
    let mut v = vec![0.0; size + 1];
    let mut row_of = vec![0usize; size + 1];
    let mut way = vec![0usize; size + 1];
    for i in 1..=size {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; size + 1];
        let mut used = vec![false; size + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=size {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=size {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut col_of_row = vec![usize::MAX; n];
    for j in 1..=size {
        let i = row_of[j];
        if i >= 1 && i <= n && j <= m {
            col_of_row[i - 1] = j - 1;
        }
    }
    let mut pairs = vec![];
    let mut unmatched = vec![];
    for (i, &j) in col_of_row.iter().enumerate() {
        if j == usize::MAX {
            unmatched.push(i);
        } else {
            pairs.push((i, j));
        }
    }
    Assignment {
        pairs,
        unmatched_queries: unmatched,
    }
}

/// Weights of the matching cost terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights {
            class: 2.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

pub fn l1_distance(a: &BBox, b: &BBox) -> f64 {
    (a.cx - b.cx).abs() + (a.cy - b.cy).abs() + (a.w - b.w).abs() + (a.h - b.h).abs()
}

/// Query-by-target cost: `-c_cls·p(class) + c_l1·L1 + c_giou·(1 - GIoU)`.
///
/// `probs` holds one row of `k` class probabilities per query.
pub fn detection_cost(probs: &[Vec<f64>], boxes: &[BBox], targets: &Labels, w: CostWeights) -> Vec<Vec<f64>> {
    probs
        .iter()
        .zip(boxes)
        .map(|(p, b)| {
            targets
                .boxes
                .iter()
                .zip(&targets.classes)
                .map(|(tb, &c)| {
                    -w.class * p[c - 1] + w.l1 * l1_distance(b, tb) + w.giou * (1.0 - giou(b, tb))
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive oracle: best total over all injective maps from the
    /// smaller side into the larger.
    fn brute_force(cost: &[Vec<f64>]) -> f64 {
        let n = cost.len();
        let m = cost[0].len();
        let (rows, cols, get): (usize, usize, std::boxed::Box<dyn Fn(usize, usize) -> f64>) = if n <= m {
            (n, m, std::boxed::Box::new(|i, j| cost[i][j]))
        } else {
            (m, n, std::boxed::Box::new(|i, j| cost[j][i]))
        };
        fn rec(row: usize, rows: usize, cols: usize, used: &mut Vec<bool>, pick: &mut Vec<usize>, get: &dyn Fn(usize, usize) -> f64, best: &mut f64) {
            if row == rows {
                // Sum in row order of the original orientation.
                let mut pairs: Vec<(usize, usize)> = pick.iter().enumerate().map(|(r, &c)| (r, c)).collect();
                pairs.sort();
                let total: f64 = pairs.iter().map(|&(r, c)| get(r, c)).sum();
                if total < *best {
                    *best = total;
                }
                return;
            }
            for c in 0..cols {
                if !used[c] {
                    used[c] = true;
                    pick.push(c);
                    rec(row + 1, rows, cols, used, pick, get, best);
                    pick.pop();
                    used[c] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(0, rows, cols, &mut vec![false; cols], &mut vec![], &*get, &mut best);
        best
    }

    /// Total summed in the same order as the oracle for the same assignment.
    fn canonical_total(a: &Assignment, cost: &[Vec<f64>]) -> f64 {
        let n = cost.len();
        let m = cost[0].len();
        if n <= m {
            a.pairs.iter().map(|&(i, j)| cost[i][j]).sum()
        } else {
            let mut p: Vec<(usize, usize)> = a.pairs.iter().map(|&(i, j)| (j, i)).collect();
            p.sort();
            p.iter().map(|&(j, i)| cost[i][j]).sum()
        }
    }

    #[test]
    fn two_by_two() {
        let cost = vec![vec![1.0, 2.0], vec![3.0, 1.0]];
        let a = hungarian(&cost);
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost(&cost), 2.0);
    }

    #[test]
    fn zero_diagonal_gives_identity() {
        let n = 5;
        let cost: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 0.0 } else { 1.0 }).collect()).collect();
        let a = hungarian(&cost);
        assert_eq!(a.pairs, (0..n).map(|i| (i, i)).collect::<Vec<_>>());
    }

    #[test]
    fn empty_matrix() {
        assert_eq!(hungarian(&[]), Assignment::default());
        let a = hungarian(&[vec![], vec![]]);
        assert!(a.pairs.is_empty());
        assert_eq!(a.unmatched_queries, vec![0, 1]);
    }

    #[test]
    fn rectangular_reports_unmatched() {
        let cost = vec![vec![5.0], vec![1.0], vec![3.0]];
        let a = hungarian(&cost);
        assert_eq!(a.pairs, vec![(1, 0)]);
        assert_eq!(a.unmatched_queries, vec![0, 2]);
    }

    #[test]
    fn matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let n = rng.gen_range(1..=7);
            let m = rng.gen_range(1..=7);
            let cost: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| rng.gen_range(-5.0..5.0)).collect()).collect();
            let a = hungarian(&cost);
            assert_eq!(a.pairs.len(), n.min(m));
            assert_eq!(canonical_total(&a, &cost), brute_force(&cost));
        }
    }

    #[test]
    fn beats_random_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let n = 6;
            let cost: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
            let best = hungarian(&cost).total_cost(&cost);
            let mut perm: Vec<usize> = (0..n).collect();
            for _ in 0..1000 {
                perm.shuffle(&mut rng);
                let t: f64 = perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
                assert!(best <= t + 1e-12);
            }
        }
    }

    #[test]
    fn on_target_cost_is_minus_class_weight() {
        let b = BBox::new(0.4, 0.5, 0.2, 0.3);
        let t = Labels { boxes: vec![b], classes: vec![2] };
        let c = detection_cost(&[vec![0.0, 1.0, 0.0]], &[b], &t, CostWeights::default());
        assert_eq!(c[0][0], -2.0);
        let far = BBox::new(0.9, 0.9, 0.05, 0.05);
        let c2 = detection_cost(&[vec![0.0, 0.0, 0.0]], &[far], &t, CostWeights::default());
        assert!(c2[0][0] > c[0][0]);
    }

    #[test]
    fn swapped_boxes_cost_more() {
        // Two targets far apart; predictions sit on them. Swapping pairs
        // doubles nothing in the class term but adds the full L1 distance.
        let t1 = BBox::new(0.2, 0.2, 0.1, 0.1);
        let t2 = BBox::new(0.7, 0.2, 0.1, 0.1);
        let targets = Labels { boxes: vec![t1, t2], classes: vec![1, 1] };
        let p1 = BBox::new(0.22, 0.2, 0.1, 0.1);
        let p2 = BBox::new(0.68, 0.2, 0.1, 0.1);
        let w = CostWeights { class: 0.0, l1: 1.0, giou: 0.0 };
        let cost = detection_cost(&[vec![0.5], vec![0.5]], &[p1, p2], &targets, w);
        // straight: 0.02 + 0.02; swapped: 0.48 + 0.48
        assert!((cost[0][0] + cost[1][1] - 0.04).abs() < 1e-12);
        assert!((cost[0][1] + cost[1][0] - 0.96).abs() < 1e-12);
        assert_eq!(hungarian(&cost).pairs, vec![(0, 0), (1, 1)]);
    }

    proptest! {
        #[test]
        fn invariant_to_constant_shift(
            vals in proptest::collection::vec(-3.0f64..3.0, 25),
            shift in -10.0f64..10.0,
        ) {
            let cost: Vec<Vec<f64>> = vals.chunks(5).map(|c| c.to_vec()).collect();
            let shifted: Vec<Vec<f64>> = cost.iter().map(|r| r.iter().map(|v| v + shift).collect()).collect();
            let a = hungarian(&cost);
            let b = hungarian(&shifted);
            prop_assert!((a.total_cost(&cost) - b.total_cost(&cost)).abs() < 1e-9);
        }

        #[test]
        fn worse_box_never_lowers_row(d in 0.0f64..0.1, start in 0.85f64..0.88) {
            // Both targets lie left of x = 0.7; the prediction starts to their
            // right, so shifting it right increases every L1 and hull term.
            let targets = Labels {
                boxes: vec![BBox::new(0.2, 0.2, 0.1, 0.1), BBox::new(0.6, 0.7, 0.2, 0.1)],
                classes: vec![1, 2],
            };
            let probs = vec![vec![0.3, 0.6]];
            let w = CostWeights::default();
            let base = detection_cost(&probs, &[BBox::new(start, 0.4, 0.1, 0.1)], &targets, w);
            let worse = detection_cost(&probs, &[BBox::new(start + d, 0.4, 0.1, 0.1)], &targets, w);
            for (a, b) in base[0].iter().zip(&worse[0]) {
                prop_assert!(b >= a);
            }
        }
    }
}
