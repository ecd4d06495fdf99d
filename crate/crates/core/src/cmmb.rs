//! Class-wise memory banks of normalized query features and the contrastive
//! loss over them.
//!
//! Bank 0 holds background features, bank `i ≥ 1` foreground class `i`.
//! Entries are stored oldest first and carry a per-bank insertion counter.
//! Anchors of the loss are current-batch foreground features; bank entries
//! enter only as constant keys.

use std::collections::VecDeque;
use std::str::FromStr;

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::matching::{Assignment, Labels};
use crate::numerics::{Tape, Tensor, Var};

/// Eviction rule applied when a full bank receives a new feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BankStrategy {
    /// Evict the oldest entry.
    Fifo,
    /// Evict a pseudo-randomly chosen entry.
    RandomReplace,
    /// Evict the entry least aligned with the bank's mean direction.
    CenterGuided,
}

impl FromStr for BankStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fifo" => Ok(BankStrategy::Fifo),
            "rr" => Ok(BankStrategy::RandomReplace),
            "cgr" => Ok(BankStrategy::CenterGuided),
            _ => Err(Error::Config(format!("unknown bank strategy '{s}' (fifo, rr, cgr)"))),
        }
    }
}

impl std::fmt::Display for BankStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BankStrategy::Fifo => "fifo",
            BankStrategy::RandomReplace => "rr",
            BankStrategy::CenterGuided => "cgr",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BankEntry {
    pub feature: Vec<f64>,
    pub counter: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MemoryBank {
    entries: VecDeque<BankEntry>,
    next_counter: u64,
}

impl MemoryBank {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &BankEntry> {
        self.entries.iter()
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// `k + 1` bounded banks of unit vectors of width `dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBankSet {
    banks: Vec<MemoryBank>,
    capacity: usize,
    dim: usize,
    strategy: BankStrategy,
    seed: u64,
}

const UNIT_TOL: f64 = 1e-9;

impl MemoryBankSet {
    /// Banks for `num_classes` foreground classes plus background. `seed`
    /// drives random replacement; each draw is a pure function of
    /// `(seed, bank, counter)` so the set needs no generator state.
    pub fn new(num_classes: usize, dim: usize, capacity: usize, strategy: BankStrategy, seed: u64) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Config("memory bank capacity and width must be positive".into()));
        }
        Ok(MemoryBankSet {
            banks: vec![MemoryBank::default(); num_classes + 1],
            capacity,
            dim,
            strategy,
            seed,
        })
    }

    pub fn bank(&self, i: usize) -> &MemoryBank {
        &self.banks[i]
    }

    pub fn num_banks(&self) -> usize {
        self.banks.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn strategy(&self) -> BankStrategy {
        self.strategy
    }

    pub fn total_len(&self) -> usize {
        self.banks.iter().map(MemoryBank::len).sum()
    }

    /// Inserts one unit-norm feature into bank `class` (0 = background).
    pub fn insert(&mut self, class: usize, feature: &[f64]) -> Result<()> {
        if class >= self.banks.len() {
            return Err(Error::Mismatch(format!(
                "class {class} out of range for {} banks",
                self.banks.len()
            )));
        }
        if feature.len() != self.dim {
            return Err(Error::Mismatch(format!(
                "feature of width {} for banks of width {}",
                feature.len(),
                self.dim
            )));
        }
        let norm = feature.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(Error::Numerics(format!("bank feature has norm {norm}, expected 1")));
        }
        let seed = self.seed;
        let capacity = self.capacity;
        let strategy = self.strategy;
        let bank = &mut self.banks[class];
        if bank.entries.len() >= capacity {
            let victim = match strategy {
                BankStrategy::Fifo => 0,
                BankStrategy::RandomReplace => {
                    let h = splitmix64(seed ^ splitmix64(((class as u64) << 40) ^ bank.next_counter));
                    (h % bank.entries.len() as u64) as usize
                }
                BankStrategy::CenterGuided => {
                    let mut centre = vec![0.0; feature.len()];
                    for e in &bank.entries {
                        for (c, v) in centre.iter_mut().zip(&e.feature) {
                            *c += v;
                        }
                    }
                    // Ties keep the oldest candidate.
                    let mut best = (0, f64::INFINITY);
                    for (i, e) in bank.entries.iter().enumerate() {
                        let d: f64 = e.feature.iter().zip(&centre).map(|(a, b)| a * b).sum();
                        if d < best.1 {
                            best = (i, d);
                        }
                    }
                    best.0
                }
            };
            bank.entries.remove(victim);
        }
        bank.entries.push_back(BankEntry {
            feature: feature.to_vec(),
            counter: bank.next_counter,
        });
        bank.next_counter += 1;
        Ok(())
    }

    /// Inserts a batch of `(class, feature)` pairs in order.
    pub fn update(&mut self, features: &[(usize, Vec<f64>)]) -> Result<()> {
        if let Some((c, _)) = features.iter().find(|(c, _)| *c >= self.banks.len()) {
            return Err(Error::Mismatch(format!("class {c} out of range")));
        }
        for (c, f) in features {
            self.insert(*c, f)?;
        }
        Ok(())
    }

    pub fn write_archive(&self, archive: &mut Archive) {
        for (i, b) in self.banks.iter().enumerate() {
            let n = b.entries.len();
            let feats = b.entries.iter().flat_map(|e| e.feature.iter().copied()).collect();
            archive.insert(
                format!("cmmb/bank{i}/features"),
                Tensor::new(vec![n, self.dim], feats).expect("n × dim"),
            );
            archive.insert(
                format!("cmmb/bank{i}/counters"),
                Tensor::vector(b.entries.iter().map(|e| e.counter as f64).collect()),
            );
            archive.insert(format!("cmmb/bank{i}/next"), Tensor::scalar(b.next_counter as f64));
        }
    }

    /// Restores bank contents into a set created with matching shape.
    pub fn read_archive(&mut self, archive: &Archive) -> Result<()> {
        for i in 0..self.banks.len() {
            let f = archive.require(&format!("cmmb/bank{i}/features"))?;
            let c = archive.require(&format!("cmmb/bank{i}/counters"))?;
            let next = archive.require(&format!("cmmb/bank{i}/next"))?.item() as u64;
            if f.rank() != 2 || f.cols() != self.dim || f.rows() != c.len() || f.rows() > self.capacity {
                return Err(Error::Mismatch(format!("stored bank {i} has shape {:?}", f.shape())));
            }
            self.banks[i] = MemoryBank {
                entries: (0..f.rows())
                    .map(|r| BankEntry {
                        feature: f.row(r).to_vec(),
                        counter: c.data()[r] as u64,
                    })
                    .collect(),
                next_counter: next,
            };
        }
        Ok(())
    }
}

/// Sums the per-layer query features and normalizes every row. Rows that
/// cancel exactly stay zero.
pub fn fuse_query_features(layers: &[Tensor]) -> Result<Tensor> {
    let first = layers
        .first()
        .ok_or_else(|| Error::Mismatch("no decoder layers to fuse".into()))?;
    let mut sum = first.clone();
    for l in &layers[1..] {
        if l.shape() != sum.shape() {
            return Err(Error::Mismatch(format!("layer shapes {:?} vs {:?}", l.shape(), sum.shape())));
        }
        sum.add_assign(l);
    }
    let c = sum.cols();
    for row in sum.data_mut().chunks_mut(c) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    Ok(sum)
}

/// Tape version of [`fuse_query_features`].
pub fn fuse_query_vars(tape: &mut Tape, layers: &[Var]) -> Result<Var> {
    let mut sum = *layers
        .first()
        .ok_or_else(|| Error::Mismatch("no decoder layers to fuse".into()))?;
    for &l in &layers[1..] {
        sum = tape.add(sum, l)?;
    }
    Ok(tape.l2_normalize_rows(sum)?)
}

/// Query indices split by the pseudo-label matching.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AssignedQueries {
    /// `(query, class)` with 1-based foreground class.
    pub foreground: Vec<(usize, usize)>,
    pub background: Vec<usize>,
}

impl AssignedQueries {
    /// `(query, bank)` for every query, background as bank 0.
    pub fn all(&self) -> Vec<(usize, usize)> {
        let mut v = self.foreground.clone();
        v.extend(self.background.iter().map(|&q| (q, 0)));
        v
    }
}

/// Matched queries take their pseudo-label's class; all others are background.
pub fn assign_pairs(assignment: &Assignment, labels: &Labels, n_queries: usize) -> AssignedQueries {
    let targets = assignment.target_of(n_queries);
    let mut out = AssignedQueries::default();
    for (q, t) in targets.into_iter().enumerate() {
        match t {
            Some(j) => out.foreground.push((q, labels.classes[j])),
            None => out.background.push(q),
        }
    }
    out
}

/// Bank insertions for the current batch: every non-zero fused row under its
/// assigned bank.
pub fn batch_insertions(fused: &Tensor, assigned: &AssignedQueries) -> Vec<(usize, Vec<f64>)> {
    assigned
        .all()
        .into_iter()
        .filter(|&(q, _)| fused.row(q).iter().any(|v| *v != 0.0))
        .map(|(q, c)| (c, fused.row(q).to_vec()))
        .collect()
}

/// Supervised contrastive loss of the current batch against the banks.
///
/// For each foreground class `i` with at least one anchor that has a
/// positive, the class term is the mean over such anchors `Q` of
/// `-mean_{K⁺} log( exp(Q·K⁺/τ) / Σ_{K≠Q} exp(Q·K/τ) )`. Positives are the
/// other same-class batch rows and bank `i`; the denominator runs over every
/// bank entry and every other batch row. The loss is the mean of the class
/// terms, or a constant zero if there are none.
///
/// `fused` rows must be unit norm or zero; zero rows are ignored.
pub fn contrastive_loss(
    tape: &mut Tape,
    banks: &MemoryBankSet,
    fused: Var,
    assigned: &AssignedQueries,
    tau: f64,
) -> Result<Var> {
    Ok(contrastive_impl(tape, banks, fused, assigned, tau)?.0)
}

/// The loss and, when the banks are non-empty, the constant key matrix.
fn contrastive_impl(
    tape: &mut Tape,
    banks: &MemoryBankSet,
    fused: Var,
    assigned: &AssignedQueries,
    tau: f64,
) -> Result<(Var, Option<Var>)> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    let ft = tape.value(fused);
    if ft.rank() != 2 || ft.cols() != banks.dim {
        return Err(Error::Mismatch(format!(
            "features {:?} for banks of width {}",
            ft.shape(),
            banks.dim
        )));
    }
    let live = |q: usize| ft.row(q).iter().any(|v| *v != 0.0);
    let batch: Vec<(usize, usize)> = assigned.all().into_iter().filter(|&(q, _)| live(q)).collect();
    if let Some(&(_, c)) = batch.iter().find(|&&(_, c)| c >= banks.num_banks()) {
        return Err(Error::Mismatch(format!("class {c} out of range")));
    }

    let mut key_class = Vec::new();
    let mut bank_rows = Vec::new();
    for (i, b) in banks.banks.iter().enumerate() {
        for e in &b.entries {
            bank_rows.extend_from_slice(&e.feature);
            key_class.push(i);
        }
    }
    let n_bank = key_class.len();
    key_class.extend(batch.iter().map(|&(_, c)| c));
    let n_keys = key_class.len();

    // Anchor rows index into `batch`; keep those with at least one positive.
    let mut anchors_by_class: Vec<Vec<usize>> = vec![vec![]; banks.num_banks()];
    for (bi, &(_, c)) in batch.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let positives = key_class.iter().filter(|&&k| k == c).count() - 1;
        if positives > 0 {
            anchors_by_class[c].push(bi);
        }
    }
    let active: Vec<usize> = (1..banks.num_banks()).filter(|&c| !anchors_by_class[c].is_empty()).collect();
    if active.is_empty() {
        return Ok((tape.constant(Tensor::scalar(0.0)), None));
    }

    let anchor_list: Vec<usize> = active.iter().flat_map(|&c| anchors_by_class[c].iter().copied()).collect();
    let n_a = anchor_list.len();
    let mut mask = vec![true; n_a * n_keys];
    let mut coef = Tensor::zeros(&[n_a, n_keys]);
    for (r, &bi) in anchor_list.iter().enumerate() {
        let c = batch[bi].1;
        let self_col = n_bank + bi;
        mask[r * n_keys + self_col] = false;
        let positives = key_class.iter().filter(|&&k| k == c).count() - 1;
        let w = -1.0 / (positives as f64 * anchors_by_class[c].len() as f64 * active.len() as f64);
        for (j, &kc) in key_class.iter().enumerate() {
            if kc == c && j != self_col {
                coef.data_mut()[r * n_keys + j] = w;
            }
        }
    }

    let batch_rows: Vec<usize> = batch.iter().map(|&(q, _)| q).collect();
    let batch_feats = tape.gather_rows(fused, &batch_rows)?;
    let mut bank_var = None;
    let keys = if n_bank > 0 {
        let bank = tape.constant(Tensor::new(vec![n_bank, banks.dim], bank_rows)?);
        bank_var = Some(bank);
        tape.concat_rows(&[bank, batch_feats])?
    } else {
        batch_feats
    };
    let anchor_rows: Vec<usize> = anchor_list.iter().map(|&bi| batch[bi].0).collect();
    let anchors = tape.gather_rows(fused, &anchor_rows)?;
    let kt = tape.transpose(keys)?;
    let sim = tape.matmul(anchors, kt)?;
    let sim = tape.scale(sim, 1.0 / tau)?;
    let logp = tape.log_softmax_masked(sim, mask)?;
    let coef = tape.constant(coef);
    let weighted = tape.mul(logp, coef)?;
    Ok((tape.sum(weighted)?, bank_var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use crate::numerics::{finite_difference_grad, gradient_error, GRAD_RTOL};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(dim: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        v
    }

    fn loss_value(banks: &MemoryBankSet, fused: &Tensor, assigned: &AssignedQueries, tau: f64) -> f64 {
        let mut tape = Tape::new();
        let f = tape.constant(fused.clone());
        let l = contrastive_loss(&mut tape, banks, f, assigned, tau).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn fusion_examples() {
        let l = Tensor::from_rows(&[vec![3.0, 4.0], vec![0.0, 2.0]]).unwrap();
        let one = fuse_query_features(&[l.clone()]).unwrap();
        assert_eq!(one.data(), &[0.6, 0.8, 0.0, 1.0]);
        assert_eq!(fuse_query_features(&[l.clone(), l.clone()]).unwrap(), one);
        let neg = l.map(|v| -v);
        assert_eq!(fuse_query_features(&[l, neg]).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn assignment_split() {
        let labels = Labels {
            boxes: vec![BBox::new(0.5, 0.5, 0.1, 0.1)],
            classes: vec![2],
        };
        let a = Assignment {
            pairs: vec![(3, 0)],
            unmatched_queries: vec![0, 1, 2, 4],
        };
        let s = assign_pairs(&a, &labels, 5);
        assert_eq!(s.foreground, vec![(3, 2)]);
        assert_eq!(s.background, vec![0, 1, 2, 4]);
        let empty = assign_pairs(&Assignment::default(), &Labels::default(), 4);
        assert!(empty.foreground.is_empty());
        assert_eq!(empty.background.len(), 4);
    }

    #[test]
    fn fifo_eviction_keeps_newest() {
        let mut b = MemoryBankSet::new(2, 3, 100, BankStrategy::Fifo, 0).unwrap();
        for i in 0..105 {
            b.insert(1, &unit(3, i % 3)).unwrap();
        }
        let counters: Vec<u64> = b.bank(1).entries().map(|e| e.counter).collect();
        assert_eq!(counters, (5..105).collect::<Vec<_>>());
        assert_eq!(b.bank(0).len(), 0);
    }

    #[test]
    fn banks_are_independent_queues() {
        let mut b = MemoryBankSet::new(2, 2, 3, BankStrategy::Fifo, 0).unwrap();
        for i in 0..8 {
            b.insert(1 + i % 2, &unit(2, i % 2)).unwrap();
        }
        for c in 1..=2 {
            let counters: Vec<u64> = b.bank(c).entries().map(|e| e.counter).collect();
            assert_eq!(counters, vec![1, 2, 3]);
        }
        assert!(b.insert(3, &unit(2, 0)).is_err());
        assert!(b.insert(1, &[0.5, 0.5]).is_err());
    }

    #[test]
    fn replacement_strategies_respect_capacity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for strategy in [BankStrategy::RandomReplace, BankStrategy::CenterGuided] {
            let mut b = MemoryBankSet::new(1, 4, 10, strategy, 9).unwrap();
            for _ in 0..50 {
                let v: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                b.insert(1, &v.iter().map(|x| x / n).collect::<Vec<_>>()).unwrap();
                assert!(b.bank(1).len() <= 10);
                let c: Vec<u64> = b.bank(1).entries().map(|e| e.counter).collect();
                assert!(c.windows(2).all(|w| w[0] < w[1]));
            }
            assert_eq!(b.bank(1).len(), 10);
        }
    }

    #[test]
    fn center_guided_evicts_the_outlier() {
        let mut b = MemoryBankSet::new(1, 2, 3, BankStrategy::CenterGuided, 0).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        b.insert(1, &[1.0, 0.0]).unwrap();
        b.insert(1, &[0.0, -1.0]).unwrap();
        b.insert(1, &[s, s]).unwrap();
        b.insert(1, &[1.0, 0.0]).unwrap();
        let c: Vec<u64> = b.bank(1).entries().map(|e| e.counter).collect();
        assert_eq!(c, vec![0, 2, 3]);
    }

    #[test]
    fn log_three_example() {
        // Batch anchor orthogonal to bank A = {a1, a2} and B = {b1}.
        let mut b = MemoryBankSet::new(2, 4, 10, BankStrategy::Fifo, 0).unwrap();
        b.insert(1, &unit(4, 0)).unwrap();
        b.insert(1, &unit(4, 1)).unwrap();
        b.insert(2, &unit(4, 2)).unwrap();
        let fused = Tensor::from_rows(&[unit(4, 3)]).unwrap();
        let assigned = AssignedQueries {
            foreground: vec![(0, 1)],
            background: vec![],
        };
        let v = loss_value(&b, &fused, &assigned, 0.07);
        assert!((v - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_term_example() {
        let tau: f64 = 0.07;
        let mut b = MemoryBankSet::new(2, 2, 10, BankStrategy::Fifo, 0).unwrap();
        b.insert(1, &unit(2, 0)).unwrap();
        b.insert(0, &unit(2, 1)).unwrap();
        let fused = Tensor::from_rows(&[unit(2, 0)]).unwrap();
        let assigned = AssignedQueries {
            foreground: vec![(0, 1)],
            background: vec![],
        };
        let e = (1.0 / tau).exp();
        let want = -(e / (e + 1.0)).ln();
        assert!((loss_value(&b, &fused, &assigned, tau) - want).abs() < 1e-12);
    }

    #[test]
    fn no_foreground_gives_zero() {
        let b = MemoryBankSet::new(2, 2, 10, BankStrategy::Fifo, 0).unwrap();
        let fused = Tensor::from_rows(&[unit(2, 0), unit(2, 1)]).unwrap();
        let assigned = AssignedQueries {
            foreground: vec![],
            background: vec![0, 1],
        };
        assert_eq!(loss_value(&b, &fused, &assigned, 0.07), 0.0);
        let mut tape = Tape::new();
        let f = tape.constant(fused);
        assert!(contrastive_loss(&mut tape, &b, f, &assigned, 0.0).is_err());
    }

    #[test]
    fn gradients_reach_only_the_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dim = 5;
        let rand_unit = |rng: &mut ChaCha8Rng| {
            let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect::<Vec<_>>()
        };
        for _ in 0..20 {
            let mut b = MemoryBankSet::new(2, dim, 6, BankStrategy::Fifo, 0).unwrap();
            for _ in 0..rng.gen_range(0..8) {
                let c = rng.gen_range(0..3);
                b.insert(c, &rand_unit(&mut rng)).unwrap();
            }
            let n = 6;
            let raw = Tensor::new(vec![n, dim], (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let assigned = AssignedQueries {
                foreground: vec![(0, 1), (1, 1), (2, 2), (3, 2)],
                background: vec![4, 5],
            };
            let f = |x: &Tensor| {
                let mut tape = Tape::new();
                let v = tape.constant(x.clone());
                let u = tape.l2_normalize_rows(v).unwrap();
                let l = contrastive_loss(&mut tape, &b, u, &assigned, 0.5).unwrap();
                tape.value(l).item()
            };
            let mut tape = Tape::new();
            let v = tape.param(raw.clone());
            let u = tape.l2_normalize_rows(v).unwrap();
            let (l, bank) = contrastive_impl(&mut tape, &b, u, &assigned, 0.5).unwrap();
            let g = tape.backward(l).unwrap();
            let num = finite_difference_grad(f, &raw, 1e-6);
            assert!(gradient_error(g.get(v).unwrap(), &num) <= GRAD_RTOL);
            if let Some(bank) = bank {
                assert!(!tape.requires_grad(bank));
                assert!(g.get(bank).is_none());
            }
        }
    }
}
