//! Objectness-driven sample weights for the classification loss.
//!
//! Teacher encoder maps are fused with student query features into one
//! attention map per scale, pooled over each predicted box with RoIAlign and
//! summed into a per-query objectness score. High objectness means the
//! unmatched-query penalty is likely wrong, so its weight shrinks.

use std::str::FromStr;

use crate::archive::Archive;
use crate::detector::FeatureMap;
use crate::error::{Error, Result};
use crate::geometry::{roi_align, BBox, RoiAlignSpec};
use crate::numerics::{min_max_scale, Tensor};

/// Which query features are fused into the encoder attention maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectnessMode {
    /// No query fusion: the channel mean of each encoder map.
    Encoder,
    /// Queries matched to pseudo-labels.
    AssignedQueries,
    /// Every query.
    AllQueries,
}

impl FromStr for ObjectnessMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "E" => Ok(ObjectnessMode::Encoder),
            "E+AQ" => Ok(ObjectnessMode::AssignedQueries),
            "E+Q" => Ok(ObjectnessMode::AllQueries),
            _ => Err(Error::Config(format!("unknown objectness mode '{s}' (E, E+AQ, E+Q)"))),
        }
    }
}

impl std::fmt::Display for ObjectnessMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ObjectnessMode::Encoder => "E",
            ObjectnessMode::AssignedQueries => "E+AQ",
            ObjectnessMode::AllQueries => "E+Q",
        })
    }
}

/// One attention map per encoder scale.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedMaps {
    pub maps: Vec<Vec<f64>>,
    pub dims: Vec<(usize, usize)>,
    /// Mode actually applied; differs from the request after a fallback.
    pub mode: ObjectnessMode,
}

fn normalized_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|i| {
            let r = t.row(i);
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                r.iter().map(|v| v / n).collect()
            } else {
                r.to_vec()
            }
        })
        .collect()
}

/// Per scale, the mean over selected queries of the cosine between every
/// map position and the query. `assigned` lists matched query rows; an empty
/// list in assigned mode falls back to all queries.
pub fn query_fused_maps(
    maps: &[FeatureMap],
    query_feats: &Tensor,
    assigned: &[usize],
    mode: ObjectnessMode,
) -> Result<FusedMaps> {
    let mut applied = mode;
    let selected: Vec<usize> = match mode {
        ObjectnessMode::Encoder => vec![],
        ObjectnessMode::AllQueries => (0..query_feats.rows()).collect(),
        ObjectnessMode::AssignedQueries if assigned.is_empty() => {
            applied = ObjectnessMode::AllQueries;
            (0..query_feats.rows()).collect()
        }
        ObjectnessMode::AssignedQueries => assigned.to_vec(),
    };
    if let Some(&q) = selected.iter().find(|&&q| q >= query_feats.rows()) {
        return Err(Error::Mismatch(format!("query {q} out of range")));
    }
    let queries = normalized_rows(query_feats);
    let mut out = FusedMaps {
        maps: vec![],
        dims: vec![],
        mode: applied,
    };
    for m in maps {
        let c = m.channels();
        if applied != ObjectnessMode::Encoder && c != query_feats.cols() {
            return Err(Error::Mismatch(format!(
                "encoder width {c} vs query width {}",
                query_feats.cols()
            )));
        }
        let plane: Vec<f64> = if applied == ObjectnessMode::Encoder {
            (0..m.h * m.w).map(|i| m.data.row(i).iter().sum::<f64>() / c as f64).collect()
        } else {
            let rows = normalized_rows(&m.data);
            rows.iter()
                .map(|r| {
                    selected
                        .iter()
                        .map(|&q| r.iter().zip(&queries[q]).map(|(a, b)| a * b).sum::<f64>())
                        .sum::<f64>()
                        / selected.len() as f64
                })
                .collect()
        };
        out.maps.push(plane);
        out.dims.push((m.h, m.w));
    }
    Ok(out)
}

/// `S[j]`: the sum over scales and pooling bins of each fused map pooled at
/// box `j`.
pub fn objectness(fused: &FusedMaps, boxes: &[BBox], spec: RoiAlignSpec) -> Vec<f64> {
    let mut s = vec![0.0; boxes.len()];
    for (map, &(h, w)) in fused.maps.iter().zip(&fused.dims) {
        let pooled = roi_align(map, h, w, boxes, spec);
        let bins = spec.out_h * spec.out_w;
        for (j, chunk) in pooled.chunks(bins).enumerate() {
            s[j] += chunk.iter().sum::<f64>();
        }
    }
    s
}

/// `w = (1 − minmax(S))^β`.
pub fn sample_weights(scores: &[f64], beta: f64) -> Result<Vec<f64>> {
    if !(beta > 0.0) {
        return Err(Error::Config(format!("smoothing exponent {beta} must be positive")));
    }
    Ok(min_max_scale(scores)?.into_iter().map(|s| (1.0 - s).powf(beta)).collect())
}

/// Scores, weights and the maps behind them for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectnessScores {
    pub scores: Vec<f64>,
    pub weights: Vec<f64>,
    pub fused: FusedMaps,
}

impl ObjectnessScores {
    /// Named-tensor dump of maps, scores and weights.
    pub fn write_archive(&self, archive: &mut Archive, prefix: &str) {
        for (i, (m, &(h, w))) in self.fused.maps.iter().zip(&self.fused.dims).enumerate() {
            archive.insert(
                format!("{prefix}map{}", i + 3),
                Tensor::new(vec![h, w], m.clone()).expect("h × w"),
            );
        }
        archive.insert(format!("{prefix}scores"), Tensor::vector(self.scores.clone()));
        archive.insert(format!("{prefix}weights"), Tensor::vector(self.weights.clone()));
    }
}

/// Full pipeline: fused maps, objectness and weights.
pub fn objectness_weights(
    maps: &[FeatureMap],
    query_feats: &Tensor,
    assigned: &[usize],
    boxes: &[BBox],
    mode: ObjectnessMode,
    spec: RoiAlignSpec,
    beta: f64,
) -> Result<ObjectnessScores> {
    let fused = query_fused_maps(maps, query_feats, assigned, mode)?;
    let scores = objectness(&fused, boxes, spec);
    let weights = sample_weights(&scores, beta)?;
    Ok(ObjectnessScores {
        scores,
        weights,
        fused,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(h: usize, w: usize, c: usize, f: impl Fn(usize, usize) -> f64) -> FeatureMap {
        let data = (0..h * w).flat_map(|i| (0..c).map(move |ch| (i, ch))).map(|(i, ch)| f(i, ch)).collect();
        FeatureMap {
            h,
            w,
            data: Tensor::new(vec![h * w, c], data).unwrap(),
        }
    }

    fn pyramid(rng: &mut ChaCha8Rng, c: usize) -> Vec<FeatureMap> {
        [(8, 8), (4, 4), (2, 2)]
            .iter()
            .map(|&(h, w)| {
                let vals: Vec<f64> = (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
                map(h, w, c, |i, ch| vals[i * c + ch])
            })
            .collect()
    }

    #[test]
    fn aligned_query_gives_ones() {
        let m = vec![map(4, 4, 3, |_, ch| if ch == 1 { 2.5 } else { 0.0 })];
        let q = Tensor::from_rows(&[vec![0.0, 7.0, 0.0]]).unwrap();
        let f = query_fused_maps(&m, &q, &[], ObjectnessMode::AllQueries).unwrap();
        assert!(f.maps[0].iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let q = Tensor::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        let f = query_fused_maps(&m, &q, &[], ObjectnessMode::AllQueries).unwrap();
        assert!(f.maps[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_queries_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let maps = pyramid(&mut rng, 4);
        let q = Tensor::new(vec![2, 4], (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let both = query_fused_maps(&maps, &q, &[0, 1], ObjectnessMode::AssignedQueries).unwrap();
        let a = query_fused_maps(&maps, &q, &[0], ObjectnessMode::AssignedQueries).unwrap();
        let b = query_fused_maps(&maps, &q, &[1], ObjectnessMode::AssignedQueries).unwrap();
        for s in 0..3 {
            for i in 0..both.maps[s].len() {
                assert!((both.maps[s][i] - 0.5 * (a.maps[s][i] + b.maps[s][i])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn assigned_mode_falls_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let maps = pyramid(&mut rng, 4);
        let q = Tensor::new(vec![3, 4], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let f = query_fused_maps(&maps, &q, &[], ObjectnessMode::AssignedQueries).unwrap();
        let all = query_fused_maps(&maps, &q, &[], ObjectnessMode::AllQueries).unwrap();
        assert_eq!(f.mode, ObjectnessMode::AllQueries);
        assert_eq!(f.maps, all.maps);
    }

    #[test]
    fn encoder_mode_is_channel_mean() {
        let m = vec![map(2, 2, 2, |i, ch| (i * 2 + ch) as f64)];
        let q = Tensor::zeros(&[1, 2]);
        let f = query_fused_maps(&m, &q, &[], ObjectnessMode::Encoder).unwrap();
        assert_eq!(f.maps[0], vec![0.5, 2.5, 4.5, 6.5]);
    }

    #[test]
    fn objectness_examples() {
        let spec = RoiAlignSpec::default();
        let boxes = vec![BBox::new(0.3, 0.4, 0.2, 0.3), BBox::new(0.7, 0.5, 0.5, 0.1)];
        let zero = FusedMaps {
            maps: vec![vec![0.0; 64], vec![0.0; 16], vec![0.0; 4]],
            dims: vec![(8, 8), (4, 4), (2, 2)],
            mode: ObjectnessMode::AllQueries,
        };
        assert_eq!(objectness(&zero, &boxes, spec), vec![0.0, 0.0]);
        let c = 0.37;
        let constant = FusedMaps {
            maps: vec![vec![c; 64], vec![c; 16], vec![c; 4]],
            ..zero
        };
        for s in objectness(&constant, &boxes, spec) {
            assert!((s - 3.0 * c * 49.0).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_examples() {
        assert_eq!(sample_weights(&[0.0, 5.0, 10.0], 1.0).unwrap(), vec![1.0, 0.5, 0.0]);
        let w = sample_weights(&[0.0, 5.0, 10.0], 0.2).unwrap();
        assert!((w[1] - 0.870_550_563_296_124).abs() < 1e-12);
        assert_eq!((w[0], w[2]), (1.0, 0.0));
        assert!(sample_weights(&[1.0], 0.0).is_err());
        assert_eq!(sample_weights(&[2.0, 2.0], 0.2).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn scale_order_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let maps = pyramid(&mut rng, 4);
        let q = Tensor::new(vec![3, 4], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let boxes = vec![BBox::new(0.3, 0.4, 0.2, 0.3), BBox::new(0.6, 0.5, 0.5, 0.4)];
        let spec = RoiAlignSpec::default();
        let f = query_fused_maps(&maps, &q, &[], ObjectnessMode::AllQueries).unwrap();
        let mut r = f.clone();
        r.maps.reverse();
        r.dims.reverse();
        let a = objectness(&f, &boxes, spec);
        let b = objectness(&r, &boxes, spec);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn weights_anti_monotone(s in proptest::collection::vec(-50.0f64..50.0, 2..20), beta in 0.05f64..3.0) {
            let w = sample_weights(&s, beta).unwrap();
            for i in 0..s.len() {
                for j in 0..s.len() {
                    if s[i] <= s[j] {
                        prop_assert!(w[i] >= w[j]);
                    }
                }
            }
            let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                let imax = s.iter().position(|&v| v == hi).unwrap();
                let imin = s.iter().position(|&v| v == lo).unwrap();
                prop_assert_eq!(w[imax], 0.0);
                prop_assert_eq!(w[imin], 1.0);
            }
        }
    }
}
