use serde::{Deserialize, Serialize};

use super::{MetricConfig, SceneEval};
use crate::error::{Error, Result};
use crate::geometry::{resample, ElementClass, Instance, Point};

/// Symmetric Chamfer distance: `½·(mean_p min_q ‖p−q‖ + mean_q min_p ‖q−p‖)`.
pub fn chamfer(p: &[Point], q: &[Point]) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::InvalidArgument("chamfer distance of an empty point set".into()));
    }
    Ok(0.5 * (directed(p, q) + directed(q, p)))
}

fn directed(from: &[Point], to: &[Point]) -> f64 {
    let sum: f64 = from
        .iter()
        .map(|a| {
            to.iter()
                .map(|b| (a.x - b.x) * (a.x - b.x) + (a.y - b.y) * (a.y - b.y))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum();
    sum / from.len() as f64
}

/// How the precision-recall curve is turned into a number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMethod {
    /// Exact area under the monotone precision envelope.
    Area,
    /// Mean envelope precision at recall thresholds 0, 0.01, ..., 1.
    Interp101,
}

/// One prediction entering AP: its confidence and the distances to the
/// GT instances it may match (pooled GT indices).
#[derive(Debug, Clone, PartialEq)]
pub struct ApCandidate {
    pub confidence: f64,
    pub distances: Vec<(usize, f64)>,
}

/// Greedy confidence-ordered matching. Returns, in processing order, whether
/// each prediction was a true positive.
pub fn greedy_match(cands: &[ApCandidate], num_gt: usize, tau: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| cands[b].confidence.total_cmp(&cands[a].confidence));
    let mut taken = vec![false; num_gt];
    order
        .into_iter()
        .map(|i| {
            let best = cands[i]
                .distances
                .iter()
                .filter(|&&(g, d)| !taken[g] && d <= tau)
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            match best {
                Some(&(g, _)) => {
                    taken[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// AP from a true-positive sequence in confidence order. `None` if there is no GT.
pub fn ap_from_hits(hits: &[bool], num_gt: usize, method: ApMethod) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(hits.len());
    for (k, &h) in hits.iter().enumerate() {
        tp += h as usize;
        curve.push((tp as f64 / num_gt as f64, tp as f64 / (k + 1) as f64));
    }
    // precision envelope: running max from the right
    for k in (0..curve.len().saturating_sub(1)).rev() {
        curve[k].1 = curve[k].1.max(curve[k + 1].1);
    }
    Some(match method {
        ApMethod::Area => {
            let mut prev_r = 0.0;
            let mut area = 0.0;
            for &(r, p) in &curve {
                area += (r - prev_r) * p;
                prev_r = r;
            }
            area
        }
        ApMethod::Interp101 => {
            let mut sum = 0.0;
            let mut k = 0;
            for t in 0..=100 {
                let thr = t as f64 / 100.0;
                while k < curve.len() && curve[k].0 < thr - 1e-12 {
                    k += 1;
                }
                if k < curve.len() {
                    sum += curve[k].1;
                }
            }
            sum / 101.0
        }
    })
}

/// Candidates and GT count for one class, pooled across scenes.
pub fn class_candidates(scenes: &[SceneEval], class: ElementClass, cfg: &MetricConfig) -> (Vec<ApCandidate>, usize) {
    let mut cands = Vec::new();
    let mut offset = 0;
    for scene in scenes {
        let gts: Vec<Vec<Point>> = scene
            .gts
            .iter()
            .filter(|g| g.class == class)
            .map(|g| eval_points(g, cfg.eval_samples))
            .collect();
        for pred in scene.preds.iter().filter(|p| p.instance.class == class) {
            let pts = eval_points(&pred.instance, cfg.eval_samples);
            let distances = gts
                .iter()
                .enumerate()
                .map(|(g, gp)| (offset + g, chamfer(&pts, gp).unwrap_or(f64::INFINITY)))
                .collect();
            cands.push(ApCandidate {
                confidence: pred.confidence,
                distances,
            });
        }
        offset += gts.len();
    }
    (cands, offset)
}

/// Evenly resampled points used for Chamfer matching; degenerate shapes
/// fall back to their raw vertices.
pub fn eval_points(inst: &Instance, n: usize) -> Vec<Point> {
    match resample(inst, n) {
        Ok(s) => s.points,
        Err(_) => inst.points.clone(),
    }
}

/// AP of one class at one threshold. `None` when the class has no GT.
pub fn ap_at_tau(scenes: &[SceneEval], class: ElementClass, tau: f64, cfg: &MetricConfig) -> Option<f64> {
    let (cands, num_gt) = class_candidates(scenes, class, cfg);
    ap_from_hits(&greedy_match(&cands, num_gt, tau), num_gt, cfg.ap_method)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(x: f64, y: f64) -> Point {
        Point::new(x, y)
    }

    #[test]
    fn chamfer_examples() {
        let a = [p(0.0, 0.0), p(1.0, 2.0)];
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        assert_eq!(chamfer(&[p(0.0, 0.0)], &[p(1.0, 0.0)]).unwrap(), 1.0);
        assert_eq!(chamfer(&[p(0.0, 0.0), p(2.0, 0.0)], &[p(1.0, 0.0)]).unwrap(), 1.0);
        assert!(chamfer(&[], &a).is_err());
    }

    fn cand(conf: f64, d: &[(usize, f64)]) -> ApCandidate {
        ApCandidate {
            confidence: conf,
            distances: d.to_vec(),
        }
    }

    #[test]
    fn only_top_prediction_matches_gives_half() {
        let c = [cand(0.9, &[(0, 0.1), (1, 5.0)]), cand(0.3, &[(0, 4.0), (1, 6.0)])];
        let hits = greedy_match(&c, 2, 1.0);
        assert_eq!(hits, vec![true, false]);
        assert_eq!(ap_from_hits(&hits, 2, ApMethod::Area), Some(0.5));
        // the 101-point rule counts recall 0 to 0.5 inclusive: 51 of 101 thresholds
        assert!((ap_from_hits(&hits, 2, ApMethod::Interp101).unwrap() - 51.0 / 101.0).abs() < 1e-15);
    }

    #[test]
    fn no_predictions_and_no_gt() {
        assert_eq!(ap_from_hits(&[], 3, ApMethod::Area), Some(0.0));
        assert_eq!(ap_from_hits(&[false], 0, ApMethod::Area), None);
    }

    #[test]
    fn perfect_ranking_is_one() {
        let hits = [true, true, true];
        assert_eq!(ap_from_hits(&hits, 3, ApMethod::Area), Some(1.0));
        assert!((ap_from_hits(&hits, 3, ApMethod::Interp101).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn distance_ties_prefer_lower_gt() {
        let c = [cand(0.9, &[(1, 0.5), (0, 0.5)]), cand(0.8, &[(1, 0.7)])];
        assert_eq!(greedy_match(&c, 2, 1.0), vec![true, true]);
    }

    fn candidates_strategy() -> impl Strategy<Value = (Vec<ApCandidate>, usize)> {
        (1usize..=4, 0usize..=5).prop_flat_map(|(num_gt, n_pred)| {
            let cand = (
                // coarse confidences create ties on purpose
                (0u8..6).prop_map(|c| c as f64 / 5.0),
                proptest::collection::vec(prop_oneof![(0u8..8).prop_map(|d| d as f64 * 0.25), Just(f64::INFINITY)], num_gt),
            )
                .prop_map(|(confidence, ds)| ApCandidate {
                    confidence,
                    distances: ds.into_iter().enumerate().collect(),
                });
            (proptest::collection::vec(cand, n_pred), Just(num_gt))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 500, ..ProptestConfig::default() })]

        #[test]
        fn ap_monotone_in_tau((c, num_gt) in candidates_strategy()) {
            let ap = |t| ap_from_hits(&greedy_match(&c, num_gt, t), num_gt, ApMethod::Area).unwrap();
            prop_assert!(ap(0.5) <= ap(1.0) + 1e-12);
            prop_assert!(ap(1.0) <= ap(1.5) + 1e-12);
        }

        #[test]
        fn chamfer_symmetric_and_zero_on_self(
            a in proptest::collection::vec((-20.0f64..20.0, -20.0f64..20.0), 1..12),
            b in proptest::collection::vec((-20.0f64..20.0, -20.0f64..20.0), 1..12),
        ) {
            let a: Vec<Point> = a.into_iter().map(|(x, y)| p(x, y)).collect();
            let b: Vec<Point> = b.into_iter().map(|(x, y)| p(x, y)).collect();
            prop_assert_eq!(chamfer(&a, &b).unwrap().to_bits(), chamfer(&b, &a).unwrap().to_bits());
            prop_assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        }
    }
}
