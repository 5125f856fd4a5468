use crate::error::{Error, Result};
use crate::geometry::{resample, ElementClass, Instance, InstanceKind};
use crate::numcore::Tensor2;

/// A GT instance resampled to `n_p` points in normalized `[0,1]²` coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct GtTarget {
    pub class: usize,
    pub kind: InstanceKind,
    pub points: Vec<[f64; 2]>,
}

/// Resamples and normalizes the GT instances of one scene.
pub fn targets_for(
    instances: &[Instance],
    n_p: usize,
    x_range: (f64, f64),
    y_range: (f64, f64),
) -> Result<Vec<GtTarget>> {
    instances
        .iter()
        .map(|inst| {
            let s = resample(inst, n_p)?;
            Ok(GtTarget {
                class: inst.class.index(),
                kind: inst.kind,
                points: s
                    .points
                    .iter()
                    .map(|p| {
                        [
                            (p.x - x_range.0) / (x_range.1 - x_range.0),
                            (p.y - y_range.0) / (y_range.1 - y_range.0),
                        ]
                    })
                    .collect(),
            })
        })
        .collect()
}

/// Point orderings that describe the same shape: a polyline forwards and
/// backwards, a polygon from every start vertex in both directions.
/// Entry `k` of an ordering is the GT point matched to predicted point `k`.
pub fn orderings(kind: InstanceKind, n: usize) -> Vec<Vec<usize>> {
    match kind {
        InstanceKind::Polyline => vec![(0..n).collect(), (0..n).rev().collect()],
        InstanceKind::Polygon => (0..n)
            .flat_map(|s| {
                [
                    (0..n).map(|k| (s + k) % n).collect(),
                    (0..n).map(|k| (s + n - k) % n).collect(),
                ]
            })
            .collect(),
    }
}

fn mean_l1(pred: &[[f64; 2]], gt: &GtTarget, ord: &[usize]) -> f64 {
    let sum: f64 = pred
        .iter()
        .zip(ord)
        .map(|(p, &g)| (p[0] - gt.points[g][0]).abs() + (p[1] - gt.points[g][1]).abs())
        .sum();
    sum / pred.len() as f64
}

/// Smallest mean point-wise L1 distance over the equivalent orderings of
/// `gt`, and the index of the first ordering attaining it.
pub fn point_term(pred: &[[f64; 2]], gt: &GtTarget) -> Result<(f64, usize)> {
    if pred.len() != gt.points.len() {
        return Err(Error::InvalidArgument(format!(
            "prediction has {} points, GT has {}",
            pred.len(),
            gt.points.len()
        )));
    }
    let mut best = (f64::INFINITY, 0);
    for (i, ord) in orderings(gt.kind, pred.len()).iter().enumerate() {
        let c = mean_l1(pred, gt, ord);
        if c < best.0 {
            best = (c, i);
        }
    }
    Ok(best)
}

/// `λ_cls·(1 − P(gt class)) + λ_pts·point_term`.
pub fn instance_cost(probs: &[f64], pred: &[[f64; 2]], gt: &GtTarget, lambda_cls: f64, lambda_pts: f64) -> Result<f64> {
    let (pts, _) = point_term(pred, gt)?;
    Ok(lambda_cls * (1.0 - probs[gt.class]) + lambda_pts * pts)
}

/// Minimum-cost assignment of every row to a distinct column (rows ≤ columns).
/// Returns the column of each row.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(n <= m, "hungarian needs rows <= columns ({n} > {m})");
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            col_of_row[p[j] - 1] = j - 1;
        }
    }
    col_of_row
}

/// GT-to-slot assignment with the point ordering chosen for each pair.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenMatch {
    pub slot_of_gt: Vec<usize>,
    pub ordering_of_gt: Vec<Vec<usize>>,
}

impl FrozenMatch {
    pub fn gt_of_slot(&self, num_slots: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; num_slots];
        for (g, &s) in self.slot_of_gt.iter().enumerate() {
            out[s] = Some(g);
        }
        out
    }
}

/// Row `i·n_p + k` of `points` as point `k` of slot `i`.
pub fn slot_points(points: &Tensor2, slot: usize, n_p: usize) -> Vec<[f64; 2]> {
    (slot * n_p..(slot + 1) * n_p)
        .map(|r| [points.get(r, 0), points.get(r, 1)])
        .collect()
}

/// Hungarian matching of GT instances to prediction slots.
pub fn match_instances(
    probs: &Tensor2,
    points: &Tensor2,
    targets: &[GtTarget],
    lambda_cls: f64,
    lambda_pts: f64,
) -> Result<FrozenMatch> {
    let slots = probs.rows();
    let n_p = points.rows() / slots.max(1);
    if targets.len() > slots {
        return Err(Error::InvalidArgument(format!(
            "{} GT instances exceed {slots} prediction slots",
            targets.len()
        )));
    }
    let preds: Vec<Vec<[f64; 2]>> = (0..slots).map(|s| slot_points(points, s, n_p)).collect();
    let mut cost = Vec::with_capacity(targets.len());
    let mut best_ord = Vec::with_capacity(targets.len());
    for gt in targets {
        let mut row = Vec::with_capacity(slots);
        let mut ords = Vec::with_capacity(slots);
        for (s, pred) in preds.iter().enumerate() {
            let (pts, ord) = point_term(pred, gt)?;
            row.push(lambda_cls * (1.0 - probs.get(s, gt.class)) + lambda_pts * pts);
            ords.push(ord);
        }
        cost.push(row);
        best_ord.push(ords);
    }
    let slot_of_gt = hungarian(&cost);
    let ordering_of_gt = slot_of_gt
        .iter()
        .enumerate()
        .map(|(g, &s)| orderings(targets[g].kind, n_p).swap_remove(best_ord[g][s]))
        .collect();
    Ok(FrozenMatch {
        slot_of_gt,
        ordering_of_gt,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    /// `λ_cls` times the mean cross-entropy over slots.
    pub cls: f64,
    /// `λ_pts` times the summed matched point distance over `max(1, |GT|)`.
    pub pts: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.cls + self.pts
    }
}

/// Loss of one decoder layer's predictions and its gradients with respect
/// to the instance logits and the normalized points.
pub fn set_loss(
    inst_logits: &Tensor2,
    points: &Tensor2,
    targets: &[GtTarget],
    frozen: &FrozenMatch,
    lambda_cls: f64,
    lambda_pts: f64,
) -> Result<(LossParts, Tensor2, Tensor2)> {
    let slots = inst_logits.rows();
    let k1 = inst_logits.cols();
    let no_object = k1 - 1;
    let n_p = points.rows() / slots;
    let gt_of_slot = frozen.gt_of_slot(slots);

    let mut d_logits = Tensor2::zeros(slots, k1);
    let mut ce_sum = 0.0;
    for s in 0..slots {
        let row = inst_logits.row(s);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
        let target = gt_of_slot[s].map_or(no_object, |g| targets[g].class);
        ce_sum += lse - row[target];
        let scale = lambda_cls / slots as f64;
        for (c, d) in d_logits.row_mut(s).iter_mut().enumerate() {
            let p = (row[c] - lse).exp();
            *d = scale * (p - (c == target) as u8 as f64);
        }
    }

    let norm = targets.len().max(1) as f64;
    let mut d_points = Tensor2::zeros(points.rows(), 2);
    let mut l1_sum = 0.0;
    for (g, &s) in frozen.slot_of_gt.iter().enumerate() {
        let ord = &frozen.ordering_of_gt[g];
        for k in 0..n_p {
            let r = s * n_p + k;
            let gp = targets[g].points[ord[k]];
            for c in 0..2 {
                let diff = points.get(r, c) - gp[c];
                l1_sum += diff.abs() / n_p as f64;
                d_points.set(r, c, lambda_pts / norm / n_p as f64 * sign(diff));
            }
        }
    }
    let parts = LossParts {
        cls: lambda_cls * ce_sum / slots as f64,
        pts: lambda_pts * l1_sum / norm,
    };
    if !parts.total().is_finite() {
        return Err(Error::NonFinite(format!(
            "loss (cls {}, pts {}) over {slots} slots and {} GT instances",
            parts.cls,
            parts.pts,
            targets.len()
        )));
    }
    Ok((parts, d_logits, d_points))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Class index of the no-object label.
pub const NO_OBJECT: usize = ElementClass::COUNT;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn target(kind: InstanceKind, pts: &[[f64; 2]]) -> GtTarget {
        GtTarget {
            class: 1,
            kind,
            points: pts.to_vec(),
        }
    }

    #[test]
    fn exact_prediction_costs_nothing() {
        let gt = target(InstanceKind::Polyline, &[[0.1, 0.2], [0.3, 0.4], [0.5, 0.5]]);
        let probs = [0.0, 1.0, 0.0, 0.0, 0.0];
        assert_eq!(instance_cost(&probs, &gt.points, &gt, 2.0, 5.0).unwrap(), 0.0);
    }

    #[test]
    fn reversed_polyline_has_zero_point_term() {
        let gt = target(InstanceKind::Polyline, &[[0.1, 0.2], [0.3, 0.4], [0.5, 0.5]]);
        let rev: Vec<[f64; 2]> = gt.points.iter().rev().copied().collect();
        assert_eq!(point_term(&rev, &gt).unwrap(), (0.0, 1));
    }

    #[test]
    fn square_from_another_corner_has_zero_point_term() {
        let sq = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let gt = target(InstanceKind::Polygon, &sq);
        for s in 0..4 {
            let fwd: Vec<[f64; 2]> = (0..4).map(|k| sq[(s + k) % 4]).collect();
            let bwd: Vec<[f64; 2]> = (0..4).map(|k| sq[(s + 4 - k) % 4]).collect();
            assert_eq!(point_term(&fwd, &gt).unwrap().0, 0.0);
            assert_eq!(point_term(&bwd, &gt).unwrap().0, 0.0);
        }
        // a polyline does not get cyclic freedom
        let line = target(InstanceKind::Polyline, &sq);
        let shifted: Vec<[f64; 2]> = (0..4).map(|k| sq[(1 + k) % 4]).collect();
        assert!(point_term(&shifted, &line).unwrap().0 > 0.0);
    }

    #[test]
    fn point_count_mismatch_is_error() {
        let gt = target(InstanceKind::Polyline, &[[0.0, 0.0], [1.0, 1.0]]);
        assert!(point_term(&[[0.0, 0.0]], &gt).is_err());
    }

    #[test]
    fn ordering_counts() {
        assert_eq!(orderings(InstanceKind::Polyline, 8).len(), 2);
        let o = orderings(InstanceKind::Polygon, 5);
        assert_eq!(o.len(), 10);
        assert_eq!(o[3], vec![1, 0, 4, 3, 2]);
    }

    #[test]
    fn hungarian_examples() {
        assert_eq!(hungarian(&[vec![1.0, 2.0], vec![2.0, 1.0]]), vec![0, 1]);
        assert_eq!(hungarian(&[vec![0.5, 0.9]]), vec![0]);
        assert_eq!(hungarian(&[vec![0.9, 0.5]]), vec![1]);
        assert!(hungarian(&[]).is_empty());
    }

    fn brute_force(cost: &[Vec<f64>]) -> (f64, Vec<usize>) {
        fn rec(cost: &[Vec<f64>], row: usize, used: &mut [bool], cur: &mut Vec<usize>, best: &mut (f64, Vec<usize>)) {
            if row == cost.len() {
                let total: f64 = cur.iter().enumerate().map(|(r, &c)| cost[r][c]).sum();
                if total < best.0 {
                    *best = (total, cur.clone());
                }
                return;
            }
            for c in 0..used.len() {
                if !used[c] {
                    used[c] = true;
                    cur.push(c);
                    rec(cost, row + 1, used, cur, best);
                    cur.pop();
                    used[c] = false;
                }
            }
        }
        let mut best = (f64::INFINITY, Vec::new());
        rec(cost, 0, &mut vec![false; cost[0].len()], &mut Vec::new(), &mut best);
        best
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..500 {
            let n = rng.gen_range(1..=6);
            let m = rng.gen_range(n..=7);
            let cost: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| rng.gen_range(0.0..10.0)).collect()).collect();
            let got = hungarian(&cost);
            let total: f64 = got.iter().enumerate().map(|(r, &c)| cost[r][c]).sum();
            let (want_total, want) = brute_force(&cost);
            assert!((total - want_total).abs() < 1e-9);
            assert_eq!(got, want);
        }
    }

    #[test]
    fn zero_gt_assigns_everything_to_no_object() {
        let logits = Tensor2::zeros(3, 5);
        let points = Tensor2::full(6, 2, 0.5);
        let m = match_instances(&logits, &points, &[], 2.0, 5.0).unwrap();
        assert!(m.slot_of_gt.is_empty());
        let (parts, dl, dp) = set_loss(&logits, &points, &[], &m, 2.0, 5.0).unwrap();
        assert_eq!(parts.pts, 0.0);
        assert!((parts.cls - 2.0 * 5f64.ln()).abs() < 1e-12);
        assert_eq!(dp.max_abs(), 0.0);
        for s in 0..3 {
            assert!(dl.get(s, NO_OBJECT) < 0.0);
        }
    }

    #[test]
    fn perfect_points_leave_only_class_term() {
        let gt = target(InstanceKind::Polyline, &[[0.1, 0.2], [0.3, 0.4]]);
        let mut logits = Tensor2::zeros(2, 5);
        logits.set(0, 1, 4.0);
        logits.set(1, NO_OBJECT, 4.0);
        let points = Tensor2::from_rows(&[&[0.3, 0.4], &[0.1, 0.2], &[0.9, 0.9], &[0.8, 0.8]]).unwrap();
        let probs = Tensor2::from_fn(2, 5, |r, c| {
            let row = logits.row(r);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            row[c].exp() / z
        });
        let m = match_instances(&probs, &points, std::slice::from_ref(&gt), 2.0, 5.0).unwrap();
        assert_eq!(m.slot_of_gt, vec![0]);
        let (parts, _, _) = set_loss(&logits, &points, std::slice::from_ref(&gt), &m, 2.0, 5.0).unwrap();
        assert_eq!(parts.pts, 0.0);
        let floor = -(4f64.exp() / (4f64.exp() + 4.0)).ln();
        assert!((parts.cls - 2.0 * floor).abs() < 1e-12);
        // doubling the point weight doubles the point term exactly
        let shifted = points.map(|v| v + 0.01);
        let (a, _, _) = set_loss(&logits, &shifted, std::slice::from_ref(&gt), &m, 2.0, 5.0).unwrap();
        let (b, _, _) = set_loss(&logits, &shifted, &[gt], &m, 2.0, 10.0).unwrap();
        assert_eq!(b.pts, 2.0 * a.pts);
    }

    #[test]
    fn more_gt_than_slots_is_error() {
        let gt = target(InstanceKind::Polyline, &[[0.1, 0.2], [0.3, 0.4]]);
        let r = match_instances(&Tensor2::zeros(1, 5), &Tensor2::zeros(2, 2), &[gt.clone(), gt], 1.0, 1.0);
        assert!(r.is_err());
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let targets = vec![
            target(InstanceKind::Polyline, &[[0.1, 0.2], [0.3, 0.4], [0.6, 0.5]]),
            GtTarget {
                class: 0,
                kind: InstanceKind::Polygon,
                points: vec![[0.7, 0.7], [0.9, 0.7], [0.8, 0.9]],
            },
        ];
        let logits = Tensor2::from_fn(3, 5, |_, _| rng.gen_range(-1.0..1.0));
        let points = Tensor2::from_fn(9, 2, |_, _| rng.gen_range(0.0..1.0));
        let m = match_instances(&logits, &points, &targets, 2.0, 5.0).unwrap();
        let (_, dl, dp) = set_loss(&logits, &points, &targets, &m, 2.0, 5.0).unwrap();
        let h = 1e-6;
        for (t, grad, is_logits) in [(&logits, &dl, true), (&points, &dp, false)] {
            for i in 0..t.data().len() {
                let eval = |delta: f64| {
                    let mut x = t.clone();
                    x.data_mut()[i] += delta;
                    let (l, p) = if is_logits { (&x, &points) } else { (&logits, &x) };
                    set_loss(l, p, &targets, &m, 2.0, 5.0).unwrap().0.total()
                };
                let num = (eval(h) - eval(-h)) / (2.0 * h);
                assert!((num - grad.data()[i]).abs() < 1e-6, "{i}: {num} vs {}", grad.data()[i]);
            }
        }
    }
}
