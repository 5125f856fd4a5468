use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vecmap_core::geometry::{ElementClass, Instance, Point};
use vecmap_core::metrics::{eval_points, ApCandidate, MetricConfig, SceneEval, ScoredInstance};

/// Every injective partial matching that respects `tau`, as per-prediction
/// GT choices in `order`.
pub fn all_matchings(c: &[ApCandidate], order: &[usize], num_gt: usize, tau: f64) -> Vec<Vec<Option<usize>>> {
    fn rec(
        c: &[ApCandidate],
        order: &[usize],
        k: usize,
        used: &mut Vec<bool>,
        cur: &mut Vec<Option<usize>>,
        tau: f64,
        out: &mut Vec<Vec<Option<usize>>>,
    ) {
        if k == order.len() {
            out.push(cur.clone());
            return;
        }
        cur.push(None);
        rec(c, order, k + 1, used, cur, tau, out);
        cur.pop();
        for &(g, d) in &c[order[k]].distances {
            if !used[g] && d <= tau {
                used[g] = true;
                cur.push(Some(g));
                rec(c, order, k + 1, used, cur, tau, out);
                cur.pop();
                used[g] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(c, order, 0, &mut vec![false; num_gt], &mut Vec::new(), tau, &mut out);
    out
}

/// Oracle AP: among all matchings pick the lexicographic minimum of the
/// per-prediction keys (unmatched?, distance, gt) in confidence order,
/// then integrate the precision envelope level by level.
pub fn oracle_ap(c: &[ApCandidate], num_gt: usize, tau: f64) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..c.len()).collect();
    order.sort_by(|&a, &b| c[b].confidence.total_cmp(&c[a].confidence));
    let key = |m: &Vec<Option<usize>>| -> Vec<(u8, f64, usize)> {
        m.iter()
            .enumerate()
            .map(|(k, g)| match g {
                Some(g) => {
                    let d = c[order[k]].distances.iter().find(|e| e.0 == *g).unwrap().1;
                    (0, d, *g)
                }
                None => (1, 0.0, 0),
            })
            .collect()
    };
    let best = all_matchings(c, &order, num_gt, tau)
        .into_iter()
        .min_by(|a, b| {
            let (ka, kb) = (key(a), key(b));
            for (x, y) in ka.iter().zip(&kb) {
                let o = x.0.cmp(&y.0).then(x.1.total_cmp(&y.1)).then(x.2.cmp(&y.2));
                if o != std::cmp::Ordering::Equal {
                    return o;
                }
            }
            std::cmp::Ordering::Equal
        })
        .unwrap();
    let hits: Vec<bool> = best.iter().map(Option::is_some).collect();
    let pr: Vec<(f64, f64)> = (0..hits.len())
        .map(|k| {
            let tp = hits[..=k].iter().filter(|&&h| h).count() as f64;
            (tp / num_gt as f64, tp / (k + 1) as f64)
        })
        .collect();
    let mut levels: Vec<f64> = pr.iter().map(|x| x.0).collect();
    levels.insert(0, 0.0);
    levels.dedup();
    let mut area = 0.0;
    for w in levels.windows(2) {
        let env = pr.iter().filter(|x| x.0 >= w[1]).map(|x| x.1).fold(0.0, f64::max);
        area += (w[1] - w[0]) * env;
    }
    Some(area)
}

/// Plain double loop over point pairs.
pub fn chamfer_oracle(p: &[Point], q: &[Point]) -> f64 {
    let directed = |a: &[Point], b: &[Point]| {
        let mut s = 0.0;
        for x in a {
            let mut best = f64::INFINITY;
            for y in b {
                best = best.min(((x.x - y.x).powi(2) + (x.y - y.y).powi(2)).sqrt());
            }
            s += best;
        }
        s / a.len() as f64
    };
    0.5 * (directed(p, q) + directed(q, p))
}

/// Oracle for `ap_at_tau` over whole scenes: distances by the plain
/// Chamfer double loop, GT ids pooled across scenes, exhaustive matching.
pub fn oracle_ap_at_tau(scenes: &[SceneEval], class: ElementClass, tau: f64, cfg: &MetricConfig) -> Option<f64> {
    let mut cands = Vec::new();
    let mut offset = 0;
    for s in scenes {
        let gts: Vec<Vec<Point>> = s
            .gts
            .iter()
            .filter(|g| g.class == class)
            .map(|g| eval_points(g, cfg.eval_samples))
            .collect();
        for p in s.preds.iter().filter(|p| p.instance.class == class) {
            let pts = eval_points(&p.instance, cfg.eval_samples);
            cands.push(ApCandidate {
                confidence: p.confidence,
                distances: gts.iter().enumerate().map(|(g, q)| (offset + g, chamfer_oracle(&pts, q))).collect(),
            });
        }
        offset += gts.len();
    }
    oracle_ap(&cands, offset, tau)
}

fn random_polyline(rng: &mut impl Rng, class: ElementClass) -> Instance {
    let n = rng.gen_range(2..=4);
    let mut pts = Vec::with_capacity(n);
    let (mut x, mut y) = (rng.gen_range(-12.0..12.0), rng.gen_range(-25.0..25.0));
    for _ in 0..n {
        pts.push(Point::new(x, y));
        x += rng.gen_range(0.5..3.0);
        y += rng.gen_range(-2.0..2.0);
    }
    Instance::polyline(class, pts)
}

/// Small random scene: at most 3 GT and at most 5 predictions over two
/// classes. Predictions are jittered copies of GT or unrelated shapes, with
/// coarse confidences so ties occur.
pub fn random_ap_scene(seed: u64) -> SceneEval {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = [ElementClass::Divider, ElementClass::Boundary];
    let gts: Vec<Instance> = (0..rng.gen_range(0..=3))
        .map(|_| {
            let c = classes[rng.gen_range(0..2)];
            random_polyline(&mut rng, c)
        })
        .collect();
    let preds: Vec<ScoredInstance> = (0..rng.gen_range(0..=5))
        .map(|_| {
            let instance = if !gts.is_empty() && rng.gen_bool(0.6) {
                let g = &gts[rng.gen_range(0..gts.len())];
                let s = rng.gen_range(0.0..1.2);
                let pts = g
                    .points
                    .iter()
                    .map(|p| Point::new(p.x + rng.gen_range(-s..=s), p.y + rng.gen_range(-s..=s)))
                    .collect();
                Instance::polyline(g.class, pts)
            } else {
                let c = classes[rng.gen_range(0..2)];
                random_polyline(&mut rng, c)
            };
            ScoredInstance {
                instance,
                confidence: rng.gen_range(0..5) as f64 / 4.0,
            }
        })
        .collect();
    SceneEval {
        topo_preds: preds.iter().map(|p| p.instance.clone()).collect(),
        preds,
        gts,
    }
}
