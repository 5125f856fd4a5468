use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap};

use serde::{Deserialize, Serialize};

use super::MetricConfig;
use crate::geometry::{densify, ElementClass, Instance, InstanceKind, Point};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopoScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Un-normalized TOPO sums, poolable across scenes.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TopoCounts {
    pub precision_sum: f64,
    pub pred_vertices: usize,
    pub recall_sum: f64,
    pub gt_vertices: usize,
}

impl TopoCounts {
    pub fn add(&mut self, o: &TopoCounts) {
        self.precision_sum += o.precision_sum;
        self.pred_vertices += o.pred_vertices;
        self.recall_sum += o.recall_sum;
        self.gt_vertices += o.gt_vertices;
    }

    /// Final score plus a diagnostic when either side is empty.
    pub fn score(&self) -> (TopoScore, Option<String>) {
        let mut diag = Vec::new();
        if self.pred_vertices == 0 {
            diag.push("prediction graph is empty");
        }
        if self.gt_vertices == 0 {
            diag.push("ground-truth graph is empty");
        }
        if !diag.is_empty() {
            let zero = TopoScore {
                precision: 0.0,
                recall: 0.0,
                f1: 0.0,
            };
            return (zero, Some(format!("TOPO scored 0: {}", diag.join(", "))));
        }
        let precision = self.precision_sum / self.pred_vertices as f64;
        let recall = self.recall_sum / self.gt_vertices as f64;
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        (TopoScore { precision, recall, f1 }, None)
    }
}

/// Densified vertex graph of one class.
#[derive(Debug, Clone, Default)]
pub struct DenseGraph {
    pub vertices: Vec<Point>,
    pub adj: Vec<Vec<(usize, f64)>>,
}

const MERGE_EPS: f64 = 1e-6;

impl DenseGraph {
    /// Densifies the instances and joins vertices closer than 1e-6 m, so
    /// instances sharing an endpoint become connected.
    pub fn build(instances: &[&Instance], step: f64) -> Self {
        let mut g = DenseGraph::default();
        let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for inst in instances {
            let mut canon = (*inst).clone();
            if canon.check().is_err() {
                continue;
            }
            canon.canonicalize();
            let Ok(pts) = densify(&canon, step) else {
                continue;
            };
            let ids: Vec<usize> = pts.iter().map(|&p| g.vertex(p, &mut cells)).collect();
            for w in ids.windows(2) {
                g.edge(w[0], w[1]);
            }
            if canon.kind == InstanceKind::Polygon {
                g.edge(ids[ids.len() - 1], ids[0]);
            }
        }
        g
    }

    fn vertex(&mut self, p: Point, cells: &mut HashMap<(i64, i64), Vec<usize>>) -> usize {
        let key = ((p.x / MERGE_EPS).floor() as i64, (p.y / MERGE_EPS).floor() as i64);
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(ids) = cells.get(&(key.0 + dx, key.1 + dy)) {
                    if let Some(&id) = ids.iter().find(|&&id| self.vertices[id].dist(p) <= MERGE_EPS) {
                        return id;
                    }
                }
            }
        }
        let id = self.vertices.len();
        self.vertices.push(p);
        self.adj.push(Vec::new());
        cells.entry(key).or_default().push(id);
        id
    }

    fn edge(&mut self, a: usize, b: usize) {
        if a == b || self.adj[a].iter().any(|&(n, _)| n == b) {
            return;
        }
        let w = self.vertices[a].dist(self.vertices[b]);
        self.adj[a].push((b, w));
        self.adj[b].push((a, w));
    }

    /// Vertices within geodesic distance `radius` of `src`, including `src`.
    pub fn reachable(&self, src: usize, radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        self.reachable_into(src, radius, &mut Scratch::new(self.vertices.len()), &mut out);
        out
    }

    /// [`reachable`](Self::reachable) reusing `scratch` across calls.
    pub fn reachable_into(&self, src: usize, radius: f64, scratch: &mut Scratch, out: &mut Vec<usize>) {
        out.clear();
        let Scratch { dist, touched, heap } = scratch;
        dist[src] = 0.0;
        touched.push(src);
        heap.push(Reverse(HeapItem(0.0, src)));
        while let Some(Reverse(HeapItem(d, v))) = heap.pop() {
            if d > dist[v] {
                continue;
            }
            out.push(v);
            for &(n, w) in &self.adj[v] {
                let nd = d + w;
                if nd <= radius && nd < dist[n] {
                    if dist[n] == f64::INFINITY {
                        touched.push(n);
                    }
                    dist[n] = nd;
                    heap.push(Reverse(HeapItem(nd, n)));
                }
            }
        }
        for v in touched.drain(..) {
            dist[v] = f64::INFINITY;
        }
    }
}

/// Reusable Dijkstra buffers for one graph.
pub struct Scratch {
    dist: Vec<f64>,
    touched: Vec<usize>,
    heap: BinaryHeap<Reverse<HeapItem>>,
}

impl Scratch {
    pub fn new(vertices: usize) -> Self {
        Scratch {
            dist: vec![f64::INFINITY; vertices],
            touched: Vec::new(),
            heap: BinaryHeap::new(),
        }
    }
}

#[derive(PartialEq)]
struct HeapItem(f64, usize);

impl Eq for HeapItem {}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

/// Greedy one-to-one matching of vertex pairs by increasing distance
/// (ties by pred index, then GT index). Returns `pred → gt` and `gt → pred`.
pub fn match_vertices(pred: &[Point], gt: &[Point], radius: f64) -> (Vec<Option<usize>>, Vec<Option<usize>>) {
    let key = |p: Point| ((p.x / radius).floor() as i64, (p.y / radius).floor() as i64);
    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, &g) in gt.iter().enumerate() {
        grid.entry(key(g)).or_default().push(i);
    }
    let mut pairs = Vec::new();
    for (i, &p) in pred.iter().enumerate() {
        let k = key(p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for &j in grid.get(&(k.0 + dx, k.1 + dy)).map_or(&[][..], Vec::as_slice) {
                    let d = p.dist(gt[j]);
                    if d <= radius {
                        pairs.push((d, i, j));
                    }
                }
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut p2g = vec![None; pred.len()];
    let mut g2p = vec![None; gt.len()];
    for (_, i, j) in pairs {
        if p2g[i].is_none() && g2p[j].is_none() {
            p2g[i] = Some(j);
            g2p[j] = Some(i);
        }
    }
    (p2g, g2p)
}

/// TOPO sums for one scene. Each class forms its own graph pair.
pub fn topo_counts(preds: &[&Instance], gts: &[&Instance], cfg: &MetricConfig) -> TopoCounts {
    let mut total = TopoCounts::default();
    for class in ElementClass::ALL {
        if cfg.topo_centerline_only && class != ElementClass::Centerline {
            continue;
        }
        let pc: Vec<&Instance> = preds.iter().copied().filter(|i| i.class == class).collect();
        let gc: Vec<&Instance> = gts.iter().copied().filter(|i| i.class == class).collect();
        let pg = DenseGraph::build(&pc, cfg.topo_step);
        let gg = DenseGraph::build(&gc, cfg.topo_step);
        total.add(&graph_counts(&pg, &gg, cfg));
    }
    total
}

fn graph_counts(pg: &DenseGraph, gg: &DenseGraph, cfg: &MetricConfig) -> TopoCounts {
    let (p2g, g2p) = match_vertices(&pg.vertices, &gg.vertices, cfg.topo_match_radius);
    let mut c = TopoCounts {
        pred_vertices: pg.vertices.len(),
        gt_vertices: gg.vertices.len(),
        ..Default::default()
    };
    let mut in_gt = vec![false; gg.vertices.len()];
    let (mut sp, mut sg) = (Scratch::new(pg.vertices.len()), Scratch::new(gg.vertices.len()));
    let (mut reach_p, mut reach_g) = (Vec::new(), Vec::new());
    for (p, g) in p2g.iter().enumerate() {
        let Some(g) = *g else { continue };
        pg.reachable_into(p, cfg.topo_prop_radius, &mut sp, &mut reach_p);
        reach_p.retain(|&v| p2g[v].is_some());
        gg.reachable_into(g, cfg.topo_prop_radius, &mut sg, &mut reach_g);
        reach_g.retain(|&v| g2p[v].is_some());
        for &v in &reach_g {
            in_gt[v] = true;
        }
        let common = reach_p.iter().filter(|&&v| in_gt[p2g[v].unwrap()]).count() as f64;
        for &v in &reach_g {
            in_gt[v] = false;
        }
        c.precision_sum += common / reach_p.len() as f64;
        c.recall_sum += common / reach_g.len() as f64;
    }
    c
}

/// TOPO of a single scene.
pub fn topo_score(preds: &[Instance], gts: &[Instance], cfg: &MetricConfig) -> (TopoScore, Option<String>) {
    let p: Vec<&Instance> = preds.iter().collect();
    let g: Vec<&Instance> = gts.iter().collect();
    topo_counts(&p, &g, cfg).score()
}
