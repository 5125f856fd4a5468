use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vecmap_core::geometry::{ElementClass, Instance, InstanceKind, Point, VectorMapGraph};

/// Random valid map graph with at most 40 vertices on distinct integer
/// coordinates, no self-loops or duplicate edges, one class per component.
pub fn random_graph(seed: u64) -> VectorMapGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nv = rng.gen_range(0..=40);
    let mut cells: Vec<(i32, i32)> = (-10..10).flat_map(|x| (-10..10).map(move |y| (x, y))).collect();
    cells.shuffle(&mut rng);
    let vertices: Vec<Point> = cells[..nv].iter().map(|&(x, y)| Point::new(x as f64, y as f64)).collect();

    let mut pairs = BTreeSet::new();
    if nv >= 2 {
        // sparse on average so that paths, cycles and junctions all show up
        let ne = rng.gen_range(0..=(nv * 3 / 2));
        for _ in 0..ne {
            let a = rng.gen_range(0..nv);
            let b = rng.gen_range(0..nv);
            if a != b {
                pairs.insert((a.min(b), a.max(b)));
            }
        }
    }
    // random edges seldom close an isolated ring, so plant one on untouched vertices
    let used: BTreeSet<usize> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
    let mut free: Vec<usize> = (0..nv).filter(|v| !used.contains(v)).collect();
    if free.len() >= 3 && rng.gen_bool(0.5) {
        free.shuffle(&mut rng);
        let ring = &free[..rng.gen_range(3..=free.len().min(6))];
        for (i, &a) in ring.iter().enumerate() {
            let b = ring[(i + 1) % ring.len()];
            pairs.insert((a.min(b), a.max(b)));
        }
    }
    let mut edges: Vec<(usize, usize)> = pairs.into_iter().collect();
    edges.shuffle(&mut rng);
    let edges: Vec<(usize, usize)> = edges
        .into_iter()
        .map(|(a, b)| if rng.gen_bool(0.5) { (a, b) } else { (b, a) })
        .collect();

    // one class per connected component
    let comp = components(nv, &edges);
    let mut class_of: HashMap<usize, ElementClass> = HashMap::new();
    let edge_class = edges
        .iter()
        .map(|&(a, _)| *class_of.entry(comp[a]).or_insert_with(|| ElementClass::ALL[rng.gen_range(0..4)]))
        .collect();
    VectorMapGraph {
        vertices,
        edges,
        edge_class,
    }
}

fn components(nv: usize, edges: &[(usize, usize)]) -> Vec<usize> {
    let mut label: Vec<usize> = (0..nv).collect();
    // relabel to the minimum until nothing changes
    loop {
        let mut changed = false;
        for &(a, b) in edges {
            let m = label[a].min(label[b]);
            if label[a] != m || label[b] != m {
                label[a] = m;
                label[b] = m;
                changed = true;
            }
        }
        if !changed {
            return label;
        }
    }
}

/// What the oracle expects one output instance to be.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Expected {
    pub class: ElementClass,
    pub polygon: bool,
    /// Sorted original edge ids.
    pub edges: Vec<usize>,
}

/// Oracle: drop vertices of degree > 2, flood-fill the edges that remain
/// connected through vertices of degree <= 2, call a piece a cycle when
/// every vertex it touches has degree exactly 2.
pub fn oracle_decompose(g: &VectorMapGraph) -> Vec<Expected> {
    let nv = g.vertices.len();
    let mut deg = vec![0usize; nv];
    for &(a, b) in &g.edges {
        deg[a] += 1;
        deg[b] += 1;
    }
    let ne = g.edges.len();
    let linked = |e: usize, f: usize| {
        let (a, b) = g.edges[e];
        let (c, d) = g.edges[f];
        [a, b].iter().any(|&v| deg[v] <= 2 && (v == c || v == d))
    };
    let mut piece = vec![usize::MAX; ne];
    let mut out = Vec::new();
    for start in 0..ne {
        if piece[start] != usize::MAX {
            continue;
        }
        let id = out.len();
        let mut stack = vec![start];
        piece[start] = id;
        let mut members = vec![];
        while let Some(e) = stack.pop() {
            members.push(e);
            for f in 0..ne {
                if piece[f] == usize::MAX && linked(e, f) {
                    piece[f] = id;
                    stack.push(f);
                }
            }
        }
        members.sort_unstable();
        let cycle = members.iter().all(|&e| {
            let (a, b) = g.edges[e];
            deg[a] == 2 && deg[b] == 2
        });
        out.push(Expected {
            class: g.edge_class[start],
            polygon: cycle,
            edges: members,
        });
    }
    out.sort();
    out
}

/// Maps an output instance back to original edge ids through its point
/// pairs. Fails if a pair is not an edge of `g`.
pub fn edges_of(g: &VectorMapGraph, inst: &Instance) -> Result<Vec<usize>, String> {
    let vid = |p: &Point| {
        g.vertices
            .iter()
            .position(|v| v == p)
            .ok_or_else(|| format!("point {p:?} is not a graph vertex"))
    };
    let mut out = Vec::new();
    for w in inst.points.windows(2) {
        let (a, b) = (vid(&w[0])?, vid(&w[1])?);
        let e = g
            .edges
            .iter()
            .position(|&(x, y)| (x, y) == (a, b) || (x, y) == (b, a))
            .ok_or_else(|| format!("points {a} and {b} are not joined by an edge"))?;
        out.push(e);
    }
    Ok(out)
}

/// Full comparison of `decompose` output against the oracle, including edge
/// conservation (every input edge exactly once across all instances) and
/// the degree bound inside each instance.
pub fn check_decomposition(g: &VectorMapGraph, got: &[Instance]) -> Result<(), String> {
    let mut seen = vec![0usize; g.edges.len()];
    let mut actual = Vec::new();
    for (i, inst) in got.iter().enumerate() {
        let es = edges_of(g, inst).map_err(|e| format!("instance {i}: {e}"))?;
        let mut used_pts: HashMap<(u64, u64), usize> = HashMap::new();
        for p in inst.distinct_points() {
            *used_pts.entry((p.x.to_bits(), p.y.to_bits())).or_default() += 1;
        }
        // an instance may revisit a point only at its two ends (loop through a junction)
        let repeats: usize = used_pts.values().map(|&c| c - 1).sum();
        let ends_equal = inst.kind == InstanceKind::Polyline && inst.points.first() == inst.points.last();
        if repeats > usize::from(ends_equal) {
            return Err(format!("instance {i} revisits a vertex: {:?}", inst.points));
        }
        for &e in &es {
            seen[e] += 1;
        }
        let mut sorted = es;
        sorted.sort_unstable();
        actual.push(Expected {
            class: inst.class,
            polygon: inst.kind == InstanceKind::Polygon,
            edges: sorted,
        });
    }
    if let Some(e) = seen.iter().position(|&c| c != 1) {
        return Err(format!("edge {e} covered {} times", seen[e]));
    }
    actual.sort();
    let want = oracle_decompose(g);
    if actual != want {
        return Err(format!("decompose {actual:?}\noracle    {want:?}"));
    }
    Ok(())
}
