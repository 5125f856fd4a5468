use std::fmt;

use super::{ElementClass, Instance, InstanceKind, Point, VectorMapGraph};
use crate::error::{Error, Result};

/// A located violation of a [`VectorMapGraph`] invariant.
#[derive(Debug, Clone, PartialEq)]
pub enum GraphDiagnostic {
    ClassCountMismatch { edges: usize, classes: usize },
    VertexOutOfRange { edge: usize, vertex: usize },
    SelfLoop { edge: usize, vertex: usize },
    DuplicateEdge { first: usize, second: usize },
    ZeroLengthEdge { edge: usize },
    NonFiniteVertex { vertex: usize },
    MixedClassComponent {
        edge: usize,
        expected: ElementClass,
        found: ElementClass,
    },
}

impl fmt::Display for GraphDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use GraphDiagnostic::*;
        match self {
            ClassCountMismatch { edges, classes } => {
                write!(f, "{edges} edges but {classes} edge classes")
            }
            VertexOutOfRange { edge, vertex } => {
                write!(f, "edge {edge} references missing vertex {vertex}")
            }
            SelfLoop { edge, vertex } => write!(f, "self-loop at vertex {vertex} (edge {edge})"),
            DuplicateEdge { first, second } => {
                write!(f, "edge {second} duplicates edge {first}")
            }
            ZeroLengthEdge { edge } => write!(f, "edge {edge} has zero length"),
            NonFiniteVertex { vertex } => write!(f, "vertex {vertex} is not finite"),
            MixedClassComponent {
                edge,
                expected,
                found,
            } => write!(
                f,
                "edge {edge} has class {found} in a {expected} component"
            ),
        }
    }
}

pub fn validate_graph(g: &VectorMapGraph) -> Vec<GraphDiagnostic> {
    let mut out = Vec::new();
    let nv = g.vertices.len();
    if g.edge_class.len() != g.edges.len() {
        out.push(GraphDiagnostic::ClassCountMismatch {
            edges: g.edges.len(),
            classes: g.edge_class.len(),
        });
    }
    for (i, v) in g.vertices.iter().enumerate() {
        if !(v.x.is_finite() && v.y.is_finite()) {
            out.push(GraphDiagnostic::NonFiniteVertex { vertex: i });
        }
    }

    let mut seen = std::collections::HashMap::new();
    let mut structurally_ok = vec![true; g.edges.len()];
    for (e, &(a, b)) in g.edges.iter().enumerate() {
        for v in [a, b] {
            if v >= nv {
                out.push(GraphDiagnostic::VertexOutOfRange { edge: e, vertex: v });
                structurally_ok[e] = false;
            }
        }
        if a == b {
            out.push(GraphDiagnostic::SelfLoop { edge: e, vertex: a });
            structurally_ok[e] = false;
            continue;
        }
        let key = (a.min(b), a.max(b));
        if let Some(&first) = seen.get(&key) {
            out.push(GraphDiagnostic::DuplicateEdge { first, second: e });
        } else {
            seen.insert(key, e);
        }
        if structurally_ok[e] && g.vertices[a].dist(g.vertices[b]) == 0.0 {
            out.push(GraphDiagnostic::ZeroLengthEdge { edge: e });
        }
    }

    if g.edge_class.len() == g.edges.len() {
        let mut parent: Vec<usize> = (0..nv).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for (e, &(a, b)) in g.edges.iter().enumerate() {
            if structurally_ok[e] {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                parent[ra] = rb;
            }
        }
        let mut comp_class: std::collections::HashMap<usize, ElementClass> = Default::default();
        for (e, &(a, _)) in g.edges.iter().enumerate() {
            if !structurally_ok[e] {
                continue;
            }
            let root = find(&mut parent, a);
            let class = g.edge_class[e];
            match comp_class.get(&root) {
                None => {
                    comp_class.insert(root, class);
                }
                Some(&expected) if expected != class => {
                    out.push(GraphDiagnostic::MixedClassComponent {
                        edge: e,
                        expected,
                        found: class,
                    });
                }
                Some(_) => {}
            }
        }
    }
    out
}

/// Splits the graph into intersection-free polylines and polygons.
///
/// Every vertex of degree greater than two is removed; each of its incident
/// edges keeps a private endpoint at the removed vertex's coordinates. The
/// remaining components are simple paths or simple cycles. Isolated vertices
/// are dropped. Instances are canonicalized and ordered by the smallest
/// original edge index they contain.
pub fn decompose(g: &VectorMapGraph) -> Result<Vec<Instance>> {
    let diags = validate_graph(g);
    if !diags.is_empty() {
        let msg: Vec<String> = diags.iter().map(ToString::to_string).collect();
        return Err(Error::InvalidArgument(format!(
            "invalid map graph: {}",
            msg.join("; ")
        )));
    }
    if g.edges.is_empty() {
        return Ok(Vec::new());
    }

    let deg = g.degrees();
    // Node ids of the cut graph: one per kept vertex, one per (junction, edge).
    let mut node_of_vertex = vec![usize::MAX; g.vertices.len()];
    let mut node_point: Vec<Point> = Vec::new();
    let mut cut_edges: Vec<(usize, usize)> = Vec::with_capacity(g.edges.len());
    let mut endpoint = |v: usize, node_point: &mut Vec<Point>| -> usize {
        if deg[v] > 2 {
            node_point.push(g.vertices[v]);
            node_point.len() - 1
        } else {
            if node_of_vertex[v] == usize::MAX {
                node_point.push(g.vertices[v]);
                node_of_vertex[v] = node_point.len() - 1;
            }
            node_of_vertex[v]
        }
    };
    for &(a, b) in &g.edges {
        let na = endpoint(a, &mut node_point);
        let nb = endpoint(b, &mut node_point);
        cut_edges.push((na, nb));
    }

    let n = node_point.len();
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (e, &(a, b)) in cut_edges.iter().enumerate() {
        adj[a].push((b, e));
        adj[b].push((a, e));
    }

    let mut edge_used = vec![false; cut_edges.len()];
    let mut out: Vec<(usize, Instance)> = Vec::new();
    // Paths first: walk from every degree-1 node.
    for start in 0..n {
        if adj[start].len() != 1 || edge_used[adj[start][0].1] {
            continue;
        }
        let (nodes, edges) = walk(start, &adj, &mut edge_used);
        out.push((
            *edges.iter().min().expect("path has an edge"),
            Instance {
                class: g.edge_class[edges[0]],
                kind: InstanceKind::Polyline,
                points: nodes.iter().map(|&i| node_point[i]).collect(),
            },
        ));
    }
    // Whatever remains lies on cycles.
    for start in 0..n {
        let Some(&(_, e0)) = adj[start].iter().find(|&&(_, e)| !edge_used[e]) else {
            continue;
        };
        let (nodes, edges) = walk(start, &adj, &mut edge_used);
        debug_assert_eq!(nodes.first(), nodes.last());
        out.push((
            *edges.iter().min().expect("cycle has edges"),
            Instance {
                class: g.edge_class[e0],
                kind: InstanceKind::Polygon,
                points: nodes.iter().map(|&i| node_point[i]).collect(),
            },
        ));
    }

    out.sort_by_key(|&(first_edge, _)| first_edge);
    Ok(out
        .into_iter()
        .map(|(_, mut inst)| {
            inst.canonicalize();
            inst
        })
        .collect())
}

/// Follows unused edges from `start` until stuck. Returns visited nodes
/// (closed cycles repeat the start node) and the edges taken.
fn walk(
    start: usize,
    adj: &[Vec<(usize, usize)>],
    edge_used: &mut [bool],
) -> (Vec<usize>, Vec<usize>) {
    let mut nodes = vec![start];
    let mut edges = Vec::new();
    let mut cur = start;
    while let Some(&(next, e)) = adj[cur].iter().find(|&&(_, e)| !edge_used[e]) {
        edge_used[e] = true;
        edges.push(e);
        nodes.push(next);
        cur = next;
    }
    (nodes, edges)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(x: f64, y: f64) -> Point {
        Point::new(x, y)
    }

    #[test]
    fn empty_graph_is_valid_and_decomposes_to_nothing() {
        let g = VectorMapGraph::new();
        assert!(validate_graph(&g).is_empty());
        assert!(decompose(&g).unwrap().is_empty());
    }

    #[test]
    fn self_loop_is_reported_at_its_vertex() {
        let mut g = VectorMapGraph::new();
        for i in 0..4 {
            g.add_vertex(p(i as f64, 0.0));
        }
        g.add_edge(3, 3, ElementClass::Divider);
        let d = validate_graph(&g);
        assert_eq!(d, vec![GraphDiagnostic::SelfLoop { edge: 0, vertex: 3 }]);
        assert!(d[0].to_string().contains("self-loop at vertex 3"));
    }

    #[test]
    fn reversed_duplicate_edge_is_reported() {
        let mut g = VectorMapGraph::new();
        for i in 0..3 {
            g.add_vertex(p(i as f64, 0.0));
        }
        g.add_edge(1, 2, ElementClass::Divider);
        g.add_edge(2, 1, ElementClass::Divider);
        assert_eq!(
            validate_graph(&g),
            vec![GraphDiagnostic::DuplicateEdge { first: 0, second: 1 }]
        );
        assert!(decompose(&g).is_err());
    }

    #[test]
    fn mixed_class_component_is_reported() {
        let mut g = VectorMapGraph::new();
        g.add_path(&[p(0.0, 0.0), p(1.0, 0.0)], ElementClass::Divider);
        g.add_vertex(p(2.0, 0.0));
        g.add_edge(1, 2, ElementClass::Boundary);
        assert!(matches!(
            validate_graph(&g)[..],
            [GraphDiagnostic::MixedClassComponent { edge: 1, .. }]
        ));
    }

    #[test]
    fn out_of_range_vertex_is_reported() {
        let mut g = VectorMapGraph::new();
        g.add_vertex(p(0.0, 0.0));
        g.add_edge(0, 7, ElementClass::Divider);
        assert_eq!(
            validate_graph(&g),
            vec![GraphDiagnostic::VertexOutOfRange { edge: 0, vertex: 7 }]
        );
    }

    #[test]
    fn straight_path_is_one_polyline() {
        let mut g = VectorMapGraph::new();
        g.add_path(
            &[p(0.0, 0.0), p(1.0, 0.0), p(2.0, 0.0)],
            ElementClass::Boundary,
        );
        let out = decompose(&g).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].kind, InstanceKind::Polyline);
        assert_eq!(out[0].points, vec![p(0.0, 0.0), p(1.0, 0.0), p(2.0, 0.0)]);
    }

    #[test]
    fn t_junction_yields_three_arms_ending_at_junction() {
        let mut g = VectorMapGraph::new();
        let j = g.add_vertex(p(0.0, 0.0));
        for tip in [p(-2.0, 0.0), p(2.0, 0.0), p(0.0, 3.0)] {
            let mid = g.add_vertex(tip.lerp(p(0.0, 0.0), 0.5));
            let t = g.add_vertex(tip);
            g.add_edge(t, mid, ElementClass::Centerline);
            g.add_edge(mid, j, ElementClass::Centerline);
        }
        let out = decompose(&g).unwrap();
        assert_eq!(out.len(), 3);
        for inst in &out {
            assert_eq!(inst.kind, InstanceKind::Polyline);
            assert_eq!(inst.points.len(), 3);
            assert!(inst.points.first() == Some(&p(0.0, 0.0)) || inst.points.last() == Some(&p(0.0, 0.0)));
        }
        // hand enumeration of the three arms (canonical orientation)
        assert_eq!(out[0].points, vec![p(-2.0, 0.0), p(-1.0, 0.0), p(0.0, 0.0)]);
        assert_eq!(out[1].points, vec![p(0.0, 0.0), p(1.0, 0.0), p(2.0, 0.0)]);
        assert_eq!(out[2].points, vec![p(0.0, 0.0), p(0.0, 1.5), p(0.0, 3.0)]);
    }

    #[test]
    fn square_cycle_is_closed_polygon() {
        let mut g = VectorMapGraph::new();
        let ids = g.add_path(
            &[p(1.0, 1.0), p(0.0, 1.0), p(0.0, 0.0), p(1.0, 0.0)],
            ElementClass::PedestrianCrossing,
        );
        g.add_edge(ids[3], ids[0], ElementClass::PedestrianCrossing);
        let out = decompose(&g).unwrap();
        assert_eq!(out.len(), 1);
        let inst = &out[0];
        assert_eq!(inst.kind, InstanceKind::Polygon);
        assert_eq!(inst.points.len(), 5);
        assert_eq!(inst.points[0], inst.points[4]);
        assert_eq!(inst.points[0], p(0.0, 0.0));
        inst.check().unwrap();
    }

    #[test]
    fn edge_between_two_junctions_becomes_a_segment() {
        // two stars joined by a bridge edge
        let mut g = VectorMapGraph::new();
        let a = g.add_vertex(p(0.0, 0.0));
        let b = g.add_vertex(p(5.0, 0.0));
        g.add_edge(a, b, ElementClass::Centerline);
        for (c, dx) in [(a, -1.0), (b, 1.0)] {
            for dy in [-1.0, 1.0] {
                let base = g.vertices[c];
                let t = g.add_vertex(p(base.x + dx, base.y + dy));
                g.add_edge(c, t, ElementClass::Centerline);
            }
        }
        let out = decompose(&g).unwrap();
        assert_eq!(out.len(), 5);
        assert_eq!(out[0].points, vec![p(0.0, 0.0), p(5.0, 0.0)]);
    }

    #[test]
    fn isolated_vertices_are_dropped() {
        let mut g = VectorMapGraph::new();
        g.add_vertex(p(9.0, 9.0));
        g.add_path(&[p(0.0, 0.0), p(1.0, 0.0)], ElementClass::Divider);
        assert_eq!(decompose(&g).unwrap().len(), 1);
    }
}
