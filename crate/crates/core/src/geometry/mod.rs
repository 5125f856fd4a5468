//! Vector-map graph model, decomposition into intersection-free instances and
//! arc-length resampling.
//!
//! A scene's map is an undirected graph whose edges carry an element class.
//! [`decompose`] cuts the graph at every vertex of degree greater than two, so
//! that each remaining connected component is a simple path (polyline) or a
//! simple cycle (polygon). [`resample`] then turns each instance into a fixed
//! number of points evenly spaced along its arc length.

mod decompose;
mod resample;

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use decompose::{decompose, validate_graph, GraphDiagnostic};
pub use resample::{arc_length, densify, resample};

/// A 2-D point in the BEV frame, meters. Serialized as `[x, y]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn lerp(self, other: Point, t: f64) -> Point {
        Point::new(
            self.x + (other.x - self.x) * t,
            self.y + (other.y - self.y) * t,
        )
    }

    /// Total lexicographic order on `(x, y)`.
    pub fn lex_cmp(&self, other: &Point) -> Ordering {
        self.x
            .total_cmp(&other.x)
            .then_with(|| self.y.total_cmp(&other.y))
    }
}

impl From<[f64; 2]> for Point {
    fn from([x, y]: [f64; 2]) -> Self {
        Point { x, y }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

/// Road element class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementClass {
    PedestrianCrossing,
    Divider,
    Boundary,
    Centerline,
}

impl ElementClass {
    pub const ALL: [ElementClass; 4] = [
        ElementClass::PedestrianCrossing,
        ElementClass::Divider,
        ElementClass::Boundary,
        ElementClass::Centerline,
    ];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ElementClass::PedestrianCrossing => "pedestrian_crossing",
            ElementClass::Divider => "divider",
            ElementClass::Boundary => "boundary",
            ElementClass::Centerline => "centerline",
        }
    }

    /// Shape a predicted element of this class is evaluated as.
    pub fn natural_kind(self) -> InstanceKind {
        match self {
            ElementClass::PedestrianCrossing => InstanceKind::Polygon,
            _ => InstanceKind::Polyline,
        }
    }
}

impl fmt::Display for ElementClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceKind {
    Polyline,
    Polygon,
}

/// Undirected vertex/edge graph of a scene's road elements.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VectorMapGraph {
    pub vertices: Vec<Point>,
    pub edges: Vec<(usize, usize)>,
    pub edge_class: Vec<ElementClass>,
}

impl VectorMapGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_vertex(&mut self, p: Point) -> usize {
        self.vertices.push(p);
        self.vertices.len() - 1
    }

    pub fn add_edge(&mut self, a: usize, b: usize, class: ElementClass) {
        self.edges.push((a, b));
        self.edge_class.push(class);
    }

    /// Adds a chain of vertices joined by consecutive edges; returns the vertex ids.
    pub fn add_path(&mut self, points: &[Point], class: ElementClass) -> Vec<usize> {
        let ids: Vec<usize> = points.iter().map(|&p| self.add_vertex(p)).collect();
        for w in ids.windows(2) {
            self.add_edge(w[0], w[1], class);
        }
        ids
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.vertices.len()];
        for &(a, b) in &self.edges {
            if a < deg.len() {
                deg[a] += 1;
            }
            if b < deg.len() {
                deg[b] += 1;
            }
        }
        deg
    }

    /// Number of connected components that contain at least one edge.
    pub fn edge_component_count(&self) -> usize {
        let mut parent: Vec<usize> = (0..self.vertices.len()).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for &(a, b) in &self.edges {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent[ra] = rb;
            }
        }
        let mut roots: Vec<usize> = self
            .edges
            .iter()
            .map(|&(a, _)| find(&mut parent, a))
            .collect();
        roots.sort_unstable();
        roots.dedup();
        roots.len()
    }
}

/// One intersection-free road element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub class: ElementClass,
    pub kind: InstanceKind,
    pub points: Vec<Point>,
}

impl Instance {
    pub fn polyline(class: ElementClass, points: Vec<Point>) -> Self {
        Instance {
            class,
            kind: InstanceKind::Polyline,
            points,
        }
    }

    /// Builds a polygon from an open ring; the closing point is appended.
    pub fn polygon_from_ring(class: ElementClass, mut ring: Vec<Point>) -> Self {
        if let Some(&first) = ring.first() {
            ring.push(first);
        }
        Instance {
            class,
            kind: InstanceKind::Polygon,
            points: ring,
        }
    }

    /// Checks the instance invariants; returns a description of the first violation.
    pub fn check(&self) -> Result<(), String> {
        if self.points.len() < 2 {
            return Err(format!("instance has {} points", self.points.len()));
        }
        for (i, w) in self.points.windows(2).enumerate() {
            if !(w[0].dist(w[1]) > 0.0) {
                return Err(format!("points {i} and {} coincide", i + 1));
            }
        }
        if self.kind == InstanceKind::Polygon {
            if self.points.len() < 4 {
                return Err("polygon needs at least 3 distinct vertices".into());
            }
            if self.points.first() != self.points.last() {
                return Err("polygon is not closed".into());
            }
        }
        Ok(())
    }

    /// Re-orients the instance into its canonical traversal.
    ///
    /// Polylines start from the lexicographically smaller end (the whole
    /// sequence is compared, which settles equal endpoints). Polygons start
    /// at the lexicographically smallest vertex and run with non-negative
    /// signed area.
    pub fn canonicalize(&mut self) {
        match self.kind {
            InstanceKind::Polyline => {
                let reversed: Vec<Point> = self.points.iter().rev().copied().collect();
                if lex_cmp_seq(&reversed, &self.points) == Ordering::Less {
                    self.points = reversed;
                }
            }
            InstanceKind::Polygon => {
                let mut ring = self.points.clone();
                ring.pop();
                let ring = canonical_ring(&ring);
                self.points = ring;
                let first = self.points[0];
                self.points.push(first);
            }
        }
    }

    /// Distinct vertices of the instance (polygon closure dropped).
    pub fn distinct_points(&self) -> &[Point] {
        match self.kind {
            InstanceKind::Polyline => &self.points,
            InstanceKind::Polygon => &self.points[..self.points.len() - 1],
        }
    }
}

/// Fixed-size, evenly spaced version of an [`Instance`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledInstance {
    pub class: ElementClass,
    pub kind: InstanceKind,
    pub points: Vec<Point>,
}

pub(crate) fn lex_cmp_seq(a: &[Point], b: &[Point]) -> Ordering {
    for (p, q) in a.iter().zip(b) {
        match p.lex_cmp(q) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    a.len().cmp(&b.len())
}

/// Signed shoelace area of an open ring; positive for counter-clockwise.
pub fn signed_area(ring: &[Point]) -> f64 {
    let n = ring.len();
    let mut acc = 0.0;
    for i in 0..n {
        let p = ring[i];
        let q = ring[(i + 1) % n];
        acc += p.x * q.y - q.x * p.y;
    }
    0.5 * acc
}

fn canonical_ring(ring: &[Point]) -> Vec<Point> {
    let n = ring.len();
    let area = signed_area(ring);
    let min = ring
        .iter()
        .min_by(|a, b| a.lex_cmp(b))
        .copied()
        .expect("non-empty ring");
    let mut best: Option<Vec<Point>> = None;
    for start in (0..n).filter(|&i| ring[i].lex_cmp(&min) == Ordering::Equal) {
        let forward: Vec<Point> = (0..n).map(|k| ring[(start + k) % n]).collect();
        let backward: Vec<Point> = (0..n).map(|k| ring[(start + n - k) % n]).collect();
        let candidates: Vec<Vec<Point>> = if area > 0.0 {
            vec![forward]
        } else if area < 0.0 {
            vec![backward]
        } else {
            vec![forward, backward]
        };
        for c in candidates {
            if best
                .as_ref()
                .is_none_or(|b| lex_cmp_seq(&c, b) == Ordering::Less)
            {
                best = Some(c);
            }
        }
    }
    best.expect("at least one start vertex")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(x: f64, y: f64) -> Point {
        Point::new(x, y)
    }

    #[test]
    fn point_serializes_as_pair() {
        let s = serde_json::to_string(&p(1.5, -2.0)).unwrap();
        assert_eq!(s, "[1.5,-2.0]");
        let back: Point = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p(1.5, -2.0));
    }

    #[test]
    fn polyline_canonical_starts_at_smaller_end() {
        let mut inst = Instance::polyline(ElementClass::Divider, vec![p(3.0, 0.0), p(0.0, 0.0)]);
        inst.canonicalize();
        assert_eq!(inst.points, vec![p(0.0, 0.0), p(3.0, 0.0)]);
    }

    #[test]
    fn polygon_canonical_is_ccw_from_min_vertex() {
        // clockwise square starting at (1,1)
        let mut inst = Instance::polygon_from_ring(
            ElementClass::PedestrianCrossing,
            vec![p(1.0, 1.0), p(1.0, 0.0), p(0.0, 0.0), p(0.0, 1.0)],
        );
        inst.canonicalize();
        assert_eq!(
            inst.points,
            vec![p(0.0, 0.0), p(1.0, 0.0), p(1.0, 1.0), p(0.0, 1.0), p(0.0, 0.0)]
        );
        assert!(signed_area(inst.distinct_points()) > 0.0);
    }

    #[test]
    fn check_rejects_open_polygon_and_repeated_points() {
        let open = Instance {
            class: ElementClass::PedestrianCrossing,
            kind: InstanceKind::Polygon,
            points: vec![p(0.0, 0.0), p(1.0, 0.0), p(1.0, 1.0), p(0.0, 1.0)],
        };
        assert!(open.check().is_err());
        let rep = Instance::polyline(ElementClass::Divider, vec![p(0.0, 0.0), p(0.0, 0.0)]);
        assert!(rep.check().is_err());
    }

    #[test]
    fn class_names_round_trip() {
        for c in ElementClass::ALL {
            let s = serde_json::to_string(&c).unwrap();
            assert_eq!(s, format!("\"{}\"", c.name()));
            assert_eq!(ElementClass::from_index(c.index()), Some(c));
        }
    }
}
