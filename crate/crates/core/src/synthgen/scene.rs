use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{decompose, ElementClass, Instance, Point, VectorMapGraph};

/// Inclusive range of element counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRange {
    pub min: usize,
    pub max: usize,
}

impl CountRange {
    pub const fn new(min: usize, max: usize) -> Self {
        CountRange { min, max }
    }

    pub const fn exactly(n: usize) -> Self {
        CountRange { min: n, max: n }
    }

    fn draw(&self, rng: &mut impl Rng) -> usize {
        rng.gen_range(self.min..=self.max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub boundaries: CountRange,
    pub dividers: CountRange,
    pub crossings: CountRange,
    /// Trunk plus branches; two or more guarantees a degree-3 junction. At most 6.
    pub centerlines: CountRange,
    /// Half-width of the uniform vertex jitter, meters.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            x_range: (-15.0, 15.0),
            y_range: (-30.0, 30.0),
            boundaries: CountRange::exactly(2),
            dividers: CountRange::new(1, 2),
            crossings: CountRange::new(0, 2),
            centerlines: CountRange::new(2, 3),
            jitter: 0.3,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn empty(seed: u64) -> Self {
        SceneConfig {
            boundaries: CountRange::exactly(0),
            dividers: CountRange::exactly(0),
            crossings: CountRange::exactly(0),
            centerlines: CountRange::exactly(0),
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges_ok = self.x_range.0 < self.x_range.1 && self.y_range.0 < self.y_range.1;
        let counts_ok = [self.boundaries, self.dividers, self.crossings, self.centerlines]
            .iter()
            .all(|c| c.min <= c.max)
            && self.centerlines.max <= 6;
        // the recipe places elements with fixed margins inside a 30 m x 60 m window
        let big_enough = self.x_range.1 - self.x_range.0 >= 24.0 && self.y_range.1 - self.y_range.0 >= 40.0;
        if !(ranges_ok && counts_ok && big_enough && self.jitter >= 0.0 && self.jitter <= 1.0) {
            return Err(Error::InvalidArgument(format!("invalid scene config: {self:?}")));
        }
        Ok(())
    }

    /// Upper bound on decomposed instances a scene can contain.
    pub fn max_instances(&self) -> usize {
        let c = self.centerlines.max;
        let centerline_instances = if c >= 2 { 1 + 2 * (c - 1) } else { c };
        self.boundaries.max + self.dividers.max + self.crossings.max + centerline_instances
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedScene {
    pub graph: VectorMapGraph,
    pub instances: Vec<Instance>,
}

/// Child generator for scene `index` of a dataset seeded with `seed`.
pub fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Generates one scene from `cfg.seed`.
pub fn generate_scene(cfg: &SceneConfig) -> Result<GeneratedScene> {
    generate_scene_with(cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))
}

/// Generates scene `index` of a dataset; each scene has its own child stream.
pub fn generate_indexed_scene(cfg: &SceneConfig, index: u64) -> Result<GeneratedScene> {
    generate_scene_with(cfg, &mut scene_rng(cfg.seed, index))
}

/// Scene recipe: two jittered boundaries flanking the range, interior
/// dividers, small quadrilateral crossings, and a centerline trunk with
/// branches leaving from distinct trunk vertices.
pub fn generate_scene_with(cfg: &SceneConfig, rng: &mut impl Rng) -> Result<GeneratedScene> {
    cfg.validate()?;
    let (x0, x1) = cfg.x_range;
    let (y0, y1) = cfg.y_range;
    let xc = 0.5 * (x0 + x1);
    let yc = 0.5 * (y0 + y1);
    let half_w = 0.5 * (x1 - x0);
    let half_h = 0.5 * (y1 - y0);
    let clamp = |p: Point| {
        Point::new(
            p.x.clamp(x0 + 0.05, x1 - 0.05),
            p.y.clamp(y0 + 0.05, y1 - 0.05),
        )
    };
    let jit = cfg.jitter;
    let jitter = |rng: &mut dyn rand::RngCore| -> f64 {
        if jit > 0.0 {
            rng.gen_range(-jit..=jit)
        } else {
            0.0
        }
    };

    let mut g = VectorMapGraph::new();

    let n_boundaries = cfg.boundaries.draw(rng);
    for i in 0..n_boundaries {
        let side = if i % 2 == 0 { -1.0 } else { 1.0 };
        let inset = (i / 2) as f64 * 1.5;
        let base = xc + side * (half_w - 2.5 - inset + rng.gen_range(-1.0..=1.0));
        let m = 7;
        let pts: Vec<Point> = (0..m)
            .map(|k| {
                let y = yc - half_h + 1.0 + (2.0 * half_h - 2.0) * k as f64 / (m - 1) as f64;
                clamp(Point::new(base + jitter(rng), y + 0.3 * jitter(rng)))
            })
            .collect();
        g.add_path(&pts, ElementClass::Boundary);
    }

    let n_dividers = cfg.dividers.draw(rng);
    for i in 0..n_dividers {
        let slot = (i as f64 + 0.5) / n_dividers as f64;
        let base = xc - 8.0 + 16.0 * slot + rng.gen_range(-1.5..=1.5);
        let start = yc - half_h + 1.0 + rng.gen_range(0.0..=18.0);
        let end = yc + half_h - 1.0 - rng.gen_range(0.0..=18.0);
        let m = 5;
        let pts: Vec<Point> = (0..m)
            .map(|k| {
                let y = start + (end - start) * k as f64 / (m - 1) as f64;
                clamp(Point::new(base + jitter(rng), y))
            })
            .collect();
        g.add_path(&pts, ElementClass::Divider);
    }

    let n_crossings = cfg.crossings.draw(rng);
    for i in 0..n_crossings {
        let band = (i as f64 + 0.5) / n_crossings as f64;
        let cy = yc - half_h + 5.0 + (2.0 * half_h - 10.0) * band + rng.gen_range(-3.0..=3.0);
        let cx = xc + rng.gen_range(-4.0..=4.0);
        let w = rng.gen_range(6.0..=10.0) * 0.5;
        let h = rng.gen_range(2.0..=4.0) * 0.5;
        let ring: Vec<Point> = [(-w, -h), (w, -h), (w, h), (-w, h)]
            .iter()
            .map(|&(dx, dy)| clamp(Point::new(cx + dx + 0.5 * jitter(rng), cy + dy + 0.5 * jitter(rng))))
            .collect();
        let ids: Vec<usize> = ring.iter().map(|&p| g.add_vertex(p)).collect();
        for k in 0..4 {
            g.add_edge(ids[k], ids[(k + 1) % 4], ElementClass::PedestrianCrossing);
        }
    }

    let n_centerlines = cfg.centerlines.draw(rng);
    if n_centerlines > 0 {
        let trunk_x = xc + rng.gen_range(-5.0..=5.0);
        let m = 9;
        let trunk: Vec<Point> = (0..m)
            .map(|k| {
                let y = yc - half_h + 1.0 + (2.0 * half_h - 2.0) * k as f64 / (m - 1) as f64;
                clamp(Point::new(trunk_x + jitter(rng), y))
            })
            .collect();
        let trunk_ids = g.add_path(&trunk, ElementClass::Centerline);
        // branches leave from distinct interior trunk vertices 2..=6
        let mut attach: Vec<usize> = (2..=6).collect();
        for b in 0..n_centerlines - 1 {
            let pick = rng.gen_range(0..attach.len());
            let at = attach.remove(pick);
            let dir = if (b + at).is_multiple_of(2) { 1.0 } else { -1.0 };
            let reach = rng.gen_range(6.0..=10.0);
            let rise = rng.gen_range(6.0..=12.0);
            let root = trunk[at];
            let mut prev = trunk_ids[at];
            for s in 1..=3 {
                let t = s as f64 / 3.0;
                let p = clamp(Point::new(
                    root.x + dir * reach * t + jitter(rng) * 0.5,
                    root.y + rise * t * t + 1.0 * t,
                ));
                let id = g.add_vertex(p);
                g.add_edge(prev, id, ElementClass::Centerline);
                prev = id;
            }
        }
    }

    let instances = decompose(&g)?;
    Ok(GeneratedScene {
        graph: g,
        instances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{validate_graph, InstanceKind};

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = SceneConfig {
            seed: 77,
            ..Default::default()
        };
        let a = generate_scene(&cfg).unwrap();
        let b = generate_scene(&cfg).unwrap();
        assert_eq!(a, b);
        let bits = |s: &GeneratedScene| -> Vec<u64> {
            s.graph.vertices.iter().flat_map(|p| [p.x.to_bits(), p.y.to_bits()]).collect()
        };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn zero_counts_give_empty_scene() {
        let s = generate_scene(&SceneConfig::empty(3)).unwrap();
        assert!(s.graph.edges.is_empty());
        assert!(s.instances.is_empty());
    }

    #[test]
    fn two_centerlines_force_a_split() {
        for seed in 0..50 {
            let cfg = SceneConfig {
                centerlines: CountRange::exactly(2),
                seed,
                ..SceneConfig::empty(seed)
            };
            let s = generate_scene(&cfg).unwrap();
            assert!(s.graph.degrees().contains(&3));
            assert!(s.instances.len() > s.graph.edge_component_count(), "seed {seed}");
        }
    }

    #[test]
    fn generated_geometry_is_valid_and_in_range() {
        let cfg = SceneConfig {
            boundaries: CountRange::new(0, 3),
            crossings: CountRange::new(0, 3),
            ..Default::default()
        };
        for idx in 0..200 {
            let s = generate_indexed_scene(&cfg, idx).unwrap();
            assert!(validate_graph(&s.graph).is_empty());
            assert!(s.instances.len() <= cfg.max_instances());
            for inst in &s.instances {
                inst.check().unwrap();
                if inst.kind == InstanceKind::Polygon {
                    assert_eq!(inst.points.first(), inst.points.last());
                }
                for p in &inst.points {
                    assert!(p.x > -15.0 && p.x < 15.0 && p.y > -30.0 && p.y < 30.0);
                }
            }
        }
    }

    #[test]
    fn all_four_classes_appear() {
        let mut seen = [false; 4];
        for idx in 0..20 {
            let s = generate_indexed_scene(&SceneConfig::default(), idx).unwrap();
            for inst in &s.instances {
                seen[inst.class.index()] = true;
            }
        }
        assert_eq!(seen, [true; 4]);
    }

    #[test]
    fn indexed_scenes_differ() {
        let cfg = SceneConfig::default();
        let a = generate_indexed_scene(&cfg, 0).unwrap();
        let b = generate_indexed_scene(&cfg, 1).unwrap();
        assert_ne!(a, b);
    }
}
