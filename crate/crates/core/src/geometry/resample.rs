use super::{Instance, InstanceKind, Point, SampledInstance};
use crate::error::{Error, Result};

/// Sum of Euclidean segment lengths.
pub fn arc_length(points: &[Point]) -> f64 {
    points.windows(2).map(|w| w[0].dist(w[1])).sum()
}

/// Evenly resamples an instance to exactly `n_p` points by arc length.
///
/// Polylines keep both endpoints and sample at `k·L/(n_p−1)`. Polygons
/// sample the closed loop at `k·L/n_p` starting from `points[0]`; the
/// closing point is not repeated.
pub fn resample(inst: &Instance, n_p: usize) -> Result<SampledInstance> {
    if n_p < 2 {
        return Err(Error::InvalidArgument(format!("n_p must be >= 2, got {n_p}")));
    }
    if inst.points.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "instance has {} points",
            inst.points.len()
        )));
    }
    let mut loop_points;
    let path: &[Point] = match inst.kind {
        InstanceKind::Polyline => &inst.points,
        InstanceKind::Polygon => {
            if inst.points.first() == inst.points.last() {
                &inst.points
            } else {
                loop_points = inst.points.clone();
                loop_points.push(inst.points[0]);
                &loop_points
            }
        }
    };
    let total = arc_length(path);
    if !(total > 0.0) {
        return Err(Error::ZeroLengthInstance);
    }
    let params: Vec<f64> = match inst.kind {
        InstanceKind::Polyline => (0..n_p)
            .map(|k| total * k as f64 / (n_p - 1) as f64)
            .collect(),
        InstanceKind::Polygon => (0..n_p).map(|k| total * k as f64 / n_p as f64).collect(),
    };
    let mut points = sample_at(path, &params);
    if inst.kind == InstanceKind::Polyline {
        points[0] = path[0];
        points[n_p - 1] = path[path.len() - 1];
    }
    Ok(SampledInstance {
        class: inst.class,
        kind: inst.kind,
        points,
    })
}

/// Points at the given ascending arc-length parameters along `path`.
pub(crate) fn sample_at(path: &[Point], params: &[f64]) -> Vec<Point> {
    let mut out = Vec::with_capacity(params.len());
    let mut seg = 0;
    let mut seg_start = 0.0;
    let mut seg_len = path[0].dist(path[1]);
    for &t in params {
        while t > seg_start + seg_len && seg + 2 < path.len() {
            seg_start += seg_len;
            seg += 1;
            seg_len = path[seg].dist(path[seg + 1]);
        }
        let local = if seg_len > 0.0 {
            ((t - seg_start) / seg_len).clamp(0.0, 1.0)
        } else {
            0.0
        };
        out.push(path[seg].lerp(path[seg + 1], local));
    }
    out
}

/// Densifies an instance so consecutive samples are at most `step` apart.
/// Polylines keep both endpoints; polygons return an open ring.
pub fn densify(inst: &Instance, step: f64) -> Result<Vec<Point>> {
    let total = match inst.kind {
        InstanceKind::Polyline => arc_length(&inst.points),
        InstanceKind::Polygon => {
            let mut closed = inst.points.clone();
            if closed.first() != closed.last() {
                closed.push(closed[0]);
            }
            arc_length(&closed)
        }
    };
    if !(total > 0.0) {
        return Err(Error::ZeroLengthInstance);
    }
    let segments = (total / step).ceil().max(1.0) as usize;
    let n = match inst.kind {
        InstanceKind::Polyline => segments + 1,
        InstanceKind::Polygon => segments.max(3),
    };
    Ok(resample(inst, n)?.points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ElementClass;

    fn p(x: f64, y: f64) -> Point {
        Point::new(x, y)
    }

    #[test]
    fn arc_length_examples() {
        assert_eq!(arc_length(&[p(0.0, 0.0), p(3.0, 4.0)]), 5.0);
        assert_eq!(arc_length(&[p(0.0, 0.0), p(1.0, 0.0), p(1.0, 1.0)]), 2.0);
        assert_eq!(arc_length(&[p(2.0, 2.0), p(2.0, 2.0)]), 0.0);
    }

    #[test]
    fn segment_split_into_even_thirds() {
        let inst = Instance::polyline(ElementClass::Divider, vec![p(0.0, 0.0), p(3.0, 0.0)]);
        let s = resample(&inst, 4).unwrap();
        assert_eq!(s.points, vec![p(0.0, 0.0), p(1.0, 0.0), p(2.0, 0.0), p(3.0, 0.0)]);
    }

    #[test]
    fn two_samples_are_the_endpoints() {
        let inst = Instance::polyline(ElementClass::Divider, vec![p(0.0, 0.0), p(1.0, 0.0)]);
        assert_eq!(resample(&inst, 2).unwrap().points, inst.points);
    }

    #[test]
    fn unit_square_gives_its_corners() {
        let inst = Instance::polygon_from_ring(
            ElementClass::PedestrianCrossing,
            vec![p(0.0, 0.0), p(1.0, 0.0), p(1.0, 1.0), p(0.0, 1.0)],
        );
        let s = resample(&inst, 4).unwrap();
        assert_eq!(
            s.points,
            vec![p(0.0, 0.0), p(1.0, 0.0), p(1.0, 1.0), p(0.0, 1.0)]
        );
        assert_eq!(s.kind, InstanceKind::Polygon);
    }

    #[test]
    fn zero_length_instance_is_rejected() {
        let inst = Instance::polyline(ElementClass::Divider, vec![p(1.0, 1.0), p(1.0, 1.0)]);
        assert!(matches!(resample(&inst, 3), Err(Error::ZeroLengthInstance)));
    }

    #[test]
    fn n_p_below_two_is_rejected() {
        let inst = Instance::polyline(ElementClass::Divider, vec![p(0.0, 0.0), p(1.0, 0.0)]);
        assert!(resample(&inst, 1).is_err());
    }

    #[test]
    fn densify_respects_step() {
        let inst = Instance::polyline(
            ElementClass::Divider,
            vec![p(0.0, 0.0), p(1.0, 0.0), p(1.0, 1.0)],
        );
        let pts = densify(&inst, 0.15).unwrap();
        assert_eq!(pts.len(), 15);
        for w in pts.windows(2) {
            assert!(w[0].dist(w[1]) <= 0.15 + 1e-12);
        }
    }
}
