use std::f64::consts::PI;

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self { x, y, yaw }
    }

    /// Coordinates of a world point in this pose's frame (x forward, y left).
    pub fn to_local(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.x;
        let dy = p[1] - self.y;
        [c * dx + s * dy, -s * dx + c * dy]
    }

    /// Rotates a world-frame vector into this pose's frame.
    pub fn rotate_to_local(&self, v: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        [c * v[0] + s * v[1], -s * v[0] + c * v[1]]
    }

    /// World coordinates of a point given in this pose's frame.
    pub fn to_world(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]]
    }
}

/// One primitive of a reference path, parameterized by arc length.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Segment {
    Straight { length: f64 },
    /// Constant-curvature arc; positive `angle` turns left.
    Arc { radius: f64, angle: f64 },
}

impl Segment {
    pub fn length(&self) -> f64 {
        match *self {
            Segment::Straight { length } => length,
            Segment::Arc { radius, angle } => radius * angle.abs(),
        }
    }

    pub fn curvature(&self) -> f64 {
        match *self {
            Segment::Straight { .. } => 0.0,
            Segment::Arc { radius, angle } => angle.signum() / radius,
        }
    }
}

/// Piecewise line/arc path. Poses along it are the exact trajectory of a
/// kinematic bicycle holding a constant steering angle on each segment.
#[derive(Clone, Debug, PartialEq)]
pub struct Path {
    pub start: Pose,
    pub segments: Vec<Segment>,
}

impl Path {
    pub fn new(start: Pose, segments: Vec<Segment>) -> Self {
        Self { start, segments }
    }

    pub fn length(&self) -> f64 {
        self.segments.iter().map(Segment::length).sum()
    }

    /// Pose and curvature at arc length `s`; past the end the path continues
    /// straight.
    pub fn pose_at(&self, s: f64) -> (Pose, f64) {
        let mut pose = self.start;
        let mut remaining = s.max(0.0);
        for seg in &self.segments {
            let len = seg.length();
            let step = remaining.min(len);
            pose = advance(pose, seg, step);
            if remaining <= len {
                return (pose, seg.curvature());
            }
            remaining -= len;
        }
        (advance(pose, &Segment::Straight { length: remaining }, remaining), 0.0)
    }

    pub fn max_curvature(&self) -> f64 {
        self.segments.iter().map(|s| s.curvature().abs()).fold(0.0, f64::max)
    }
}

fn advance(p: Pose, seg: &Segment, ds: f64) -> Pose {
    match *seg {
        Segment::Straight { .. } => Pose::new(p.x + ds * p.yaw.cos(), p.y + ds * p.yaw.sin(), p.yaw),
        Segment::Arc { radius, angle } => {
            let k = angle.signum() / radius;
            let dyaw = k * ds;
            let yaw = p.yaw + dyaw;
            Pose::new(
                p.x + (yaw.sin() - p.yaw.sin()) / k,
                p.y - (yaw.cos() - p.yaw.cos()) / k,
                yaw,
            )
        }
    }
}

/// Point-in-polygon by crossing number; points exactly on an edge may fall
/// either side.
pub fn point_in_polygon(p: [f64; 2], poly: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let n = poly.len();
    if n < 3 {
        return false;
    }
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]) + a[0];
            if p[0] < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

pub fn distance_to_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a[0] + t * dx - p[0], a[1] + t * dy - p[1]);
    (cx * cx + cy * cy).sqrt()
}

/// Corners of a box centered at `(x, y)` with heading `yaw`, counter-clockwise.
pub fn oriented_box(x: f64, y: f64, yaw: f64, length: f64, width: f64) -> [[f64; 2]; 4] {
    let pose = Pose::new(x, y, yaw);
    let (hl, hw) = (length / 2.0, width / 2.0);
    [
        pose.to_world([hl, hw]),
        pose.to_world([-hl, hw]),
        pose.to_world([-hl, -hw]),
        pose.to_world([hl, -hw]),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert_eq!(wrap_angle(0.25), 0.25);
    }

    #[test]
    fn quarter_arc_ends_at_radius_offsets() {
        let path = Path::new(Pose::new(0.0, 0.0, 0.0), vec![Segment::Arc { radius: 10.0, angle: PI / 2.0 }]);
        let (end, k) = path.pose_at(path.length());
        assert!((end.x - 10.0).abs() < 1e-9 && (end.y - 10.0).abs() < 1e-9);
        assert!((end.yaw - PI / 2.0).abs() < 1e-12);
        assert!((k - 0.1).abs() < 1e-15);
    }

    #[test]
    fn local_world_round_trip() {
        let pose = Pose::new(3.0, -2.0, 0.7);
        let p = [10.0, 4.0];
        let back = pose.to_world(pose.to_local(p));
        assert!((back[0] - p[0]).abs() < 1e-12 && (back[1] - p[1]).abs() < 1e-12);
    }

    #[test]
    fn polygon_containment() {
        let sq = [[0.0, 0.0], [2.0, 0.0], [2.0, 2.0], [0.0, 2.0]];
        assert!(point_in_polygon([1.0, 1.0], &sq));
        assert!(!point_in_polygon([3.0, 1.0], &sq));
    }
}
