//! Bird's-eye-view rasterization of a sample's context.
//!
//! Channel layout (33 total):
//!
//! | channels | content |
//! |---|---|
//! | 0 | roadblocks on the route |
//! | 1 | lanes on the route |
//! | 2..22 | one per [`MapElementKind`], in declaration order; the rest stay empty |
//! | 22, 23, 24 | intersections under a green, red or yellow light |
//! | 25..33 | agents by [`AgentKind`]; the last five are unused |
//!
//! The ego sits at the grid center with +x toward row 0 and +y toward
//! column 0. Agent channels hold the union of the 21 history frames, frame
//! `k` (0 = oldest) drawn with intensity `k / 20`, brighter frames winning.

use std::io::Write;
use std::path::Path;

use crate::geometry::{distance_to_segment, oriented_box, point_in_polygon};
use crate::scenario::{MapElementKind, TrainingSample, HISTORY_FRAMES};
use crate::{Error, Result};

pub const NUM_CHANNELS: usize = 33;
pub const ROUTE_BLOCK_CHANNEL: usize = 0;
pub const ROUTE_LANE_CHANNEL: usize = 1;
pub const MAP_CHANNEL_START: usize = 2;
pub const LIGHT_CHANNEL_START: usize = 22;
pub const AGENT_CHANNEL_START: usize = 25;
pub const DEFAULT_RESOLUTION: usize = 64;
pub const MIN_RESOLUTION: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scope {
    HighRes60m,
    LowRes300m,
}

impl Scope {
    /// Side length of the square view field in meters.
    pub fn field(self) -> f64 {
        match self {
            Scope::HighRes60m => 60.0,
            Scope::LowRes300m => 300.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scope::HighRes60m => "high",
            Scope::LowRes300m => "low",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RasterStack {
    pub scope: Scope,
    pub resolution: usize,
    /// Channel-major `[33, resolution, resolution]` values in `[0, 1]`.
    pub data: Vec<f64>,
}

impl RasterStack {
    pub fn zeros(scope: Scope, resolution: usize) -> Self {
        Self {
            scope,
            resolution,
            data: vec![0.0; NUM_CHANNELS * resolution * resolution],
        }
    }

    pub fn num_channels(&self) -> usize {
        self.data.len() / (self.resolution * self.resolution)
    }

    pub fn pixel_size(&self) -> f64 {
        self.scope.field() / self.resolution as f64
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.resolution * self.resolution;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[(c * self.resolution + i) * self.resolution + j]
    }

    pub fn occupied(&self, c: usize) -> usize {
        self.channel(c).iter().filter(|v| **v > 0.0).count()
    }

    /// Local-frame coordinates of the center of pixel `(i, j)`.
    pub fn pixel_center(&self, i: usize, j: usize) -> [f64; 2] {
        let px = self.pixel_size();
        let half = self.resolution as f64 / 2.0;
        [(half - i as f64 - 0.5) * px, (half - j as f64 - 0.5) * px]
    }

    /// Pixel containing local point `p`, if inside the field.
    pub fn pixel_of(&self, p: [f64; 2]) -> Option<(usize, usize)> {
        let px = self.pixel_size();
        let half = self.resolution as f64 / 2.0;
        let i = (half - p[0] / px).floor();
        let j = (half - p[1] / px).floor();
        let n = self.resolution as f64;
        (i >= 0.0 && j >= 0.0 && i < n && j < n).then_some((i as usize, j as usize))
    }

    /// Inclusive pixel index ranges covering the local-frame box, clipped.
    fn pixel_window(&self, lo: [f64; 2], hi: [f64; 2]) -> Option<(usize, usize, usize, usize)> {
        let px = self.pixel_size();
        let half = self.resolution as f64 / 2.0;
        let n = self.resolution as isize;
        let clip = |v: f64| (v.floor() as isize).clamp(-1, n);
        let (i0, i1) = (clip(half - hi[0] / px - 0.5), clip(half - lo[0] / px - 0.5) + 1);
        let (j0, j1) = (clip(half - hi[1] / px - 0.5), clip(half - lo[1] / px - 0.5) + 1);
        let (i0, j0) = (i0.max(0), j0.max(0));
        let (i1, j1) = (i1.min(n - 1), j1.min(n - 1));
        (i0 <= i1 && j0 <= j1).then_some((i0 as usize, i1 as usize, j0 as usize, j1 as usize))
    }

    fn put(&mut self, c: usize, i: usize, j: usize, v: f64) {
        let idx = (c * self.resolution + i) * self.resolution + j;
        if v > self.data[idx] {
            self.data[idx] = v;
        }
    }

    /// Marks pixels whose centers lie inside `poly`. A polygon smaller than
    /// a pixel still marks the pixel holding its vertex centroid.
    fn fill_polygon(&mut self, c: usize, poly: &[[f64; 2]], v: f64) {
        let Some((lo, hi)) = bounds(poly) else { return };
        let Some((i0, i1, j0, j1)) = self.pixel_window(lo, hi) else { return };
        let mut hits = 0;
        for i in i0..=i1 {
            for j in j0..=j1 {
                if point_in_polygon(self.pixel_center(i, j), poly) {
                    self.put(c, i, j, v);
                    hits += 1;
                }
            }
        }
        if hits == 0 {
            let n = poly.len() as f64;
            let centroid = [
                poly.iter().map(|p| p[0]).sum::<f64>() / n,
                poly.iter().map(|p| p[1]).sum::<f64>() / n,
            ];
            if let Some((i, j)) = self.pixel_of(centroid) {
                self.put(c, i, j, v);
            }
        }
    }

    /// Marks pixels whose centers lie within half a pixel diagonal of the line.
    fn draw_polyline(&mut self, c: usize, line: &[[f64; 2]], v: f64) {
        let reach = self.pixel_size() * std::f64::consts::FRAC_1_SQRT_2;
        for seg in line.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            let lo = [a[0].min(b[0]) - reach, a[1].min(b[1]) - reach];
            let hi = [a[0].max(b[0]) + reach, a[1].max(b[1]) + reach];
            let Some((i0, i1, j0, j1)) = self.pixel_window(lo, hi) else { continue };
            for i in i0..=i1 {
                for j in j0..=j1 {
                    if distance_to_segment(self.pixel_center(i, j), a, b) <= reach {
                        self.put(c, i, j, v);
                    }
                }
            }
        }
    }

    /// Writes one binary PGM per channel as `<prefix>_ch<NN>.pgm` in `dir`.
    pub fn write_pgm(&self, dir: &Path, prefix: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for c in 0..self.num_channels() {
            let path = dir.join(format!("{prefix}_ch{c:02}.pgm"));
            let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
            write!(f, "P5\n{} {}\n255\n", self.resolution, self.resolution)?;
            let bytes: Vec<u8> = self.channel(c).iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
            f.write_all(&bytes)?;
            f.flush()?;
        }
        Ok(())
    }
}

fn bounds(pts: &[[f64; 2]]) -> Option<([f64; 2], [f64; 2])> {
    let first = *pts.first()?;
    Some(pts.iter().fold((first, first), |(lo, hi), p| {
        ([lo[0].min(p[0]), lo[1].min(p[1])], [hi[0].max(p[0]), hi[1].max(p[1])])
    }))
}

pub fn rasterize(sample: &TrainingSample, scope: Scope, resolution: usize) -> Result<RasterStack> {
    if resolution < MIN_RESOLUTION {
        return Err(Error::Config(format!(
            "raster resolution {resolution} is below the minimum of {MIN_RESOLUTION}"
        )));
    }
    let mut r = RasterStack::zeros(scope, resolution);
    let ctx = &sample.context;
    let on_route = |id: u32| ctx.route.contains(&id);
    for e in &ctx.map_elements {
        let channel = MAP_CHANNEL_START + e.kind.index();
        if e.kind.is_polygon() {
            r.fill_polygon(channel, &e.points, 1.0);
        } else {
            r.draw_polyline(channel, &e.points, 1.0);
        }
        match e.kind {
            MapElementKind::Roadblock | MapElementKind::RoadblockConnector if on_route(e.id) => {
                r.fill_polygon(ROUTE_BLOCK_CHANNEL, &e.points, 1.0)
            }
            MapElementKind::Lane | MapElementKind::LaneConnector if e.roadblock.is_some_and(on_route) => {
                r.draw_polyline(ROUTE_LANE_CHANNEL, &e.points, 1.0)
            }
            _ => {}
        }
    }
    for light in &ctx.traffic_lights {
        if let Some(e) = ctx.map_elements.iter().find(|e| e.id == light.intersection) {
            r.fill_polygon(LIGHT_CHANNEL_START + light.state.index(), &e.points, 1.0);
        }
    }
    let last = (HISTORY_FRAMES - 1) as f64;
    for agent in &ctx.agents {
        let channel = AGENT_CHANNEL_START + agent.kind.index();
        for (k, s) in agent.states.iter().enumerate() {
            let intensity = k as f64 / last;
            if intensity > 0.0 {
                r.fill_polygon(channel, &oriented_box(s.x, s.y, s.yaw, s.length, s.width), intensity);
            }
        }
    }
    Ok(r)
}

/// Renders both scopes of one sample as `(high, low)`.
pub fn dual_scope(sample: &TrainingSample, resolution: usize) -> Result<(RasterStack, RasterStack)> {
    Ok((
        rasterize(sample, Scope::HighRes60m, resolution)?,
        rasterize(sample, Scope::LowRes300m, resolution)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_round_trip() {
        let r = RasterStack::zeros(Scope::HighRes60m, 64);
        for (i, j) in [(0, 0), (10, 50), (63, 63), (32, 31)] {
            assert_eq!(r.pixel_of(r.pixel_center(i, j)), Some((i, j)));
        }
        assert_eq!(r.pixel_of([31.0, 0.0]), None);
    }

    #[test]
    fn polygon_fill_counts_centers() {
        let mut r = RasterStack::zeros(Scope::HighRes60m, 60);
        r.fill_polygon(0, &[[-2.0, -2.0], [2.0, -2.0], [2.0, 2.0], [-2.0, 2.0]], 1.0);
        assert_eq!(r.occupied(0), 16);
    }

    #[test]
    fn low_resolution_rejected() {
        let s = crate::scenario::build_sample(
            &crate::scenario::generate_scenario(0, crate::scenario::Template::Straight),
            20,
        )
        .unwrap();
        assert!(matches!(rasterize(&s, Scope::HighRes60m, 7), Err(Error::Config(_))));
    }
}
