//! Template-driven scene generator.
//!
//! Scenes are laid out in a road frame (main road along +x, ego starting in
//! the right lane at y = 0), then moved by a random rigid transform so that
//! sample normalization is exercised. The ego follows a line/arc path at a
//! piecewise-constant-acceleration speed; other agents move at constant
//! velocity along their lane or stand still.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng as _;

use super::{
    build_sample, Agent, AgentKind, AgentState, LightState, MapElement, MapElementKind, Scenario, Template,
    TrafficLight, TrainingSample, DEFAULT_ANCHOR, DT, SCENARIO_FRAMES,
};
use crate::exec::Execution;
use crate::geometry::{Path, Pose, Segment};
use crate::rng::{self, streams, Rng};
use crate::Result;

pub const LANE_WIDTH: f64 = 3.5;
const ROAD_CHUNK: f64 = 40.0;
const ROAD_REACH: f64 = 180.0;
const ANCHOR_TIME: f64 = DEFAULT_ANCHOR as f64 * DT;

pub const ALL_TEMPLATES: [Template; 4] = [
    Template::Straight,
    Template::IntersectionTurn,
    Template::LaneChange,
    Template::StopAndGo,
];

/// Speed as a sequence of constant-acceleration phases, constant afterwards.
#[derive(Clone, Debug)]
struct SpeedProfile {
    v0: f64,
    phases: Vec<(f64, f64)>,
}

impl SpeedProfile {
    fn constant(v: f64) -> Self {
        Self { v0: v, phases: Vec::new() }
    }

    /// Distance travelled and speed at time `t`.
    fn at(&self, t: f64) -> (f64, f64) {
        let (mut s, mut v, mut rem) = (0.0, self.v0, t);
        for &(d, a) in &self.phases {
            let step = rem.min(d);
            s += v * step + 0.5 * a * step * step;
            let next = (v + a * step).max(0.0);
            if rem <= d {
                return (s, next);
            }
            v = next;
            rem -= d;
        }
        (s + v * rem, v)
    }
}

struct MapBuilder {
    elements: Vec<MapElement>,
}

impl MapBuilder {
    fn add(&mut self, kind: MapElementKind, points: Vec<[f64; 2]>, roadblock: Option<u32>) -> u32 {
        let id = self.elements.len() as u32;
        self.elements.push(MapElement {
            id,
            kind,
            points,
            roadblock,
        });
        id
    }

    /// Rectangle spanning `[s0, s1]` along and `[l0, l1]` across `pose`.
    fn rect(pose: &Pose, s0: f64, s1: f64, l0: f64, l1: f64) -> Vec<[f64; 2]> {
        vec![
            pose.to_world([s0, l0]),
            pose.to_world([s1, l0]),
            pose.to_world([s1, l1]),
            pose.to_world([s0, l1]),
        ]
    }

    /// Four-lane road starting at `start` (right lane center) and running
    /// `length` meters forward. Returns the forward roadblock ids in order.
    fn straight_road(&mut self, start: Pose, length: f64) -> Vec<u32> {
        let w = LANE_WIDTH;
        let mut forward = Vec::new();
        let chunks = (length / ROAD_CHUNK).ceil().max(1.0) as usize;
        for i in 0..chunks {
            let s0 = i as f64 * ROAD_CHUNK;
            let s1 = (s0 + ROAD_CHUNK).min(length);
            let fwd = self.add(MapElementKind::Roadblock, Self::rect(&start, s0, s1, -w / 2.0, 1.5 * w), None);
            let bwd = self.add(MapElementKind::Roadblock, Self::rect(&start, s0, s1, 1.5 * w, 3.5 * w), None);
            for lane in 0..2 {
                let l = lane as f64 * w;
                self.add(MapElementKind::Lane, vec![start.to_world([s0, l]), start.to_world([s1, l])], Some(fwd));
                let l = (lane + 2) as f64 * w;
                self.add(MapElementKind::Lane, vec![start.to_world([s1, l]), start.to_world([s0, l])], Some(bwd));
            }
            forward.push(fwd);
        }
        for (kind, l) in [
            (MapElementKind::RoadEdge, -0.5 * w),
            (MapElementKind::LaneBoundary, 0.5 * w),
            (MapElementKind::LaneBoundary, 1.5 * w),
            (MapElementKind::LaneBoundary, 2.5 * w),
            (MapElementKind::RoadEdge, 3.5 * w),
        ] {
            self.add(kind, vec![start.to_world([0.0, l]), start.to_world([length, l])], None);
        }
        self.add(MapElementKind::Walkway, Self::rect(&start, 0.0, length, -1.5 * w, -0.5 * w), None);
        self.add(MapElementKind::Walkway, Self::rect(&start, 0.0, length, 3.5 * w, 4.5 * w), None);
        forward
    }

    /// Intersection area as both an intersection and a connector polygon.
    /// Returns `(intersection_id, connector_id)`.
    fn junction(&mut self, x0: f64, x1: f64, y0: f64, y1: f64) -> (u32, u32) {
        let pts = vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]];
        let inter = self.add(MapElementKind::Intersection, pts.clone(), None);
        let conn = self.add(MapElementKind::RoadblockConnector, pts, None);
        (inter, conn)
    }
}

struct AgentBuilder {
    agents: Vec<Agent>,
}

impl AgentBuilder {
    /// Constant-velocity agent whose frame-0 pose is `(x, y, yaw)`.
    fn moving(&mut self, kind: AgentKind, x: f64, y: f64, yaw: f64, speed: f64) {
        let (s, c) = yaw.sin_cos();
        let states = (0..SCENARIO_FRAMES)
            .map(|k| {
                let d = speed * k as f64 * DT;
                AgentState::new(kind, x + c * d, y + s * d, yaw, speed)
            })
            .collect();
        self.agents.push(Agent {
            id: self.agents.len() as u32 + 1,
            kind,
            states,
        });
    }
}

fn ego_states(path: &Path, profile: &SpeedProfile) -> Vec<AgentState> {
    (0..SCENARIO_FRAMES)
        .map(|k| {
            let (s, v) = profile.at(k as f64 * DT);
            let (pose, _) = path.pose_at(s);
            AgentState::new(AgentKind::Vehicle, pose.x, pose.y, pose.yaw, v)
        })
        .collect()
}

/// Oncoming traffic plus walkway pedestrians shared by every template.
fn background_traffic(rng: &mut Rng, agents: &mut AgentBuilder) {
    for _ in 0..rng.random_range(1..=3) {
        let lane = if rng.random_bool(0.5) { 2.0 } else { 3.0 };
        agents.moving(
            AgentKind::Vehicle,
            rng.random_range(-40.0..140.0),
            lane * LANE_WIDTH,
            PI,
            rng.random_range(5.0..13.0),
        );
    }
    if rng.random_bool(0.4) {
        agents.moving(AgentKind::Cyclist, rng.random_range(0.0..100.0), 3.0 * LANE_WIDTH, PI, rng.random_range(3.0..6.0));
    }
    for _ in 0..rng.random_range(0..=2) {
        let (y, yaw) = if rng.random_bool(0.5) { (-LANE_WIDTH, 0.0) } else { (4.0 * LANE_WIDTH, PI) };
        agents.moving(AgentKind::Pedestrian, rng.random_range(-30.0..60.0), y, yaw, rng.random_range(1.0..1.6));
    }
}

struct Layout {
    path: Path,
    profile: SpeedProfile,
    tag: &'static str,
    route: Vec<u32>,
    lights: Vec<TrafficLight>,
}

/// Path start so the ego reaches road x = 0 at the anchor time.
fn start_pose(profile: &SpeedProfile, y: f64) -> (Pose, f64) {
    let (s_anchor, _) = profile.at(ANCHOR_TIME);
    (Pose::new(-s_anchor, y, 0.0), s_anchor)
}

fn straight(rng: &mut Rng, map: &mut MapBuilder, agents: &mut AgentBuilder) -> Layout {
    let v0 = rng.random_range(3.0..15.0);
    let mut a = rng.random_range(-0.5..0.5);
    if v0 + a * 10.0 < 1.0 {
        a = (1.0 - v0) / 10.0;
    }
    let profile = SpeedProfile {
        v0,
        phases: vec![(10.0, a)],
    };
    let (start, _) = start_pose(&profile, 0.0);
    let path = Path::new(start, vec![Segment::Straight { length: 400.0 }]);
    let w = LANE_WIDTH;
    let mut lights = Vec::new();
    let (route, tag) = if rng.random_bool(0.5) {
        let xi = rng.random_range(10.0..60.0);
        let width = 4.0 * w;
        let mut route = map.straight_road(Pose::new(-ROAD_REACH, 0.0, 0.0), ROAD_REACH + xi);
        let (inter, conn) = map.junction(xi, xi + width, -0.5 * w - width / 2.0, 3.5 * w + width / 2.0);
        map.add(MapElementKind::LaneConnector, vec![[xi, 0.0], [xi + width, 0.0]], Some(conn));
        map.straight_road(Pose::new(xi + width / 2.0 - 1.5 * w, -ROAD_REACH, FRAC_PI_2), ROAD_REACH - width / 2.0);
        map.straight_road(
            Pose::new(xi + width / 2.0 + 1.5 * w, ROAD_REACH + 3.0 * w, -FRAC_PI_2),
            ROAD_REACH - width / 2.0,
        );
        route.push(conn);
        route.extend(map.straight_road(Pose::new(xi + width, 0.0, 0.0), ROAD_REACH));
        lights.push(TrafficLight {
            intersection: inter,
            state: LightState::Green,
        });
        (route, "traversing_intersection")
    } else {
        (map.straight_road(Pose::new(-ROAD_REACH, 0.0, 0.0), 2.0 * ROAD_REACH), "following_lane")
    };
    if rng.random_bool(0.5) {
        agents.moving(AgentKind::Vehicle, rng.random_range(-40.0..80.0), w, 0.0, rng.random_range(4.0..14.0));
    }
    Layout {
        path,
        profile,
        tag,
        route,
        lights,
    }
}

fn intersection_turn(rng: &mut Rng, map: &mut MapBuilder, agents: &mut AgentBuilder) -> Layout {
    let left = rng.random_bool(0.5);
    let v = rng.random_range(4.0..8.0);
    let radius = if left { rng.random_range(12.0..18.0) } else { rng.random_range(8.0..12.0) };
    let arc = radius * FRAC_PI_2;
    let horizon = 8.0 * v;
    let lead = rng.random_range(1.0..(horizon - arc - 1.0).max(1.5));
    let profile = SpeedProfile::constant(v);
    let (start, s_anchor) = start_pose(&profile, 0.0);
    let angle = if left { FRAC_PI_2 } else { -FRAC_PI_2 };
    let path = Path::new(
        start,
        vec![
            Segment::Straight { length: s_anchor + lead },
            Segment::Arc { radius, angle },
            Segment::Straight { length: 300.0 },
        ],
    );
    let w = LANE_WIDTH;
    let mut route = map.straight_road(Pose::new(-ROAD_REACH, 0.0, 0.0), ROAD_REACH + lead);
    let side = angle.signum();
    let (y0, y1) = if left { (-0.5 * w, radius + w) } else { (-radius - w, 3.5 * w) };
    let (inter, conn) = map.junction(lead, lead + radius + 3.0 * w, y0.min(-0.5 * w), y1.max(3.5 * w));
    let arc_path = Path::new(Pose::new(lead, 0.0, 0.0), vec![Segment::Arc { radius, angle }]);
    let pts = (0..=12).map(|i| {
        let (p, _) = arc_path.pose_at(arc * i as f64 / 12.0);
        [p.x, p.y]
    });
    map.add(MapElementKind::LaneConnector, pts.collect(), Some(conn));
    route.push(conn);
    let exit = Pose::new(lead + radius, side * radius, angle);
    route.extend(map.straight_road(exit, ROAD_REACH));
    map.straight_road(Pose::new(lead + radius + 3.0 * w, 0.0, 0.0), ROAD_REACH);
    agents.moving(
        AgentKind::Vehicle,
        lead + radius - side * 2.0 * w,
        side * (radius + rng.random_range(8.0..30.0)),
        -angle,
        0.0,
    );
    let inter_light = TrafficLight {
        intersection: inter,
        state: LightState::Green,
    };
    Layout {
        path,
        profile,
        tag: if left { "turning_left" } else { "turning_right" },
        route,
        lights: vec![inter_light],
    }
}

fn lane_change(rng: &mut Rng, map: &mut MapBuilder, agents: &mut AgentBuilder) -> Layout {
    let to_left = rng.random_bool(0.5);
    let v = rng.random_range(6.0..14.0);
    let radius: f64 = rng.random_range(40.0..80.0);
    // Two opposite arcs of angle theta shift the path by 2R(1 - cos theta).
    let theta = (1.0 - LANE_WIDTH / (2.0 * radius)).acos();
    let span = 2.0 * radius * theta;
    let profile = SpeedProfile::constant(v);
    let y0 = if to_left { 0.0 } else { LANE_WIDTH };
    let (start, s_anchor) = start_pose(&profile, y0);
    let lead = rng.random_range(1.0..(8.0 * v - span - 2.0).max(2.0));
    let sign = if to_left { 1.0 } else { -1.0 };
    let path = Path::new(
        start,
        vec![
            Segment::Straight { length: s_anchor + lead },
            Segment::Arc { radius, angle: sign * theta },
            Segment::Arc { radius, angle: -sign * theta },
            Segment::Straight { length: 300.0 },
        ],
    );
    let route = map.straight_road(Pose::new(-ROAD_REACH, 0.0, 0.0), 2.0 * ROAD_REACH);
    let ego_x0 = start.x;
    let slow = (v - rng.random_range(3.0..5.0)).max(2.0);
    agents.moving(AgentKind::Vehicle, ego_x0 + rng.random_range(25.0..40.0), y0, 0.0, slow);
    Layout {
        path,
        profile,
        tag: if to_left { "changing_lane_left" } else { "changing_lane_right" },
        route,
        lights: Vec::new(),
    }
}

fn stop_and_go(rng: &mut Rng, map: &mut MapBuilder, agents: &mut AgentBuilder) -> Layout {
    let v0 = rng.random_range(4.0..9.0);
    let decel = rng.random_range(2.0..3.0);
    let brake_time = v0 / decel;
    let t_brake = rng.random_range((2.5_f64 - brake_time).max(0.5)..3.0);
    let wait = rng.random_range(1.0..2.5);
    let accel = rng.random_range(1.0..2.0);
    let profile = SpeedProfile {
        v0,
        phases: vec![(t_brake, 0.0), (brake_time, -decel), (wait, 0.0), (10.0, accel)],
    };
    let (start, _) = start_pose(&profile, 0.0);
    let path = Path::new(start, vec![Segment::Straight { length: 400.0 }]);
    let s_stop = v0 * t_brake + v0 * v0 / (2.0 * decel);
    let (_, ego_len) = AgentKind::Vehicle.footprint();
    let stop_line = start.x + s_stop + ego_len / 2.0 + rng.random_range(0.3..1.0);
    let w = LANE_WIDTH;
    let mut route = map.straight_road(Pose::new(-ROAD_REACH, 0.0, 0.0), ROAD_REACH + stop_line);
    map.add(MapElementKind::StopLine, vec![[stop_line, -0.5 * w], [stop_line, 1.5 * w]], route.last().copied());
    let mut lights = Vec::new();
    let tag = if rng.random_bool(0.5) {
        let x0 = stop_line + 0.5;
        map.add(MapElementKind::Crosswalk, MapBuilder::rect(&Pose::new(x0, 0.0, 0.0), 0.0, 4.0, -0.5 * w, 3.5 * w), None);
        let rest = map.straight_road(Pose::new(x0 + 4.0, 0.0, 0.0), ROAD_REACH);
        route.extend(rest);
        let t_cross = rng.random_range(0.5..2.0);
        let speed = rng.random_range(1.2..1.6);
        agents.moving(AgentKind::Pedestrian, x0 + 2.0, -0.5 * w - speed * t_cross, FRAC_PI_2, speed);
        "waiting_for_pedestrian_to_cross"
    } else {
        let width = 4.0 * w;
        let x0 = stop_line + 0.5;
        let (inter, conn) = map.junction(x0, x0 + width, -0.5 * w - width / 2.0, 3.5 * w + width / 2.0);
        map.add(MapElementKind::LaneConnector, vec![[x0, 0.0], [x0 + width, 0.0]], Some(conn));
        route.push(conn);
        route.extend(map.straight_road(Pose::new(x0 + width, 0.0, 0.0), ROAD_REACH));
        map.straight_road(Pose::new(x0 + width / 2.0 - 1.5 * w, -ROAD_REACH, FRAC_PI_2), ROAD_REACH - width / 2.0);
        let cross_speed = rng.random_range(6.0..12.0);
        agents.moving(
            AgentKind::Vehicle,
            x0 + width / 2.0 - 1.5 * w,
            -rng.random_range(20.0..60.0),
            FRAC_PI_2,
            cross_speed,
        );
        lights.push(TrafficLight {
            intersection: inter,
            state: LightState::Red,
        });
        "stopping_at_traffic_light"
    };
    Layout {
        path,
        profile,
        tag,
        route,
        lights,
    }
}

/// Generates one scene. Deterministic in `(seed, template)`.
pub fn generate_scenario(seed: u64, template: Template) -> Scenario {
    let template_index = ALL_TEMPLATES.iter().position(|t| *t == template).unwrap_or(0) as u64;
    let mut rng = rng::substream(seed, streams::SCENARIO, template_index);
    let mut map = MapBuilder { elements: Vec::new() };
    let mut agents = AgentBuilder { agents: Vec::new() };
    let layout = match template {
        Template::Straight => straight(&mut rng, &mut map, &mut agents),
        Template::IntersectionTurn => intersection_turn(&mut rng, &mut map, &mut agents),
        Template::LaneChange => lane_change(&mut rng, &mut map, &mut agents),
        Template::StopAndGo => stop_and_go(&mut rng, &mut map, &mut agents),
    };
    background_traffic(&mut rng, &mut agents);
    let ego = ego_states(&layout.path, &layout.profile);

    let world = Pose::new(
        rng.random_range(-500.0..500.0),
        rng.random_range(-500.0..500.0),
        rng.random_range(-PI..PI),
    );
    let place = |p: [f64; 2]| world.to_world(p);
    Scenario {
        template,
        tag: layout.tag.to_string(),
        map_elements: map.elements.iter().map(|e| e.transformed(place)).collect(),
        route: layout.route,
        traffic_lights: layout.lights,
        agents: agents
            .agents
            .into_iter()
            .map(|a| Agent {
                states: a.states.iter().map(|s| s.to_world(&world)).collect(),
                ..a
            })
            .collect(),
        ego: ego.iter().map(|s| s.to_world(&world)).collect(),
    }
}

/// Seed of the `index`-th scene of a dataset.
pub fn scene_seed(seed: u64, index: u64) -> u64 {
    seed.wrapping_mul(0x0000_0100_0000_01b3).wrapping_add(index)
}

/// Generates `count` samples cycling through `templates`, anchored at the
/// default frame. Sample `i` depends only on `(seed, i)`.
pub fn generate_dataset(count: usize, templates: &[Template], seed: u64, exec: Execution) -> Result<Vec<TrainingSample>> {
    if templates.is_empty() {
        return Err(crate::Error::Config("template mix is empty".into()));
    }
    exec.map_range(count, |i| {
        let template = templates[i % templates.len()];
        let scenario = generate_scenario(scene_seed(seed, i as u64), template);
        build_sample(&scenario, DEFAULT_ANCHOR).map(|mut s| {
            s.id = i as u64;
            s
        })
    })
    .into_iter()
    .collect()
}
