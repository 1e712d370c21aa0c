//! Synthetic driving scenes and the training samples cut from them.

mod generator;
mod intention;
mod io;
mod sample;

pub use generator::{generate_dataset, generate_scenario, ALL_TEMPLATES};
pub use intention::{assign_proposals, cluster_intentions, IntentionVocab, DEFAULT_VOCAB_SIZE};
pub use io::{deserialize_samples, read_dataset, serialize_samples, write_dataset, Dataset, DatasetHeader, FORMAT_NAME, FORMAT_VERSION};
pub use sample::{build_sample, AgentHistory, ProposalTarget, SampleContext, TrainingSample};

use serde::{Deserialize, Serialize};

use crate::geometry::{wrap_angle, Pose};

/// Simulation rate of every state sequence.
pub const FRAME_HZ: f64 = 10.0;
pub const DT: f64 = 1.0 / FRAME_HZ;
pub const HISTORY_FRAMES: usize = 21;
pub const FUTURE_FRAMES: usize = 80;
/// Frames in a generated scenario: history, current and future.
pub const SCENARIO_FRAMES: usize = HISTORY_FRAMES + FUTURE_FRAMES;
pub const DEFAULT_ANCHOR: usize = HISTORY_FRAMES - 1;
/// Future frame numbers of the key points, farthest first (8 s, 4 s, 2 s, 1 s, 0.5 s).
pub const KEY_POINT_FRAMES: [usize; 5] = [80, 40, 20, 10, 5];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Vehicle,
    Pedestrian,
    Cyclist,
}

impl AgentKind {
    pub fn index(self) -> usize {
        match self {
            AgentKind::Vehicle => 0,
            AgentKind::Pedestrian => 1,
            AgentKind::Cyclist => 2,
        }
    }

    /// Footprint as `(width, length)` in meters.
    pub fn footprint(self) -> (f64, f64) {
        match self {
            AgentKind::Vehicle => (1.9, 4.6),
            AgentKind::Pedestrian => (0.6, 0.6),
            AgentKind::Cyclist => (0.7, 1.8),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub vx: f64,
    pub vy: f64,
    pub width: f64,
    pub length: f64,
    pub kind: AgentKind,
}

impl AgentState {
    pub fn new(kind: AgentKind, x: f64, y: f64, yaw: f64, speed: f64) -> Self {
        let (width, length) = kind.footprint();
        let yaw = wrap_angle(yaw);
        Self {
            x,
            y,
            yaw,
            vx: speed * yaw.cos(),
            vy: speed * yaw.sin(),
            width,
            length,
            kind,
        }
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.x, self.y, self.yaw)
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn speed(&self) -> f64 {
        self.vx.hypot(self.vy)
    }

    /// This state expressed in the frame of `origin`.
    pub fn relative_to(&self, origin: &Pose) -> Self {
        let [x, y] = origin.to_local([self.x, self.y]);
        let [vx, vy] = origin.rotate_to_local([self.vx, self.vy]);
        Self {
            x,
            y,
            yaw: wrap_angle(self.yaw - origin.yaw),
            vx,
            vy,
            ..*self
        }
    }

    /// Inverse of [`relative_to`](Self::relative_to).
    pub fn to_world(&self, origin: &Pose) -> Self {
        let [x, y] = origin.to_world([self.x, self.y]);
        let (s, c) = origin.yaw.sin_cos();
        Self {
            x,
            y,
            yaw: wrap_angle(self.yaw + origin.yaw),
            vx: c * self.vx - s * self.vy,
            vy: s * self.vx + c * self.vy,
            ..*self
        }
    }
}

/// Road-map element types. Each occupies one raster channel starting at
/// channel 2, in declaration order; channels past the last kind stay empty.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapElementKind {
    Lane,
    LaneConnector,
    Roadblock,
    RoadblockConnector,
    Intersection,
    StopLine,
    Crosswalk,
    Walkway,
    LaneBoundary,
    RoadEdge,
}

impl MapElementKind {
    pub const ALL: [MapElementKind; 10] = [
        MapElementKind::Lane,
        MapElementKind::LaneConnector,
        MapElementKind::Roadblock,
        MapElementKind::RoadblockConnector,
        MapElementKind::Intersection,
        MapElementKind::StopLine,
        MapElementKind::Crosswalk,
        MapElementKind::Walkway,
        MapElementKind::LaneBoundary,
        MapElementKind::RoadEdge,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|k| *k == self).unwrap_or(0)
    }

    /// Filled area rather than a polyline.
    pub fn is_polygon(self) -> bool {
        matches!(
            self,
            MapElementKind::Roadblock
                | MapElementKind::RoadblockConnector
                | MapElementKind::Intersection
                | MapElementKind::Crosswalk
                | MapElementKind::Walkway
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapElement {
    pub id: u32,
    pub kind: MapElementKind,
    pub points: Vec<[f64; 2]>,
    /// Roadblock that owns a lane, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roadblock: Option<u32>,
}

impl MapElement {
    pub fn transformed(&self, f: impl Fn([f64; 2]) -> [f64; 2]) -> Self {
        Self {
            points: self.points.iter().map(|p| f(*p)).collect(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LightState {
    Green,
    Red,
    Yellow,
}

impl LightState {
    pub fn index(self) -> usize {
        match self {
            LightState::Green => 0,
            LightState::Red => 1,
            LightState::Yellow => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficLight {
    /// Id of the intersection polygon the light controls.
    pub intersection: u32,
    pub state: LightState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub id: u32,
    pub kind: AgentKind,
    pub states: Vec<AgentState>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    Straight,
    IntersectionTurn,
    LaneChange,
    StopAndGo,
}

impl Template {
    pub fn name(self) -> &'static str {
        match self {
            Template::Straight => "straight",
            Template::IntersectionTurn => "intersection_turn",
            Template::LaneChange => "lane_change",
            Template::StopAndGo => "stop_and_go",
        }
    }
}

impl std::str::FromStr for Template {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        ALL_TEMPLATES
            .iter()
            .copied()
            .find(|t| t.name() == s)
            .ok_or_else(|| crate::Error::Config(format!("unknown template `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub template: Template,
    pub tag: String,
    pub map_elements: Vec<MapElement>,
    /// Roadblock ids along the planned route, in travel order.
    pub route: Vec<u32>,
    pub traffic_lights: Vec<TrafficLight>,
    pub agents: Vec<Agent>,
    pub ego: Vec<AgentState>,
}

impl Scenario {
    pub fn num_frames(&self) -> usize {
        self.ego.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_and_world_are_inverse() {
        let s = AgentState::new(AgentKind::Cyclist, 4.0, -3.0, 2.9, 5.0);
        let o = Pose::new(-1.0, 7.0, -2.5);
        let back = s.relative_to(&o).to_world(&o);
        assert!((back.x - s.x).abs() < 1e-12 && (back.y - s.y).abs() < 1e-12);
        assert!((back.vx - s.vx).abs() < 1e-12 && (back.vy - s.vy).abs() < 1e-12);
        assert!(wrap_angle(back.yaw - s.yaw).abs() < 1e-12);
    }

    #[test]
    fn self_relative_is_exact_origin() {
        let s = AgentState::new(AgentKind::Vehicle, 123.456, -78.9, 1.234, 7.0);
        let r = s.relative_to(&s.pose());
        assert_eq!((r.x, r.y, r.yaw), (0.0, 0.0, 0.0));
    }

    #[test]
    fn template_names_parse() {
        for t in ALL_TEMPLATES {
            assert_eq!(t.name().parse::<Template>().unwrap(), t);
        }
        assert!("roundabout".parse::<Template>().is_err());
    }
}
