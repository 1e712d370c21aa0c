use serde::{Deserialize, Serialize};

use super::{
    AgentKind, AgentState, MapElement, Scenario, Template, TrafficLight, FUTURE_FRAMES, HISTORY_FRAMES,
    KEY_POINT_FRAMES,
};
use crate::{Error, Result};

/// History of one non-ego agent in the sample's local frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentHistory {
    pub id: u32,
    pub kind: AgentKind,
    pub states: Vec<AgentState>,
}

/// Everything observable at the anchor frame, in the local frame.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleContext {
    pub map_elements: Vec<MapElement>,
    pub route: Vec<u32>,
    pub traffic_lights: Vec<TrafficLight>,
    pub agents: Vec<AgentHistory>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalTarget {
    /// Index of the nearest intention point.
    pub index: usize,
    /// True 8 s endpoint.
    pub endpoint: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub id: u64,
    pub template: Template,
    pub tag: String,
    pub context: SampleContext,
    /// 21 frames, oldest first; the last one is the local origin.
    pub ego_history: Vec<AgentState>,
    /// 80 frames from +0.1 s to +8.0 s.
    pub ego_future: Vec<AgentState>,
    /// Future states at 8, 4, 2, 1 and 0.5 s, in that order.
    pub key_points: Vec<AgentState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposal: Option<ProposalTarget>,
}

impl TrainingSample {
    pub fn endpoint(&self) -> [f64; 2] {
        self.ego_future[FUTURE_FRAMES - 1].position()
    }

    /// Key points as `(x, y)` pairs, farthest first.
    pub fn key_point_positions(&self) -> Vec<[f64; 2]> {
        self.key_points.iter().map(AgentState::position).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.ego_history.len() != HISTORY_FRAMES || self.ego_future.len() != FUTURE_FRAMES {
            return Err(Error::Contract(format!(
                "sample {} has {} history and {} future frames",
                self.id,
                self.ego_history.len(),
                self.ego_future.len()
            )));
        }
        if self.key_points.len() != KEY_POINT_FRAMES.len() {
            return Err(Error::Contract(format!("sample {} has {} key points", self.id, self.key_points.len())));
        }
        Ok(())
    }
}

/// Cuts a sample around `anchor` and expresses it in the anchor ego frame.
pub fn build_sample(scenario: &Scenario, anchor: usize) -> Result<TrainingSample> {
    let past = HISTORY_FRAMES - 1;
    if anchor < past || anchor + FUTURE_FRAMES >= scenario.num_frames() {
        return Err(Error::Horizon(format!(
            "anchor frame {anchor} needs {past} frames before and {FUTURE_FRAMES} after within {} frames",
            scenario.num_frames()
        )));
    }
    let origin = scenario.ego[anchor].pose();
    let local = |s: &AgentState| s.relative_to(&origin);
    let history = anchor - past..=anchor;
    let ego_history: Vec<AgentState> = scenario.ego[history.clone()].iter().map(local).collect();
    let ego_future: Vec<AgentState> = scenario.ego[anchor + 1..=anchor + FUTURE_FRAMES].iter().map(local).collect();
    let key_points = KEY_POINT_FRAMES.iter().map(|&f| ego_future[f - 1]).collect();
    let context = SampleContext {
        map_elements: scenario
            .map_elements
            .iter()
            .map(|e| e.transformed(|p| origin.to_local(p)))
            .collect(),
        route: scenario.route.clone(),
        traffic_lights: scenario.traffic_lights.clone(),
        agents: scenario
            .agents
            .iter()
            .map(|a| AgentHistory {
                id: a.id,
                kind: a.kind,
                states: a.states[history.clone()].iter().map(local).collect(),
            })
            .collect(),
    };
    Ok(TrainingSample {
        id: 0,
        template: scenario.template,
        tag: scenario.tag.clone(),
        context,
        ego_history,
        ego_future,
        key_points,
        proposal: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{generate_scenario, ALL_TEMPLATES, DEFAULT_ANCHOR};

    #[test]
    fn spans_and_origin() {
        for t in ALL_TEMPLATES {
            let s = build_sample(&generate_scenario(3, t), DEFAULT_ANCHOR).unwrap();
            assert_eq!(s.ego_history.len(), 21);
            assert_eq!(s.ego_future.len(), 80);
            let cur = s.ego_history.last().unwrap();
            assert_eq!((cur.x, cur.y, cur.yaw), (0.0, 0.0, 0.0));
            for (kp, f) in s.key_points.iter().zip(KEY_POINT_FRAMES) {
                assert_eq!(*kp, s.ego_future[f - 1]);
            }
        }
    }

    #[test]
    fn anchor_out_of_range() {
        let sc = generate_scenario(1, Template::Straight);
        assert!(matches!(build_sample(&sc, 10), Err(Error::Horizon(_))));
        assert!(matches!(build_sample(&sc, 21), Err(Error::Horizon(_))));
    }
}
