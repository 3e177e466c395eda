//! Scenario records, the synthetic long-tail generator, and the embedding of
//! a scene into the initial token matrix.

mod features;
mod generate;
mod io;

pub use features::{
    encode_scene, featurize, AgentObs, CategoryRanges, FourierEmbedding, Observation, RawScene, SceneEmbedder,
    SceneTokens, TokenBudget, AGENT_FEATS, CLASS_AGENT, CLASS_BOUNDARY, CLASS_CENTERLINE, CLASS_EGO, CLASS_OBSTACLE,
    EGO_FEATS, MAP_FEATS, OBSTACLE_FEATS,
};
pub use generate::{expert_violations, generate_dataset, generate_record, GenConfig, GenError, RoadConfig};
pub(crate) use generate::{
    idm, COMFORT_ACCEL, COMFORT_JERK, IN_LANE, SPEED_TOLERANCE, STOPPED_SPEED, TTC_HORIZON, TTC_THRESHOLD,
};
pub use io::{load_dataset, save_dataset, DatasetIoError};

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::geometry::{OrientedBox, Path, Pose};

pub const DT: f64 = 0.1;
pub const HISTORY_LEN: usize = 20;
pub const FUTURE_LEN: usize = 80;
pub const EPISODE_LEN: usize = HISTORY_LEN + FUTURE_LEN;
pub const MAX_AGENTS: usize = 16;
pub const MAX_POLYLINES: usize = 24;
pub const MAX_OBSTACLES: usize = 8;
pub const POLYLINE_POINTS: usize = 10;
pub const EGO_LENGTH: f64 = 4.6;
pub const EGO_WIDTH: f64 = 1.85;
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioType {
    Stationary,
    LeadFollow,
    LeadBrake,
    IntersectionTurn,
    LaneChange,
    YieldMerge,
}

impl ScenarioType {
    pub const ALL: [ScenarioType; 6] = [
        ScenarioType::Stationary,
        ScenarioType::LeadFollow,
        ScenarioType::LeadBrake,
        ScenarioType::IntersectionTurn,
        ScenarioType::LaneChange,
        ScenarioType::YieldMerge,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ScenarioType::Stationary => "stationary",
            ScenarioType::LeadFollow => "lead_follow",
            ScenarioType::LeadBrake => "lead_brake",
            ScenarioType::IntersectionTurn => "intersection_turn",
            ScenarioType::LaneChange => "lane_change",
            ScenarioType::YieldMerge => "yield_merge",
        }
    }

    /// Every type except `stationary` expects the ego to make progress.
    pub fn is_moving(self) -> bool {
        self != ScenarioType::Stationary
    }
}

impl fmt::Display for ScenarioType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Kinematic state `(x m, y m, heading rad, v m/s)`; serialised as a 4-array.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct State {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub v: f64,
}

impl From<[f64; 4]> for State {
    fn from(a: [f64; 4]) -> Self {
        State { x: a[0], y: a[1], heading: a[2], v: a[3] }
    }
}

impl From<State> for [f64; 4] {
    fn from(s: State) -> Self {
        [s.x, s.y, s.heading, s.v]
    }
}

impl State {
    pub fn new(x: f64, y: f64, heading: f64, v: f64) -> Self {
        State { x, y, heading, v }
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.x, self.y, self.heading)
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn velocity(&self) -> [f64; 2] {
        [self.v * self.heading.cos(), self.v * self.heading.sin()]
    }

    pub fn footprint(&self, length: f64, width: f64) -> OrientedBox {
        OrientedBox::new(self.x, self.y, self.heading, length, width)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub length: f64,
    pub width: f64,
    pub history: Vec<State>,
    pub future: Vec<State>,
    /// One flag per step over history then future.
    pub valid: Vec<bool>,
}

impl AgentTrack {
    pub fn state(&self, t: usize) -> State {
        if t < HISTORY_LEN {
            self.history[t]
        } else {
            self.future[t - HISTORY_LEN]
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapPolyline {
    pub points: Vec<[f64; 2]>,
    /// Lane boundary (true) or lane centerline (false).
    pub boundary: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteCorridor {
    pub centerline: Vec<[f64; 2]>,
    pub half_width: f64,
}

impl RouteCorridor {
    pub fn path(&self) -> Path {
        Path::new(&self.centerline)
    }
}

/// One driving episode at 10 Hz: 2 s of history and 8 s of expert future.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRecord {
    pub schema_version: u32,
    pub id: String,
    pub scenario_type: ScenarioType,
    pub ego_history: Vec<State>,
    pub ego_future: Vec<State>,
    pub agents: Vec<AgentTrack>,
    pub map_polylines: Vec<MapPolyline>,
    pub static_obstacles: Vec<OrientedBox>,
    pub route: RouteCorridor,
    pub speed_limit: f64,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RecordError {
    #[error("record {id}: {what}")]
    Invalid { id: String, what: String },
}

impl ScenarioRecord {
    pub fn ego_state(&self, t: usize) -> State {
        if t < HISTORY_LEN {
            self.ego_history[t]
        } else {
            self.ego_future[t - HISTORY_LEN]
        }
    }

    pub fn current_ego(&self) -> State {
        self.ego_history[HISTORY_LEN - 1]
    }

    pub fn validate(&self) -> Result<(), RecordError> {
        let bad = |what: String| RecordError::Invalid { id: self.id.clone(), what };
        if self.ego_history.len() != HISTORY_LEN || self.ego_future.len() != FUTURE_LEN {
            return Err(bad(format!(
                "ego history/future lengths {}/{}",
                self.ego_history.len(),
                self.ego_future.len()
            )));
        }
        if self.agents.len() > MAX_AGENTS {
            return Err(bad(format!("{} agents exceeds {}", self.agents.len(), MAX_AGENTS)));
        }
        if self.map_polylines.len() > MAX_POLYLINES || self.static_obstacles.len() > MAX_OBSTACLES {
            return Err(bad("too many polylines or obstacles".into()));
        }
        for (i, a) in self.agents.iter().enumerate() {
            if a.history.len() != HISTORY_LEN || a.future.len() != FUTURE_LEN || a.valid.len() != EPISODE_LEN {
                return Err(bad(format!("agent {i} track lengths")));
            }
            // observed steps form one contiguous run
            let runs = a.valid.split(|v| !*v).filter(|r| !r.is_empty()).count();
            if runs > 1 {
                return Err(bad(format!("agent {i} validity flags are not one contiguous run")));
            }
            for t in 0..EPISODE_LEN {
                if !a.valid[t] && a.state(t) != State::default() {
                    return Err(bad(format!("agent {i} invalid step {t} carries a non-zero state")));
                }
            }
        }
        for p in &self.map_polylines {
            if p.points.len() != POLYLINE_POINTS {
                return Err(bad(format!("polyline with {} points", p.points.len())));
            }
        }
        if self.route.centerline.len() < 2 {
            return Err(bad("route centerline needs two points".into()));
        }
        Ok(())
    }
}

/// Per-type counts and the dominant set derived from them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub counts: BTreeMap<ScenarioType, usize>,
    pub dominant_set: Vec<ScenarioType>,
    pub seed: u64,
    pub n_records: usize,
}

impl DatasetManifest {
    pub fn from_records(records: &[ScenarioRecord], seed: u64) -> Self {
        let mut counts: BTreeMap<ScenarioType, usize> = ScenarioType::ALL.iter().map(|&t| (t, 0)).collect();
        for r in records {
            *counts.entry(r.scenario_type).or_insert(0) += 1;
        }
        let dominant_set = dominant_set(&counts);
        DatasetManifest { counts, dominant_set, seed, n_records: records.len() }
    }

    pub fn is_dominant(&self, t: ScenarioType) -> bool {
        self.dominant_set.contains(&t)
    }
}

/// Keys whose count strictly exceeds the mean count over all keys.
pub fn dominant_set<K: Copy + Ord>(counts: &BTreeMap<K, usize>) -> Vec<K> {
    if counts.is_empty() {
        return Vec::new();
    }
    let total: usize = counts.values().sum();
    let n = counts.len();
    // count > total / n  <=>  count * n > total, exact in integers
    counts.iter().filter(|(_, &c)| c * n > total).map(|(&k, _)| k).collect()
}
