//! Closed-loop rollouts: the ego follows the policy's first planned step
//! through a kinematic unicycle, agents replay logs or follow IDM.

use serde::{Deserialize, Serialize};

use super::HarnessConfig;
use crate::geometry::{wrap_angle, OrientedBox, Path};
use crate::nn::ParamStore;
use crate::planner::Model;
use crate::scene::{
    featurize, idm, AgentObs, Observation, ScenarioRecord, State, DT, EGO_LENGTH, EPISODE_LEN, HISTORY_LEN, IN_LANE,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    /// Agents replay their logged tracks.
    NonReactive,
    /// Agents follow their logged paths under IDM.
    Reactive,
}

impl SimMode {
    pub const BOTH: [SimMode; 2] = [SimMode::NonReactive, SimMode::Reactive];

    pub fn name(self) -> &'static str {
        match self {
            SimMode::NonReactive => "non_reactive",
            SimMode::Reactive => "reactive",
        }
    }
}

/// One planning call's result: the ego-frame `(x, y, heading)` plan and,
/// optionally, the ego token's attention over the scene tokens.
#[derive(Clone, Debug, Default)]
pub struct PolicyOutput {
    pub trajectory: Vec<[f64; 3]>,
    pub attention: Option<Vec<f64>>,
}

pub trait Policy {
    fn plan(&mut self, obs: &Observation, step: usize) -> Result<PolicyOutput, String>;
}

/// Plans with a trained model.
pub struct ModelPolicy<'a> {
    pub model: &'a Model,
    pub store: &'a ParamStore,
}

impl Policy for ModelPolicy<'_> {
    fn plan(&mut self, obs: &Observation, _step: usize) -> Result<PolicyOutput, String> {
        let raw = featurize(obs, &self.model.cfg.budget);
        let plan = self.model.plan(self.store, &raw).map_err(|e| e.to_string())?;
        Ok(PolicyOutput { trajectory: plan.ego, attention: plan.ego_attention.last().cloned() })
    }
}

/// Replays the logged expert future, re-expressed in the simulated ego frame.
pub struct ExpertReplay<'a> {
    pub record: &'a ScenarioRecord,
}

impl Policy for ExpertReplay<'_> {
    fn plan(&mut self, obs: &Observation, step: usize) -> Result<PolicyOutput, String> {
        let pose = obs.ego_history.last().expect("ego history").pose();
        let now = HISTORY_LEN - 1 + step;
        let trajectory = (1..=crate::scene::FUTURE_LEN)
            .map(|k| {
                let s = self.record.ego_state((now + k).min(EPISODE_LEN - 1));
                let p = pose.to_local(s.position());
                [p[0], p[1], wrap_angle(pose.heading_to_local(s.heading))]
            })
            .collect();
        Ok(PolicyOutput { trajectory, attention: None })
    }
}

/// Always plans to stay where it is.
pub struct ZeroPolicy;

impl Policy for ZeroPolicy {
    fn plan(&mut self, _obs: &Observation, _step: usize) -> Result<PolicyOutput, String> {
        Ok(PolicyOutput { trajectory: vec![[0.0; 3]; crate::scene::FUTURE_LEN], attention: None })
    }
}

/// Unicycle step toward the first planned point: the target speed covers the
/// chord in one step and the yaw rate turns to its heading, both clamped.
pub fn unicycle_step(cfg: &HarnessConfig, s: &State, first: [f64; 3]) -> State {
    let chord = first[0].hypot(first[1]);
    let v_des = if first[0] >= 0.0 { chord / DT } else { 0.0 };
    let a = ((v_des - s.v) / DT).clamp(-cfg.accel_limit, cfg.accel_limit);
    let omega = (first[2] / DT).clamp(-cfg.yaw_rate_limit, cfg.yaw_rate_limit);
    let v = (s.v + a * DT).max(0.0);
    let heading = wrap_angle(s.heading + omega * DT);
    State::new(s.x + v * DT * heading.cos(), s.y + v * DT * heading.sin(), heading, v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutLog {
    pub scenario_id: String,
    pub mode: SimMode,
    /// Ego states from the start state through the last simulated step.
    pub ego: Vec<State>,
    /// Per agent, per simulated state, `None` when not present.
    pub agents: Vec<Vec<Option<State>>>,
    /// Ego attention over the scene tokens at every planning call, when the
    /// policy reports it.
    pub attention: Vec<Vec<f64>>,
    pub failed: Option<String>,
}

struct ReactiveAgent {
    path: Option<Path>,
    s: f64,
    v: f64,
    v_des: f64,
    length: f64,
}

fn agent_path(rec: &ScenarioRecord, i: usize) -> Option<Path> {
    let a = &rec.agents[i];
    let mut pts: Vec<[f64; 2]> = Vec::new();
    for t in (0..EPISODE_LEN).filter(|&t| a.valid[t]) {
        let p = a.state(t).position();
        if pts.last().is_none_or(|q: &[f64; 2]| (p[0] - q[0]).hypot(p[1] - q[1]) > 0.05) {
            pts.push(p);
        }
    }
    let path = (pts.len() >= 2).then(|| Path::new(&pts))?;
    (path.length() > 0.5).then_some(path)
}

/// Bumper gap and along-path speed of the closest object ahead in the lane.
fn leader_on(path: &Path, s: f64, length: f64, objects: &[(State, f64)]) -> Option<(f64, f64)> {
    let mut best: Option<(f64, f64)> = None;
    for (st, len) in objects {
        let (so, lat) = path.project(st.position());
        if so <= s + 0.1 || lat.abs() >= IN_LANE || so - s > 100.0 {
            continue;
        }
        let gap = so - s - (length + len) / 2.0;
        let along = st.v * (st.heading - path.heading_at(so)).cos();
        if best.is_none_or(|(g, _)| gap < g) {
            best = Some((gap, along));
        }
    }
    best
}

/// Simulates `horizon` steps from the record's current state.
pub fn rollout(policy: &mut dyn Policy, rec: &ScenarioRecord, mode: SimMode, cfg: &HarnessConfig) -> RolloutLog {
    let now = HISTORY_LEN - 1;
    let horizon = cfg.horizon_steps.min(EPISODE_LEN - 1 - now);
    let route = rec.route.path();
    let mut ego_hist: Vec<State> = rec.ego_history.clone();
    // agent states over all simulated time, indexed like the record
    let mut agent_hist: Vec<Vec<Option<State>>> =
        rec.agents.iter().map(|a| (0..=now).map(|t| a.valid[t].then(|| a.state(t))).collect()).collect();
    let mut reactive: Vec<ReactiveAgent> = (0..rec.agents.len())
        .map(|i| {
            let a = &rec.agents[i];
            let path = agent_path(rec, i);
            let cur = a.state(now);
            let s = path.as_ref().map_or(0.0, |p| p.project(cur.position()).0);
            let v_des = (0..EPISODE_LEN).filter(|&t| a.valid[t]).map(|t| a.state(t).v).fold(0.1, f64::max);
            ReactiveAgent { path, s, v: cur.v, v_des, length: a.length }
        })
        .collect();
    let mut log = RolloutLog {
        scenario_id: rec.id.clone(),
        mode,
        ego: vec![*ego_hist.last().unwrap()],
        agents: agent_hist.iter().map(|h| vec![h[now]]).collect(),
        attention: Vec::new(),
        failed: None,
    };
    for k in 0..horizon {
        let t = now + k;
        let obs = Observation {
            ego_history: ego_hist[ego_hist.len() - HISTORY_LEN..].to_vec(),
            agents: rec
                .agents
                .iter()
                .zip(&agent_hist)
                .map(|(a, h)| AgentObs { length: a.length, width: a.width, history: h[t + 1 - HISTORY_LEN..=t].to_vec() })
                .collect(),
            map: &rec.map_polylines,
            obstacles: &rec.static_obstacles,
            route: &route,
            speed_limit: rec.speed_limit,
        };
        let out = match policy.plan(&obs, k) {
            Ok(o) => o,
            Err(e) => {
                log.failed = Some(format!("step {k}: policy error: {e}"));
                break;
            }
        };
        let Some(first) = out.trajectory.first().copied() else {
            log.failed = Some(format!("step {k}: empty plan"));
            break;
        };
        if out.trajectory.iter().flatten().any(|v| !v.is_finite()) {
            log.failed = Some(format!("step {k}: non-finite plan"));
            break;
        }
        if let Some(a) = out.attention {
            log.attention.push(a);
        }
        let ego_now = *ego_hist.last().unwrap();
        let ego_next = unicycle_step(cfg, &ego_now, first);

        let next_agents: Vec<Option<State>> = match mode {
            SimMode::NonReactive => {
                rec.agents.iter().map(|a| a.valid[t + 1].then(|| a.state(t + 1))).collect()
            }
            SimMode::Reactive => {
                // (owning agent, state, length) of everything an agent may follow
                let objects: Vec<(Option<usize>, State, f64)> = std::iter::once((None, ego_now, EGO_LENGTH))
                    .chain(
                        rec.agents
                            .iter()
                            .zip(&agent_hist)
                            .enumerate()
                            .filter_map(|(j, (a, h))| h[t].map(|s| (Some(j), s, a.length))),
                    )
                    .chain(rec.static_obstacles.iter().map(|b| (None, State::new(b.x, b.y, b.heading, 0.0), b.length)))
                    .collect();
                let accels: Vec<Option<f64>> = reactive
                    .iter()
                    .enumerate()
                    .map(|(i, ra)| {
                        let path = ra.path.as_ref()?;
                        let a = &rec.agents[i];
                        let v_log = if a.valid[t + 1] { a.state(t + 1).v } else { ra.v };
                        let track = (v_log - ra.v) / DT;
                        let others: Vec<(State, f64)> =
                            objects.iter().filter(|(o, _, _)| *o != Some(i)).map(|&(_, st, l)| (st, l)).collect();
                        let react = idm(ra.v, ra.v_des, leader_on(path, ra.s, ra.length, &others));
                        Some(track.min(react).clamp(-cfg.agent_max_brake, cfg.accel_limit))
                    })
                    .collect();
                reactive
                    .iter_mut()
                    .enumerate()
                    .map(|(i, ra)| {
                        if !rec.agents[i].valid[t + 1] {
                            return None;
                        }
                        let (Some(path), Some(a)) = (ra.path.as_ref(), accels[i]) else {
                            return agent_hist[i][t].or(Some(rec.agents[i].state(t + 1)));
                        };
                        ra.v = (ra.v + a * DT).max(0.0);
                        ra.s += ra.v * DT;
                        let p = path.point_at(ra.s);
                        Some(State::new(p[0], p[1], path.heading_at(ra.s), ra.v))
                    })
                    .collect()
            }
        };
        ego_hist.push(ego_next);
        log.ego.push(ego_next);
        for (i, s) in next_agents.into_iter().enumerate() {
            agent_hist[i].push(s);
            log.agents[i].push(s);
        }
    }
    log
}

/// Footprints of the agents present at simulated state `k`.
pub(crate) fn agent_boxes(rec: &ScenarioRecord, log: &RolloutLog, k: usize) -> Vec<(OrientedBox, State)> {
    rec.agents
        .iter()
        .zip(&log.agents)
        .filter_map(|(a, h)| h[k].map(|s| (s.footprint(a.length, a.width), s)))
        .collect()
}
