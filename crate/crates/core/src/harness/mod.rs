//! Closed-loop evaluation: rollouts, per-scenario metrics, the aggregate
//! score, benchmarks and the APT/CSFI ablation grid.

mod bench;
mod sim;

pub use bench::{
    ablation_csv, attention_csv, attention_svg, metrics_csv, run_ablation, run_benchmark, type_scores, AblationConfig,
    AblationRow, BenchError, BenchmarkReport,
};
pub use sim::{rollout, unicycle_step, ExpertReplay, ModelPolicy, Policy, PolicyOutput, RolloutLog, SimMode, ZeroPolicy};

use serde::{Deserialize, Serialize};

use crate::geometry::{forward_time_to_collision, OrientedBox, Pose};
use crate::scene::{
    ScenarioRecord, ScenarioType, State, COMFORT_ACCEL, COMFORT_JERK, DT, EGO_LENGTH, EGO_WIDTH, HISTORY_LEN,
    SPEED_TOLERANCE, STOPPED_SPEED, TTC_HORIZON, TTC_THRESHOLD,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    /// Simulated steps of 0.1 s; capped by the logged future.
    pub horizon_steps: usize,
    pub accel_limit: f64,
    pub yaw_rate_limit: f64,
    /// Hardest braking a reactive agent may apply.
    pub agent_max_brake: f64,
    pub comfort_accel: f64,
    pub comfort_jerk: f64,
    pub ttc_threshold: f64,
    pub ttc_horizon: f64,
    pub speed_tolerance: f64,
    /// Expert route progress below this counts as "nothing to cover".
    pub min_expert_progress: f64,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            horizon_steps: 80,
            accel_limit: 4.0,
            yaw_rate_limit: 0.5,
            agent_max_brake: 6.0,
            comfort_accel: COMFORT_ACCEL,
            comfort_jerk: COMFORT_JERK,
            ttc_threshold: TTC_THRESHOLD,
            ttc_horizon: TTC_HORIZON,
            speed_tolerance: SPEED_TOLERANCE,
            min_expert_progress: 0.5,
        }
    }
}

/// Whether `ego` overlaps `other`, and if so whether the ego is at fault.
/// The ego is not at fault when the other vehicle's center lies in the ego's
/// rear half-plane and it closes at least as fast as the ego drives.
pub fn collision_check(ego: &State, other_box: &OrientedBox, other: &State) -> Option<bool> {
    let ego_box = ego.footprint(EGO_LENGTH, EGO_WIDTH);
    if !ego_box.overlaps(other_box) {
        return None;
    }
    let behind = Pose::new(ego.x, ego.y, ego.heading).to_local([other_box.x, other_box.y])[0] < 0.0;
    let closing = other.v * (other.heading - ego.heading).cos();
    Some(!(behind && ego.v <= closing))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scenario_id: String,
    pub scenario_type: ScenarioType,
    pub mode: SimMode,
    pub collision: bool,
    pub at_fault_collision: bool,
    pub ttc_ok: bool,
    pub drivable_ok: bool,
    pub comfort_ok: bool,
    pub speed_ok: bool,
    pub progress_ratio: f64,
    pub min_ttc: Option<f64>,
    pub failed: Option<String>,
}

impl MetricsRow {
    /// 0 when at fault or off the drivable area, else 100 times the mean of
    /// the TTC, comfort and speed flags and the clamped progress ratio.
    pub fn score(&self) -> f64 {
        if self.at_fault_collision || !self.drivable_ok || self.failed.is_some() {
            return 0.0;
        }
        let b = |x: bool| if x { 1.0 } else { 0.0 };
        100.0 * (b(self.ttc_ok) + b(self.comfort_ok) + b(self.speed_ok) + self.progress_ratio.clamp(0.0, 1.0)) / 4.0
    }
}

fn route_progress(route: &crate::geometry::Path, from: &State, to: &State) -> f64 {
    route.project(to.position()).0 - route.project(from.position()).0
}

pub fn compute_metrics(log: &RolloutLog, rec: &ScenarioRecord, cfg: &HarnessConfig) -> MetricsRow {
    let mut at_fault = false;
    let mut collision = false;
    let mut min_ttc: Option<f64> = None;
    for (k, ego) in log.ego.iter().enumerate() {
        let ego_box = ego.footprint(EGO_LENGTH, EGO_WIDTH);
        let agents = sim::agent_boxes(rec, log, k);
        for (b, s) in &agents {
            if let Some(fault) = collision_check(ego, b, s) {
                collision = true;
                at_fault |= fault;
            }
        }
        for b in &rec.static_obstacles {
            if collision_check(ego, b, &State::new(b.x, b.y, b.heading, 0.0)).is_some() {
                collision = true;
                at_fault = true;
            }
        }
        if ego.v > STOPPED_SPEED {
            let others = agents
                .iter()
                .map(|(b, s)| (b, s.velocity()))
                .chain(rec.static_obstacles.iter().map(|b| (b, [0.0, 0.0])));
            if let Some(t) = forward_time_to_collision(&ego_box, ego.velocity(), others, cfg.ttc_horizon) {
                min_ttc = Some(min_ttc.map_or(t, |m: f64| m.min(t)));
            }
        }
    }
    let route = rec.route.path();
    let drivable_ok = log.ego.iter().all(|s| {
        s.footprint(EGO_LENGTH, EGO_WIDTH).corners().iter().all(|&c| route.project(c).1.abs() <= rec.route.half_width)
    });
    let accel: Vec<f64> = log.ego.windows(2).map(|w| (w[1].v - w[0].v) / DT).collect();
    let comfort_ok = accel.iter().all(|a| a.abs() <= cfg.comfort_accel)
        && accel.windows(2).all(|w| ((w[1] - w[0]) / DT).abs() <= cfg.comfort_jerk);
    let speed_ok = log.ego.iter().all(|s| s.v <= rec.speed_limit + cfg.speed_tolerance);
    let start = log.ego[0];
    let steps = log.ego.len() - 1;
    let expert = route_progress(&route, &start, &rec.ego_state(HISTORY_LEN - 1 + steps));
    let ego = route_progress(&route, &start, log.ego.last().unwrap());
    let progress_ratio = if expert < cfg.min_expert_progress { 1.0 } else { ego.max(0.0) / expert };
    MetricsRow {
        scenario_id: rec.id.clone(),
        scenario_type: rec.scenario_type,
        mode: log.mode,
        collision,
        at_fault_collision: at_fault,
        ttc_ok: min_ttc.is_none_or(|t| t >= cfg.ttc_threshold),
        drivable_ok,
        comfort_ok,
        speed_ok,
        progress_ratio,
        min_ttc,
        failed: log.failed.clone(),
    }
}

/// Mean scenario score; an empty list is an error rather than a vacuous 100.
pub fn aggregate_score(rows: &[MetricsRow]) -> Result<f64, BenchError> {
    if rows.is_empty() {
        return Err(BenchError::NoScenarios);
    }
    Ok(rows.iter().map(MetricsRow::score).sum::<f64>() / rows.len() as f64)
}
