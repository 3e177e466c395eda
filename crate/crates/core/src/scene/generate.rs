//! Scripted long-tail scenario generator.
//!
//! Every actor (ego included) moves along a fixed path with IDM longitudinal
//! control; the ego's path is its route centerline. Rollouts that violate
//! the expert checks are discarded and resampled.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    AgentTrack, DatasetManifest, MapPolyline, RouteCorridor, ScenarioRecord, ScenarioType, State, DT, EGO_LENGTH,
    EGO_WIDTH, EPISODE_LEN, HISTORY_LEN, MAX_AGENTS, MAX_OBSTACLES, MAX_POLYLINES, POLYLINE_POINTS, SCHEMA_VERSION,
};
use crate::geometry::{forward_time_to_collision, OrientedBox, Path};
use crate::rng::derive_seed;

const IDM_A_MAX: f64 = 1.5;
const IDM_B: f64 = 2.0;
const IDM_S0: f64 = 2.0;
const IDM_T: f64 = 1.2;
const EGO_JERK: f64 = 3.5;
const EGO_ACCEL: (f64, f64) = (-2.3, 1.5);
const SEGMENT_SPACING: f64 = 4.0;
const SEGMENTS_PER_LINE: usize = 4;
pub(crate) const IN_LANE: f64 = 1.9;

pub(crate) const COMFORT_ACCEL: f64 = 2.4;
pub(crate) const COMFORT_JERK: f64 = 4.13;
pub(crate) const TTC_HORIZON: f64 = 3.0;
pub(crate) const TTC_THRESHOLD: f64 = 0.95;
pub(crate) const SPEED_TOLERANCE: f64 = 0.5;
pub(crate) const STOPPED_SPEED: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoadConfig {
    pub lane_width: f64,
    pub corridor_half_width: f64,
    /// Candidate speed limits, m/s; one is drawn per scenario.
    pub speed_limits: Vec<f64>,
    /// Turn radius range for intersection scenarios, m.
    pub turn_radius: [f64; 2],
    pub max_attempts: usize,
}

impl Default for RoadConfig {
    fn default() -> Self {
        RoadConfig {
            lane_width: 3.5,
            corridor_half_width: 2.0,
            speed_limits: vec![8.33, 11.11, 13.89],
            turn_radius: [15.0, 25.0],
            max_attempts: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n_records: usize,
    pub seed: u64,
    pub fractions: BTreeMap<ScenarioType, f64>,
    pub road: RoadConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        let fractions = [0.45, 0.25, 0.12, 0.08, 0.06, 0.04];
        GenConfig {
            n_records: 1000,
            seed: 0,
            fractions: ScenarioType::ALL.iter().copied().zip(fractions).collect(),
            road: RoadConfig::default(),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GenError {
    #[error("scenario fractions sum to {0}, expected 1")]
    FractionSum(f64),
    #[error("fraction for {0} must be a finite non-negative number")]
    BadFraction(ScenarioType),
    #[error("road config: {0}")]
    Road(String),
    #[error("no valid {kind} scenario after {attempts} attempts")]
    Exhausted { kind: ScenarioType, attempts: usize },
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        for (&t, &f) in &self.fractions {
            if !f.is_finite() || f < 0.0 {
                return Err(GenError::BadFraction(t));
            }
        }
        let sum: f64 = self.fractions.values().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(GenError::FractionSum(sum));
        }
        let r = &self.road;
        if r.speed_limits.is_empty() || r.speed_limits.iter().any(|&v| !(v > 4.0)) {
            return Err(GenError::Road("speed limits must be non-empty and above 4 m/s".into()));
        }
        if !(r.turn_radius[0] >= 8.0 && r.turn_radius[1] >= r.turn_radius[0]) {
            return Err(GenError::Road("turn radius range must be ordered and at least 8 m".into()));
        }
        if !(r.lane_width > EGO_WIDTH && r.corridor_half_width > EGO_WIDTH / 2.0) || r.max_attempts == 0 {
            return Err(GenError::Road("lane width, corridor half-width and attempts must admit the ego".into()));
        }
        Ok(())
    }

    /// Per-type record counts: floors of `fraction × n`, with the remainder
    /// handed out by largest fractional part (ties to the earlier type).
    pub fn allocate(&self) -> BTreeMap<ScenarioType, usize> {
        let n = self.n_records;
        let exact: Vec<(ScenarioType, f64)> =
            ScenarioType::ALL.iter().map(|&t| (t, self.fractions.get(&t).copied().unwrap_or(0.0) * n as f64)).collect();
        let mut counts: BTreeMap<ScenarioType, usize> = exact.iter().map(|&(t, x)| (t, x.floor() as usize)).collect();
        let assigned: usize = counts.values().sum();
        let mut order: Vec<(ScenarioType, f64)> = exact.iter().map(|&(t, x)| (t, x - x.floor())).collect();
        order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for (t, _) in order.into_iter().take(n.saturating_sub(assigned)) {
            *counts.get_mut(&t).unwrap() += 1;
        }
        counts
    }
}

/// Generates the dataset; identical configs give identical records.
pub fn generate_dataset(cfg: &GenConfig) -> Result<(Vec<ScenarioRecord>, DatasetManifest), GenError> {
    cfg.validate()?;
    let counts = cfg.allocate();
    let mut kinds: Vec<ScenarioType> = counts.iter().flat_map(|(&t, &c)| std::iter::repeat_n(t, c)).collect();
    kinds.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0])));
    let mut records = Vec::with_capacity(kinds.len());
    for (i, &kind) in kinds.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[1, i as u64]));
        records.push(generate_record(kind, &format!("{}-{i:05}", kind.name()), &cfg.road, &mut rng)?);
    }
    let manifest = DatasetManifest::from_records(&records, cfg.seed);
    Ok((records, manifest))
}

/// One record of the given type, resampling until the expert checks pass.
pub fn generate_record(
    kind: ScenarioType,
    id: &str,
    road: &RoadConfig,
    rng: &mut impl Rng,
) -> Result<ScenarioRecord, GenError> {
    for _ in 0..road.max_attempts {
        let mut setup = match kind {
            ScenarioType::Stationary => stationary(road, rng),
            ScenarioType::LeadFollow => lead_follow(road, rng, false),
            ScenarioType::LeadBrake => lead_follow(road, rng, true),
            ScenarioType::IntersectionTurn => intersection_turn(road, rng),
            ScenarioType::LaneChange => lane_change(road, rng),
            ScenarioType::YieldMerge => yield_merge(road, rng),
        };
        simulate(&mut setup.actors, &setup.obstacles);
        let rec = setup.into_record(kind, id, road);
        if expert_violations(&rec).is_empty() && rec.validate().is_ok() {
            return Ok(rec);
        }
    }
    Err(GenError::Exhausted { kind, attempts: road.max_attempts })
}

/// Expert-quality checks a generated record must satisfy; empty when clean.
pub fn expert_violations(rec: &ScenarioRecord) -> Vec<String> {
    let mut out = Vec::new();
    let states: Vec<State> = (0..EPISODE_LEN).map(|t| rec.ego_state(t)).collect();
    for t in 0..EPISODE_LEN - 1 {
        let fd = (states[t + 1].x - states[t].x).hypot(states[t + 1].y - states[t].y) / DT;
        let v = states[t + 1].v;
        if (fd - v).abs() > 0.05 * v + 1e-3 {
            out.push(format!("step {}: speed {v:.3} vs displacement {fd:.3}", t + 1));
        }
    }
    let boxes: Vec<OrientedBox> = states.iter().map(|s| s.footprint(EGO_LENGTH, EGO_WIDTH)).collect();
    for (t, ego) in boxes.iter().enumerate() {
        let agents = rec.agents.iter().filter(|a| a.valid[t]).map(|a| a.state(t).footprint(a.length, a.width));
        if agents.chain(rec.static_obstacles.iter().copied()).any(|b| ego.overlaps(&b)) {
            out.push(format!("step {t}: collision"));
        }
    }
    let current = HISTORY_LEN - 1;
    let accel: Vec<f64> = (current..EPISODE_LEN - 1).map(|t| (states[t + 1].v - states[t].v) / DT).collect();
    if accel.iter().any(|a| a.abs() > COMFORT_ACCEL) {
        out.push("acceleration outside comfort bound".into());
    }
    if accel.windows(2).any(|w| ((w[1] - w[0]) / DT).abs() > COMFORT_JERK) {
        out.push("jerk outside comfort bound".into());
    }
    let route = rec.route.path();
    for t in current..EPISODE_LEN {
        let s = &states[t];
        if s.v > rec.speed_limit + SPEED_TOLERANCE {
            out.push(format!("step {t}: speeding"));
        }
        if boxes[t].corners().iter().any(|&c| route.project(c).1.abs() > rec.route.half_width) {
            out.push(format!("step {t}: outside route corridor"));
        }
        if s.v > STOPPED_SPEED {
            let others: Vec<(OrientedBox, [f64; 2])> = rec
                .agents
                .iter()
                .filter(|a| a.valid[t])
                .map(|a| {
                    let st = a.state(t);
                    (st.footprint(a.length, a.width), st.velocity())
                })
                .chain(rec.static_obstacles.iter().map(|b| (*b, [0.0, 0.0])))
                .collect();
            let ttc =
                forward_time_to_collision(&boxes[t], s.velocity(), others.iter().map(|(b, v)| (b, *v)), TTC_HORIZON);
            if ttc.is_some_and(|x| x < TTC_THRESHOLD) {
                out.push(format!("step {t}: time-to-collision {:.2}", ttc.unwrap()));
            }
        }
    }
    out
}

struct Actor {
    path: Path,
    s: f64,
    v: f64,
    a: Option<f64>,
    length: f64,
    width: f64,
    v_des: f64,
    /// Held at standstill before this step.
    hold_until: usize,
    /// Step at which to start braking, and the target deceleration.
    brake: Option<(usize, f64)>,
    jerk_limit: Option<f64>,
    states: Vec<State>,
}

impl Actor {
    fn new(path: Path, s: f64, v: f64, length: f64, width: f64, v_des: f64) -> Self {
        let p = path.point_at(s);
        let h = path.heading_at(s);
        Actor {
            s,
            v,
            a: None,
            length,
            width,
            v_des,
            hold_until: 0,
            brake: None,
            jerk_limit: None,
            states: vec![State::new(p[0], p[1], h, v)],
            path,
        }
    }

    fn parked(path: Path, s: f64, length: f64, width: f64) -> Self {
        let mut a = Actor::new(path, s, 0.0, length, width, 1.0);
        a.hold_until = usize::MAX;
        a
    }

    fn ego(path: Path, s: f64, v: f64, v_des: f64) -> Self {
        let mut a = Actor::new(path, s, v, EGO_LENGTH, EGO_WIDTH, v_des);
        a.jerk_limit = Some(EGO_JERK);
        a
    }

    fn current(&self) -> &State {
        self.states.last().unwrap()
    }
}

pub(crate) fn idm(v: f64, v_des: f64, leader: Option<(f64, f64)>) -> f64 {
    let free = 1.0 - (v / v_des.max(0.1)).powi(4);
    let interaction = leader.map_or(0.0, |(gap, vl)| {
        let s_star = IDM_S0 + (v * IDM_T + v * (v - vl) / (2.0 * (IDM_A_MAX * IDM_B).sqrt())).max(0.0);
        (s_star / gap.max(0.1)).powi(2)
    });
    IDM_A_MAX * (free - interaction)
}

/// Closest object ahead in the actor's lane: (bumper gap, speed along path).
fn leader(i: usize, actors: &[Actor], obstacles: &[OrientedBox]) -> Option<(f64, f64)> {
    let me = &actors[i];
    let mut best: Option<(f64, f64)> = None;
    let mut consider = |pos: [f64; 2], heading: f64, speed: f64, length: f64| {
        let (s, lat) = me.path.project(pos);
        if s <= me.s + 0.1 || lat.abs() >= IN_LANE || s - me.s > 100.0 {
            return;
        }
        let gap = s - me.s - (me.length + length) / 2.0;
        let along = speed * (heading - me.path.heading_at(s)).cos();
        if best.is_none_or(|(g, _)| gap < g) {
            best = Some((gap, along));
        }
    };
    for (j, other) in actors.iter().enumerate() {
        if j != i {
            let st = other.current();
            consider(st.position(), st.heading, st.v, other.length);
        }
    }
    for b in obstacles {
        consider([b.x, b.y], b.heading, 0.0, b.length);
    }
    best
}

fn simulate(actors: &mut [Actor], obstacles: &[OrientedBox]) {
    for t in 0..EPISODE_LEN - 1 {
        let accels: Vec<Option<f64>> = (0..actors.len())
            .map(|i| {
                let me = &actors[i];
                if t < me.hold_until {
                    return None;
                }
                let mut a = match me.brake {
                    Some((start, decel)) if t >= start => (me.a.unwrap_or(0.0) - 2.0 * DT).max(-decel),
                    _ => idm(me.v, me.v_des, leader(i, actors, obstacles)),
                };
                if let Some(j) = me.jerk_limit {
                    a = a.clamp(EGO_ACCEL.0, EGO_ACCEL.1);
                    if let Some(prev) = me.a {
                        a = a.clamp(prev - j * DT, prev + j * DT);
                    }
                }
                Some(a)
            })
            .collect();
        for (actor, a) in actors.iter_mut().zip(accels) {
            let prev = *actor.current();
            match a {
                None => {
                    actor.v = 0.0;
                    actor.a = Some(0.0);
                }
                Some(a) => {
                    actor.v = (actor.v + a * DT).max(0.0);
                    actor.a = Some(a);
                    actor.s += actor.v * DT;
                }
            }
            let p = actor.path.point_at(actor.s);
            let (dx, dy) = (p[0] - prev.x, p[1] - prev.y);
            let heading = if dx.hypot(dy) > 1e-6 { dy.atan2(dx) } else { prev.heading };
            actor.states.push(State::new(p[0], p[1], heading, actor.v));
        }
    }
}

struct Setup {
    actors: Vec<Actor>,
    obstacles: Vec<OrientedBox>,
    route: Path,
    /// Map lines with the arc length at which their segments should start.
    lines: Vec<(Path, bool, MapWindow)>,
    speed_limit: f64,
}

/// Where along a map line the exported segments begin.
enum MapWindow {
    /// 20 m behind the ego's current projection.
    AroundEgo,
    /// A fixed arc length and segment count.
    Span(f64, usize),
}

impl Setup {
    fn into_record(self, kind: ScenarioType, id: &str, road: &RoadConfig) -> ScenarioRecord {
        let ego = &self.actors[0];
        let ego_now = ego.states[HISTORY_LEN - 1];
        let mut map_polylines = Vec::new();
        for (path, boundary, window) in &self.lines {
            let (start, count) = match window {
                MapWindow::AroundEgo => ((path.project(ego_now.position()).0 - 20.0).max(0.0), SEGMENTS_PER_LINE),
                MapWindow::Span(s, n) => (*s, *n),
            };
            for k in 0..count {
                let s0 = start + k as f64 * SEGMENT_SPACING * (POLYLINE_POINTS - 1) as f64;
                if s0 >= path.length() {
                    break;
                }
                map_polylines.push(MapPolyline {
                    points: path.sample(s0, SEGMENT_SPACING, POLYLINE_POINTS),
                    boundary: *boundary,
                });
            }
        }
        map_polylines.truncate(MAX_POLYLINES);
        let agents = self.actors[1..]
            .iter()
            .take(MAX_AGENTS)
            .map(|a| AgentTrack {
                length: a.length,
                width: a.width,
                history: a.states[..HISTORY_LEN].to_vec(),
                future: a.states[HISTORY_LEN..].to_vec(),
                valid: vec![true; EPISODE_LEN],
            })
            .collect();
        let n_route = (self.route.length() / 2.0).floor() as usize + 1;
        ScenarioRecord {
            schema_version: SCHEMA_VERSION,
            id: id.to_string(),
            scenario_type: kind,
            ego_history: ego.states[..HISTORY_LEN].to_vec(),
            ego_future: ego.states[HISTORY_LEN..].to_vec(),
            agents,
            map_polylines,
            static_obstacles: self.obstacles.into_iter().take(MAX_OBSTACLES).collect(),
            route: RouteCorridor { centerline: self.route.sample(0.0, 2.0, n_route), half_width: road.corridor_half_width },
            speed_limit: self.speed_limit,
        }
    }
}

const ROAD_START: f64 = -60.0;
const ROAD_END: f64 = 240.0;

fn straight_line(y: f64) -> Path {
    let n = (ROAD_END - ROAD_START) as usize;
    Path::new(&(0..=n).map(|i| [ROAD_START + i as f64, y]).collect::<Vec<_>>())
}

fn vehicle_size(rng: &mut impl Rng) -> (f64, f64) {
    (rng.random_range(4.2..5.0), rng.random_range(1.75..2.0))
}

fn speed_limit(road: &RoadConfig, rng: &mut impl Rng) -> f64 {
    road.speed_limits[rng.random_range(0..road.speed_limits.len())]
}

/// Lanes of a straight two-lane road: centerlines and three boundaries.
fn two_lane_map(road: &RoadConfig) -> Vec<(Path, bool, MapWindow)> {
    let w = road.lane_width;
    vec![
        (straight_line(0.0), false, MapWindow::AroundEgo),
        (straight_line(w), false, MapWindow::AroundEgo),
        (straight_line(-w / 2.0), true, MapWindow::AroundEgo),
        (straight_line(w / 2.0), true, MapWindow::AroundEgo),
        (straight_line(1.5 * w), true, MapWindow::AroundEgo),
    ]
}

/// IDM traffic in the left lane between `x_from` and `x_to`.
fn left_lane_traffic(road: &RoadConfig, rng: &mut impl Rng, limit: f64, x_from: f64, x_to: f64, max: usize) -> Vec<Actor> {
    let n = rng.random_range(0..=max);
    let lane = straight_line(road.lane_width);
    let mut out = Vec::new();
    let mut x = x_from + rng.random_range(0.0..15.0);
    for _ in 0..n {
        if x > x_to {
            break;
        }
        let (l, w) = vehicle_size(rng);
        let v = rng.random_range(0.6..1.0) * limit;
        out.push(Actor::new(lane.clone(), x - ROAD_START, v, l, w, v));
        x += rng.random_range(20.0..45.0);
    }
    out
}

fn shoulder_parking(road: &RoadConfig, rng: &mut impl Rng, x_from: f64, x_to: f64, max: usize) -> Vec<OrientedBox> {
    let n = rng.random_range(0..=max);
    let y = -road.lane_width / 2.0 - 1.8;
    let mut out: Vec<OrientedBox> = Vec::new();
    for _ in 0..n {
        let x = rng.random_range(x_from..x_to);
        if out.iter().all(|b| (b.x - x).abs() > 7.0) {
            out.push(OrientedBox::new(x, y, 0.0, 4.5, 1.9));
        }
    }
    out
}

fn stationary(road: &RoadConfig, rng: &mut impl Rng) -> Setup {
    let limit = speed_limit(road, rng);
    let lane = straight_line(0.0);
    let x0 = rng.random_range(-5.0..10.0);
    let mut ego = Actor::ego(lane.clone(), x0 - ROAD_START, 0.0, limit - 0.3);
    ego.hold_until = usize::MAX;
    let mut actors = vec![ego];
    let mut front = x0 + EGO_LENGTH / 2.0;
    for k in 0..rng.random_range(1..=3) {
        let (l, w) = vehicle_size(rng);
        let gap = if k == 0 { rng.random_range(2.0..5.0) } else { rng.random_range(1.5..4.0) };
        let x = front + gap + l / 2.0;
        actors.push(Actor::parked(lane.clone(), x - ROAD_START, l, w));
        front = x + l / 2.0;
    }
    actors.extend(left_lane_traffic(road, rng, limit, x0 - 40.0, x0 + 80.0, 3));
    Setup {
        actors,
        obstacles: shoulder_parking(road, rng, x0 - 20.0, x0 + 100.0, 2),
        route: lane,
        lines: two_lane_map(road),
        speed_limit: limit,
    }
}

fn lead_follow(road: &RoadConfig, rng: &mut impl Rng, braking: bool) -> Setup {
    let limit = speed_limit(road, rng);
    let lane = straight_line(0.0);
    let x0 = rng.random_range(-5.0..5.0);
    let v0 = rng.random_range(4.0..limit - 1.0);
    let ego = Actor::ego(lane.clone(), x0 - ROAD_START, v0, limit - 0.3);
    let (l, w) = vehicle_size(rng);
    let v_lead = rng.random_range((v0 - 2.0).max(2.0)..(v0 + 1.0).min(limit - 0.3));
    let gap = IDM_S0 + v0 * rng.random_range(1.2..2.0);
    let x_lead = x0 + EGO_LENGTH / 2.0 + gap + l / 2.0;
    let mut lead = Actor::new(lane.clone(), x_lead - ROAD_START, v_lead, l, w, v_lead);
    if braking {
        lead.brake = Some((rng.random_range(HISTORY_LEN + 5..HISTORY_LEN + 35), rng.random_range(1.0..2.2)));
    }
    let mut actors = vec![ego, lead];
    actors.extend(left_lane_traffic(road, rng, limit, x0 - 40.0, x0 + 80.0, 3));
    Setup {
        actors,
        obstacles: shoulder_parking(road, rng, x0, x0 + 120.0, 2),
        route: lane,
        lines: two_lane_map(road),
        speed_limit: limit,
    }
}

fn intersection_turn(road: &RoadConfig, rng: &mut impl Rng) -> Setup {
    let limit = speed_limit(road, rng);
    let r = rng.random_range(road.turn_radius[0]..=road.turn_radius[1]);
    let side: f64 = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    // approach along +x to the stop line at x = 0, then a quarter turn
    let mut pts: Vec<[f64; 2]> = (0..=60).map(|i| [-60.0 + i as f64, 0.0]).collect();
    let arc_n = (FRAC_PI_2 * r).ceil() as usize;
    for k in 1..=arc_n {
        let phi = FRAC_PI_2 * k as f64 / arc_n as f64;
        pts.push([r * phi.sin(), side * r * (1.0 - phi.cos())]);
    }
    for k in 1..=140 {
        pts.push([r, side * (r + k as f64)]);
    }
    let route = Path::new(&pts);

    let x0 = -rng.random_range(4.0..12.0);
    let v_des = (limit - 0.3).min(0.4 * r);
    let mut ego = Actor::ego(route.clone(), route.project([x0, 0.0]).0, 0.0, v_des);

    // crossing traffic on the far lane of the cross street, heading away
    // from the turn direction
    let x_cross = r - road.lane_width;
    let cross_lane = Path::new(&[[x_cross, side * 120.0], [x_cross, -side * 120.0]]);
    let mut actors = Vec::new();
    let mut t_clear: f64 = 0.0;
    let v_c = rng.random_range(6.0..10.0);
    let mut t_cross = rng.random_range(0.3..1.8);
    for _ in 0..rng.random_range(1..=2) {
        let (l, w) = vehicle_size(rng);
        let s0 = 120.0 - v_c * t_cross;
        actors.push(Actor::new(cross_lane.clone(), s0, v_c, l, w, v_c));
        t_clear = t_clear.max(t_cross + (6.0 + l) / v_c);
        t_cross += rng.random_range(2.5..4.0);
    }
    ego.hold_until = ((t_clear + rng.random_range(0.3..1.5)) / DT).round() as usize;
    actors.insert(0, ego);

    let lines = vec![
        (route.clone(), false, MapWindow::AroundEgo),
        (route.offset(road.lane_width / 2.0), true, MapWindow::AroundEgo),
        (route.offset(-road.lane_width / 2.0), true, MapWindow::AroundEgo),
        (cross_lane, false, MapWindow::Span(60.0, SEGMENTS_PER_LINE)),
    ];
    Setup { actors, obstacles: Vec::new(), route, lines, speed_limit: limit }
}

fn lane_change(road: &RoadConfig, rng: &mut impl Rng) -> Setup {
    let limit = speed_limit(road, rng);
    let w = road.lane_width;
    let x0 = rng.random_range(-5.0..5.0);
    let v0 = rng.random_range(6.0..(limit - 0.5).min(10.0));
    let x_obs = x0 + rng.random_range(75.0..95.0);
    let (x_s, shift) = (x_obs - 55.0, 40.0);
    let n = (ROAD_END - ROAD_START) as usize;
    let pts: Vec<[f64; 2]> = (0..=n)
        .map(|i| {
            let x = ROAD_START + i as f64;
            let y = if x < x_s {
                0.0
            } else if x < x_s + shift {
                w / 2.0 * (1.0 - (PI * (x - x_s) / shift).cos())
            } else {
                w
            };
            [x, y]
        })
        .collect();
    let route = Path::new(&pts);
    let ego = Actor::ego(route.clone(), route.project([x0, 0.0]).0, v0, limit - 0.3);
    let mut actors = vec![ego];
    let lane1 = straight_line(w);
    let mut x = x0 + rng.random_range(50.0..70.0);
    for _ in 0..rng.random_range(0..=2) {
        let (l, wd) = vehicle_size(rng);
        let v = rng.random_range((v0 + 1.0).min(limit)..=limit);
        actors.push(Actor::new(lane1.clone(), x - ROAD_START, v, l, wd, v));
        x += rng.random_range(25.0..45.0);
    }
    let mut obstacles = vec![OrientedBox::new(x_obs, 0.0, 0.0, 4.5, 1.9)];
    obstacles.extend(shoulder_parking(road, rng, x0, x0 + 120.0, 2));
    Setup { actors, obstacles, route, lines: two_lane_map(road), speed_limit: limit }
}

fn yield_merge(road: &RoadConfig, rng: &mut impl Rng) -> Setup {
    let limit = speed_limit(road, rng);
    let lane = straight_line(0.0);
    let x0 = rng.random_range(-5.0..5.0);
    let mut ego = Actor::ego(lane.clone(), x0 - ROAD_START, 0.0, limit - 0.3);

    // on-ramp from the right joining the ego lane ahead of the ego
    let x_join = x0 + rng.random_range(14.0..22.0);
    let ang = 20f64.to_radians();
    let ramp_len = 60.0;
    let mut pts: Vec<[f64; 2]> = (0..=ramp_len as usize)
        .map(|k| {
            let d = ramp_len - k as f64;
            [x_join - d * ang.cos(), -d * ang.sin()]
        })
        .collect();
    pts.extend((1..=200).map(|k| [x_join + k as f64, 0.0]));
    let ramp = Path::new(&pts);
    let v_m = rng.random_range(5.0..9.0);
    let t_join = rng.random_range(0.2..1.5);
    let (l, w) = vehicle_size(rng);
    let merger = Actor::new(ramp.clone(), ramp_len - v_m * t_join, v_m, l, w, v_m);
    ego.hold_until = ((t_join + rng.random_range(0.8..2.0)) / DT).round() as usize;

    let mut actors = vec![ego, merger];
    actors.extend(left_lane_traffic(road, rng, limit, x0 - 40.0, x0 + 80.0, 2));
    let mut lines = two_lane_map(road);
    // only the ramp itself, not the part that overlaps the ego lane
    lines.push((ramp, false, MapWindow::Span(ramp_len - 36.0, 1)));
    Setup { actors, obstacles: Vec::new(), route: lane, lines, speed_limit: limit }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, seed: u64) -> GenConfig {
        GenConfig { n_records: n, seed, ..GenConfig::default() }
    }

    #[test]
    fn default_fractions_allocate_exactly() {
        let counts = small(1000, 0).allocate();
        assert_eq!(counts[&ScenarioType::Stationary], 450);
        assert_eq!(counts.values().sum::<usize>(), 1000);
        let counts = small(7, 0).allocate();
        assert_eq!(counts.values().sum::<usize>(), 7);
    }

    #[test]
    fn fractions_must_sum_to_one() {
        let mut cfg = small(10, 0);
        *cfg.fractions.get_mut(&ScenarioType::Stationary).unwrap() = 0.5;
        assert!(matches!(generate_dataset(&cfg), Err(GenError::FractionSum(_))));
    }

    #[test]
    fn every_type_generates_clean_experts() {
        let road = RoadConfig::default();
        for kind in ScenarioType::ALL {
            for i in 0..8 {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(42, &[kind.index() as u64, i]));
                let rec = generate_record(kind, "t", &road, &mut rng).unwrap();
                assert!(expert_violations(&rec).is_empty());
                rec.validate().unwrap();
                assert!(rec.map_polylines.len() <= MAX_POLYLINES);
                let moved = rec.ego_future.last().unwrap().x - rec.current_ego().x;
                if kind.is_moving() {
                    assert!(rec.ego_future.iter().any(|s| s.v > 1.0), "{kind} never moves");
                } else {
                    assert_eq!(moved, 0.0);
                }
            }
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate_dataset(&small(30, 9)).unwrap().0;
        let b = generate_dataset(&small(30, 9)).unwrap().0;
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = generate_dataset(&small(30, 10)).unwrap().0;
        assert_ne!(a, c);
    }

    #[test]
    fn manifest_marks_stationary_dominant() {
        let (_, manifest) = generate_dataset(&small(100, 1)).unwrap();
        assert_eq!(manifest.counts[&ScenarioType::Stationary], 45);
        assert_eq!(manifest.dominant_set, vec![ScenarioType::Stationary, ScenarioType::LeadFollow]);
    }
}
