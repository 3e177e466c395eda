//! Raw per-token features (ego frame) and their embedding into `X0`.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{MapPolyline, ScenarioRecord, State, DT, HISTORY_LEN, MAX_AGENTS, MAX_OBSTACLES, MAX_POLYLINES};
use crate::autodiff::{AutodiffError, Tensor, Var};
use crate::geometry::{OrientedBox, Path, Pose};
use crate::nn::{Graph, Mlp, ParamId, ParamStore};

const ROUTE_POINTS: usize = 10;
const ROUTE_SPACING: f64 = 5.0;
const POS_SCALE: f64 = 20.0;
const SPEED_SCALE: f64 = 10.0;

pub const EGO_FEATS: usize = 3 + 2 * ROUTE_POINTS;
pub const AGENT_FEATS: usize = 5 * HISTORY_LEN + 2;
pub const MAP_FEATS: usize = 3 * super::POLYLINE_POINTS;
pub const OBSTACLE_FEATS: usize = 6;

pub const CLASS_EGO: usize = 0;
pub const CLASS_AGENT: usize = 1;
pub const CLASS_CENTERLINE: usize = 2;
pub const CLASS_BOUNDARY: usize = 3;
pub const CLASS_OBSTACLE: usize = 4;
const NUM_CLASSES: usize = 5;

/// Token slots per category; the ego always takes exactly one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBudget {
    pub agents: usize,
    pub polylines: usize,
    pub obstacles: usize,
}

impl Default for TokenBudget {
    fn default() -> Self {
        TokenBudget { agents: MAX_AGENTS, polylines: MAX_POLYLINES, obstacles: MAX_OBSTACLES }
    }
}

impl TokenBudget {
    pub fn len(&self) -> usize {
        1 + self.agents + self.polylines + self.obstacles
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn ranges(&self) -> CategoryRanges {
        CategoryRanges::from_counts(self.agents, self.polylines, self.obstacles)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryRanges {
    pub ego: Range<usize>,
    pub agents: Range<usize>,
    pub map: Range<usize>,
    pub obstacles: Range<usize>,
}

impl CategoryRanges {
    pub fn from_counts(agents: usize, map: usize, obstacles: usize) -> Self {
        let a0 = 1;
        let m0 = a0 + agents;
        let o0 = m0 + map;
        CategoryRanges { ego: 0..1, agents: a0..m0, map: m0..o0, obstacles: o0..o0 + obstacles }
    }

    pub fn len(&self) -> usize {
        self.obstacles.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The prunable categories in token order.
    pub fn prunable(&self) -> [Range<usize>; 3] {
        [self.agents.clone(), self.map.clone(), self.obstacles.clone()]
    }
}

/// One observed agent: per-step states over the history window, oldest
/// first, `None` where unobserved.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentObs {
    pub length: f64,
    pub width: f64,
    pub history: Vec<Option<State>>,
}

/// What the planner sees at one instant.
#[derive(Clone, Debug)]
pub struct Observation<'a> {
    /// Ego states, oldest first; the last one is the current state.
    pub ego_history: Vec<State>,
    pub agents: Vec<AgentObs>,
    pub map: &'a [MapPolyline],
    pub obstacles: &'a [OrientedBox],
    pub route: &'a Path,
    pub speed_limit: f64,
}

impl<'a> Observation<'a> {
    /// The logged observation at the record's current step.
    pub fn from_record(rec: &'a ScenarioRecord, route: &'a Path) -> Self {
        let agents = rec
            .agents
            .iter()
            .map(|a| AgentObs {
                length: a.length,
                width: a.width,
                history: (0..HISTORY_LEN).map(|t| a.valid[t].then(|| a.history[t])).collect(),
            })
            .collect();
        Observation {
            ego_history: rec.ego_history.clone(),
            agents,
            map: &rec.map_polylines,
            obstacles: &rec.static_obstacles,
            route,
            speed_limit: rec.speed_limit,
        }
    }
}

/// Featurised scene: per-category raw feature matrices plus token metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct RawScene {
    pub budget: TokenBudget,
    pub ego: Tensor,
    pub agents: Tensor,
    pub map: Tensor,
    pub obstacles: Tensor,
    pub valid: Vec<bool>,
    pub anchors: Vec<[f64; 2]>,
    pub classes: Vec<usize>,
}

impl RawScene {
    pub fn from_record(rec: &ScenarioRecord, budget: &TokenBudget) -> Self {
        let route = rec.route.path();
        featurize(&Observation::from_record(rec, &route), budget)
    }

    pub fn ranges(&self) -> CategoryRanges {
        self.budget.ranges()
    }
}

fn local(pose: &Pose, p: [f64; 2]) -> [f64; 2] {
    pose.to_local(p)
}

/// Ego-frame features at the observation's current instant.
pub fn featurize(obs: &Observation, budget: &TokenBudget) -> RawScene {
    let n = budget.len();
    let ranges = budget.ranges();
    let cur = *obs.ego_history.last().expect("ego history is non-empty");
    let pose = cur.pose();
    let mut valid = vec![false; n];
    let mut anchors = vec![[0.0; 2]; n];
    let mut classes = vec![0; n];

    // ego
    let prev_v = if obs.ego_history.len() >= 2 { obs.ego_history[obs.ego_history.len() - 2].v } else { cur.v };
    let mut ego = vec![cur.v / SPEED_SCALE, (cur.v - prev_v) / DT / 2.0, obs.speed_limit / SPEED_SCALE];
    let (s_now, _) = obs.route.project(cur.position());
    for k in 1..=ROUTE_POINTS {
        let p = local(&pose, obs.route.point_at(s_now + ROUTE_SPACING * k as f64));
        ego.push(p[0] / POS_SCALE);
        ego.push(p[1] / POS_SCALE);
    }
    valid[0] = true;
    classes[0] = CLASS_EGO;

    // agents
    let mut agents = vec![0.0; budget.agents * AGENT_FEATS];
    for (slot, a) in obs.agents.iter().take(budget.agents).enumerate() {
        let tok = ranges.agents.start + slot;
        classes[tok] = CLASS_AGENT;
        let Some(last) = a.history.iter().rev().flatten().next() else { continue };
        valid[tok] = true;
        anchors[tok] = local(&pose, last.position());
        let row = &mut agents[slot * AGENT_FEATS..(slot + 1) * AGENT_FEATS];
        for (k, st) in a.history.iter().enumerate().take(HISTORY_LEN) {
            if let Some(st) = st {
                let p = local(&pose, st.position());
                let h = pose.heading_to_local(st.heading);
                row[5 * k..5 * k + 5]
                    .copy_from_slice(&[p[0] / POS_SCALE, p[1] / POS_SCALE, h.cos(), h.sin(), st.v / SPEED_SCALE]);
            }
        }
        row[5 * HISTORY_LEN] = a.length / 5.0;
        row[5 * HISTORY_LEN + 1] = a.width / 2.0;
    }
    for slot in obs.agents.len()..budget.agents {
        classes[ranges.agents.start + slot] = CLASS_AGENT;
    }

    // map
    let mut map = vec![0.0; budget.polylines * MAP_FEATS];
    for slot in 0..budget.polylines {
        let tok = ranges.map.start + slot;
        classes[tok] = CLASS_CENTERLINE;
        let Some(pl) = obs.map.get(slot) else { continue };
        valid[tok] = true;
        classes[tok] = if pl.boundary { CLASS_BOUNDARY } else { CLASS_CENTERLINE };
        let flag = if pl.boundary { 1.0 } else { 0.0 };
        let row = &mut map[slot * MAP_FEATS..(slot + 1) * MAP_FEATS];
        for (k, &p) in pl.points.iter().enumerate() {
            let q = local(&pose, p);
            row[3 * k..3 * k + 3].copy_from_slice(&[q[0] / POS_SCALE, q[1] / POS_SCALE, flag]);
        }
        anchors[tok] = local(&pose, pl.points[pl.points.len() / 2]);
    }

    // obstacles
    let mut obstacles = vec![0.0; budget.obstacles * OBSTACLE_FEATS];
    for slot in 0..budget.obstacles {
        let tok = ranges.obstacles.start + slot;
        classes[tok] = CLASS_OBSTACLE;
        let Some(b) = obs.obstacles.get(slot) else { continue };
        valid[tok] = true;
        let q = local(&pose, [b.x, b.y]);
        let h = pose.heading_to_local(b.heading);
        obstacles[slot * OBSTACLE_FEATS..(slot + 1) * OBSTACLE_FEATS].copy_from_slice(&[
            q[0] / POS_SCALE,
            q[1] / POS_SCALE,
            h.cos(),
            h.sin(),
            b.length / 5.0,
            b.width / 2.0,
        ]);
        anchors[tok] = q;
    }

    let mat = |rows: usize, cols: usize, data: Vec<f64>| Tensor::new(vec![rows, cols], data).expect("feature shape");
    RawScene {
        budget: *budget,
        ego: mat(1, EGO_FEATS, ego),
        agents: mat(budget.agents, AGENT_FEATS, agents),
        map: mat(budget.polylines, MAP_FEATS, map),
        obstacles: mat(budget.obstacles, OBSTACLE_FEATS, obstacles),
        valid,
        anchors,
        classes,
    }
}

/// Frozen random Fourier features of a 2-D position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourierEmbedding {
    /// `2 × D/2` projection, cycles per metre.
    pub projection: Tensor,
}

impl FourierEmbedding {
    pub const DEFAULT_SIGMA: f64 = 0.05;

    pub fn new(dim: usize, sigma: f64, rng: &mut impl Rng) -> Self {
        assert!(dim % 2 == 0, "Fourier embedding dimension must be even");
        let normal = Normal::new(0.0, sigma).expect("sigma must be positive");
        let data = (0..dim).map(|_| normal.sample(rng)).collect();
        FourierEmbedding { projection: Tensor::new(vec![2, dim / 2], data).expect("shape") }
    }

    pub fn dim(&self) -> usize {
        2 * self.projection.cols()
    }

    /// `[sin(2π Bᵀp), cos(2π Bᵀp)]`.
    pub fn embed(&self, p: [f64; 2]) -> Vec<f64> {
        let half = self.projection.cols();
        let (b0, b1) = (self.projection.row(0), self.projection.row(1));
        let phase: Vec<f64> = (0..half).map(|j| std::f64::consts::TAU * (p[0] * b0[j] + p[1] * b1[j])).collect();
        phase.iter().map(|a| a.sin()).chain(phase.iter().map(|a| a.cos())).collect()
    }
}

/// Category encoders, class embedding and positional embedding.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneEmbedder {
    pub dim: usize,
    pub ego: Mlp,
    pub agent: Mlp,
    pub map: Mlp,
    pub obstacle: Mlp,
    pub class_embedding: ParamId,
    pub fourier: FourierEmbedding,
}

impl SceneEmbedder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, dim: usize) -> Self {
        let ego = Mlp::new(store, rng, "embed.ego", EGO_FEATS, dim, dim);
        let agent = Mlp::new(store, rng, "embed.agent", AGENT_FEATS, dim, dim);
        let map = Mlp::new(store, rng, "embed.map", MAP_FEATS, dim, dim);
        let obstacle = Mlp::new(store, rng, "embed.obstacle", OBSTACLE_FEATS, dim, dim);
        let normal = Normal::new(0.0, 0.02).expect("std");
        let cls = Tensor::new(vec![NUM_CLASSES, dim], (0..NUM_CLASSES * dim).map(|_| normal.sample(rng)).collect())
            .expect("shape");
        let class_embedding = store.add("embed.class", cls);
        let fourier = FourierEmbedding::new(dim, FourierEmbedding::DEFAULT_SIGMA, rng);
        SceneEmbedder { dim, ego, agent, map, obstacle, class_embedding, fourier }
    }

    /// Positional embedding rows for all anchors, `L × D`.
    pub fn positional(&self, anchors: &[[f64; 2]]) -> Tensor {
        let data: Vec<f64> = anchors.iter().flat_map(|&a| self.fourier.embed(a)).collect();
        Tensor::new(vec![anchors.len(), self.dim], data).expect("shape")
    }
}

/// The initial token matrix on a graph, with its metadata.
#[derive(Clone, Debug)]
pub struct SceneTokens {
    pub x0: Var,
    pub ranges: CategoryRanges,
    pub valid: Vec<bool>,
    pub anchors: Vec<[f64; 2]>,
}

/// `X0 = concat(X_EV, X_A, X_M, X_O) + X_PE + X_LE`; invalid rows carry
/// only the positional and class terms.
pub fn encode_scene(g: &mut Graph, emb: &SceneEmbedder, raw: &RawScene) -> Result<SceneTokens, AutodiffError> {
    let ranges = raw.ranges();
    let cats: [(&Mlp, &Tensor, Range<usize>); 4] = [
        (&emb.ego, &raw.ego, ranges.ego.clone()),
        (&emb.agent, &raw.agents, ranges.agents.clone()),
        (&emb.map, &raw.map, ranges.map.clone()),
        (&emb.obstacle, &raw.obstacles, ranges.obstacles.clone()),
    ];
    let mut parts = Vec::with_capacity(4);
    for (mlp, feats, range) in cats {
        if range.is_empty() {
            continue;
        }
        let x = g.tape.constant(feats.clone());
        let h = mlp.forward(g, x)?;
        let index: Vec<Option<usize>> = range.clone().map(|i| raw.valid[i].then_some(i - range.start)).collect();
        parts.push(if index.iter().all(Option::is_some) { h } else { g.tape.gather_rows(h, &index)? });
    }
    let content = g.tape.concat_rows(&parts)?;
    let pe = g.tape.constant(emb.positional(&raw.anchors));
    let table = g.p(emb.class_embedding);
    let class_index: Vec<Option<usize>> = raw.classes.iter().map(|&c| Some(c)).collect();
    let cls = g.tape.gather_rows(table, &class_index)?;
    let x = g.tape.add(content, pe)?;
    let x0 = g.tape.add(x, cls)?;
    Ok(SceneTokens { x0, ranges, valid: raw.valid.clone(), anchors: raw.anchors.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_dataset, GenConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_record() -> ScenarioRecord {
        let cfg = GenConfig { n_records: 12, seed: 3, ..GenConfig::default() };
        let (recs, _) = generate_dataset(&cfg).unwrap();
        recs.into_iter().find(|r| r.agents.len() >= 2).expect("a record with two agents")
    }

    #[test]
    fn fourier_at_origin_is_sin_zero_cos_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = FourierEmbedding::new(16, 0.05, &mut rng);
        let e = f.embed([0.0, 0.0]);
        assert!(e[..8].iter().all(|&v| v == 0.0));
        assert!(e[8..].iter().all(|&v| v == 1.0));
        assert_eq!(f.embed([3.0, -1.0]), f.embed([3.0, -1.0]));
    }

    #[test]
    fn fourier_is_lipschitz_near_a_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = FourierEmbedding::new(64, 0.05, &mut rng);
        let p = [12.5, -7.25];
        let q = [p[0] + 0.6e-6, p[1] + 0.8e-6];
        let worst = f.embed(p).iter().zip(f.embed(q)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn encoded_scene_has_fixed_shape_and_ranges() {
        let rec = sample_record();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let emb = SceneEmbedder::new(&mut store, &mut rng, 16);
        let raw = RawScene::from_record(&rec, &TokenBudget::default());
        let mut g = Graph::new(&store);
        let tokens = encode_scene(&mut g, &emb, &raw).unwrap();
        assert_eq!(g.tape.shape(tokens.x0), &[49, 16]);
        assert_eq!(tokens.ranges, CategoryRanges { ego: 0..1, agents: 1..17, map: 17..41, obstacles: 41..49 });
        assert!(tokens.valid[0]);
    }

    #[test]
    fn empty_agent_slots_hold_only_position_and_class_terms() {
        let mut rec = sample_record();
        rec.agents.clear();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let emb = SceneEmbedder::new(&mut store, &mut rng, 16);
        let raw = RawScene::from_record(&rec, &TokenBudget::default());
        let mut g = Graph::new(&store);
        let tokens = encode_scene(&mut g, &emb, &raw).unwrap();
        let x0 = g.tape.value(tokens.x0).clone();
        let pad = emb.fourier.embed([0.0, 0.0]);
        let cls = store.get(emb.class_embedding).row(CLASS_AGENT).to_vec();
        for i in 1..17 {
            assert!(!tokens.valid[i]);
            let expect: Vec<f64> = pad.iter().zip(&cls).map(|(a, b)| a + b).collect();
            assert_eq!(x0.row(i), expect.as_slice());
        }
    }

    #[test]
    fn swapping_agents_permutes_rows() {
        let rec = sample_record();
        let mut swapped = rec.clone();
        swapped.agents.swap(0, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let emb = SceneEmbedder::new(&mut store, &mut rng, 16);
        let run = |r: &ScenarioRecord| {
            let raw = RawScene::from_record(r, &TokenBudget::default());
            let mut g = Graph::new(&store);
            let t = encode_scene(&mut g, &emb, &raw).unwrap();
            g.tape.value(t.x0).clone()
        };
        let (a, b) = (run(&rec), run(&swapped));
        for i in 0..49 {
            let j = match i {
                1 => 2,
                2 => 1,
                _ => i,
            };
            assert_eq!(a.row(i), b.row(j), "row {i}");
        }
    }
}
