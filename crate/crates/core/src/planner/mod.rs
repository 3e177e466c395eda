//! Planner model (scene embedder, encoder, decoder, scenario classifier),
//! supervision targets and imitation losses.

mod train;

pub use train::{
    forward_batch, learning_rate, write_log_csv, BatchForward, BatchResult, Checkpoint, Relevance, SecondBranch,
    StepLog, TrainConfig, TrainError, Trainer, CHECKPOINT_VERSION,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Tensor, Var};
use crate::csfi::ScenarioClassifier;
use crate::encoder::{Encoder, EncoderConfig};
use crate::geometry::wrap_angle;
use crate::nn::{Graph, LayerNorm, Linear, Mlp, ParamId, ParamStore};
use crate::scene::{
    encode_scene, CategoryRanges, RawScene, ScenarioRecord, ScenarioType, SceneEmbedder, TokenBudget, FUTURE_LEN,
    HISTORY_LEN,
};

pub const EGO_OUT: usize = FUTURE_LEN * 3;
pub const AGENT_OUT: usize = FUTURE_LEN * 2;
const POS_OUT_SCALE: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub budget: TokenBudget,
    /// Hidden width of the trajectory heads.
    pub head_hidden: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { encoder: EncoderConfig::default(), budget: TokenBudget::default(), head_hidden: 128, seed: 0 }
    }
}

/// Cross-attention decoder: a learned ego query reads the encoded tokens.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Decoder {
    pub query: ParamId,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln: LayerNorm,
    pub ego_head: Mlp,
    pub agent_head: Mlp,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl rand::Rng, dim: usize, hidden: usize) -> Self {
        Decoder {
            query: store.add("decoder.query", Tensor::zeros(&[1, dim])),
            wq: Linear::new(store, rng, "decoder.wq", dim, dim),
            wk: Linear::new(store, rng, "decoder.wk", dim, dim),
            wv: Linear::new(store, rng, "decoder.wv", dim, dim),
            wo: Linear::new(store, rng, "decoder.wo", dim, dim),
            ln: LayerNorm::new(store, "decoder.ln", dim),
            ego_head: Mlp::new(store, rng, "decoder.ego_head", dim, hidden, EGO_OUT),
            agent_head: Mlp::new(store, rng, "decoder.agent_head", dim, hidden, AGENT_OUT),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderOutput {
    /// `1 × 240`: (x, y, heading) per future step, ego frame.
    pub ego: Var,
    /// `n_agents × 160`: (x, y) per future step for each kept agent row.
    pub agents: Option<Var>,
}

fn scale_row(n: usize, pattern: &[f64]) -> Tensor {
    Tensor::vector((0..n).map(|i| pattern[i % pattern.len()]).collect())
}

pub fn decode(g: &mut Graph, dec: &Decoder, f: Var, ranges: &CategoryRanges) -> Result<DecoderOutput, AutodiffError> {
    let d = g.tape.shape(f)[1];
    let ego_tok = g.tape.gather_rows(f, &[Some(0)])?;
    let query = g.p(dec.query);
    let q0 = g.tape.add(ego_tok, query)?;
    let q = dec.wq.forward(g, q0)?;
    let k = dec.wk.forward(g, f)?;
    let v = dec.wv.forward(g, f)?;
    let kt = g.tape.transpose(k)?;
    let scores = g.tape.matmul(q, kt)?;
    let scores = g.tape.scale(scores, 1.0 / (d as f64).sqrt());
    let p = g.tape.softmax_rows(scores, None)?;
    let ctx = g.tape.matmul(p, v)?;
    let o = dec.wo.forward(g, ctx)?;
    let h = g.tape.add(q0, o)?;
    let h = dec.ln.forward(g, h)?;
    let ego = dec.ego_head.forward(g, h)?;
    let ego_scale = g.tape.constant(scale_row(EGO_OUT, &[POS_OUT_SCALE, POS_OUT_SCALE, 1.0]));
    let ego = g.tape.mul_row(ego, ego_scale)?;
    let agents = if ranges.agents.is_empty() {
        None
    } else {
        let rows: Vec<Option<usize>> = ranges.agents.clone().map(Some).collect();
        let a = g.tape.gather_rows(f, &rows)?;
        let a = dec.agent_head.forward(g, a)?;
        let s = g.tape.constant(scale_row(AGENT_OUT, &[POS_OUT_SCALE]));
        Some(g.tape.mul_row(a, s)?)
    };
    Ok(DecoderOutput { ego, agents })
}

/// Supervision for one record, all in the current ego frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub ego: Tensor,
    /// One row per agent slot of the token budget.
    pub agents: Tensor,
    pub agent_weight: Tensor,
}

impl Targets {
    pub fn from_record(rec: &ScenarioRecord, budget: &TokenBudget) -> Self {
        let pose = rec.current_ego().pose();
        let mut ego = Vec::with_capacity(EGO_OUT);
        for s in &rec.ego_future {
            let p = pose.to_local(s.position());
            ego.extend_from_slice(&[p[0], p[1], wrap_angle(pose.heading_to_local(s.heading))]);
        }
        let n = budget.agents;
        let mut agents = vec![0.0; n * AGENT_OUT];
        let mut weight = vec![0.0; n * AGENT_OUT];
        for (slot, a) in rec.agents.iter().take(n).enumerate() {
            for (t, s) in a.future.iter().enumerate() {
                if a.valid[HISTORY_LEN + t] {
                    let p = pose.to_local(s.position());
                    let o = slot * AGENT_OUT + 2 * t;
                    agents[o..o + 2].copy_from_slice(&p);
                    weight[o..o + 2].copy_from_slice(&[1.0, 1.0]);
                }
            }
        }
        Targets {
            ego: Tensor::new(vec![1, EGO_OUT], ego).unwrap(),
            agents: Tensor::new(vec![n, AGENT_OUT], agents).unwrap(),
            agent_weight: Tensor::new(vec![n, AGENT_OUT], weight).unwrap(),
        }
    }
}

/// Agent targets gathered into the encoder's kept order. `kept` holds
/// original token indices; `agent_start` is where the agent range begins.
pub fn reorder_agent_targets(
    kept: &[usize],
    agent_start: usize,
    targets: &Targets,
) -> Result<(Tensor, Tensor), AutodiffError> {
    let n = targets.agents.rows();
    let mut t = Vec::with_capacity(kept.len() * AGENT_OUT);
    let mut w = Vec::with_capacity(kept.len() * AGENT_OUT);
    for &k in kept {
        let slot = k.checked_sub(agent_start).filter(|&s| s < n).ok_or(AutodiffError::IndexOutOfRange {
            op: "reorder-agent-targets",
            index: k,
            len: n,
        })?;
        t.extend_from_slice(targets.agents.row(slot));
        w.extend_from_slice(targets.agent_weight.row(slot));
    }
    Ok((Tensor::new(vec![kept.len(), AGENT_OUT], t)?, Tensor::new(vec![kept.len(), AGENT_OUT], w)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub cll: f64,
    pub aux: f64,
    pub ego: f64,
    pub agents: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { cll: 0.0, aux: 0.0, ego: 1.0, agents: 0.5 }
    }
}

/// Extra loss terms for the contrastive and auxiliary slots; empty by default.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossSlots {
    pub cll: Option<Var>,
    pub aux: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub ego: Var,
    pub agents: Option<Var>,
}

/// `w_cll·L_cll + w_aux·L_aux + w_ego·L_ego + w_agents·L_agents`.
pub fn compute_loss(
    g: &mut Graph,
    out: &DecoderOutput,
    ego_target: &Tensor,
    agents: Option<(&Tensor, &Tensor)>,
    w: &LossWeights,
    slots: LossSlots,
) -> Result<LossParts, AutodiffError> {
    let ego = g.tape.smooth_l1(out.ego, ego_target.clone(), Tensor::full(ego_target.shape(), 1.0))?;
    let mut total = g.tape.scale(ego, w.ego);
    let mut agent_loss = None;
    if let (Some(pred), Some((t, wt))) = (out.agents, agents) {
        if wt.data().iter().any(|&x| x > 0.0) {
            let l = g.tape.smooth_l1(pred, t.clone(), wt.clone())?;
            let s = g.tape.scale(l, w.agents);
            total = g.tape.add(total, s)?;
            agent_loss = Some(l);
        }
    }
    for (term, weight) in [(slots.cll, w.cll), (slots.aux, w.aux)] {
        if let Some(term) = term {
            let s = g.tape.scale(term, weight);
            total = g.tape.add(total, s)?;
        }
    }
    Ok(LossParts { total, ego, agents: agent_loss })
}

/// Everything a training step needs from one record.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub label: ScenarioType,
    pub raw: RawScene,
    pub targets: Targets,
}

impl Sample {
    pub fn from_record(rec: &ScenarioRecord, budget: &TokenBudget) -> Self {
        Sample {
            id: rec.id.clone(),
            label: rec.scenario_type,
            raw: RawScene::from_record(rec, budget),
            targets: Targets::from_record(rec, budget),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Model {
    pub cfg: ModelConfig,
    pub embedder: SceneEmbedder,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub classifier: ScenarioClassifier,
}

/// Ego plan in the ego frame plus the encoder's attention trace.
#[derive(Clone, Debug)]
pub struct Plan {
    pub ego: Vec<[f64; 3]>,
    pub ego_attention: Vec<Vec<f64>>,
    pub kept_tokens: Vec<usize>,
}

impl Model {
    pub fn new(store: &mut ParamStore, cfg: ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.encoder.dim;
        Model {
            cfg,
            embedder: SceneEmbedder::new(store, &mut rng, d),
            encoder: Encoder::new(store, &mut rng, cfg.encoder),
            decoder: Decoder::new(store, &mut rng, d, cfg.head_hidden),
            classifier: ScenarioClassifier::new(store, &mut rng, d),
        }
    }

    pub fn classifier_params(&self) -> Vec<ParamId> {
        vec![self.classifier.linear.w, self.classifier.linear.b]
    }

    /// Inference: embed, encode (pruned when configured), decode.
    pub fn plan(&self, store: &ParamStore, raw: &RawScene) -> Result<Plan, AutodiffError> {
        let mut g = Graph::new(store);
        let tokens = encode_scene(&mut g, &self.embedder, raw)?;
        let enc = self.encoder.forward(&mut g, &tokens)?;
        let out = decode(&mut g, &self.decoder, enc.f, &enc.ranges)?;
        let v = g.tape.value(out.ego).data();
        Ok(Plan {
            ego: v.chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
            ego_attention: enc.ego_attention,
            kept_tokens: enc.token_index,
        })
    }
}
