//! Self-attention scene encoder with ego-attention guided token pruning.
//!
//! Ranking uses the head-averaged attention row of the ego token. After every
//! `prune_every`-th layer the lowest-ranked tokens of each category stop
//! being attendable; the surviving rows are gathered once after the last
//! layer.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Var};
use crate::nn::{Graph, LayerNorm, Linear, Mlp, ParamStore};
use crate::scene::{CategoryRanges, SceneTokens};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    /// Fraction of valid tokens kept per category at each pruning event.
    pub prune_ratio: f64,
    pub prune_every: usize,
    /// Feed-forward hidden width as a multiple of `dim`.
    pub ffn_mult: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { layers: 4, heads: 4, dim: 64, prune_ratio: 0.9, prune_every: 2, ffn_mult: 2 }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("invalid encoder config: {0}")]
    Encoder(String),
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |s: &str| Err(ConfigError::Encoder(s.into()));
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad("dim must be divisible by heads");
        }
        if self.dim % 2 != 0 {
            return bad("dim must be even");
        }
        if !(self.prune_ratio > 0.0 && self.prune_ratio <= 1.0) {
            return bad("prune_ratio must lie in (0, 1]");
        }
        if self.prune_every == 0 || self.layers == 0 || self.ffn_mult == 0 {
            return bad("layers, prune_every and ffn_mult must be positive");
        }
        Ok(())
    }

    /// Pruning is active only when it can remove something.
    pub fn pruning(&self) -> bool {
        self.prune_ratio < 1.0
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNorm,
    pub ffn: Mlp,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize, hidden: usize) -> Self {
        EncoderLayer {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            wq: Linear::new(store, rng, &format!("{name}.wq"), dim, dim),
            wk: Linear::new(store, rng, &format!("{name}.wk"), dim, dim),
            wv: Linear::new(store, rng, &format!("{name}.wv"), dim, dim),
            wo: Linear::new(store, rng, &format!("{name}.wo"), dim, dim),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            ffn: Mlp::new(store, rng, &format!("{name}.ffn"), dim, hidden, dim),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub layers: Vec<EncoderLayer>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: EncoderConfig) -> Self {
        let layers = (0..cfg.layers)
            .map(|i| EncoderLayer::new(store, rng, &format!("encoder.{i}"), cfg.dim, cfg.dim * cfg.ffn_mult))
            .collect();
        Encoder { cfg, layers }
    }

    /// Runs the encoder, pruning per the config.
    pub fn forward(&self, g: &mut Graph, tokens: &SceneTokens) -> Result<EncoderOutput, AutodiffError> {
        let mode = if self.cfg.pruning() { PruneMode::AttendMask } else { PruneMode::Off };
        forward_encoder(g, self, tokens, self.cfg.prune_ratio, mode)
    }

    /// Runs the encoder with every pruning step disabled.
    pub fn forward_unpruned(&self, g: &mut Graph, tokens: &SceneTokens) -> Result<EncoderOutput, AutodiffError> {
        forward_encoder(g, self, tokens, 1.0, PruneMode::Off)
    }
}

/// Layer output plus the ego token's head-averaged attention row.
#[derive(Clone, Debug)]
pub struct LayerOutput {
    pub y: Var,
    pub ego_attention: Vec<f64>,
}

/// Pre-norm transformer layer. Keys with `attend[j] == false` are masked out
/// of every attention row before the softmax.
pub fn self_attention_layer(
    g: &mut Graph,
    layer: &EncoderLayer,
    x: Var,
    attend: &[bool],
    heads: usize,
) -> Result<LayerOutput, AutodiffError> {
    let (l, d) = (g.tape.shape(x)[0], g.tape.shape(x)[1]);
    if attend.len() != l {
        return Err(AutodiffError::ShapeMismatch {
            op: "self-attention",
            detail: format!("mask {} for {l} tokens", attend.len()),
        });
    }
    let dh = d / heads;
    let h = layer.ln1.forward(g, x)?;
    let q = layer.wq.forward(g, h)?;
    let k = layer.wk.forward(g, h)?;
    let v = layer.wv.forward(g, h)?;
    let split = |g: &mut Graph, t: Var| -> Result<Var, AutodiffError> {
        let t = g.tape.reshape(t, &[1, l, heads, dh])?;
        let t = g.tape.swap_axes12(t)?;
        g.tape.reshape(t, &[heads, l, dh])
    };
    let (qh, kh, vh) = (split(g, q)?, split(g, k)?, split(g, v)?);
    let scores = g.tape.batch_matmul(qh, kh, true)?;
    let scores = g.tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let mask: Vec<bool> = (0..heads * l * l).map(|i| attend[i % l]).collect();
    let probs = g.tape.softmax_rows(scores, Some(&mask))?;
    let pv = g.tape.value(probs).data();
    let ego_attention: Vec<f64> =
        (0..l).map(|j| (0..heads).map(|hh| pv[hh * l * l + j]).sum::<f64>() / heads as f64).collect();
    let ctx = g.tape.batch_matmul(probs, vh, false)?;
    let ctx = g.tape.reshape(ctx, &[1, heads, l, dh])?;
    let ctx = g.tape.swap_axes12(ctx)?;
    let ctx = g.tape.reshape(ctx, &[l, d])?;
    let o = layer.wo.forward(g, ctx)?;
    let x1 = g.tape.add(x, o)?;
    let h2 = layer.ln2.forward(g, x1)?;
    let f = layer.ffn.forward(g, h2)?;
    let y = g.tape.add(x1, f)?;
    Ok(LayerOutput { y, ego_attention })
}

/// Ego attention restricted to the non-ego tokens; invalid tokens score −∞.
pub fn rank_scores(ego_attention: &[f64], valid: &[bool]) -> Vec<f64> {
    ego_attention.iter().zip(valid).skip(1).map(|(&a, &ok)| if ok { a } else { f64::NEG_INFINITY }).collect()
}

/// Kept token indices per prunable category, ascending.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Kept {
    pub agents: Vec<usize>,
    pub map: Vec<usize>,
    pub obstacles: Vec<usize>,
}

impl Kept {
    /// All candidate tokens of each category.
    pub fn all(ranges: &CategoryRanges, candidate: &[bool]) -> Self {
        let pick = |r: Range<usize>| r.filter(|&i| candidate[i]).collect();
        Kept { agents: pick(ranges.agents.clone()), map: pick(ranges.map.clone()), obstacles: pick(ranges.obstacles.clone()) }
    }

    pub fn categories(&self) -> [&Vec<usize>; 3] {
        [&self.agents, &self.map, &self.obstacles]
    }

    pub fn counts(&self) -> [usize; 3] {
        [self.agents.len(), self.map.len(), self.obstacles.len()]
    }

    /// Ego index followed by every kept index, in token order.
    pub fn rows(&self) -> Vec<usize> {
        std::iter::once(0).chain(self.agents.iter().chain(&self.map).chain(&self.obstacles).copied()).collect()
    }

    pub fn mask(&self, len: usize) -> Vec<bool> {
        let mut m = vec![false; len];
        for i in self.rows() {
            m[i] = true;
        }
        m
    }
}

/// Number kept out of `n` candidates: `max(1, ceil(ratio·n))`, or 0 when empty.
pub fn keep_count(n: usize, ratio: f64) -> usize {
    if n == 0 {
        0
    } else {
        // the epsilon absorbs products like 0.7·10 = 7.000000000000001
        ((ratio * n as f64 - 1e-9).ceil() as usize).clamp(1, n)
    }
}

/// Keeps the highest-scoring candidates per category; ties go to the lower
/// index. `scores` is indexed by token.
pub fn select_tokens(scores: &[f64], ranges: &CategoryRanges, candidate: &[bool], ratio: f64) -> Kept {
    let pick = |r: Range<usize>| -> Vec<usize> {
        let mut c: Vec<usize> = r.filter(|&i| candidate[i]).collect();
        let k = keep_count(c.len(), ratio);
        c.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        c.truncate(k);
        c.sort_unstable();
        c
    };
    Kept { agents: pick(ranges.agents.clone()), map: pick(ranges.map.clone()), obstacles: pick(ranges.obstacles.clone()) }
}

/// How pruning events are applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PruneMode {
    Off,
    /// Restrict later attention to the kept set; gather rows at the end.
    AttendMask,
    /// Gather the kept rows at every event and continue on the submatrix.
    GatherEachEvent,
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// Kept token features `L' × D`: ego, then kept agents, map, obstacles.
    pub f: Var,
    pub kept: Kept,
    /// Original token index of every row of `f`.
    pub token_index: Vec<usize>,
    /// Category ranges over the rows of `f`.
    pub ranges: CategoryRanges,
    /// Per layer, head-averaged ego attention over the original `L` tokens.
    pub ego_attention: Vec<Vec<f64>>,
    /// Kept sets after each pruning event.
    pub events: Vec<Kept>,
}

pub fn forward_encoder(
    g: &mut Graph,
    enc: &Encoder,
    tokens: &SceneTokens,
    ratio: f64,
    mode: PruneMode,
) -> Result<EncoderOutput, AutodiffError> {
    let l = tokens.valid.len();
    let ranges = &tokens.ranges;
    let mut kept = Kept::all(ranges, &tokens.valid);
    let mut attend = tokens.valid.clone();
    // original index of each current row
    let mut rows: Vec<usize> = (0..l).collect();
    let mut x = tokens.x0;
    let mut ego_attention = Vec::with_capacity(enc.layers.len());
    let mut events = Vec::new();
    for (i, layer) in enc.layers.iter().enumerate() {
        let out = self_attention_layer(g, layer, x, &attend, enc.cfg.heads)?;
        x = out.y;
        let mut full = vec![0.0; l];
        for (r, &orig) in rows.iter().enumerate() {
            full[orig] = out.ego_attention[r];
        }
        ego_attention.push(full);
        if mode == PruneMode::Off || (i + 1) % enc.cfg.prune_every != 0 {
            continue;
        }
        let mut scores = vec![f64::NEG_INFINITY; l];
        scores[1..].copy_from_slice(&rank_scores(ego_attention.last().unwrap(), &kept.mask(l)));
        kept = select_tokens(&scores, ranges, &kept.mask(l), ratio);
        events.push(kept.clone());
        match mode {
            PruneMode::AttendMask => attend = kept.mask(l),
            PruneMode::GatherEachEvent => {
                let keep = kept.rows();
                let index: Vec<Option<usize>> =
                    keep.iter().map(|o| rows.iter().position(|r| r == o)).collect();
                x = g.tape.gather_rows(x, &index)?;
                rows = keep;
                attend = vec![true; rows.len()];
            }
            PruneMode::Off => unreachable!(),
        }
    }
    let token_index = kept.rows();
    let f = if rows == token_index {
        x
    } else {
        let index: Vec<Option<usize>> = token_index.iter().map(|o| rows.iter().position(|r| r == o)).collect();
        g.tape.gather_rows(x, &index)?
    };
    let [a, m, o] = kept.counts();
    Ok(EncoderOutput { f, ranges: CategoryRanges::from_counts(a, m, o), kept, token_index, ego_attention, events })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tokens_from(g: &mut Graph, x: Tensor, valid: Vec<bool>, ranges: CategoryRanges) -> SceneTokens {
        let n = valid.len();
        SceneTokens { x0: g.tape.constant(x), ranges, valid, anchors: vec![[0.0; 2]; n] }
    }

    #[test]
    fn identical_tokens_give_uniform_ego_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let layer = EncoderLayer::new(&mut store, &mut rng, "l", 8, 16);
        let mut g = Graph::new(&store);
        let row: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
        let x = g.tape.constant(Tensor::matrix(&vec![row; 5]));
        let out = self_attention_layer(&mut g, &layer, x, &[true; 5], 2).unwrap();
        for a in out.ego_attention {
            assert!((a - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_keys_get_no_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let layer = EncoderLayer::new(&mut store, &mut rng, "l", 8, 16);
        let mut g = Graph::new(&store);
        let x = g.tape.constant(Tensor::new(vec![6, 8], (0..48).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap());
        let attend = [true, false, true, true, false, true];
        let out = self_attention_layer(&mut g, &layer, x, &attend, 4).unwrap();
        let s: f64 = out.ego_attention.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert_eq!(out.ego_attention[1], 0.0);
        assert_eq!(out.ego_attention[4], 0.0);
        let err = self_attention_layer(&mut g, &layer, x, &[false; 6], 4).unwrap_err();
        assert_eq!(err.to_string(), "no attendable tokens");
    }

    #[test]
    fn ego_attention_is_mean_of_hand_set_heads() {
        // D = 2, H = 2: head 0 reads coordinate 0, head 1 coordinate 1.
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = EncoderLayer::new(&mut store, &mut rng, "l", 2, 2);
        let big = 4.0;
        *store.get_mut(layer.wq.w) = Tensor::matrix(&[vec![big, 0.0], vec![0.0, big]]);
        *store.get_mut(layer.wk.w) = Tensor::identity(2);
        // x rows after layer norm: ±1 per coordinate
        let x = Tensor::matrix(&[vec![1.0, 1.0], vec![1.0, -1.0], vec![-1.0, 1.0]]);
        let mut g = Graph::new(&store);
        let xv = g.tape.constant(x.clone());
        let out = self_attention_layer(&mut g, &layer, xv, &[true; 3], 2).unwrap();
        // oracle: layer-normalise each row, then per-head softmax of q0·k_j
        let ln: Vec<[f64; 2]> = (0..3)
            .map(|r| {
                let row = x.row(r);
                let mean = (row[0] + row[1]) / 2.0;
                let var = ((row[0] - mean).powi(2) + (row[1] - mean).powi(2)) / 2.0;
                let s = (var + 1e-5).sqrt();
                [(row[0] - mean) / s, (row[1] - mean) / s]
            })
            .collect();
        let mut expect = [0.0; 3];
        for h in 0..2 {
            let logits: Vec<f64> = (0..3).map(|j| big * ln[0][h] * ln[j][h]).collect();
            let z: f64 = logits.iter().map(|v| v.exp()).sum();
            for j in 0..3 {
                expect[j] += logits[j].exp() / z / 2.0;
            }
        }
        for j in 0..3 {
            assert!((out.ego_attention[j] - expect[j]).abs() < 1e-12, "{j}");
        }
    }

    #[test]
    fn rank_scores_drop_ego_and_invalid() {
        assert_eq!(rank_scores(&[0.4, 0.3, 0.2, 0.1], &[true; 4]), vec![0.3, 0.2, 0.1]);
        let s = rank_scores(&[0.4, 0.3, 0.2, 0.1], &[true, true, false, true]);
        assert_eq!(s[1], f64::NEG_INFINITY);
    }

    #[test]
    fn selection_examples() {
        let ranges = CategoryRanges::from_counts(4, 0, 0);
        let scores = [f64::NEG_INFINITY, 0.4, 0.3, 0.2, 0.1];
        let kept = select_tokens(&scores, &ranges, &[true; 5], 0.5);
        assert_eq!(kept.agents, vec![1, 2]);
        assert_eq!(keep_count(10, 0.9), 9);
        assert_eq!(keep_count(10, 0.7), 7);
        assert_eq!(keep_count(1, 0.1), 1);
        // ties break toward the lower index
        let flat = [0.0, 0.25, 0.25, 0.25, 0.25];
        assert_eq!(select_tokens(&flat, &ranges, &[true; 5], 0.5).agents, vec![1, 2]);
    }

    fn random_setup(seed: u64, cfg: EncoderConfig) -> (ParamStore, Encoder, Tensor, Vec<bool>, CategoryRanges) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &mut rng, cfg);
        let ranges = CategoryRanges::from_counts(16, 24, 8);
        let l = ranges.len();
        let x = Tensor::new(vec![l, cfg.dim], (0..l * cfg.dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        (store, enc, x, vec![true; l], ranges)
    }

    #[test]
    fn two_events_keep_expected_counts() {
        let cfg = EncoderConfig { dim: 16, ..EncoderConfig::default() };
        let (store, enc, x, valid, ranges) = random_setup(3, cfg);
        let mut g = Graph::new(&store);
        let t = tokens_from(&mut g, x, valid, ranges);
        let out = enc.forward(&mut g, &t).unwrap();
        assert_eq!(out.events.len(), 2);
        assert_eq!(out.events[0].counts(), [15, 22, 8]);
        assert_eq!(out.events[1].counts(), [14, 20, 8]);
        assert_eq!(g.tape.shape(out.f), &[43, 16]);
        // layer 3 attends only to the set kept after layer 2
        let dropped: Vec<usize> = (0..49).filter(|i| !out.events[0].mask(49)[*i]).collect();
        assert!(dropped.iter().all(|&i| out.ego_attention[2][i] == 0.0));
    }

    #[test]
    fn gather_each_event_matches_attend_mask() {
        let cfg = EncoderConfig { dim: 16, prune_ratio: 0.7, ..EncoderConfig::default() };
        let (store, enc, x, valid, ranges) = random_setup(4, cfg);
        let run = |mode| {
            let mut g = Graph::new(&store);
            let t = tokens_from(&mut g, x.clone(), valid.clone(), ranges.clone());
            let out = forward_encoder(&mut g, &enc, &t, cfg.prune_ratio, mode).unwrap();
            (g.tape.value(out.f).clone(), out.kept)
        };
        let (a, ka) = run(PruneMode::AttendMask);
        let (b, kb) = run(PruneMode::GatherEachEvent);
        assert_eq!(ka, kb);
        assert!(a.max_abs_diff(&b) < 1e-9);
    }

    #[test]
    fn full_ratio_is_bitwise_unpruned() {
        let cfg = EncoderConfig { dim: 16, prune_ratio: 1.0, ..EncoderConfig::default() };
        let (store, enc, x, mut valid, ranges) = random_setup(5, cfg);
        valid[3] = false;
        valid[30] = false;
        let run = |mode| {
            let mut g = Graph::new(&store);
            let t = tokens_from(&mut g, x.clone(), valid.clone(), ranges.clone());
            let out = forward_encoder(&mut g, &enc, &t, 1.0, mode).unwrap();
            (g.tape.value(out.f).clone(), out.token_index)
        };
        let (a, ia) = run(PruneMode::AttendMask);
        let (b, ib) = run(PruneMode::Off);
        assert_eq!(ia, ib);
        assert_eq!(a, b);
    }
}
