//! Two-phase training loop.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{compute_loss, decode, reorder_agent_targets, LossSlots, LossWeights, Model, ModelConfig, Sample};
use crate::autodiff::{AutodiffError, Tensor, Var};
use crate::csfi::{
    contribution, interpolate_on_tape, plan_batch_interpolation, probe, CsfiError, FeatureDecomposition, Mix,
    PiOSchedule, Probe,
};
use crate::encoder::{forward_encoder, EncoderOutput, PruneMode};
use crate::nn::{AdamW, Grads, Graph, ParamStore};
use crate::rng::derive_seed;
use crate::scene::{encode_scene, DatasetManifest, ScenarioRecord, ScenarioType};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Learning-rate warm-up; also the length of the plain first phase.
    pub warmup_epochs: usize,
    pub batch: usize,
    pub weight_decay: f64,
    pub peak_lr: f64,
    pub loss: LossWeights,
    pub seed: u64,
    /// Stop after this many steps; the schedules then span `max_steps`.
    pub max_steps: Option<u64>,
    pub csfi: bool,
    pub pi_o: PiOSchedule,
    /// APT is switched off by setting `model.encoder.prune_ratio = 1`.
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            warmup_epochs: 3,
            batch: 32,
            weight_decay: 1e-4,
            peak_lr: 1e-3,
            loss: LossWeights::default(),
            seed: 0,
            max_steps: None,
            csfi: true,
            pi_o: PiOSchedule::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |s: String| Err(TrainError::Config(s));
        if self.warmup_epochs >= self.epochs {
            return bad(format!("warmup_epochs {} must be below epochs {}", self.warmup_epochs, self.epochs));
        }
        if self.batch == 0 {
            return bad("batch must be positive".into());
        }
        if !(self.peak_lr >= 0.0 && self.weight_decay >= 0.0) {
            return bad("peak_lr and weight_decay must be non-negative".into());
        }
        self.model.encoder.validate().map_err(|e| TrainError::Config(e.to_string()))
    }

    pub fn apt(&self) -> bool {
        self.model.encoder.pruning()
    }

    /// Neither APT nor CSFI: the trainer is a plain imitation learner.
    pub fn is_plain(&self) -> bool {
        !self.apt() && !self.csfi
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("non-finite loss at step {step}, batch {batch:?}")]
    NonFinite { step: u64, batch: Vec<String> },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Csfi(#[from] CsfiError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Linear warm-up from 0 to `peak` over `warmup` steps, then a half cosine
/// reaching 0 at step `total − 1`.
pub fn learning_rate(step: u64, warmup: u64, total: u64, peak: f64) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    let span = total.saturating_sub(1).saturating_sub(warmup);
    if span == 0 {
        return if step + 1 >= total { 0.0 } else { peak };
    }
    let t = ((step - warmup) as f64 / span as f64).min(1.0);
    0.5 * peak * (1.0 + (std::f64::consts::PI * t).cos())
}

/// How the interpolated branch picks its scenario-relevant dimensions.
#[derive(Clone, Debug)]
pub enum Relevance {
    /// Classifier probe on the branch features, split at quantile `π_o`.
    Quantile(f64),
    Fixed(Vec<bool>),
}

/// The second (pruned and interpolated) branch of the objective.
#[derive(Clone, Debug)]
pub struct SecondBranch {
    pub prune_ratio: f64,
    /// Empty when CSFI is off.
    pub mixes: Vec<Mix>,
    pub relevance: Relevance,
}

#[derive(Clone, Debug)]
pub struct BatchForward {
    pub weights: LossWeights,
    /// `None`: plain objective on the unpruned features only.
    pub second: Option<SecondBranch>,
    /// Run the classifier probe on the branch features (E when plain).
    pub probe: bool,
}

#[derive(Clone, Debug)]
pub struct BatchResult {
    pub l_e: f64,
    pub l_ep: Option<f64>,
    pub l_aug: f64,
    pub l_ego: f64,
    pub l_agents: f64,
    pub n_augmented: usize,
    pub grads: Grads,
    pub probe: Option<Probe>,
    pub decomposition: Option<FeatureDecomposition>,
}

struct SampleTape<'s> {
    g: Graph<'s>,
    loss: Var,
    e_value: Tensor,
    branch: Option<EncoderOutput>,
}

fn sample_forward<'s>(
    store: &'s ParamStore,
    model: &Model,
    s: &Sample,
    w: &LossWeights,
    prune_ratio: Option<f64>,
) -> Result<(SampleTape<'s>, f64, f64), AutodiffError> {
    let mut g = Graph::new(store);
    let tokens = encode_scene(&mut g, &model.embedder, &s.raw)?;
    let e = model.encoder.forward_unpruned(&mut g, &tokens)?;
    let out = decode(&mut g, &model.decoder, e.f, &e.ranges)?;
    let (t, wt) = reorder_agent_targets(&e.kept.agents, tokens.ranges.agents.start, &s.targets)?;
    let parts = compute_loss(&mut g, &out, &s.targets.ego, Some((&t, &wt)), w, LossSlots::default())?;
    let ego = g.tape.value(parts.ego).item();
    let agents = parts.agents.map_or(0.0, |a| g.tape.value(a).item());
    let e_value = g.tape.value(e.f).clone();
    let branch = match prune_ratio {
        None => None,
        Some(r) if r >= 1.0 => Some(e),
        Some(r) => Some(forward_encoder(&mut g, &model.encoder, &tokens, r, PruneMode::AttendMask)?),
    };
    Ok((SampleTape { g, loss: parts.total, e_value, branch }, ego, agents))
}

/// Loss and parameter gradients of one batch.
///
/// Plain objective: `mean_i L(E_i)`. With a second branch:
/// `½·mean_i L(E_i) + ½·mean_i L(E′_i)`, where `E′` is decoded on a separate
/// tape whose feature gradients are pushed back into each sample's tape.
pub fn forward_batch(
    store: &ParamStore,
    model: &Model,
    samples: &[&Sample],
    opts: &BatchForward,
) -> Result<BatchResult, TrainError> {
    let b = samples.len();
    if b == 0 {
        return Err(TrainError::EmptyDataset);
    }
    let inv_b = 1.0 / b as f64;
    let labels: Vec<ScenarioType> = samples.iter().map(|s| s.label).collect();
    let mut grads = Grads::new(store.len());
    let (mut l_e, mut l_ego, mut l_agents) = (0.0, 0.0, 0.0);

    let Some(second) = &opts.second else {
        let mut feats = Vec::new();
        for s in samples {
            let (mut st, ego, agents) = sample_forward(store, model, s, &opts.weights, None)?;
            l_e += st.g.tape.value(st.loss).item();
            l_ego += ego;
            l_agents += agents;
            st.g.tape.backward_seeded(&[(st.loss, Tensor::scalar(inv_b))])?;
            st.g.accumulate_grads(&mut grads);
            if opts.probe {
                feats.push(st.e_value);
            }
        }
        let probe = if opts.probe { Some(probe(store, &model.classifier, &feats, &labels)?) } else { None };
        let l_e = l_e * inv_b;
        return Ok(BatchResult {
            l_e,
            l_ep: None,
            l_aug: l_e,
            l_ego: l_ego * inv_b,
            l_agents: l_agents * inv_b,
            n_augmented: 0,
            grads,
            probe,
            decomposition: None,
        });
    };

    let mut tapes = Vec::with_capacity(b);
    for s in samples {
        let (st, ego, agents) = sample_forward(store, model, s, &opts.weights, Some(second.prune_ratio))?;
        l_e += st.g.tape.value(st.loss).item();
        l_ego += ego;
        l_agents += agents;
        tapes.push(st);
    }
    let branches: Vec<&EncoderOutput> = tapes.iter().map(|t| t.branch.as_ref().expect("branch")).collect();
    let feats: Vec<Tensor> = tapes.iter().zip(&branches).map(|(t, br)| t.g.tape.value(br.f).clone()).collect();

    let needs_probe = opts.probe || matches!(second.relevance, Relevance::Quantile(_));
    let probe = if needs_probe { Some(probe(store, &model.classifier, &feats, &labels)?) } else { None };
    let decomposition = match (&second.relevance, &probe) {
        (Relevance::Quantile(pi_o), Some(p)) => {
            Some(FeatureDecomposition::new(contribution(&feats, &p.feature_grads)?, *pi_o))
        }
        _ => None,
    };
    let relevant: &[bool] = match (&second.relevance, &decomposition) {
        (Relevance::Fixed(m), _) => m,
        (_, Some(d)) => &d.relevant,
        _ => unreachable!("quantile relevance always probes"),
    };

    let mut hg = Graph::new(store);
    let leaves: Vec<Var> = feats.iter().map(|f| hg.tape.leaf(f.clone())).collect();
    let mut total: Option<Var> = None;
    let mut n_augmented = 0;
    for i in 0..b {
        let mut f = leaves[i];
        if let Some(j) = second.mixes.get(i).and_then(|m| m.donor) {
            let mix = second.mixes[i];
            // align the donor by original token index; tokens it lacks read as zero
            let index: Vec<Option<usize>> = branches[i]
                .token_index
                .iter()
                .map(|k| branches[j].token_index.iter().position(|x| x == k))
                .collect();
            let donor = hg.tape.gather_rows(leaves[j], &index)?;
            f = interpolate_on_tape(&mut hg.tape, f, donor, relevant, mix.pi_r)?;
            n_augmented += 1;
        }
        let out = decode(&mut hg, &model.decoder, f, &branches[i].ranges)?;
        let start = samples[i].raw.ranges().agents.start;
        let (t, wt) = reorder_agent_targets(&branches[i].kept.agents, start, &samples[i].targets)?;
        let parts = compute_loss(&mut hg, &out, &samples[i].targets.ego, Some((&t, &wt)), &opts.weights, LossSlots::default())?;
        total = Some(match total {
            None => parts.total,
            Some(acc) => hg.tape.add(acc, parts.total)?,
        });
    }
    let l_ep_var = hg.tape.scale(total.expect("non-empty batch"), inv_b);
    let l_ep = hg.tape.value(l_ep_var).item();
    let half = hg.tape.scale(l_ep_var, 0.5);
    hg.tape.backward(half)?;
    hg.accumulate_grads(&mut grads);
    let feature_grads: Vec<Option<Tensor>> = leaves.iter().map(|&v| hg.tape.grad(v).cloned()).collect();
    drop(hg);

    for (i, st) in tapes.iter_mut().enumerate() {
        let mut seeds = vec![(st.loss, Tensor::scalar(0.5 * inv_b))];
        if let Some(gp) = feature_grads[i].clone() {
            seeds.push((branches_f(st), gp));
        }
        st.g.tape.backward_seeded(&seeds)?;
        st.g.accumulate_grads(&mut grads);
    }
    let l_e = l_e * inv_b;
    Ok(BatchResult {
        l_e,
        l_ep: Some(l_ep),
        l_aug: 0.5 * (l_e + l_ep),
        l_ego: l_ego * inv_b,
        l_agents: l_agents * inv_b,
        n_augmented,
        grads,
        probe: if opts.probe { probe } else { None },
        decomposition,
    })
}

fn branches_f(st: &SampleTape) -> Var {
    st.branch.as_ref().expect("branch").f
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub phase: u8,
    pub lr: f64,
    pub pi_o: f64,
    pub l_ego: f64,
    pub l_agents: f64,
    pub l_e: f64,
    pub l_ep: Option<f64>,
    pub l_aug: f64,
    pub l_cls: Option<f64>,
    pub n_augmented: usize,
}

impl StepLog {
    pub const CSV_HEADER: &'static str = "step,phase,lr,pi_o,l_ego,l_agents,l_e,l_ep,l_aug,l_cls,n_augmented";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.phase,
            self.lr,
            self.pi_o,
            self.l_ego,
            self.l_agents,
            self.l_e,
            opt(self.l_ep),
            self.l_aug,
            opt(self.l_cls),
            self.n_augmented
        )
    }
}

pub fn write_log_csv(path: &Path, logs: &[StepLog]) -> std::io::Result<()> {
    let mut s = String::from(StepLog::CSV_HEADER);
    s.push('\n');
    for l in logs {
        let _ = writeln!(s, "{}", l.csv_row());
    }
    std::fs::write(path, s)
}

/// Everything needed to continue training bit-identically.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub step: u64,
    pub dominant: Vec<ScenarioType>,
    pub model: Model,
    pub store: ParamStore,
    pub optimizer: AdamW,
    pub classifier_optimizer: AdamW,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let json = serde_json::to_vec(self).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = std::fs::read(path)?;
        let ck: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(TrainError::Checkpoint(format!("unsupported version {}", ck.version)));
        }
        Ok(ck)
    }
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub store: ParamStore,
    pub step: u64,
    pub dominant: Vec<ScenarioType>,
    optimizer: AdamW,
    classifier_optimizer: AdamW,
    samples: Vec<Sample>,
    order: Option<(u64, Vec<usize>)>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, records: &[ScenarioRecord]) -> Result<Self, TrainError> {
        cfg.validate()?;
        if records.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let mut store = ParamStore::new();
        let model = Model::new(&mut store, cfg.model);
        let clf = model.classifier_params();
        let main: Vec<_> = store.ids().filter(|id| !clf.contains(id)).collect();
        let optimizer = AdamW::for_params(&store, main, cfg.weight_decay);
        let classifier_optimizer = AdamW::for_params(&store, clf, cfg.weight_decay);
        let dominant = DatasetManifest::from_records(records, cfg.seed).dominant_set;
        let samples = records.iter().map(|r| Sample::from_record(r, &cfg.model.budget)).collect();
        Ok(Trainer { cfg, model, store, step: 0, dominant, optimizer, classifier_optimizer, samples, order: None })
    }

    pub fn from_checkpoint(ck: Checkpoint, records: &[ScenarioRecord]) -> Result<Self, TrainError> {
        ck.config.validate()?;
        if records.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let samples = records.iter().map(|r| Sample::from_record(r, &ck.config.model.budget)).collect();
        Ok(Trainer {
            cfg: ck.config,
            model: ck.model,
            store: ck.store,
            step: ck.step,
            dominant: ck.dominant,
            optimizer: ck.optimizer,
            classifier_optimizer: ck.classifier_optimizer,
            samples,
            order: None,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.cfg.clone(),
            step: self.step,
            dominant: self.dominant.clone(),
            model: self.model.clone(),
            store: self.store.clone(),
            optimizer: self.optimizer.clone(),
            classifier_optimizer: self.classifier_optimizer.clone(),
        }
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.samples.len().div_ceil(self.cfg.batch) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.cfg.max_steps.unwrap_or(self.cfg.epochs as u64 * self.steps_per_epoch())
    }

    pub fn warmup_steps(&self) -> u64 {
        self.cfg.warmup_epochs as u64 * self.steps_per_epoch()
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    fn batch_indices(&mut self, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let (epoch, k) = (step / spe, (step % spe) as usize);
        if self.order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut order: Vec<usize> = (0..self.samples.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &[3, epoch])));
            self.order = Some((epoch, order));
        }
        let order = &self.order.as_ref().expect("order").1;
        let b = self.cfg.batch;
        order[k * b..((k + 1) * b).min(order.len())].to_vec()
    }

    /// One optimiser step; phase 1 until the warm-up ends, phase 2 after.
    pub fn step(&mut self) -> Result<StepLog, TrainError> {
        let step = self.step;
        let idx = self.batch_indices(step);
        let batch: Vec<&Sample> = idx.iter().map(|&i| &self.samples[i]).collect();
        let lr = learning_rate(step, self.warmup_steps(), self.total_steps(), self.cfg.peak_lr);
        let phase2 = step >= self.warmup_steps();
        let pi_o = self.cfg.pi_o.value(step);
        let plain = self.cfg.is_plain();
        let second = (phase2 && !plain).then(|| {
            let mixes = if self.cfg.csfi {
                let labels: Vec<ScenarioType> = batch.iter().map(|s| s.label).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &[2, step]));
                plan_batch_interpolation(&labels, &self.dominant, &mut rng)
            } else {
                Vec::new()
            };
            SecondBranch { prune_ratio: self.cfg.model.encoder.prune_ratio, mixes, relevance: Relevance::Quantile(pi_o) }
        });
        let opts = BatchForward { weights: self.cfg.loss, second, probe: self.cfg.csfi };
        let batch_ids = || batch.iter().map(|s| s.id.clone()).collect::<Vec<_>>();
        let res = forward_batch(&self.store, &self.model, &batch, &opts)?;
        if !res.l_aug.is_finite() || !res.grads.is_finite() {
            return Err(TrainError::NonFinite { step, batch: batch_ids() });
        }
        self.optimizer.update(&mut self.store, &res.grads, lr);
        if let Some(p) = &res.probe {
            self.classifier_optimizer.update(&mut self.store, &p.classifier_grads, lr);
        }
        self.step += 1;
        Ok(StepLog {
            step,
            phase: if phase2 { 2 } else { 1 },
            lr,
            pi_o,
            l_ego: res.l_ego,
            l_agents: res.l_agents,
            l_e: res.l_e,
            l_ep: res.l_ep,
            l_aug: res.l_aug,
            l_cls: res.probe.as_ref().map(|p| p.loss),
            n_augmented: res.n_augmented,
        })
    }

    /// Trains to the end of the schedule, reporting every step.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepLog)) -> Result<Vec<StepLog>, TrainError> {
        let mut logs = Vec::new();
        while !self.is_done() {
            let log = self.step()?;
            on_step(&log);
            logs.push(log);
        }
        Ok(logs)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::scene::{generate_dataset, GenConfig, TokenBudget};

    pub(crate) fn toy_config() -> TrainConfig {
        TrainConfig {
            epochs: 4,
            warmup_epochs: 1,
            batch: 4,
            model: ModelConfig {
                encoder: EncoderConfig { dim: 16, heads: 2, layers: 2, prune_ratio: 0.9, prune_every: 1, ffn_mult: 2 },
                budget: TokenBudget { agents: 4, polylines: 5, obstacles: 2 },
                head_hidden: 16,
                seed: 3,
            },
            ..TrainConfig::default()
        }
    }

    fn records(n: usize) -> Vec<ScenarioRecord> {
        generate_dataset(&GenConfig { n_records: n, seed: 11, ..GenConfig::default() }).unwrap().0
    }

    #[test]
    fn learning_rate_probe_points() {
        let (w, t, peak) = (10, 31, 1e-3);
        assert_eq!(learning_rate(0, w, t, peak), 0.0);
        assert!((learning_rate(5, w, t, peak) - 0.5e-3).abs() < 1e-15);
        assert_eq!(learning_rate(10, w, t, peak), peak);
        assert!((learning_rate(20, w, t, peak) - 0.5e-3).abs() < 1e-15);
        assert!(learning_rate(30, w, t, peak).abs() < 1e-18);
    }

    #[test]
    fn warmup_must_be_shorter_than_training() {
        let cfg = TrainConfig { warmup_epochs: 4, epochs: 4, ..TrainConfig::default() };
        assert!(matches!(cfg.validate(), Err(TrainError::Config(_))));
    }

    #[test]
    fn config_reads_partial_toml() {
        let cfg: TrainConfig = toml::from_str("epochs = 5\n[model.encoder]\nprune_ratio = 1.0\n").unwrap();
        assert_eq!(cfg.epochs, 5);
        assert_eq!(cfg.batch, 32);
        assert!(!cfg.apt());
        assert!(toml::from_str::<TrainConfig>("epoch = 5").is_err());
    }

    #[test]
    fn unaugmented_unpruned_branch_equals_plain_loss() {
        let recs = records(8);
        let cfg = TrainConfig { model: ModelConfig { encoder: EncoderConfig { prune_ratio: 1.0, ..toy_config().model.encoder }, ..toy_config().model }, ..toy_config() };
        let t = Trainer::new(cfg, &recs).unwrap();
        let batch: Vec<&Sample> = t.samples.iter().take(4).collect();
        let second = SecondBranch { prune_ratio: 1.0, mixes: Vec::new(), relevance: Relevance::Quantile(0.9) };
        let opts = BatchForward { weights: LossWeights::default(), second: Some(second), probe: false };
        let r = forward_batch(&t.store, &t.model, &batch, &opts).unwrap();
        assert_eq!(r.l_ep, Some(r.l_e));
        assert_eq!(r.l_aug, r.l_e);
        assert_eq!(0.5 * (2.0 + 4.0), 3.0);
    }

    #[test]
    fn same_seed_same_log_and_phase_one_is_unaugmented() {
        let recs = records(24);
        let run = || {
            let mut t = Trainer::new(toy_config(), &recs).unwrap();
            (0..9).map(|_| t.step().unwrap()).collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a, run());
        for l in &a {
            assert_eq!(l.phase == 2, l.step >= 6);
            if l.phase == 1 {
                assert_eq!(l.n_augmented, 0);
                assert_eq!(l.l_ep, None);
            }
        }
        assert!(a.iter().any(|l| l.n_augmented > 0));
    }

    #[test]
    fn checkpoint_resume_is_bit_identical() {
        let recs = records(24);
        let mut a = Trainer::new(toy_config(), &recs).unwrap();
        for _ in 0..7 {
            a.step().unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        a.checkpoint().save(&path).unwrap();
        let mut b = Trainer::from_checkpoint(Checkpoint::load(&path).unwrap(), &recs).unwrap();
        for _ in 0..3 {
            assert_eq!(a.step().unwrap(), b.step().unwrap());
        }
        assert_eq!(a.store, b.store);
    }

    #[test]
    fn non_finite_loss_reports_step_and_batch() {
        let recs = records(8);
        let mut t = Trainer::new(toy_config(), &recs).unwrap();
        let id = t.model.decoder.ego_head.l2.b;
        t.store.get_mut(id).data_mut()[0] = f64::NAN;
        match t.step() {
            Err(TrainError::NonFinite { step, batch }) => {
                assert_eq!(step, 0);
                assert_eq!(batch.len(), 4);
            }
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    /// Independent plain imitation learner: unpruned encoder, decoder, loss,
    /// one tape per sample, AdamW on every non-classifier parameter.
    fn reference_plain_losses(cfg: &TrainConfig, recs: &[ScenarioRecord], steps: u64) -> Vec<f64> {
        let mut store = ParamStore::new();
        let model = Model::new(&mut store, cfg.model);
        let clf = model.classifier_params();
        let ids: Vec<_> = store.ids().filter(|id| !clf.contains(id)).collect();
        let mut opt = AdamW::for_params(&store, ids, cfg.weight_decay);
        let samples: Vec<Sample> = recs.iter().map(|r| Sample::from_record(r, &cfg.model.budget)).collect();
        let spe = samples.len().div_ceil(cfg.batch) as u64;
        let mut out = Vec::new();
        for step in 0..steps {
            let epoch = step / spe;
            let mut order: Vec<usize> = (0..samples.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[3, epoch])));
            let k = (step % spe) as usize;
            let idx = &order[k * cfg.batch..((k + 1) * cfg.batch).min(order.len())];
            let mut grads = Grads::new(store.len());
            let mut total = 0.0;
            for &i in idx {
                let s = &samples[i];
                let mut g = Graph::new(&store);
                let tok = encode_scene(&mut g, &model.embedder, &s.raw).unwrap();
                let e = model.encoder.forward_unpruned(&mut g, &tok).unwrap();
                let out = decode(&mut g, &model.decoder, e.f, &e.ranges).unwrap();
                let (t, w) = reorder_agent_targets(&e.kept.agents, tok.ranges.agents.start, &s.targets).unwrap();
                let l = compute_loss(&mut g, &out, &s.targets.ego, Some((&t, &w)), &cfg.loss, LossSlots::default()).unwrap();
                total += g.tape.value(l.total).item();
                g.tape.backward_seeded(&[(l.total, Tensor::scalar(1.0 / idx.len() as f64))]).unwrap();
                g.accumulate_grads(&mut grads);
            }
            out.push(total / idx.len() as f64);
            let warm = cfg.warmup_epochs as u64 * spe;
            let lr = learning_rate(step, warm, cfg.epochs as u64 * spe, cfg.peak_lr);
            opt.update(&mut store, &grads, lr);
        }
        out
    }

    #[test]
    fn plain_configuration_matches_reference_bitwise() {
        let recs = records(20);
        let mut cfg = toy_config();
        cfg.csfi = false;
        cfg.model.encoder.prune_ratio = 1.0;
        let mut t = Trainer::new(cfg.clone(), &recs).unwrap();
        let got: Vec<f64> = (0..12).map(|_| t.step().unwrap().l_aug).collect();
        assert_eq!(got, reference_plain_losses(&cfg, &recs, 12));
    }

    #[test]
    fn phase_two_objective_matches_finite_differences() {
        let recs = records(12);
        let mut cfg = toy_config();
        cfg.model.encoder.prune_ratio = 0.75;
        let mut t = Trainer::new(cfg, &recs).unwrap();
        let (a, b) = (0, (1..recs.len()).find(|&j| recs[j].scenario_type != recs[0].scenario_type).unwrap());
        let relevant: Vec<bool> = (0..16).map(|i| i % 3 != 0).collect();
        let opts = BatchForward {
            weights: LossWeights::default(),
            second: Some(SecondBranch {
                prune_ratio: 0.75,
                mixes: vec![Mix { recipient: 0, donor: Some(1), pi_r: 0.4 }, Mix { recipient: 1, donor: None, pi_r: 0.0 }],
                relevance: Relevance::Fixed(relevant),
            }),
            probe: false,
        };
        let samples = t.samples.clone();
        let batch = [&samples[a], &samples[b]];
        let res = forward_batch(&t.store, &t.model, &batch, &opts).unwrap();
        assert_eq!(res.n_augmented, 1);
        let ids: Vec<_> = t.store.ids().collect();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for &id in &ids {
            let len = t.store.get(id).numel();
            for k in [0, len / 2, len - 1] {
                let orig = t.store.get(id).data()[k];
                t.store.get_mut(id).data_mut()[k] = orig + h;
                let up = forward_batch(&t.store, &t.model, &batch, &opts).unwrap().l_aug;
                t.store.get_mut(id).data_mut()[k] = orig - h;
                let down = forward_batch(&t.store, &t.model, &batch, &opts).unwrap().l_aug;
                t.store.get_mut(id).data_mut()[k] = orig;
                let num = (up - down) / (2.0 * h);
                let ana = res.grads.get(id).map_or(0.0, |g| g.data()[k]);
                let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-3, "worst relative error {worst}");
    }
}
