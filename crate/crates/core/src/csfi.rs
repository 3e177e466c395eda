//! Cross-scenario feature interpolation: a scenario classifier probe ranks
//! embedding dimensions by gradient × activation, and dominant-type samples
//! have their top-ranked dimensions mixed with a sample of another type.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::nn::{Graph, Grads, Linear, ParamStore};
use crate::scene::ScenarioType;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CsfiError {
    #[error("classifier needs at least one token")]
    NoTokens,
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Masked mean pool followed by a linear map to per-type logits.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScenarioClassifier {
    pub linear: Linear,
    pub n_types: usize,
}

impl ScenarioClassifier {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, dim: usize) -> Self {
        let n_types = ScenarioType::ALL.len();
        ScenarioClassifier { linear: Linear::new(store, rng, "classifier", dim, n_types), n_types }
    }

    /// Logits `[1 × n_types]` for the token rows of `f`.
    pub fn classify(&self, g: &mut Graph, f: Var) -> Result<Var, CsfiError> {
        let rows = g.tape.shape(f)[0];
        if rows == 0 {
            return Err(CsfiError::NoTokens);
        }
        let pool = g.tape.constant(Tensor::full(&[1, rows], 1.0 / rows as f64));
        let pooled = g.tape.matmul(pool, f)?;
        Ok(self.linear.forward(g, pooled)?)
    }
}

/// Result of one classifier probe on detached features.
#[derive(Clone, Debug)]
pub struct Probe {
    pub loss: f64,
    /// `∇_F L_CE`, one tensor per sample.
    pub feature_grads: Vec<Tensor>,
    pub classifier_grads: Grads,
}

/// Cross-entropy of the classifier on copies of `features`; the copies live
/// on their own tape so nothing flows back into the encoder.
pub fn probe(
    store: &ParamStore,
    clf: &ScenarioClassifier,
    features: &[Tensor],
    labels: &[ScenarioType],
) -> Result<Probe, CsfiError> {
    let mut g = Graph::new(store);
    let leaves: Vec<Var> = features.iter().map(|f| g.tape.leaf(f.clone())).collect();
    let mut logits = Vec::with_capacity(leaves.len());
    for &f in &leaves {
        logits.push(clf.classify(&mut g, f)?);
    }
    let logits = g.tape.concat_rows(&logits)?;
    let targets: Vec<usize> = labels.iter().map(|t| t.index()).collect();
    let loss = g.tape.cross_entropy(logits, &targets)?;
    g.tape.backward(loss)?;
    let mut classifier_grads = Grads::new(store.len());
    g.accumulate_grads(&mut classifier_grads);
    let feature_grads =
        leaves.iter().zip(features).map(|(&v, f)| g.tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(f.shape()))).collect();
    Ok(Probe { loss: g.tape.value(loss).item(), feature_grads, classifier_grads })
}

/// `C_i`: mean over every token row of every sample of `F[·, i] · ∇F[·, i]`.
pub fn contribution(features: &[Tensor], grads: &[Tensor]) -> Result<Vec<f64>, CsfiError> {
    if features.len() != grads.len() {
        return Err(CsfiError::Shape { op: "contribution", detail: format!("{} vs {}", features.len(), grads.len()) });
    }
    let d = features.first().map_or(0, Tensor::cols);
    let mut c = vec![0.0; d];
    let mut rows = 0usize;
    for (f, g) in features.iter().zip(grads) {
        if f.shape() != g.shape() || f.cols() != d {
            return Err(CsfiError::Shape {
                op: "contribution",
                detail: format!("{:?} vs {:?}", f.shape(), g.shape()),
            });
        }
        for (fr, gr) in f.data().chunks(d).zip(g.data().chunks(d)) {
            for i in 0..d {
                c[i] += fr[i] * gr[i];
            }
            rows += 1;
        }
    }
    if rows > 0 {
        c.iter_mut().for_each(|v| *v /= rows as f64);
    }
    Ok(c)
}

/// Nearest-rank quantile: ascending sort, element `ceil(ratio·D) − 1`.
pub fn quantile_threshold(c: &[f64], ratio: f64) -> f64 {
    let mut sorted = c.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((ratio * c.len() as f64 - 1e-9).ceil() as usize).clamp(1, c.len());
    sorted[rank - 1]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureDecomposition {
    pub contribution: Vec<f64>,
    pub tau: f64,
    /// Scenario-relevant dimensions, `C_i > τ`.
    pub relevant: Vec<bool>,
}

impl FeatureDecomposition {
    pub fn new(contribution: Vec<f64>, ratio: f64) -> Self {
        let tau = quantile_threshold(&contribution, ratio);
        let relevant = contribution.iter().map(|&c| c > tau).collect();
        FeatureDecomposition { contribution, tau, relevant }
    }

    pub fn n_relevant(&self) -> usize {
        self.relevant.iter().filter(|&&r| r).count()
    }
}

/// Splits `f` into (relevant part, generic part) along the columns.
pub fn decompose(f: &Tensor, relevant: &[bool]) -> (Tensor, Tensor) {
    let d = f.cols();
    let split = |keep: bool| f.data().iter().enumerate().map(|(i, &v)| if relevant[i % d] == keep { v } else { 0.0 }).collect();
    let shape = f.shape().to_vec();
    (Tensor::new(shape.clone(), split(true)).unwrap(), Tensor::new(shape, split(false)).unwrap())
}

/// `F_g + (1 − π_r)·F_r + π_r·F_r_donor`.
pub fn interpolate(generic: &Tensor, relevant: &Tensor, donor: &Tensor, pi_r: f64) -> Result<Tensor, CsfiError> {
    if generic.shape() != relevant.shape() || relevant.shape() != donor.shape() {
        return Err(CsfiError::Shape {
            op: "interpolate",
            detail: format!("{:?}, {:?}, {:?}", generic.shape(), relevant.shape(), donor.shape()),
        });
    }
    let data = generic
        .data()
        .iter()
        .zip(relevant.data())
        .zip(donor.data())
        .map(|((&g, &r), &d)| g + (1.0 - pi_r) * r + pi_r * d)
        .collect();
    Ok(Tensor::new(generic.shape().to_vec(), data)?)
}

/// The same mix on a tape: `F ⊙ (1 − π_r m) + donor ⊙ (π_r m)`, where
/// `donor` is already aligned row-for-row with `f`.
pub fn interpolate_on_tape(tape: &mut Tape, f: Var, donor: Var, relevant: &[bool], pi_r: f64) -> Result<Var, CsfiError> {
    let keep: Vec<f64> = relevant.iter().map(|&r| if r { 1.0 - pi_r } else { 1.0 }).collect();
    let take: Vec<f64> = relevant.iter().map(|&r| if r { pi_r } else { 0.0 }).collect();
    let keep = tape.constant(Tensor::vector(keep));
    let take = tape.constant(Tensor::vector(take));
    let a = tape.mul_row(f, keep)?;
    let b = tape.mul_row(donor, take)?;
    Ok(tape.add(a, b)?)
}

/// Per-sample interpolation plan.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mix {
    pub recipient: usize,
    pub donor: Option<usize>,
    pub pi_r: f64,
}

impl Mix {
    pub fn is_augmented(&self) -> bool {
        self.donor.is_some()
    }
}

/// Dominant-type samples draw a donor of a different type uniformly from the
/// batch and `π_r ~ U(0, 1)`; everything else is left as is.
pub fn plan_batch_interpolation(labels: &[ScenarioType], dominant: &[ScenarioType], rng: &mut impl Rng) -> Vec<Mix> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let none = Mix { recipient: i, donor: None, pi_r: 0.0 };
            if !dominant.contains(&t) {
                return none;
            }
            let donors: Vec<usize> = (0..labels.len()).filter(|&j| labels[j] != t).collect();
            if donors.is_empty() {
                return none;
            }
            let donor = donors[rng.random_range(0..donors.len())];
            Mix { recipient: i, donor: Some(donor), pi_r: rng.random::<f64>() }
        })
        .collect()
}

/// Cyclic quantile ratio: starts at `start`, drops by `step` every `period`
/// steps down to `floor`, then resets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PiOSchedule {
    pub start: f64,
    pub step: f64,
    pub floor: f64,
    pub period: u64,
}

impl Default for PiOSchedule {
    fn default() -> Self {
        PiOSchedule { start: 0.9, step: 0.1, floor: 0.5, period: 100 }
    }
}

impl PiOSchedule {
    pub fn value(&self, step: u64) -> f64 {
        let levels = ((self.start - self.floor) / self.step).round() as u64 + 1;
        let k = (step / self.period.max(1)) % levels;
        // snap to the decimal grid so 0.9 − 4·0.1 reads back as 0.5
        ((self.start - self.step * k as f64) * 1e9).round() / 1e9
    }
}

pub fn pi_o_value(step: u64) -> f64 {
    PiOSchedule::default().value(step)
}
