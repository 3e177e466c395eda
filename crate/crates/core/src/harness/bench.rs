//! Benchmarks over scenario sets, the 2×2 APT/CSFI ablation, and the CSV
//! and SVG report writers.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{aggregate_score, compute_metrics, rollout, HarnessConfig, MetricsRow, ModelPolicy, RolloutLog, SimMode};
use crate::nn::ParamStore;
use crate::planner::{Model, TrainConfig, TrainError, Trainer};
use crate::rng::derive_seed;
use crate::scene::{generate_dataset, GenConfig, GenError, ScenarioType};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("no scenarios to evaluate")]
    NoScenarios,
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Generate(#[from] GenError),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub rows: Vec<MetricsRow>,
    pub logs: Vec<RolloutLog>,
    pub overall: BTreeMap<SimMode, f64>,
}

/// Rolls the model out on every scenario in every requested mode, in order.
pub fn run_benchmark(
    model: &Model,
    store: &ParamStore,
    records: &[crate::scene::ScenarioRecord],
    modes: &[SimMode],
    cfg: &HarnessConfig,
) -> Result<BenchmarkReport, BenchError> {
    if records.is_empty() || modes.is_empty() {
        return Err(BenchError::NoScenarios);
    }
    let mut rows = Vec::new();
    let mut logs = Vec::new();
    let mut overall = BTreeMap::new();
    for &mode in modes {
        let start = rows.len();
        for rec in records {
            let log = rollout(&mut ModelPolicy { model, store }, rec, mode, cfg);
            rows.push(compute_metrics(&log, rec, cfg));
            logs.push(log);
        }
        overall.insert(mode, aggregate_score(&rows[start..])?);
    }
    Ok(BenchmarkReport { rows, logs, overall })
}

/// Mean score per (mode, scenario type).
pub fn type_scores(rows: &[MetricsRow]) -> BTreeMap<(SimMode, ScenarioType), f64> {
    let mut acc: BTreeMap<(SimMode, ScenarioType), (f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = acc.entry((r.mode, r.scenario_type)).or_insert((0.0, 0));
        e.0 += r.score();
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header = [
        "scenario_id", "scenario_type", "mode", "collision", "at_fault_collision", "ttc_ok", "drivable_ok", "comfort_ok",
        "speed_ok", "progress_ratio", "min_ttc", "score", "failed",
    ];
    w.write_record(header).expect("in-memory csv");
    for r in rows {
        w.write_record([
            r.scenario_id.clone(),
            r.scenario_type.to_string(),
            r.mode.name().to_string(),
            r.collision.to_string(),
            r.at_fault_collision.to_string(),
            r.ttc_ok.to_string(),
            r.drivable_ok.to_string(),
            r.comfort_ok.to_string(),
            r.speed_ok.to_string(),
            r.progress_ratio.to_string(),
            r.min_ttc.map(|t| t.to_string()).unwrap_or_default(),
            r.score().to_string(),
            r.failed.clone().unwrap_or_default(),
        ])
        .expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 fields")
}

/// Long format `step,token,weight` of a rollout's ego attention.
pub fn attention_csv(log: &RolloutLog) -> String {
    let mut s = String::from("step,token,weight\n");
    for (k, row) in log.attention.iter().enumerate() {
        for (j, w) in row.iter().enumerate() {
            let _ = writeln!(s, "{k},{j},{w}");
        }
    }
    s
}

/// Heat map of ego attention: time on x, token on y, darker is larger.
pub fn attention_svg(log: &RolloutLog, title: &str) -> String {
    let (cell, pad) = (6.0, 30.0);
    let steps = log.attention.len();
    let tokens = log.attention.first().map_or(0, Vec::len);
    let max = log.attention.iter().flatten().copied().fold(0.0, f64::max).max(1e-12);
    let (w, h) = (pad * 2.0 + cell * steps as f64, pad * 2.0 + cell * tokens as f64);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n<text x=\"{pad}\" y=\"18\" font-size=\"12\">{title}</text>\n"
    );
    for (k, row) in log.attention.iter().enumerate() {
        for (j, &a) in row.iter().enumerate() {
            let shade = (255.0 * (1.0 - a / max)).round() as u8;
            let _ = writeln!(
                s,
                "<rect x=\"{}\" y=\"{}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb({shade},{shade},255)\"/>",
                pad + k as f64 * cell,
                pad + j as f64 * cell
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub train_records: usize,
    pub eval_records: usize,
    /// Base training config; `csfi` and the prune ratio are set per cell.
    pub train: TrainConfig,
    /// Prune ratio used when APT is on.
    pub prune_ratio: f64,
    /// Training-set generator; its seed is replaced per run.
    pub generator: GenConfig,
    pub harness: HarnessConfig,
    pub modes: Vec<SimMode>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            seeds: vec![0, 1, 2],
            train_records: 500,
            eval_records: 60,
            train: TrainConfig { max_steps: Some(300), ..TrainConfig::default() },
            prune_ratio: 0.9,
            generator: GenConfig::default(),
            harness: HarnessConfig::default(),
            modes: SimMode::BOTH.to_vec(),
        }
    }
}

/// One cell of the grid for one seed, or pooled over seeds (`seed = None`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub apt: bool,
    pub csfi: bool,
    pub seed: Option<u64>,
    pub score: BTreeMap<SimMode, f64>,
    /// Median progress ratio over moving-type scenarios, all modes.
    pub median_progress_moving: f64,
    pub at_fault_rate: f64,
    pub final_l_ego: f64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 { xs[n / 2] } else { 0.5 * (xs[n / 2 - 1] + xs[n / 2]) }
}

fn summarise(apt: bool, csfi: bool, seed: Option<u64>, rows: &[MetricsRow], final_l_ego: f64) -> AblationRow {
    let mut score = BTreeMap::new();
    for mode in SimMode::BOTH {
        let m: Vec<MetricsRow> = rows.iter().filter(|r| r.mode == mode).cloned().collect();
        if let Ok(s) = aggregate_score(&m) {
            score.insert(mode, s);
        }
    }
    let moving = rows.iter().filter(|r| r.scenario_type.is_moving()).map(|r| r.progress_ratio).collect();
    AblationRow {
        apt,
        csfi,
        seed,
        score,
        median_progress_moving: median(moving),
        at_fault_rate: rows.iter().filter(|r| r.at_fault_collision).count() as f64 / rows.len().max(1) as f64,
        final_l_ego,
    }
}

/// Trains and evaluates `{APT off, on} × {CSFI off, on}` for every seed.
/// Returns per-seed rows followed by one pooled row per cell.
pub fn run_ablation(
    cfg: &AblationConfig,
    mut progress: impl FnMut(&str),
) -> Result<Vec<AblationRow>, BenchError> {
    if cfg.seeds.is_empty() || cfg.eval_records == 0 {
        return Err(BenchError::NoScenarios);
    }
    let mut out = Vec::new();
    let mut pooled: BTreeMap<(bool, bool), (Vec<MetricsRow>, Vec<f64>)> = BTreeMap::new();
    for &seed in &cfg.seeds {
        let gen = GenConfig { n_records: cfg.train_records, seed: derive_seed(seed, &[10]), ..cfg.generator.clone() };
        let (train, _) = generate_dataset(&gen)?;
        // held-out scenes, every type equally represented
        let uniform = ScenarioType::ALL.iter().map(|&t| (t, 1.0 / 6.0)).collect();
        let eval_gen = GenConfig {
            n_records: cfg.eval_records,
            seed: derive_seed(seed, &[11]),
            fractions: uniform,
            road: cfg.generator.road.clone(),
        };
        let (eval, _) = generate_dataset(&eval_gen)?;
        for (apt, csfi) in [(false, false), (true, false), (false, true), (true, true)] {
            let mut tc = cfg.train.clone();
            tc.seed = seed;
            tc.csfi = csfi;
            tc.model.seed = seed;
            tc.model.encoder.prune_ratio = if apt { cfg.prune_ratio } else { 1.0 };
            let mut trainer = Trainer::new(tc, &train)?;
            let logs = trainer.run(|_| {})?;
            let tail = &logs[logs.len().saturating_sub(10)..];
            let final_l_ego = tail.iter().map(|l| l.l_ego).sum::<f64>() / tail.len().max(1) as f64;
            let report = run_benchmark(&trainer.model, &trainer.store, &eval, &cfg.modes, &cfg.harness)?;
            let row = summarise(apt, csfi, Some(seed), &report.rows, final_l_ego);
            progress(&format!(
                "seed {seed} apt={apt} csfi={csfi}: median progress {:.4}, final L_ego {:.4}",
                row.median_progress_moving, final_l_ego
            ));
            out.push(row);
            let p = pooled.entry((apt, csfi)).or_default();
            p.0.extend(report.rows);
            p.1.push(final_l_ego);
        }
    }
    for ((apt, csfi), (rows, l)) in pooled {
        let mean_l = l.iter().sum::<f64>() / l.len() as f64;
        out.push(summarise(apt, csfi, None, &rows, mean_l));
    }
    Ok(out)
}

/// Grid table: one line per (cell, seed) plus pooled `all` lines.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header = [
        "apt", "csfi", "seed", "score_non_reactive", "score_reactive", "median_progress_moving", "at_fault_rate",
        "final_l_ego",
    ];
    w.write_record(header).expect("in-memory csv");
    let opt = |v: Option<&f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.apt.to_string(),
            r.csfi.to_string(),
            r.seed.map_or("all".to_string(), |x| x.to_string()),
            opt(r.score.get(&SimMode::NonReactive)),
            opt(r.score.get(&SimMode::Reactive)),
            r.median_progress_moving.to_string(),
            r.at_fault_rate.to_string(),
            r.final_l_ego.to_string(),
        ])
        .expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 fields")
}
