use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use tailplan::harness::{
    ablation_csv, attention_csv, attention_svg, metrics_csv, run_ablation, run_benchmark, type_scores, AblationConfig,
    HarnessConfig, RolloutLog, SimMode,
};
use tailplan::planner::{write_log_csv, Checkpoint, TrainConfig, Trainer};
use tailplan::scene::{generate_dataset, load_dataset, save_dataset, GenConfig};

#[derive(Parser)]
#[command(name = "tailplan", version, about = "Train and evaluate long-tail-aware driving planners")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    NonReactive,
    Reactive,
    Both,
}

impl ModeArg {
    fn modes(self) -> Vec<SimMode> {
        match self {
            ModeArg::NonReactive => vec![SimMode::NonReactive],
            ModeArg::Reactive => vec![SimMode::Reactive],
            ModeArg::Both => SimMode::BOTH.to_vec(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scenario dataset (JSONL + manifest).
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a planner; writes checkpoint.json and train_log.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dataset path; overrides `data` in the config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Single worker, fixed order (always the case; kept for scripts).
        #[arg(long)]
        deterministic: bool,
    },
    /// Closed-loop evaluation of a checkpoint on a dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        mode: ModeArg,
        /// Harness config (TOML).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write one JSON rollout log per scenario.
        #[arg(long)]
        logs: bool,
        #[arg(long)]
        deterministic: bool,
    },
    /// Train and evaluate the 2x2 grid over token pruning and feature interpolation.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        deterministic: bool,
    },
    /// Attention CSV and SVG heat maps from rollout logs.
    Report {
        /// Directory of rollout logs written by `evaluate --logs`.
        #[arg(long)]
        logs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    data: Option<PathBuf>,
    train: TrainConfig,
}

fn read_toml<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Generate { config, out } => {
            let cfg: GenConfig = read_toml(config.as_deref())?;
            fs::create_dir_all(&out)?;
            let (records, manifest) = generate_dataset(&cfg)?;
            save_dataset(&out.join("dataset.jsonl"), &records)?;
            write(&out.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
            println!("wrote {} records to {}", records.len(), out.display());
        }
        Command::Train { config, out, data, resume, deterministic: _ } => {
            let file: TrainFile = read_toml(Some(&config))?;
            let Some(data) = data.or(file.data) else { bail!("no dataset: pass --data or set `data` in the config") };
            let records = load_dataset(&data)?;
            fs::create_dir_all(&out)?;
            let mut trainer = match resume {
                Some(ck) => Trainer::from_checkpoint(Checkpoint::load(&ck)?, &records)?,
                None => Trainer::new(file.train, &records)?,
            };
            let total = trainer.total_steps();
            let logs = trainer.run(|l| {
                if l.step % 10 == 0 || l.step + 1 == total {
                    println!(
                        "step {:>5}/{total} phase {} lr {:.2e} L_ego {:.4} L_aug {:.4} aug {}",
                        l.step, l.phase, l.lr, l.l_ego, l.l_aug, l.n_augmented
                    );
                }
            })?;
            trainer.checkpoint().save(&out.join("checkpoint.json"))?;
            write_log_csv(&out.join("train_log.csv"), &logs)?;
            println!("checkpoint written to {}", out.join("checkpoint.json").display());
        }
        Command::Evaluate { checkpoint, data, out, mode, config, logs, deterministic: _ } => {
            let harness: HarnessConfig = read_toml(config.as_deref())?;
            let ck = Checkpoint::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let records = load_dataset(&data)?;
            let report = run_benchmark(&ck.model, &ck.store, &records, &mode.modes(), &harness)?;
            fs::create_dir_all(&out)?;
            write(&out.join("metrics.csv"), metrics_csv(&report.rows))?;
            let per_type: BTreeMap<String, f64> = type_scores(&report.rows)
                .into_iter()
                .map(|((m, t), s)| (format!("{}/{}", m.name(), t), s))
                .collect();
            let overall: BTreeMap<&str, f64> = report.overall.iter().map(|(m, s)| (m.name(), *s)).collect();
            let scores = serde_json::json!({ "overall": overall, "per_type": per_type });
            write(&out.join("scores.json"), serde_json::to_vec_pretty(&scores)?)?;
            if logs {
                let dir = out.join("logs");
                fs::create_dir_all(&dir)?;
                for log in &report.logs {
                    let name = format!("{}_{}.json", log.scenario_id, log.mode.name());
                    write(&dir.join(name), serde_json::to_vec(log)?)?;
                }
            }
            for (m, s) in &report.overall {
                println!("{}: score {s:.2}", m.name());
            }
        }
        Command::Ablate { config, out, deterministic: _ } => {
            let cfg: AblationConfig = read_toml(config.as_deref())?;
            fs::create_dir_all(&out)?;
            let rows = run_ablation(&cfg, |m| println!("{m}"))?;
            write(&out.join("ablation.csv"), ablation_csv(&rows))?;
            print!("{}", ablation_csv(&rows));
        }
        Command::Report { logs, out } => {
            fs::create_dir_all(&out)?;
            let mut n = 0;
            let mut entries: Vec<PathBuf> = fs::read_dir(&logs)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect();
            entries.sort();
            for path in entries {
                let log: RolloutLog = serde_json::from_slice(&fs::read(&path)?)
                    .with_context(|| format!("parsing {}", path.display()))?;
                if log.attention.is_empty() {
                    continue;
                }
                let stem = format!("{}_{}", log.scenario_id, log.mode.name());
                write(&out.join(format!("{stem}_attention.csv")), attention_csv(&log))?;
                write(&out.join(format!("{stem}_attention.svg")), attention_svg(&log, &stem))?;
                n += 1;
            }
            println!("wrote attention reports for {n} rollouts to {}", out.display());
        }
    }
    Ok(())
}
