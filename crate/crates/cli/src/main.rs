use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pag_core::analysis::{spillover_by_hop, write_responses_csv};
use pag_core::config::ExperimentConfig;
use pag_core::data::{SampleWindow, NUM_FEATURES};
use pag_core::model::predict_with;
use pag_core::pipeline::{self, Checkpoint, Dataset};
use pag_core::training::{write_history_csv, write_metrics_csv};
use pag_core::{PagError, Result, Tensor};

/// Charging-demand forecasting with graph attention, temporal pattern
/// attention and physics-informed pre-training.
#[derive(Parser)]
#[command(name = "pag", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the forecast horizon (steps).
    #[arg(long, global = true)]
    horizon: Option<usize>,
    /// Output directory; overrides `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic market (nodes, edges, timeseries, truth CSVs).
    SynthData {
        #[command(flatten)]
        common: Common,
    },
    /// Meta-learn initial parameters from elasticity-law tuning samples.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune on observed data, optionally from a pre-trained checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        from_checkpoint: Option<PathBuf>,
    },
    /// Forecast every zone `horizon` steps after timestamp `t`.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Last observed timestamp of the input window.
        #[arg(long)]
        t: i64,
    },
    /// Test-split metrics of a checkpoint.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Price impulse responses of a checkpoint.
    Impulse {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train every ablation variant at every configured horizon.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.set_seed(seed);
        }
        if let Some(h) = self.horizon {
            if h == 0 {
                return Err(PagError::Config("horizon must be positive".into()));
            }
            cfg.train.horizon = h;
            cfg.horizons = vec![h];
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        std::fs::create_dir_all(&cfg.output_dir).map_err(|e| PagError::io(&cfg.output_dir, e))?;
        Ok(cfg)
    }
}

fn report(msg: &str) {
    eprintln!("{msg}");
}

fn load_checkpoint(cfg: &ExperimentConfig, path: &Path) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    ck.check_compatible(cfg)?;
    Ok(ck)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData { common } => {
            let cfg = common.load()?;
            let dir = match &common.out {
                Some(out) => out.clone(),
                None => cfg.data.nodes.parent().unwrap_or(Path::new(".")).to_path_buf(),
            };
            let market = pipeline::synth_data(&cfg, &dir)?;
            let corr = market.price_occupancy_correlation(&market.truth.dynamic_zones());
            report(&format!(
                "wrote {} zones x {} steps to {} (price/occupancy correlation {corr:.3})",
                market.graph.num_zones(),
                market.panel.len(),
                dir.display()
            ));
        }
        Command::Pretrain { common } => {
            let cfg = common.load()?;
            let data = Dataset::load(&cfg.data)?;
            let prep = pipeline::prepare(&cfg, &data, cfg.train.horizon)?;
            let (model, history) = pipeline::pretrain(&cfg, &data, &prep, cfg.model.variant)?;
            let path = cfg.output_dir.join("pretrained.json");
            Checkpoint::new(&cfg, &prep, model, "pretrained").save(&path)?;
            let last = history.last().map_or(f64::NAN, |h| h.query_loss);
            report(&format!("pre-trained {} epochs, final query loss {last:.5}; wrote {}", history.len(), path.display()));
        }
        Command::Train { common, from_checkpoint } => {
            let cfg = common.load()?;
            let data = Dataset::load(&cfg.data)?;
            let prep = pipeline::prepare(&cfg, &data, cfg.train.horizon)?;
            let (mut model, pretrained) = match &from_checkpoint {
                Some(path) => {
                    let ck = load_checkpoint(&cfg, path)?;
                    if ck.horizon != prep.horizon {
                        return Err(PagError::Checkpoint(format!(
                            "checkpoint horizon {} differs from requested {}",
                            ck.horizon, prep.horizon
                        )));
                    }
                    let pretrained = ck.stage == "pretrained";
                    (ck.model, pretrained)
                }
                None => (pipeline::init_model(&cfg, cfg.model.variant)?, false),
            };
            let fit = pipeline::train(&cfg, &data, &prep, &mut model, pretrained)?;
            let metrics = pipeline::test_metrics(&cfg, &prep, &model)?;
            write_history_csv(&cfg.output_dir.join("loss_history.csv"), &fit.history)?;
            write_metrics_csv(&cfg.output_dir.join("metrics.csv"), &[metrics])?;
            let path = cfg.output_dir.join("model.json");
            Checkpoint::new(&cfg, &prep, model, "trained").save(&path)?;
            report(&format!(
                "trained {} epochs (best {}), test rmse {:.5}; wrote {}",
                fit.history.len(),
                fit.best_epoch,
                metrics.rmse,
                path.display()
            ));
        }
        Command::Predict { common, checkpoint, t } => {
            let cfg = common.load()?;
            let ck = load_checkpoint(&cfg, &checkpoint)?;
            let data = Dataset::load(&cfg.data)?;
            let w = ck.model.config.window;
            let end = t - data.panel.start();
            if end < w as i64 - 1 || end >= data.panel.len() as i64 {
                return Err(PagError::Panel(format!(
                    "timestamp {t} has no complete {w}-step window in the panel"
                )));
            }
            let from = end as usize + 1 - w;
            let seg = data.panel.segment(from, w);
            let n = data.graph.num_zones();
            let raw = SampleWindow {
                input_start: seg.start(),
                horizon: ck.horizon,
                input: Tensor::from_fn(&[n, NUM_FEATURES, w], |k| seg.values().data()[k]),
                target: vec![0.0; n],
            };
            let norm = ck.stats.normalize_window(&raw);
            let pred = predict_with(&ck.model.config, &ck.model.params, &norm.input, &data.graph.attention_mask())?;
            let pred = ck.stats.denormalize_occupancy(&pred);
            let path = cfg.output_dir.join("forecast.csv");
            let mut text = String::from("zone_id,timestamp,occupancy\n");
            for (z, y) in pred.iter().enumerate() {
                text.push_str(&format!("{z},{},{y}\n", t + ck.horizon as i64));
            }
            std::fs::write(&path, text).map_err(|e| PagError::io(&path, e))?;
            report(&format!("wrote {}", path.display()));
        }
        Command::Evaluate { common, checkpoint } => {
            let cfg = common.load()?;
            let ck = load_checkpoint(&cfg, &checkpoint)?;
            let data = Dataset::load(&cfg.data)?;
            let mut prep = pipeline::prepare(&cfg, &data, ck.horizon)?;
            prep.stats = ck.stats.clone();
            prep.test = prep.test_raw.iter().map(|w| ck.stats.normalize_window(w)).collect();
            let metrics = pipeline::test_metrics(&cfg, &prep, &ck.model)?;
            let path = cfg.output_dir.join("metrics.csv");
            write_metrics_csv(&path, &[metrics])?;
            report(&format!(
                "rmse {:.5} mape {:.4} rae {:.4} mae {:.5}; wrote {}",
                metrics.rmse,
                metrics.mape,
                metrics.rae,
                metrics.mae,
                path.display()
            ));
        }
        Command::Impulse { common, checkpoint } => {
            let cfg = common.load()?;
            let ck = load_checkpoint(&cfg, &checkpoint)?;
            let data = Dataset::load(&cfg.data)?;
            let mut prep = pipeline::prepare(&cfg, &data, ck.horizon)?;
            prep.stats = ck.stats.clone();
            let records = pipeline::probe(&cfg, &data, &prep, &ck.model)?;
            let path = cfg.output_dir.join("responses.csv");
            write_responses_csv(&path, &records)?;
            for h in spillover_by_hop(&records) {
                report(&format!("magnitude {:+} hop {}: mean response {:+.5}", h.magnitude, h.hop, h.mean));
            }
            report(&format!("wrote {}", path.display()));
        }
        Command::Ablate { common } => {
            let cfg = common.load()?;
            let data = Dataset::load(&cfg.data)?;
            let rows = pipeline::ablate(&cfg, &data)?;
            let path = cfg.output_dir.join("ablation.csv");
            pipeline::write_ablation_csv(&path, &rows)?;
            report(&format!("wrote {}", path.display()));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            match e {
                PagError::Io { .. } | PagError::Csv { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
