use std::path::{Path, PathBuf};

use accup::adapt::LayerMask;
use accup::backbone::BLOCKS;
use accup::data::DatasetMeta;
use accup::experiment::{apply_ablation, apply_preset, DataSource, ExperimentConfig, StrategyKind, SweepGrid};
use accup::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "accup", version, about = "Streaming test-time adaptation for time-series classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic source/target pair as dataset containers.
    GenerateData(GenerateArgs),
    /// Train a source model and save its snapshot.
    Pretrain(PretrainArgs),
    /// Stream the target set through each configured strategy and score it.
    Adapt(ExperimentArgs),
    /// Run a hyperparameter or ablation grid.
    Sweep(SweepArgs),
    /// Print the summary of one or more report files.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Output directory; receives `source/`, `target/` and `meta.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 32)]
    pub len: usize,
    /// Source training samples; a quarter as many again are written as the
    /// source test split.
    #[arg(long, default_value_t = 256)]
    pub source: usize,
    /// Streamed target samples (target test split).
    #[arg(long, default_value_t = 1600)]
    pub target: usize,
    /// Amplitude factor of the target domain.
    #[arg(long, default_value_t = 3.0)]
    pub factor: f64,
    #[arg(long, default_value_t = 0.5)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.0)]
    pub offset: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Settings shared by every command that resolves an experiment config.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON experiment config; flags below override its fields.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Hyperparameter preset: ucihar, mfd or ssc.
    #[arg(long)]
    pub preset: Option<String>,
    /// Directory produced by `generate-data` or holding user files
    /// (`source/` and `target/` with train and test splits).
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Dataset shape profile for `--data-dir`: ucihar, mfd, ssc, or a path
    /// to a metadata JSON file. Defaults to `<data-dir>/meta.json`.
    #[arg(long)]
    pub profile: Option<String>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Adaptation learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Raw-view ensemble weight.
    #[arg(long)]
    pub weight: Option<f64>,
    /// Comma-separated encoder blocks that take optimizer steps.
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
    /// Switch off one module; repeatable.
    #[arg(long)]
    pub ablation: Vec<String>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Seed for initialisation and shuffling; defaults to the first
    /// configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Snapshot path; a `.json` sidecar is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Comma-separated strategies: accup, source, bn-stats, tent, pseudo-label.
    #[arg(long, value_delimiter = ',')]
    pub strategy: Option<Vec<String>>,
    /// Adapt a saved snapshot instead of pretraining.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Also write each ACCUP run's final support set into the output directory.
    #[arg(long)]
    pub export_support: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// JSON grid file; the axis flags below are merged into it.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long = "grid-k", value_delimiter = ',')]
    pub grid_k: Vec<usize>,
    #[arg(long = "grid-eta", value_delimiter = ',')]
    pub grid_eta: Vec<f64>,
    #[arg(long = "grid-tau", value_delimiter = ',')]
    pub grid_tau: Vec<f64>,
    #[arg(long = "grid-weight", value_delimiter = ',')]
    pub grid_weight: Vec<f64>,
    #[arg(long = "grid-lr", value_delimiter = ',')]
    pub grid_lr: Vec<f64>,
    /// Ablations to sweep; `all` expands to the four standard ones.
    #[arg(long = "grid-ablation", value_delimiter = ',')]
    pub grid_ablation: Vec<String>,
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// `report.json` files or directories containing one.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Print the per-run CSV instead of the summary table.
    #[arg(long)]
    pub csv: bool,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{what} {}: {e}", path.display())))
}

fn profile_meta(profile: Option<&str>, dir: &Path) -> Result<DatasetMeta> {
    match profile {
        Some(name) => match DatasetMeta::profile(name) {
            Some(m) => Ok(m),
            None => read_json(Path::new(name), "dataset metadata"),
        },
        None => read_json(&dir.join("meta.json"), "dataset metadata"),
    }
}

impl ConfigArgs {
    /// Config file (or defaults), then preset, then individual flags.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => read_json(p, "config")?,
            None => ExperimentConfig::default(),
        };
        if let Some(name) = &self.preset {
            apply_preset(&mut cfg.adapt, name)?;
            cfg.scenario = name.clone();
        }
        if let Some(dir) = &self.data_dir {
            cfg.data = DataSource::Files {
                meta: profile_meta(self.profile.as_deref(), dir)?,
                source: dir.join("source"),
                target: dir.join("target"),
            };
            if self.preset.is_none() {
                if let Some(name) = dir.file_name() {
                    cfg.scenario = name.to_string_lossy().into_owned();
                }
            }
        } else if self.profile.is_some() {
            return Err(Error::Config("--profile needs --data-dir".into()));
        }
        if let Some(s) = &self.seeds {
            cfg.seeds = s.clone();
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        if let Some(e) = self.epochs {
            cfg.pretrain.epochs = e;
        }
        let a = &mut cfg.adapt;
        if let Some(v) = self.lr {
            a.lr = v;
        }
        if let Some(v) = self.k {
            a.accup.k = v;
        }
        if let Some(v) = self.eta {
            a.accup.eta = v;
        }
        if let Some(v) = self.tau {
            a.accup.tau = v;
        }
        if let Some(v) = self.weight {
            a.accup.weight = v;
        }
        if let Some(blocks) = &self.layers {
            let mut mask = LayerMask { blocks: [false; BLOCKS] };
            for &b in blocks {
                if b >= BLOCKS {
                    return Err(Error::Config(format!("encoder block {b} does not exist (0..{BLOCKS})")));
                }
                mask.blocks[b] = true;
            }
            a.layers = mask;
        }
        for name in &self.ablation {
            apply_ablation(&mut a.accup, name)?;
        }
        if let Some(o) = &self.output {
            cfg.output = Some(o.clone());
        }
        Ok(cfg)
    }
}

impl ExperimentArgs {
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = self.config.resolve()?;
        if let Some(list) = &self.strategy {
            cfg.strategies = list.iter().map(|s| StrategyKind::parse(s)).collect::<Result<_>>()?;
        }
        if let Some(m) = &self.model {
            cfg.model_path = Some(m.clone());
        }
        cfg.export_support |= self.export_support;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl SweepArgs {
    pub fn resolve(&self) -> Result<(ExperimentConfig, SweepGrid)> {
        let mut cfg = self.config.resolve()?;
        if let Some(m) = &self.model {
            cfg.model_path = Some(m.clone());
        }
        let mut grid: SweepGrid = match &self.grid {
            Some(p) => read_json(p, "grid")?,
            None => SweepGrid::default(),
        };
        grid.k.extend(&self.grid_k);
        grid.eta.extend(&self.grid_eta);
        grid.tau.extend(&self.grid_tau);
        grid.weight.extend(&self.grid_weight);
        grid.lr.extend(&self.grid_lr);
        for a in &self.grid_ablation {
            if a == "all" {
                grid.ablations.extend(accup::experiment::ABLATIONS.iter().map(|s| s.to_string()));
            } else {
                grid.ablations.push(a.clone());
            }
        }
        cfg.validate()?;
        Ok((cfg, grid))
    }
}
