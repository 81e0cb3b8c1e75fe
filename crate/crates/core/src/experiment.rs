//! Experiment configuration, presets, sweeps and report files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accup::AccupConfig;
use crate::adapt::{content_hash, run_adapter, stream_from_dataset, AdaptConfig, AdaptState, RunRecord, StreamItem};
use crate::backbone::{pretrain_source, EncoderConfig, Model, PretrainConfig, BLOCKS};
use crate::baselines::{BaselineKind, BaselineState, StrategyConfig};
use crate::data::{generate_shifted_pair, load_dataset, Dataset, DatasetMeta, PairSizes, ShiftSpec};
use crate::error::{Error, Result};
use crate::metrics::{macro_f1, mean_std, F1Report};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    Accup,
    Source,
    BnStats,
    Tent,
    PseudoLabel,
}

impl StrategyKind {
    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Accup => "accup",
            StrategyKind::Source => "source",
            StrategyKind::BnStats => "bn-stats",
            StrategyKind::Tent => "tent",
            StrategyKind::PseudoLabel => "pseudo-label",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown strategy {s:?}")))
    }

    fn baseline(self) -> Option<BaselineKind> {
        match self {
            StrategyKind::Accup => None,
            StrategyKind::Source => Some(BaselineKind::Source),
            StrategyKind::BnStats => Some(BaselineKind::BnStats),
            StrategyKind::Tent => Some(BaselineKind::Tent),
            StrategyKind::PseudoLabel => Some(BaselineKind::PseudoLabel),
        }
    }
}

/// Where the source and target sets come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic {
        source: ShiftSpec,
        target: ShiftSpec,
        sizes: PairSizes,
        seed: u64,
    },
    /// `source` and `target` are directories holding `train` and `test`
    /// files; the source `train` split pretrains, the target `test` split
    /// is streamed.
    Files {
        meta: DatasetMeta,
        source: PathBuf,
        target: PathBuf,
    },
}

impl DataSource {
    /// Amplitude and noise shift on a clean reference domain.
    pub fn synthetic_shift(channels: usize, classes: usize, factor: f64, noise: f64, sizes: PairSizes) -> Self {
        let source = ShiftSpec::reference(channels, classes);
        let target = source.shifted(factor, noise, 0.0);
        DataSource::Synthetic { source, target, sizes, seed: 0 }
    }

    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DataSource::Synthetic { source, target, sizes, seed } => {
                generate_shifted_pair(source, target, *sizes, *seed)
            }
            DataSource::Files { meta, source, target } => {
                let (train, _) = load_dataset(source, meta)?;
                let (_, test) = load_dataset(target, meta)?;
                Ok((train, test))
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            DataSource::Synthetic { source, target, .. } => {
                source.validate()?;
                target.validate()
            }
            DataSource::Files { source, target, .. } => {
                for dir in [source, target] {
                    if !dir.is_dir() {
                        return Err(Error::Config(format!("data directory {} does not exist", dir.display())));
                    }
                }
                Ok(())
            }
        }
    }
}

/// Encoder shape; the input channel count comes from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderShape {
    pub filters: [usize; BLOCKS],
    pub kernels: [usize; BLOCKS],
    pub strides: [usize; BLOCKS],
    pub pools: [usize; BLOCKS],
}

impl Default for EncoderShape {
    fn default() -> Self {
        let d = EncoderConfig::new(1);
        Self {
            filters: d.filters,
            kernels: d.kernels,
            strides: d.strides,
            pools: d.pools,
        }
    }
}

impl EncoderShape {
    pub fn config(&self, in_channels: usize) -> EncoderConfig {
        EncoderConfig {
            in_channels,
            filters: self.filters,
            kernels: self.kernels,
            strides: self.strides,
            pools: self.pools,
            ..EncoderConfig::new(in_channels)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub scenario: String,
    pub data: DataSource,
    pub encoder: EncoderShape,
    pub pretrain: PretrainConfig,
    /// Load this snapshot instead of pretraining.
    pub model_path: Option<PathBuf>,
    pub strategies: Vec<StrategyKind>,
    pub adapt: AdaptConfig,
    pub baseline_lr: f64,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    pub output: Option<PathBuf>,
    /// Write each ACCUP run's final support set into `output` as
    /// `support-seed<N>.ttaw` (+ `.json`).
    pub export_support: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: "synthetic".into(),
            data: DataSource::synthetic_shift(3, 4, 3.0, 0.5, PairSizes { source: 256, target: 1600, len: 32 }),
            encoder: EncoderShape::default(),
            pretrain: PretrainConfig::default(),
            model_path: None,
            strategies: vec![StrategyKind::Source, StrategyKind::BnStats, StrategyKind::Accup],
            adapt: AdaptConfig::default(),
            baseline_lr: 1e-3,
            batch_size: 32,
            seeds: vec![0, 1, 2],
            output: None,
            export_support: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.strategies.is_empty() {
            return Err(Error::Config("at least one strategy is required".into()));
        }
        if self.export_support && self.output.is_none() {
            return Err(Error::Config("exporting support sets needs an output directory".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if let Some(p) = &self.model_path {
            if !p.is_file() {
                return Err(Error::Config(format!("model snapshot {} does not exist", p.display())));
            }
        }
        self.data.validate()?;
        self.adapt.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        Ok(cfg)
    }

    /// Hash of everything that affects results; the output directory is
    /// left out.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = None;
        content_hash(&serde_json::to_vec(&c).expect("config serialises"))
    }
}

/// `(K, eta, tau, lr)` presets for the three dataset profiles.
pub fn preset(name: &str) -> Option<(usize, f64, f64, f64)> {
    match name {
        "ucihar" => Some((10, 20.0, 0.7, 3e-4)),
        "mfd" => Some((100, 1.0, 0.6, 3e-4)),
        "ssc" => Some((50, 50.0, 0.3, 1e-5)),
        _ => None,
    }
}

pub fn apply_preset(cfg: &mut AdaptConfig, name: &str) -> Result<()> {
    let (k, eta, tau, lr) = preset(name).ok_or_else(|| Error::Config(format!("unknown preset {name:?}")))?;
    cfg.accup.k = k;
    cfg.accup.eta = eta;
    cfg.accup.tau = tau;
    cfg.lr = lr;
    Ok(())
}

pub const ABLATIONS: [&str; 4] = ["w/o-contrast", "w/o-entcomp", "w/o-augmentation", "w/o-prototypes"];

/// Switches off one module.
pub fn apply_ablation(cfg: &mut AccupConfig, name: &str) -> Result<()> {
    match name {
        "w/o-contrast" => cfg.use_contrast = false,
        "w/o-entcomp" => cfg.use_entropy_comparison = false,
        "w/o-augmentation" => cfg.use_augmentation = false,
        "w/o-prototypes" => cfg.use_prototypes = false,
        _ => return Err(Error::Config(format!("unknown ablation {name:?}"))),
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedScore {
    pub seed: u64,
    pub report: F1Report,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: String,
    pub per_seed: Vec<SeedScore>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub scenario: String,
    pub config: ExperimentConfig,
    pub config_hash: String,
    /// Source-model snapshot hash per seed.
    pub model_hashes: BTreeMap<u64, String>,
    pub summaries: Vec<StrategySummary>,
    pub runs: Vec<RunRecord>,
}

impl ExperimentReport {
    pub fn summary(&self, strategy: StrategyKind) -> Option<&StrategySummary> {
        self.summaries.iter().find(|s| s.strategy == strategy.name())
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("scenario,strategy,seed,macro_f1,wall_ms\n");
        for r in &self.runs {
            let f1 = r.macro_f1.map_or(String::new(), |f| format!("{f:.6}"));
            let scenario = csv_field(&self.scenario);
            out.push_str(&format!("{scenario},{},{},{f1},{}\n", r.strategy, r.seed, r.wall_ms));
        }
        out
    }

    /// Writes `report.json` and `summary.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), serde_json::to_vec_pretty(self)?)?;
        fs::write(dir.join("summary.csv"), self.csv())?;
        Ok(())
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Loaded data and one source model per seed.
pub struct Prepared {
    pub source: Dataset,
    pub target: Dataset,
    pub models: Vec<(u64, Model)>,
}

impl Prepared {
    pub fn stream(&self, batch_size: usize) -> Vec<StreamItem> {
        stream_from_dataset(&self.target, batch_size)
    }
}

/// Loads the data and pretrains (or loads) the source model for every seed.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let (source, target) = cfg.data.load()?;
    if source.inputs.channels() != target.inputs.channels() || source.classes != target.classes {
        return Err(Error::DatasetShape("source and target disagree on channels or classes".into()));
    }
    let models = cfg
        .seeds
        .iter()
        .map(|&seed| {
            let model = match &cfg.model_path {
                Some(p) => Model::load(p)?,
                None => {
                    let enc = cfg.encoder.config(source.inputs.channels());
                    let mut m = Model::new(enc, source.classes, seed)?;
                    pretrain_source(&mut m, &source, &PretrainConfig { seed, ..cfg.pretrain })?;
                    m
                }
            };
            Ok((seed, model))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared { source, target, models })
}

/// Runs every configured strategy for every seed on already prepared data.
pub fn run_prepared(cfg: &ExperimentConfig, prepared: &Prepared) -> Result<ExperimentReport> {
    cfg.validate()?;
    let stream = prepared.stream(cfg.batch_size);
    let truth = &prepared.target.labels;
    let classes = prepared.target.classes;
    let config_hash = cfg.hash();
    let mut runs = Vec::new();
    let mut summaries = Vec::new();
    let mut model_hashes = BTreeMap::new();
    for (seed, model) in &prepared.models {
        model_hashes.insert(*seed, content_hash(&model.snapshot_bytes()));
    }
    for &strategy in &cfg.strategies {
        let mut per_seed = Vec::new();
        for (seed, model) in &prepared.models {
            let ctx = format!("{} seed {seed}", strategy.name());
            let record = match strategy.baseline() {
                None => {
                    let mut st = AdaptState::new(model.clone(), cfg.adapt.clone(), *seed)?;
                    let record = run_adapter(&mut st, &stream, *seed, config_hash.clone())?;
                    if let (true, Some(dir)) = (cfg.export_support, &cfg.output) {
                        fs::create_dir_all(dir)?;
                        st.support().save(&dir.join(format!("support-seed{seed}.ttaw")))?;
                    }
                    Ok(record)
                }
                Some(kind) => {
                    let mut st = BaselineState::new(model.clone(), StrategyConfig { kind, lr: cfg.baseline_lr })?;
                    run_adapter(&mut st, &stream, *seed, config_hash.clone())
                }
            }
            .map_err(|e| e.context(&ctx))?;
            let preds: Vec<usize> = record.predictions.iter().flatten().copied().collect();
            per_seed.push(SeedScore { seed: *seed, report: macro_f1(&preds, truth, classes)? });
            runs.push(record);
        }
        let scores: Vec<f64> = per_seed.iter().map(|s| s.report.macro_f1).collect();
        let (mean, std) = mean_std(&scores);
        summaries.push(StrategySummary { strategy: strategy.name().into(), per_seed, mean, std });
    }
    Ok(ExperimentReport {
        scenario: cfg.scenario.clone(),
        config: cfg.clone(),
        config_hash,
        model_hashes,
        summaries,
        runs,
    })
}

/// [`prepare`] then [`run_prepared`]; writes the report files when an
/// output directory is configured.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let prepared = prepare(cfg)?;
    let report = run_prepared(cfg, &prepared)?;
    if let Some(dir) = &cfg.output {
        report.write(dir)?;
    }
    Ok(report)
}

/// Axes of a hyperparameter grid; empty axes keep the base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepGrid {
    pub k: Vec<usize>,
    pub eta: Vec<f64>,
    pub tau: Vec<f64>,
    pub weight: Vec<f64>,
    pub lr: Vec<f64>,
    pub ablations: Vec<String>,
}

impl SweepGrid {
    /// Cartesian product in axis order `k, eta, tau, weight, lr, ablation`.
    pub fn expand(&self, base: &ExperimentConfig) -> Result<Vec<ExperimentConfig>> {
        fn axis<T: Clone>(v: &[T], base: T) -> Vec<T> {
            if v.is_empty() {
                vec![base]
            } else {
                v.to_vec()
            }
        }
        let a = &base.adapt;
        let mut out = Vec::new();
        for k in axis(&self.k, a.accup.k) {
            for eta in axis(&self.eta, a.accup.eta) {
                for tau in axis(&self.tau, a.accup.tau) {
                    for weight in axis(&self.weight, a.accup.weight) {
                        for lr in axis(&self.lr, a.lr) {
                            for abl in axis(&self.ablations, String::new()) {
                                let mut c = base.clone();
                                c.adapt.accup.k = k;
                                c.adapt.accup.eta = eta;
                                c.adapt.accup.tau = tau;
                                c.adapt.accup.weight = weight;
                                c.adapt.lr = lr;
                                let mut name = format!("{} k={k} eta={eta} tau={tau} w={weight} lr={lr}", base.scenario);
                                if !abl.is_empty() {
                                    apply_ablation(&mut c.adapt.accup, &abl)?;
                                    name.push(' ');
                                    name.push_str(&abl);
                                }
                                c.scenario = name;
                                c.strategies = vec![StrategyKind::Accup];
                                c.output = base.output.as_ref().map(|d| d.join(format!("point-{:03}", out.len())));
                                c.validate()?;
                                out.push(c);
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Prepares `base` once and runs every grid point on a worker pool. With
/// an output directory, point `i` writes its report files into
/// `point-<i>/` and a combined `sweep.csv` lists every run.
pub fn sweep(base: &ExperimentConfig, grid: &SweepGrid) -> Result<Vec<ExperimentReport>> {
    let configs = grid.expand(base)?;
    let prepared = prepare(base)?;
    let reports: Vec<ExperimentReport> = configs.par_iter().map(|c| run_prepared(c, &prepared)).collect::<Result<_>>()?;
    if let Some(dir) = &base.output {
        let mut csv = String::new();
        for r in &reports {
            if let Some(d) = &r.config.output {
                r.write(d)?;
            }
            let body = r.csv();
            let rows = body.split_once('\n').map_or("", |(_, rows)| rows);
            if csv.is_empty() {
                csv.push_str(body.lines().next().unwrap_or_default());
                csv.push('\n');
            }
            csv.push_str(rows);
        }
        fs::create_dir_all(dir)?;
        fs::write(dir.join("sweep.csv"), csv)?;
    }
    Ok(reports)
}
