//! Batches, labelled datasets, the `TTSD` container, CSV import and the
//! synthetic domain-shift generator.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A `B x C x L` block of signals. Carries no labels: this is the only input
/// type the adaptation code accepts.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesBatch {
    batch: usize,
    channels: usize,
    len: usize,
    values: Vec<f64>,
}

impl TimeSeriesBatch {
    pub fn new(batch: usize, channels: usize, len: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != batch * channels * len {
            return Err(Error::shape("batch", &[batch, channels, len], &[values.len()]));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("batch", "non-finite signal value"));
        }
        Ok(Self {
            batch,
            channels,
            len,
            values,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.batch == 0
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.batch, self.channels, self.len]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// One sample as a `C * L` slice.
    pub fn sample(&self, i: usize) -> &[f64] {
        let n = self.channels * self.len;
        &self.values[i * n..(i + 1) * n]
    }

    /// One channel of one sample.
    pub fn series(&self, i: usize, c: usize) -> &[f64] {
        let off = (i * self.channels + c) * self.len;
        &self.values[off..off + self.len]
    }

    pub(crate) fn series_mut(&mut self, i: usize, c: usize) -> &mut [f64] {
        let off = (i * self.channels + c) * self.len;
        &mut self.values[off..off + self.len]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.batch, self.channels, self.len], self.values.clone())
    }

    /// Samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut values = Vec::with_capacity(indices.len() * self.channels * self.len);
        for &i in indices {
            values.extend_from_slice(self.sample(i));
        }
        Self {
            batch: indices.len(),
            channels: self.channels,
            len: self.len,
            values,
        }
    }
}

/// A batch together with its ground-truth labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub inputs: TimeSeriesBatch,
    pub labels: Vec<usize>,
}

/// A labelled collection of equally shaped series.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub inputs: TimeSeriesBatch,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(classes: usize, inputs: TimeSeriesBatch, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != inputs.batch_size() {
            return Err(Error::DatasetShape(format!(
                "{} labels for {} samples",
                labels.len(),
                inputs.batch_size()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelRange {
                label: l as i64,
                classes,
            });
        }
        Ok(Self {
            classes,
            inputs,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            classes: self.classes,
            inputs: self.inputs.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Consecutive batches in stored order; the last one may be short.
    pub fn batches(&self, batch_size: usize) -> Vec<LabeledBatch> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batches_from(&idx, batch_size)
    }

    pub fn shuffled_batches<R: Rng>(&self, batch_size: usize, rng: &mut R) -> Vec<LabeledBatch> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        self.batches_from(&idx, batch_size)
    }

    fn batches_from(&self, idx: &[usize], batch_size: usize) -> Vec<LabeledBatch> {
        idx.chunks(batch_size.max(1))
            .map(|chunk| LabeledBatch {
                inputs: self.inputs.select(chunk),
                labels: chunk.iter().map(|&i| self.labels[i]).collect(),
            })
            .collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Declared shape of a dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub channels: usize,
    pub classes: usize,
    pub len: usize,
    #[serde(default)]
    pub n_train: Option<usize>,
    #[serde(default)]
    pub n_test: Option<usize>,
}

impl DatasetMeta {
    pub fn new(name: &str, channels: usize, classes: usize, len: usize) -> Self {
        Self {
            name: name.to_string(),
            channels,
            classes,
            len,
            n_train: None,
            n_test: None,
        }
    }

    /// Human activity recognition: 9 inertial channels, 6 activities.
    pub fn ucihar() -> Self {
        Self::new("ucihar", 9, 6, 128)
    }

    /// Bearing fault diagnosis: one vibration channel, 3 conditions.
    pub fn mfd() -> Self {
        Self::new("mfd", 1, 3, 5120)
    }

    /// Sleep staging: one EEG channel, 5 stages.
    pub fn ssc() -> Self {
        Self::new("ssc", 1, 5, 3000)
    }

    pub fn profile(name: &str) -> Option<Self> {
        match name {
            "ucihar" => Some(Self::ucihar()),
            "mfd" => Some(Self::mfd()),
            "ssc" => Some(Self::ssc()),
            _ => None,
        }
    }

    fn check(&self, ds: &Dataset, expected_n: Option<usize>) -> Result<()> {
        let [_, c, l] = ds.inputs.shape();
        if c != self.channels || l != self.len || ds.classes != self.classes {
            return Err(Error::DatasetShape(format!(
                "{}: expected (channels {}, classes {}, length {}), found ({c}, {}, {l})",
                self.name, self.channels, self.classes, self.len, ds.classes
            )));
        }
        if let Some(n) = expected_n {
            if n != ds.len() {
                return Err(Error::DatasetShape(format!(
                    "{}: expected {n} samples, found {}",
                    self.name,
                    ds.len()
                )));
            }
        }
        Ok(())
    }
}

const CONTAINER_MAGIC: [u8; 4] = *b"TTSD";
const CONTAINER_VERSION: u32 = 1;

/// Writes a dataset in the little-endian `TTSD` container. Values are
/// narrowed to f32.
pub fn write_container<W: Write>(mut w: W, ds: &Dataset) -> Result<()> {
    let [n, c, l] = ds.inputs.shape();
    w.write_all(&CONTAINER_MAGIC)?;
    w.write_all(&CONTAINER_VERSION.to_le_bytes())?;
    for v in [c, ds.classes, l] {
        let v = u32::try_from(v).map_err(|_| Error::Contract("extent exceeds u32".into()))?;
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&(n as u64).to_le_bytes())?;
    for i in 0..n {
        w.write_all(&(ds.labels[i] as i32).to_le_bytes())?;
        for v in ds.inputs.sample(i) {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated while reading {what}")),
        _ => Error::Io(e),
    })?;
    Ok(b)
}

/// Reads a `TTSD` container.
pub fn read_container<R: Read>(mut r: R) -> Result<Dataset> {
    let magic = read_array::<4, _>(&mut r, "magic")?;
    if magic != CONTAINER_MAGIC {
        return Err(Error::BadMagic {
            expected: CONTAINER_MAGIC,
            found: magic,
        });
    }
    let version = u32::from_le_bytes(read_array(&mut r, "version")?);
    if version != CONTAINER_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let channels = u32::from_le_bytes(read_array(&mut r, "channels")?) as usize;
    let classes = u32::from_le_bytes(read_array(&mut r, "classes")?) as usize;
    let len = u32::from_le_bytes(read_array(&mut r, "length")?) as usize;
    let n = u64::from_le_bytes(read_array(&mut r, "count")?);
    let n = usize::try_from(n).map_err(|_| Error::Format("sample count overflow".into()))?;
    let per = channels * len;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut raw = vec![0u8; per * 4];
    for i in 0..n {
        let label = i32::from_le_bytes(read_array(&mut r, "label")?);
        if label < 0 || label as usize >= classes {
            return Err(Error::LabelRange {
                label: label as i64,
                classes,
            });
        }
        r.read_exact(&mut raw).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated in record {i}")),
            _ => Error::Io(e),
        })?;
        labels.push(label as usize);
        values.extend(
            raw.chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64),
        );
    }
    let inputs = TimeSeriesBatch::new(n, channels, len, values).map_err(|e| Error::Format(e.to_string()))?;
    Dataset::new(classes, inputs, labels)
}

pub fn save_container(path: &Path, ds: &Dataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_container(&mut w, ds)?;
    w.flush()?;
    Ok(())
}

pub fn load_container(path: &Path) -> Result<Dataset> {
    read_container(BufReader::new(File::open(path)?))
}

/// Parses CSV rows of `label, v_0, ..., v_{C*L-1}` (channel-major). Blank
/// lines and lines starting with `#` are skipped.
pub fn read_csv<R: Read>(mut r: R, meta: &DatasetMeta) -> Result<Dataset> {
    let mut text = String::new();
    r.read_to_string(&mut text)?;
    let per = meta.channels * meta.len;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        let label: i64 = fields
            .next()
            .unwrap_or_default()
            .parse()
            .map_err(|_| Error::Format(format!("line {}: bad label", lineno + 1)))?;
        if label < 0 || label as usize >= meta.classes {
            return Err(Error::LabelRange {
                label,
                classes: meta.classes,
            });
        }
        let row: Vec<f64> = fields
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Format(format!("line {}: bad value", lineno + 1)))?;
        if row.len() != per {
            return Err(Error::DatasetShape(format!(
                "line {}: {} values, expected {per}",
                lineno + 1,
                row.len()
            )));
        }
        values.extend(row);
        labels.push(label as usize);
    }
    let inputs = TimeSeriesBatch::new(labels.len(), meta.channels, meta.len, values)?;
    Dataset::new(meta.classes, inputs, labels)
}

fn split_path(dir: &Path, split: &str) -> Result<PathBuf> {
    for ext in ["ttsd", "csv"] {
        let p = dir.join(format!("{split}.{ext}"));
        if p.exists() {
            return Ok(p);
        }
    }
    Err(Error::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("no {split}.ttsd or {split}.csv in {}", dir.display()),
    )))
}

/// Loads one dataset file (`.ttsd` or `.csv`) and validates it against `meta`.
pub fn load_file(path: &Path, meta: &DatasetMeta) -> Result<Dataset> {
    let ds = if path.extension().is_some_and(|e| e == "csv") {
        read_csv(BufReader::new(File::open(path)?), meta)?
    } else {
        load_container(path)?
    };
    meta.check(&ds, None)?;
    Ok(ds)
}

/// Loads `train.{ttsd,csv}` and `test.{ttsd,csv}` from `dir`.
pub fn load_dataset(dir: &Path, meta: &DatasetMeta) -> Result<(Dataset, Dataset)> {
    let train = load_file(&split_path(dir, "train")?, meta)?;
    let test = load_file(&split_path(dir, "test")?, meta)?;
    meta.check(&train, meta.n_train)?;
    meta.check(&test, meta.n_test)?;
    Ok((train, test))
}

/// One class of the synthetic generator: a sinusoid with its own frequency
/// (cycles per window) and phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWave {
    pub frequency: f64,
    pub phase: f64,
}

/// How one synthetic domain renders its class-conditional signals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    /// Amplitude factor per channel; its length fixes the channel count.
    pub amplitude: Vec<f64>,
    /// Static per-channel level (a gravity-like component) that is scaled
    /// together with the oscillation; zero when empty.
    #[serde(default)]
    pub levels: Vec<f64>,
    pub noise_std: f64,
    pub offset: f64,
    pub classes: Vec<ClassWave>,
    /// Class prior; uniform when empty.
    #[serde(default)]
    pub class_probs: Vec<f64>,
}

impl ShiftSpec {
    /// `classes` evenly spread frequencies (2, 3.5, 5, ... cycles) on
    /// `channels` unit-amplitude channels with light noise.
    pub fn reference(channels: usize, classes: usize) -> Self {
        Self {
            amplitude: vec![1.0; channels],
            levels: (0..channels).map(|c| if c % 2 == 0 { 1.0 } else { -1.0 }).collect(),
            noise_std: 0.1,
            offset: 0.0,
            classes: (0..classes)
                .map(|k| ClassWave {
                    frequency: 2.0 + 1.5 * k as f64,
                    phase: 0.0,
                })
                .collect(),
            class_probs: Vec::new(),
        }
    }

    /// Same classes, with amplitude scaled by `factor` and noise replaced.
    pub fn shifted(&self, factor: f64, noise_std: f64, offset: f64) -> Self {
        Self {
            amplitude: self.amplitude.iter().map(|a| a * factor).collect(),
            noise_std,
            offset,
            ..self.clone()
        }
    }

    fn probs(&self) -> Vec<f64> {
        if self.class_probs.is_empty() {
            vec![1.0 / self.classes.len() as f64; self.classes.len()]
        } else {
            self.class_probs.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.amplitude.is_empty() {
            return Err(Error::Config("shift spec needs at least one channel".into()));
        }
        if self.classes.is_empty() {
            return Err(Error::Config("shift spec has no classes".into()));
        }
        for (i, a) in self.classes.iter().enumerate() {
            if !a.frequency.is_finite() || a.frequency <= 0.0 {
                return Err(Error::Config(format!("class {i} frequency must be positive")));
            }
            if self.classes[..i].iter().any(|b| b.frequency == a.frequency) {
                return Err(Error::Config(format!(
                    "class frequencies must be distinct (class {i} repeats {})",
                    a.frequency
                )));
            }
        }
        if !self.levels.is_empty() && self.levels.len() != self.amplitude.len() {
            return Err(Error::Config("levels must be empty or one per channel".into()));
        }
        if !(self.noise_std >= 0.0) || !self.offset.is_finite() || self.amplitude.iter().any(|a| !a.is_finite()) {
            return Err(Error::Config("amplitude, noise and offset must be finite, noise >= 0".into()));
        }
        let p = self.probs();
        if p.len() != self.classes.len() || p.iter().any(|&x| !(x >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("class probabilities must be non-negative and sum to 1".into()));
        }
        Ok(())
    }

    /// Renders `n` labelled windows of length `len`.
    pub fn sample<R: Rng>(&self, n: usize, len: usize, rng: &mut R) -> Result<Dataset> {
        self.validate()?;
        let channels = self.amplitude.len();
        let mut labels = quota_labels(&self.probs(), n);
        labels.shuffle(rng);
        let noise = Normal::new(0.0, self.noise_std).map_err(|e| Error::Config(e.to_string()))?;
        let tau = std::f64::consts::TAU;
        let mut values = Vec::with_capacity(n * channels * len);
        for &label in &labels {
            let wave = &self.classes[label];
            let start = rng.random_range(0.0..tau);
            for (c, amp) in self.amplitude.iter().enumerate() {
                let level = self.levels.get(c).copied().unwrap_or(0.0);
                let phase = wave.phase + start + c as f64 * tau / 8.0;
                for t in 0..len {
                    let clean = amp * (level + (tau * wave.frequency * t as f64 / len as f64 + phase).sin());
                    values.push(clean + self.offset + noise.sample(rng));
                }
            }
        }
        let inputs = TimeSeriesBatch::new(n, channels, len, values)?;
        Dataset::new(self.classes.len(), inputs, labels)
    }
}

/// Largest-remainder apportionment of `n` labels to the class prior.
fn quota_labels(probs: &[f64], n: usize) -> Vec<usize> {
    let raw: Vec<f64> = probs.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let assigned: usize = counts.iter().sum();
    for &k in order.iter().cycle().take(n.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
        .iter()
        .enumerate()
        .flat_map(|(k, &c)| std::iter::repeat_n(k, c))
        .collect()
}

/// Sizes for [`generate_shifted_pair`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSizes {
    pub source: usize,
    pub target: usize,
    pub len: usize,
}

/// Draws a labelled source set and a target set under a different spec.
/// The target keeps its labels, but they are meant only for scoring.
pub fn generate_shifted_pair(
    source: &ShiftSpec,
    target: &ShiftSpec,
    sizes: PairSizes,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    source.validate()?;
    target.validate()?;
    if source.classes.len() != target.classes.len() || source.amplitude.len() != target.amplitude.len() {
        return Err(Error::Config(
            "source and target specs must agree on class and channel counts".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let src = source.sample(sizes.source, sizes.len, &mut rng)?;
    let tgt = target.sample(sizes.target, sizes.len, &mut rng)?;
    Ok((src, tgt))
}
