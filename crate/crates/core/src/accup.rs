//! Augmentation ensemble, entropy-filtered prototypes, entropy comparison and
//! the augmented contrastive clustering loss.
//!
//! Entropies are in nats and always taken of `softmax(row)`, including rows
//! that are already probability vectors (prototype outputs). That keeps a
//! single definition for both sides of the comparison.

use std::cmp::Ordering;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentSpec;
use crate::autodiff::{Var, NORM_EPS};
use crate::backbone::sidecar_path;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// `-Σ σ(x)_c ln σ(x)_c` with `σ` the softmax.
pub fn shannon_entropy(logits: &[f64]) -> Result<f64> {
    if logits.is_empty() || logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("shannon_entropy", "logits must be finite and non-empty"));
    }
    let h = -softmax(logits)
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>();
    Ok(h.max(0.0))
}

pub fn row_entropies(logits: &Tensor) -> Result<Vec<f64>> {
    logits.rows().map(shannon_entropy).collect()
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub fn row_argmax(t: &Tensor) -> Vec<usize> {
    t.rows().map(argmax).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    #[default]
    Fixed,
    /// `w = sigmoid(s)` with `s` a trainable scalar; `w` starts from the
    /// configured weight.
    Learnable,
}

pub fn check_weight(w: f64) -> Result<()> {
    if w > 0.0 && w < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("ensemble weight must lie in (0, 1), got {w}")))
    }
}

/// `w * raw + (1 - w) * aug`, elementwise.
pub fn ensemble(raw: &Tensor, aug: &Tensor, w: f64) -> Result<Tensor> {
    check_weight(w)?;
    if raw.shape() != aug.shape() {
        return Err(Error::shape("ensemble", raw.shape(), aug.shape()));
    }
    let data = raw.data().iter().zip(aug.data()).map(|(r, a)| w * r + (1.0 - w) * a).collect();
    Tensor::new(raw.shape().to_vec(), data)
}

/// Graph version of [`ensemble`]; `w` is a rank-0 variable.
pub fn ensemble_var<'g>(raw: Var<'g>, aug: Var<'g>, w: Var<'g>) -> Result<Var<'g>> {
    let one = raw.graph().constant(Tensor::scalar(1.0));
    raw.mul(w)?.add(aug.mul(one.sub(w)?)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    ClassifierInit,
    Stream,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupportEntry {
    pub feature: Vec<f64>,
    pub logits: Vec<f64>,
    pub entropy: f64,
    pub pseudo_label: usize,
    pub origin: Origin,
}

/// Per-class memory of features backing the prototypes. Entries are only
/// ever appended, so it grows by one entry per adapted sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportSet {
    feature_dim: usize,
    classes: Vec<Vec<SupportEntry>>,
}

impl SupportSet {
    /// One entry per class: the classifier weight row as feature, one-hot
    /// logits and entropy 0, so it is always among the retained entries.
    pub fn from_classifier(weight: &Tensor) -> Result<Self> {
        if weight.rank() != 2 || weight.shape()[0] == 0 {
            return Err(Error::shape("support_set", weight.shape(), &[]));
        }
        let (c, f) = (weight.shape()[0], weight.shape()[1]);
        let classes = (0..c)
            .map(|k| {
                let mut logits = vec![0.0; c];
                logits[k] = 1.0;
                vec![SupportEntry {
                    feature: weight.row(k).to_vec(),
                    logits,
                    entropy: 0.0,
                    pseudo_label: k,
                    origin: Origin::ClassifierInit,
                }]
            })
            .collect();
        Ok(Self { feature_dim: f, classes })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn class(&self, c: usize) -> &[SupportEntry] {
        &self.classes[c]
    }

    pub fn len(&self) -> usize {
        self.classes.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Appends one stream entry per row, filed under `argmax(logits)`.
    pub fn update(&mut self, features: &Tensor, logits: &Tensor, entropies: &[f64]) -> Result<()> {
        let b = entropies.len();
        if features.shape() != [b, self.feature_dim] {
            return Err(Error::shape("update_support", features.shape(), &[b, self.feature_dim]));
        }
        if logits.shape() != [b, self.classes.len()] {
            return Err(Error::shape("update_support", logits.shape(), &[b, self.classes.len()]));
        }
        for i in 0..b {
            let label = argmax(logits.row(i));
            self.classes[label].push(SupportEntry {
                feature: features.row(i).to_vec(),
                logits: logits.row(i).to_vec(),
                entropy: entropies[i],
                pseudo_label: label,
                origin: Origin::Stream,
            });
        }
        Ok(())
    }

    /// Per class, the mean feature of the `k` lowest-entropy entries (earlier
    /// entries win ties), summed in ascending entropy order.
    pub fn prototypes(&self, k: usize) -> Result<PrototypeSet> {
        if k == 0 {
            return Err(Error::Config("prototype filter size K must be at least 1".into()));
        }
        let f = self.feature_dim;
        let mut mu = Vec::with_capacity(self.classes.len() * f);
        let mut counts = Vec::with_capacity(self.classes.len());
        for entries in &self.classes {
            let by_entropy = |&a: &usize, &b: &usize| -> Ordering {
                entries[a].entropy.total_cmp(&entries[b].entropy).then(a.cmp(&b))
            };
            let mut idx: Vec<usize> = (0..entries.len()).collect();
            let keep = k.min(idx.len());
            if keep < idx.len() {
                idx.select_nth_unstable_by(keep - 1, by_entropy);
                idx.truncate(keep);
            }
            idx.sort_unstable_by(by_entropy);
            let mut acc = vec![0.0; f];
            for &i in &idx {
                for (a, v) in acc.iter_mut().zip(&entries[i].feature) {
                    *a += v;
                }
            }
            mu.extend(acc.iter().map(|a| a / keep as f64));
            counts.push(keep);
        }
        Ok(PrototypeSet {
            mu: Tensor::new(vec![self.classes.len(), f], mu)?,
            counts,
        })
    }

    /// Flattened view for inspection: `support.features [N, F]`,
    /// `support.logits [N, C]` and one metadata record per entry, all in
    /// class-then-arrival order.
    pub fn export(&self) -> (Vec<(String, Tensor)>, Vec<EntryMeta>) {
        let all: Vec<&SupportEntry> = self.classes.iter().flatten().collect();
        let n = all.len();
        let feats = all.iter().flat_map(|e| e.feature.iter().copied()).collect();
        let logits = all.iter().flat_map(|e| e.logits.iter().copied()).collect();
        let meta = all
            .iter()
            .map(|e| EntryMeta {
                class: e.pseudo_label,
                entropy: e.entropy,
                origin: e.origin,
            })
            .collect();
        (
            vec![
                ("support.features".into(), Tensor::from_parts(vec![n, self.feature_dim], feats)),
                ("support.logits".into(), Tensor::from_parts(vec![n, self.classes.len()], logits)),
            ],
            meta,
        )
    }

    /// Writes [`export`](Self::export) as a tensor snapshot at `path` and the
    /// entry metadata as JSON at `path` + `.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let (tensors, meta) = self.export();
        crate::tensor::write_snapshot(BufWriter::new(fs::File::create(path)?), &tensors)?;
        fs::write(sidecar_path(path), serde_json::to_vec_pretty(&meta)?)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntryMeta {
    pub class: usize,
    pub entropy: f64,
    pub origin: Origin,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    /// `[C, F]`, one centroid per class.
    pub mu: Tensor,
    /// Number of entries averaged into each row.
    pub counts: Vec<usize>,
}

fn unit_rows(t: &Tensor) -> Tensor {
    let cols = t.shape()[1];
    let mut out = t.data().to_vec();
    for row in out.chunks_mut(cols) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n < NORM_EPS {
            row.fill(0.0);
        } else {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    Tensor::from_parts(t.shape().to_vec(), out)
}

fn check_eta(eta: f64) -> Result<()> {
    if eta > 0.0 && eta.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("prototype scale eta must be positive, got {eta}")))
    }
}

/// `softmax_c(eta * cos(f, mu_c))` per row. A zero-norm feature or
/// prototype has cosine 0 with everything.
pub fn prototype_logits(features: &Tensor, protos: &PrototypeSet, eta: f64) -> Result<Tensor> {
    check_eta(eta)?;
    let (b, f) = (features.shape()[0], features.shape()[1]);
    if features.rank() != 2 || f != protos.mu.shape()[1] {
        return Err(Error::shape("prototype_logits", features.shape(), protos.mu.shape()));
    }
    let c = protos.mu.shape()[0];
    let fu = unit_rows(features);
    let mu = unit_rows(&protos.mu);
    let mut out = Vec::with_capacity(b * c);
    for i in 0..b {
        let sims: Vec<f64> = (0..c)
            .map(|k| eta * fu.row(i).iter().zip(mu.row(k)).map(|(x, y)| x * y).sum::<f64>())
            .collect();
        out.extend(softmax(&sims));
    }
    Tensor::new(vec![b, c], out)
}

/// Graph version of [`prototype_logits`]; the prototypes are constants.
pub fn prototype_logits_var<'g>(features: Var<'g>, protos: &PrototypeSet, eta: f64) -> Result<Var<'g>> {
    check_eta(eta)?;
    let mu = features.graph().constant(unit_rows(&protos.mu));
    features.normalize_rows()?.matmul(mu.t()?)?.scale(eta)?.softmax()
}

/// Result of the per-row entropy comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub p_out: Tensor,
    pub labels: Vec<usize>,
    /// True where the prototype row was chosen.
    pub from_proto: Vec<bool>,
}

/// Row-wise choice of the lower-entropy prediction. Ties go to the
/// prototype side.
pub fn entropy_compare(p_ens: &Tensor, h_ens: &[f64], p_proto: &Tensor, h_proto: &[f64]) -> Result<Selection> {
    if p_ens.shape() != p_proto.shape() || h_ens.len() != p_ens.shape()[0] || h_proto.len() != h_ens.len() {
        return Err(Error::shape("entropy_compare", p_ens.shape(), p_proto.shape()));
    }
    let from_proto: Vec<bool> = h_ens.iter().zip(h_proto).map(|(e, p)| p <= e).collect();
    let mut data = Vec::with_capacity(p_ens.numel());
    for (i, &proto) in from_proto.iter().enumerate() {
        data.extend_from_slice(if proto { p_proto.row(i) } else { p_ens.row(i) });
    }
    let p_out = Tensor::new(p_ens.shape().to_vec(), data)?;
    Ok(Selection { labels: row_argmax(&p_out), p_out, from_proto })
}

/// Row `i` of the result is row `i` of `a` where `pick_b[i]` is false and
/// row `i` of `b` otherwise.
pub fn select_rows<'g>(a: Var<'g>, b: Var<'g>, pick_b: &[bool]) -> Result<Var<'g>> {
    let n = pick_b.len();
    let both = a.graph().concat(&[a, b], 0)?;
    let idx: Vec<usize> = pick_b.iter().enumerate().map(|(i, &p)| if p { n + i } else { i }).collect();
    both.index_select(&idx)
}

/// Which members of the combined set act as anchors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Anchors {
    /// Every raw and augmented view.
    #[default]
    All,
    /// Only the first half (raw views); positives and negatives still range
    /// over the whole set.
    RawOnly,
}

pub fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("contrastive temperature must be positive, got {tau}")))
    }
}

/// Clustering loss over the rows of `logits` (`[N, C]`):
///
/// `L_i = -1/|pos(i)| Σ_{j∈pos(i)} ln( exp(s_ij) / Σ_{k∈neg(i)} exp(s_ik) )`
///
/// with `s = cos / tau`, `pos(i)` the other rows sharing `labels[i]` and
/// `neg(i)` the rows with a different label. The denominator holds
/// negatives only. Anchors lacking positives or negatives contribute 0.
/// Returns `Σ_i L_i`.
pub fn contrastive_loss<'g>(logits: Var<'g>, labels: &[usize], tau: f64, anchors: Anchors) -> Result<Var<'g>> {
    check_tau(tau)?;
    let shape = logits.shape();
    let n = labels.len();
    if shape.len() != 2 || shape[0] != n {
        return Err(Error::shape("contrastive_loss", &shape, &[n]));
    }
    let anchor_end = match anchors {
        Anchors::All => n,
        Anchors::RawOnly => n / 2,
    };
    let mut valid = Vec::new();
    let mut pos_w = Vec::new();
    let mut neg_m = Vec::new();
    for i in 0..anchor_end {
        let pos = (0..n).filter(|&j| j != i && labels[j] == labels[i]).count();
        let neg = (0..n).filter(|&j| labels[j] != labels[i]).count();
        if pos == 0 || neg == 0 {
            continue;
        }
        valid.push(i);
        for j in 0..n {
            pos_w.push(if j != i && labels[j] == labels[i] { 1.0 / pos as f64 } else { 0.0 });
            neg_m.push(if labels[j] != labels[i] { 1.0 } else { 0.0 });
        }
    }
    let g = logits.graph();
    if valid.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let v = valid.len();
    let z = logits.normalize_rows()?;
    let sims = z.index_select(&valid)?.matmul(z.t()?)?.scale(1.0 / tau)?;
    let pos_w = g.constant(Tensor::from_parts(vec![v, n], pos_w));
    let neg_m = g.constant(Tensor::from_parts(vec![v, n], neg_m));
    let attract = sims.mul(pos_w)?.sum_axis(1)?;
    let repel = sims.exp()?.mul(neg_m)?.sum_axis(1)?.ln()?;
    repel.sub(attract)?.sum()
}

/// Value-only [`contrastive_loss`].
pub fn contrastive_loss_value(logits: &Tensor, labels: &[usize], tau: f64, anchors: Anchors) -> Result<f64> {
    let g = crate::autodiff::Graph::new();
    contrastive_loss(g.constant(logits.clone()), labels, tau, anchors)?.item()
}

/// Method settings; learning rate and layer selection live with the runtime.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AccupConfig {
    /// Entries kept per class when building prototypes.
    pub k: usize,
    pub eta: f64,
    pub tau: f64,
    /// Weight of the raw view in the ensemble.
    pub weight: f64,
    pub weight_mode: WeightMode,
    pub augment: AugmentSpec,
    pub anchors: Anchors,
    pub use_prototypes: bool,
    pub use_entropy_comparison: bool,
    pub use_augmentation: bool,
    pub use_contrast: bool,
}

impl Default for AccupConfig {
    fn default() -> Self {
        Self {
            k: 10,
            eta: 20.0,
            tau: 0.7,
            weight: 0.5,
            weight_mode: WeightMode::Fixed,
            augment: AugmentSpec::default(),
            anchors: Anchors::All,
            use_prototypes: true,
            use_entropy_comparison: true,
            use_augmentation: true,
            use_contrast: true,
        }
    }
}

impl AccupConfig {
    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)?;
        check_eta(self.eta)?;
        check_weight(self.weight)?;
        if self.k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        self.augment.validate()
    }

    /// Whether prototype predictions can reach `p_out` at all.
    pub fn prototypes_active(&self) -> bool {
        self.use_prototypes && self.use_entropy_comparison
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn entropy_examples() {
        assert!((shannon_entropy(&[0.0; 4]).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!(shannon_entropy(&[50.0, 0.0, 0.0, 0.0]).unwrap() < 1e-19);
        let p1 = 1.0 / (1.0 + (-1f64).exp());
        let p0 = 1.0 - p1;
        let direct = -(p1 * p1.ln() + p0 * p0.ln());
        assert!((shannon_entropy(&[1.0, 0.0]).unwrap() - direct).abs() < 1e-15);
        assert!((p1 - 0.7311).abs() < 1e-4);
        assert!(shannon_entropy(&[f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn ensemble_examples() {
        let raw = t(&[&[2.0, 0.0]]);
        let aug = t(&[&[0.0, 2.0]]);
        assert_eq!(ensemble(&raw, &aug, 0.5).unwrap().data(), &[1.0, 1.0]);
        let x = t(&[&[0.1, 1.0 / 3.0, -7.7]]);
        assert_eq!(ensemble(&x, &x, 0.5).unwrap(), x);
        for k in 1..10 {
            let w = k as f64 / 10.0;
            assert_eq!(ensemble(&raw, &raw, w).unwrap().data().len(), 2);
            let same = t(&[&[0.25, -3.0]]);
            let out = ensemble(&same, &same, w).unwrap();
            for (o, s) in out.data().iter().zip(same.data()) {
                assert!((o - s).abs() <= 4.0 * f64::EPSILON * s.abs());
            }
        }
        assert!(ensemble(&raw, &aug, 0.0).is_err());
        assert!(ensemble(&raw, &aug, 1.0).is_err());
    }

    #[test]
    fn ensemble_var_matches_value_version() {
        let g = Graph::new();
        let raw = t(&[&[1.5, -2.0], &[0.3, 7.0]]);
        let aug = t(&[&[0.5, 4.0], &[-1.0, 2.0]]);
        let w = g.constant(Tensor::scalar(0.3));
        let v = ensemble_var(g.constant(raw.clone()), g.constant(aug.clone()), w).unwrap();
        assert_eq!(v.value(), ensemble(&raw, &aug, 0.3).unwrap());
    }

    #[test]
    fn support_set_starts_from_classifier_rows() {
        let w = t(&[&[1.0, 0.0, 2.0], &[0.0, 1.0, -1.0]]);
        let s = SupportSet::from_classifier(&w).unwrap();
        assert_eq!(s.len(), 2);
        for c in 0..2 {
            let e = &s.class(c)[0];
            assert_eq!(e.feature, w.row(c));
            assert_eq!(e.entropy, 0.0);
            assert_eq!(e.origin, Origin::ClassifierInit);
        }
        let p = s.prototypes(5).unwrap();
        assert_eq!(p.mu, w);
        assert_eq!(p.counts, vec![1, 1]);
    }

    #[test]
    fn update_appends_under_argmax() {
        let mut s = SupportSet::from_classifier(&t(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        let before = s.clone();
        s.update(&Tensor::zeros(&[0, 2]), &Tensor::zeros(&[0, 2]), &[]).unwrap();
        assert_eq!(s, before);
        let feats = t(&[&[0.1, 0.2], &[0.3, 0.4], &[0.5, 0.6]]);
        let logits = t(&[&[2.0, 1.0], &[-1.0, 3.0], &[0.0, 0.5]]);
        s.update(&feats, &logits, &row_entropies(&logits).unwrap()).unwrap();
        assert_eq!(s.len(), 5);
        for c in 0..2 {
            for e in s.class(c).iter().filter(|e| e.origin == Origin::Stream) {
                assert_eq!(e.pseudo_label, argmax(&e.logits));
                assert_eq!(e.pseudo_label, c);
            }
        }
    }

    #[test]
    fn lowest_entropy_entry_wins() {
        let mut s = SupportSet::from_classifier(&t(&[&[0.0, 0.0], &[0.0, 0.0]])).unwrap();
        s.classes[0].clear();
        s.classes[0].push(SupportEntry {
            feature: vec![0.0, 1.0],
            logits: vec![1.0, 0.0],
            entropy: 0.9,
            pseudo_label: 0,
            origin: Origin::Stream,
        });
        s.classes[0].push(SupportEntry {
            feature: vec![1.0, 0.0],
            logits: vec![1.0, 0.0],
            entropy: 0.1,
            pseudo_label: 0,
            origin: Origin::Stream,
        });
        assert_eq!(s.prototypes(1).unwrap().mu.row(0), &[1.0, 0.0]);
        assert_eq!(s.prototypes(2).unwrap().mu.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn entropy_ties_keep_earlier_entries() {
        let mut s = SupportSet::from_classifier(&t(&[&[9.0], &[0.0]])).unwrap();
        for v in [1.0, 2.0, 3.0] {
            s.classes[0].push(SupportEntry {
                feature: vec![v],
                logits: vec![1.0, 0.0],
                entropy: 0.0,
                pseudo_label: 0,
                origin: Origin::Stream,
            });
        }
        assert_eq!(s.prototypes(2).unwrap().mu.row(0), &[5.0]);
    }

    /// Sort every entry by (entropy, position), keep the first `k`, average.
    fn oracle_prototype(entries: &[(Vec<f64>, f64)], k: usize) -> Vec<f64> {
        let mut order: Vec<usize> = (0..entries.len()).collect();
        order.sort_by(|&a, &b| entries[a].1.partial_cmp(&entries[b].1).unwrap().then(a.cmp(&b)));
        let kept = &order[..k.min(order.len())];
        let mut sum = vec![0.0; entries[0].0.len()];
        for &i in kept {
            for (s, v) in sum.iter_mut().zip(&entries[i].0) {
                *s += v;
            }
        }
        sum.into_iter().map(|s| s / kept.len() as f64).collect()
    }

    #[test]
    fn random_class_of_twenty_matches_sort_then_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut s = SupportSet::from_classifier(&t(&[&[0.0, 0.0, 0.0], &[0.0, 0.0, 0.0]])).unwrap();
        s.classes[0].clear();
        let mut raw = Vec::new();
        for _ in 0..20 {
            let f: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            // Coarse entropies so that ties occur.
            let h = (rng.random_range(0.0..1.0f64) * 5.0).floor() / 5.0;
            raw.push((f.clone(), h));
            s.classes[0].push(SupportEntry { feature: f, logits: vec![0.0, 0.0], entropy: h, pseudo_label: 0, origin: Origin::Stream });
        }
        assert_eq!(s.prototypes(5).unwrap().mu.row(0), oracle_prototype(&raw, 5).as_slice());
    }

    #[test]
    fn prototype_logits_examples() {
        let protos = PrototypeSet { mu: t(&[&[1.0, 0.0], &[0.0, 1.0]]), counts: vec![1, 1] };
        let p = prototype_logits(&t(&[&[1.0, 0.0]]), &protos, 1.0).unwrap();
        let e = 1f64.exp();
        assert!((p.data()[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((p.data()[0] - 0.7311).abs() < 1e-4);

        let sharp = prototype_logits(&t(&[&[0.9, 0.1]]), &protos, 100.0).unwrap();
        assert!(sharp.data()[0] > 0.99);

        let zero = prototype_logits(&t(&[&[0.0, 0.0]]), &protos, 5.0).unwrap();
        assert_eq!(zero.data(), &[0.5, 0.5]);
        assert!(prototype_logits(&t(&[&[1.0, 0.0]]), &protos, 0.0).is_err());
    }

    #[test]
    fn prototype_logits_var_matches_values() {
        let protos = PrototypeSet { mu: t(&[&[1.0, 2.0, 0.0], &[0.0, -1.0, 1.0], &[0.5, 0.5, 0.5]]), counts: vec![1; 3] };
        let f = t(&[&[0.3, -0.2, 1.0], &[2.0, 0.1, 0.0]]);
        let g = Graph::new();
        let v = prototype_logits_var(g.constant(f.clone()), &protos, 7.0).unwrap().value();
        let direct = prototype_logits(&f, &protos, 7.0).unwrap();
        for (a, b) in v.data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn entropy_compare_examples() {
        let pe = t(&[&[3.0, 0.0]]);
        let pp = t(&[&[0.2, 0.8]]);
        let s = entropy_compare(&pe, &[0.1], &pp, &[0.5]).unwrap();
        assert_eq!(s.p_out, pe);
        assert_eq!(s.labels, vec![0]);
        let s = entropy_compare(&pe, &[0.5], &pp, &[0.5]).unwrap();
        assert_eq!(s.p_out, pp);
        assert_eq!(s.labels, vec![1]);
        assert!(s.from_proto[0]);
    }

    #[test]
    fn mixed_batch_matches_rowwise_selection() {
        let pe = t(&[&[1.0, 0.0, 0.0], &[0.0, 5.0, 0.0], &[0.1, 0.2, 0.3], &[2.0, 2.0, 0.0]]);
        let pp = t(&[&[0.1, 0.8, 0.1], &[0.3, 0.3, 0.4], &[0.9, 0.05, 0.05], &[0.2, 0.2, 0.6]]);
        let he = row_entropies(&pe).unwrap();
        let hp = row_entropies(&pp).unwrap();
        let s = entropy_compare(&pe, &he, &pp, &hp).unwrap();
        for i in 0..4 {
            let expect = if he[i] < hp[i] { pe.row(i) } else { pp.row(i) };
            assert_eq!(s.p_out.row(i), expect);
            assert_eq!(s.labels[i], argmax(expect));
        }
    }

    #[test]
    fn select_rows_picks_per_row() {
        let g = Graph::new();
        let a = g.constant(t(&[&[1.0], &[2.0], &[3.0]]));
        let b = g.constant(t(&[&[10.0], &[20.0], &[30.0]]));
        let s = select_rows(a, b, &[false, true, false]).unwrap();
        assert_eq!(s.value().data(), &[1.0, 20.0, 3.0]);
    }

    /// The clustering loss evaluated literally with nested loops over pairs.
    fn oracle_contrastive(logits: &[Vec<f64>], labels: &[usize], tau: f64, anchor_end: usize) -> f64 {
        let n = labels.len();
        let cos = |a: &[f64], b: &[f64]| {
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na < NORM_EPS || nb < NORM_EPS {
                return 0.0;
            }
            a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
        };
        let mut total = 0.0;
        for i in 0..anchor_end {
            let pos: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
            let neg: Vec<usize> = (0..n).filter(|&k| labels[k] != labels[i]).collect();
            if pos.is_empty() || neg.is_empty() {
                continue;
            }
            let mut denom = 0.0;
            for &k in &neg {
                denom += (cos(&logits[i], &logits[k]) / tau).exp();
            }
            let mut li = 0.0;
            for &j in &pos {
                li += ((cos(&logits[i], &logits[j]) / tau).exp() / denom).ln();
            }
            total += -li / pos.len() as f64;
        }
        total
    }

    fn loss(rows: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
        contrastive_loss_value(&Tensor::from_rows(rows).unwrap(), labels, tau, Anchors::All).unwrap()
    }

    #[test]
    fn contrastive_degenerate_batches_are_zero() {
        let rows = vec![vec![1.0, 0.0], vec![0.5, 0.5], vec![0.0, 1.0], vec![2.0, 1.0]];
        assert_eq!(loss(&rows, &[1, 1, 1, 1], 0.5), 0.0);
        assert_eq!(loss(&rows[..2], &[0, 1], 0.5), 0.0);
        assert!(contrastive_loss_value(&Tensor::from_rows(&rows).unwrap(), &[0; 4], 0.0, Anchors::All).is_err());
    }

    #[test]
    fn contrastive_two_by_two_matches_double_loop() {
        let rows = vec![vec![1.0, 0.2, -0.3], vec![0.1, 0.9, 0.0], vec![0.8, 0.3, -0.1], vec![-0.2, 1.1, 0.4]];
        let labels = [0, 1, 0, 1];
        let got = loss(&rows, &labels, 0.7);
        let want = oracle_contrastive(&rows, &labels, 0.7, 4);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        let raw_only =
            contrastive_loss_value(&Tensor::from_rows(&rows).unwrap(), &labels, 0.7, Anchors::RawOnly).unwrap();
        assert!((raw_only - oracle_contrastive(&rows, &labels, 0.7, 2)).abs() < 1e-12);
    }

    #[test]
    fn contrastive_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<f64> = (0..6 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels = [0, 1, 2, 0, 1, 2];
        let x = Tensor::new(vec![6, 3], rows).unwrap();
        let g = Graph::new();
        let v = g.param(x.clone());
        let l = contrastive_loss(v, &labels, 0.4, Anchors::All).unwrap();
        let grads = g.backward(l).unwrap();
        let an = grads.get(v).unwrap().to_vec();
        let h = 1e-5;
        for i in 0..x.numel() {
            let mut up = x.clone();
            up.data_mut()[i] += h;
            let mut down = x.clone();
            down.data_mut()[i] -= h;
            let fd = (contrastive_loss_value(&up, &labels, 0.4, Anchors::All).unwrap()
                - contrastive_loss_value(&down, &labels, 0.4, Anchors::All).unwrap())
                / (2.0 * h);
            let rel = (an[i] - fd).abs() / an[i].abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-4, "entry {i}: {} vs {fd}", an[i]);
        }
    }

    #[test]
    fn contrastive_responds_to_pair_similarity() {
        // 2-D unit vectors at given angles; rows 0 and 1 share a label.
        let at = |a: f64| vec![a.cos(), a.sin()];
        let labels = [0, 0, 1, 1];
        let base = loss(&[at(0.0), at(1.0), at(2.0), at(2.5)], &labels, 0.5);
        let closer_pos = loss(&[at(0.0), at(0.5), at(2.0), at(2.5)], &labels, 0.5);
        assert!(closer_pos < base);
        // Move row 2 (a negative of row 0) towards row 0, leaving the
        // positive pairs untouched.
        let closer_neg = loss(&[at(0.0), at(1.0), at(1.5), at(2.5)], &labels, 0.5);
        assert!(closer_neg > base);
    }

    #[test]
    fn config_validation() {
        assert!(AccupConfig::default().validate().is_ok());
        assert!(AccupConfig { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(AccupConfig { eta: -1.0, ..Default::default() }.validate().is_err());
        assert!(AccupConfig { weight: 1.0, ..Default::default() }.validate().is_err());
        assert!(AccupConfig { k: 0, ..Default::default() }.validate().is_err());
        let json = serde_json::to_string(&AccupConfig::default()).unwrap();
        let back: AccupConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, AccupConfig::default());
    }

    fn small_rows() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>)> {
        (1usize..5, 2usize..4).prop_flat_map(|(b, c)| {
            (
                prop::collection::vec(prop::collection::vec(-2.0f64..2.0, c), 2 * b),
                prop::collection::vec(0..c, b),
            )
                .prop_map(|(rows, half)| {
                    let labels = half.iter().chain(half.iter()).copied().collect();
                    (rows, labels)
                })
        })
    }

    proptest! {
        #[test]
        fn prototype_rows_sum_to_one_and_ignore_scale(
            f in prop::collection::vec(0.01f64..3.0, 4),
            alpha in 0.1f64..50.0,
            eta in 0.5f64..60.0,
        ) {
            let protos = PrototypeSet { mu: t(&[&[1.0, 0.0, 1.0, 0.0], &[0.0, 1.0, 0.0, 1.0], &[1.0, 1.0, 0.0, 0.0]]), counts: vec![1; 3] };
            let x = Tensor::new(vec![1, 4], f.clone()).unwrap();
            let xs = Tensor::new(vec![1, 4], f.iter().map(|v| v * alpha).collect()).unwrap();
            let p = prototype_logits(&x, &protos, eta).unwrap();
            let q = prototype_logits(&xs, &protos, eta).unwrap();
            prop_assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (a, b) in p.data().iter().zip(q.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn contrastive_ignores_anchor_order((rows, labels) in small_rows(), seed in any::<u64>()) {
            let mut perm: Vec<usize> = (0..rows.len()).collect();
            use rand::seq::SliceRandom;
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let prow: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
            let plab: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
            let a = loss(&rows, &labels, 0.5);
            let b = loss(&prow, &plab, 0.5);
            prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
        }

        #[test]
        fn contrastive_matches_oracle((rows, labels) in small_rows(), tau in 0.1f64..1.0) {
            let got = loss(&rows, &labels, tau);
            let want = oracle_contrastive(&rows, &labels, tau, rows.len());
            prop_assert!((got - want).abs() < 1e-10, "{} vs {}", got, want);
        }
    }

    #[test]
    fn support_snapshot_round_trips() {
        let mut s = SupportSet::from_classifier(&t(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        s.update(&t(&[&[2.0, 3.0]]), &t(&[&[0.1, 0.9]]), &[0.4]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("support.ttaw");
        s.save(&path).unwrap();
        let tensors = crate::tensor::read_snapshot(fs::File::open(&path).unwrap()).unwrap();
        assert_eq!(tensors, s.export().0);
        assert_eq!(tensors[0].1.row(2), &[2.0, 3.0]);
        let meta: Vec<EntryMeta> = serde_json::from_slice(&fs::read(sidecar_path(&path)).unwrap()).unwrap();
        assert_eq!(meta.len(), 3);
        assert_eq!(meta[2], EntryMeta { class: 1, entropy: 0.4, origin: Origin::Stream });
    }
}
