//! Long-tail uniformization, Mixup batch construction, a small softmax
//! classifier trained with momentum SGD, and evaluation metrics.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledSampleSet;
use crate::error::{check_dim, Error, Result};
use crate::rng;
use crate::world::{argmax, softmax, GaussianMixtureWorld};

pub const DEFAULT_HEAD_THRESHOLD: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixupMode {
    None,
    Random,
    All,
}

impl MixupMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Random => "random",
            Self::All => "all",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    Linear,
    /// One hidden ReLU layer.
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_mode")]
    pub mixup_mode: MixupMode,
    #[serde(default = "d_beta")]
    pub mixup_beta_a: f64,
    #[serde(default = "d_classifier")]
    pub classifier: ClassifierKind,
    #[serde(default = "d_hidden")]
    pub hidden: usize,
    /// Standardize inputs with the real training rows' mean and std.
    #[serde(default = "d_true")]
    pub standardize: bool,
    #[serde(default)]
    pub seed: u64,
}

fn d_epochs() -> usize {
    150
}
fn d_batch() -> usize {
    512
}
fn d_lr() -> f64 {
    0.01
}
fn d_momentum() -> f64 {
    0.9
}
fn d_mode() -> MixupMode {
    MixupMode::All
}
fn d_beta() -> f64 {
    1.0
}
fn d_classifier() -> ClassifierKind {
    ClassifierKind::Linear
}
fn d_hidden() -> usize {
    32
}
fn d_true() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: d_epochs(),
            batch_size: d_batch(),
            lr: d_lr(),
            momentum: d_momentum(),
            mixup_mode: d_mode(),
            mixup_beta_a: d_beta(),
            classifier: d_classifier(),
            hidden: d_hidden(),
            standardize: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, field: &str) -> Result<()> {
        let bad = |k: &str, m: &str| Err(Error::config(format!("{field}.{k}"), m));
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must lie in [0, 1)");
        }
        if !(self.mixup_beta_a > 0.0 && self.mixup_beta_a.is_finite()) {
            return bad("mixup_beta_a", "must be positive");
        }
        if self.classifier == ClassifierKind::Mlp && self.hidden == 0 {
            return bad("hidden", "must be positive");
        }
        Ok(())
    }
}

/// Synthetic rows needed to lift every class to the largest count.
pub fn uniformize_plan(counts: &[usize]) -> Vec<usize> {
    let max = counts.iter().copied().max().unwrap_or(0);
    counts.iter().map(|c| max - c).collect()
}

pub fn one_hot(class: usize, classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; classes];
    v[class] = 1.0;
    v
}

/// Convex combination of a real and a synthetic example and their labels.
pub fn mixup(
    x_r: &[f64],
    y_r: &[f64],
    x_s: &[f64],
    y_s: &[f64],
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_dim(x_r.len(), x_s.len())?;
    check_dim(y_r.len(), y_s.len())?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda {lambda} outside [0, 1]")));
    }
    let mix = |a: &[f64], b: &[f64]| -> Vec<f64> {
        a.iter().zip(b).map(|(u, v)| lambda * u + (1.0 - lambda) * v).collect()
    };
    Ok((mix(x_r, x_s), mix(y_r, y_s)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RowSource {
    Real(usize),
    Mixed { real: usize, synth: usize, lambda: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchRow {
    pub x: Vec<f64>,
    pub target: Vec<f64>,
    pub source: RowSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub rows: Vec<BatchRow>,
    pub mixup: bool,
}

fn target_of(set: &LabeledSampleSet, i: usize, classes: usize) -> Vec<f64> {
    let r = &set.rows()[i];
    r.soft_label.clone().unwrap_or_else(|| one_hot(r.label, classes))
}

/// Endless stream of indices in `0..n`, reshuffled on every pass.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    fn next<R: Rng + ?Sized>(&mut self, rng: &mut R) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// One epoch of batches.
///
/// `All` splits the shuffled synthetic set into Mixup batches, each synthetic
/// row paired once with a real row drawn from a reshuffled cycle, and adds the
/// same number of plain real batches. `Random` partitions the real set and
/// turns half of the batches (rounded down) into Mixup batches with synthetic
/// partners drawn with replacement.
pub fn build_epoch_batches<R: Rng + ?Sized>(
    real: &LabeledSampleSet,
    synth: &LabeledSampleSet,
    cfg: &TrainConfig,
    classes: usize,
    rng: &mut R,
) -> Result<Vec<Batch>> {
    cfg.validate("train")?;
    if real.is_empty() {
        return Err(Error::Data("no real training rows".into()));
    }
    if cfg.mixup_mode != MixupMode::None {
        if synth.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "mixup mode `{}` needs a non-empty synthetic set",
                cfg.mixup_mode.as_str()
            )));
        }
        check_dim(real.dim(), synth.dim())?;
    }
    let beta = Beta::new(cfg.mixup_beta_a, cfg.mixup_beta_a)
        .map_err(|e| Error::config("train.mixup_beta_a", e.to_string()))?;
    let b = cfg.batch_size;
    let plain = |idx: &[usize]| Batch {
        rows: idx
            .iter()
            .map(|&i| BatchRow {
                x: real.rows()[i].x.clone(),
                target: target_of(real, i, classes),
                source: RowSource::Real(i),
            })
            .collect(),
        mixup: false,
    };
    let mixed_row = |ri: usize, si: usize, rng: &mut R| -> Result<BatchRow> {
        let lambda: f64 = beta.sample(rng);
        let (x, target) = mixup(
            &real.rows()[ri].x,
            &target_of(real, ri, classes),
            &synth.rows()[si].x,
            &target_of(synth, si, classes),
            lambda,
        )?;
        Ok(BatchRow {
            x,
            target,
            source: RowSource::Mixed {
                real: ri,
                synth: si,
                lambda,
            },
        })
    };

    let mut batches = Vec::new();
    match cfg.mixup_mode {
        MixupMode::None => {
            let mut order: Vec<usize> = (0..real.len()).collect();
            order.shuffle(rng);
            batches.extend(order.chunks(b).map(plain));
        }
        MixupMode::Random => {
            let mut order: Vec<usize> = (0..real.len()).collect();
            order.shuffle(rng);
            let chunks: Vec<&[usize]> = order.chunks(b).collect();
            let mut pick: Vec<usize> = (0..chunks.len()).collect();
            pick.shuffle(rng);
            let n_mix = chunks.len() / 2;
            let mut is_mix = vec![false; chunks.len()];
            for &i in &pick[..n_mix] {
                is_mix[i] = true;
            }
            for (chunk, mix) in chunks.into_iter().zip(is_mix) {
                if mix {
                    let rows = chunk
                        .iter()
                        .map(|&ri| {
                            let si = rng.random_range(0..synth.len());
                            mixed_row(ri, si, rng)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    batches.push(Batch { rows, mixup: true });
                } else {
                    batches.push(plain(chunk));
                }
            }
        }
        MixupMode::All => {
            let mut s_order: Vec<usize> = (0..synth.len()).collect();
            s_order.shuffle(rng);
            let mut reals = Cycler::new(real.len(), rng);
            for chunk in s_order.chunks(b) {
                let rows = chunk
                    .iter()
                    .map(|&si| {
                        let ri = reals.next(rng);
                        mixed_row(ri, si, rng)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let partner: Vec<usize> = (0..chunk.len()).map(|_| reals.next(rng)).collect();
                batches.push(Batch { rows, mixup: true });
                batches.push(plain(&partner));
            }
            batches.shuffle(rng);
        }
    }
    Ok(batches)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub kind: ClassifierKind,
    pub dim: usize,
    pub classes: usize,
    pub hidden: usize,
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
    pub params: Vec<f64>,
}

pub trait Predict: Sync {
    fn predict(&self, x: &[f64]) -> usize;
}

impl<F: Fn(&[f64]) -> usize + Sync> Predict for F {
    fn predict(&self, x: &[f64]) -> usize {
        self(x)
    }
}

impl Predict for Classifier {
    fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }
}

impl Classifier {
    /// Output layer starts at zero, so an untrained model predicts uniform
    /// probabilities; the MLP hidden layer gets He-scaled weights.
    pub fn new(kind: ClassifierKind, dim: usize, classes: usize, hidden: usize, seed: u64) -> Self {
        let (d, c, h) = (dim, classes, hidden);
        let params = match kind {
            ClassifierKind::Linear => vec![0.0; c * d + c],
            ClassifierKind::Mlp => {
                let mut r = rng::stream(&[seed, rng::tag::TRAIN, 0x1417]);
                let s = (2.0 / d as f64).sqrt();
                let mut p: Vec<f64> = (0..h * d)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut r);
                        s * z
                    })
                    .collect();
                p.resize(h * d + h + c * h + c, 0.0);
                p
            }
        };
        Self {
            kind,
            dim,
            classes,
            hidden: if kind == ClassifierKind::Mlp { hidden } else { 0 },
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
            params,
        }
    }

    /// Fits the input standardization to `rows`; zero-variance coordinates
    /// keep unit scale.
    pub fn standardize_on(&mut self, rows: &LabeledSampleSet) {
        if rows.is_empty() {
            return;
        }
        let n = rows.len() as f64;
        for d in 0..self.dim {
            let m = rows.iter().map(|r| r.x[d]).sum::<f64>() / n;
            let v = rows.iter().map(|r| (r.x[d] - m).powi(2)).sum::<f64>() / n;
            self.shift[d] = m;
            self.scale[d] = if v > 0.0 { v.sqrt() } else { 1.0 };
        }
    }

    fn input(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.shift)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    fn hidden_layer(&self, z: &[f64]) -> Vec<f64> {
        let (d, h) = (self.dim, self.hidden);
        let (w1, b1) = (&self.params[..h * d], &self.params[h * d..h * d + h]);
        (0..h)
            .map(|j| {
                let pre = b1[j] + w1[j * d..(j + 1) * d].iter().zip(z).map(|(a, b)| a * b).sum::<f64>();
                pre.max(0.0)
            })
            .collect()
    }

    fn head(&self, feats: &[f64], offset: usize) -> Vec<f64> {
        let k = feats.len();
        let c = self.classes;
        let w = &self.params[offset..offset + c * k];
        let b = &self.params[offset + c * k..offset + c * k + c];
        (0..c)
            .map(|i| b[i] + w[i * k..(i + 1) * k].iter().zip(feats).map(|(a, v)| a * v).sum::<f64>())
            .collect()
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let z = self.input(x);
        match self.kind {
            ClassifierKind::Linear => self.head(&z, 0),
            ClassifierKind::Mlp => {
                let h = self.hidden_layer(&z);
                self.head(&h, self.hidden * self.dim + self.hidden)
            }
        }
    }

    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.logits(x))
    }

    /// Mean cross-entropy against the batch targets and its gradient.
    pub fn loss_and_grad(&self, batch: &Batch) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        let n = batch.rows.len().max(1) as f64;
        let (d, h, c) = (self.dim, self.hidden, self.classes);
        for row in &batch.rows {
            let z = self.input(&row.x);
            let (feats, offset) = match self.kind {
                ClassifierKind::Linear => (z.clone(), 0),
                ClassifierKind::Mlp => (self.hidden_layer(&z), h * d + h),
            };
            let logits = self.head(&feats, offset);
            let p = softmax(&logits);
            let lse = crate::world::log_sum_exp(&logits);
            loss -= row
                .target
                .iter()
                .zip(&logits)
                .filter(|(t, _)| **t > 0.0)
                .map(|(t, l)| t * (l - lse))
                .sum::<f64>()
                / n;
            let g: Vec<f64> = p.iter().zip(&row.target).map(|(a, t)| (a - t) / n).collect();
            let k = feats.len();
            for i in 0..c {
                for (j, f) in feats.iter().enumerate() {
                    grad[offset + i * k + j] += g[i] * f;
                }
                grad[offset + c * k + i] += g[i];
            }
            if self.kind == ClassifierKind::Mlp {
                let w2 = &self.params[offset..offset + c * k];
                for j in 0..h {
                    if feats[j] <= 0.0 {
                        continue;
                    }
                    let dh: f64 = (0..c).map(|i| w2[i * k + j] * g[i]).sum();
                    for (q, zq) in z.iter().enumerate() {
                        grad[j * d + q] += dh * zq;
                    }
                    grad[h * d + j] += dh;
                }
            }
        }
        (loss, grad)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("classifier serializes");
        s.push('\n');
        s
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_json().as_bytes())
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

/// Momentum SGD (velocity `v = m v + g`, step `-lr v`) with the learning
/// rate cosine-annealed per epoch. `batches(epoch)` supplies each epoch.
pub fn fit<F>(
    clf: &mut Classifier,
    epochs: usize,
    lr: f64,
    momentum: f64,
    mut batches: F,
) -> Result<f64>
where
    F: FnMut(usize) -> Result<Vec<Batch>>,
{
    let mut velocity = vec![0.0; clf.params.len()];
    let mut last = f64::NAN;
    for epoch in 0..epochs {
        let lr_e = 0.5 * lr * (1.0 + (PI * epoch as f64 / epochs as f64).cos());
        let mut total = 0.0;
        let mut count = 0usize;
        for batch in batches(epoch)? {
            if batch.rows.is_empty() {
                continue;
            }
            let (loss, grad) = clf.loss_and_grad(&batch);
            for ((p, v), g) in clf.params.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                *v = momentum * *v + g;
                *p -= lr_e * *v;
            }
            total += loss * batch.rows.len() as f64;
            count += batch.rows.len();
        }
        last = total / count.max(1) as f64;
        if !last.is_finite() {
            return Err(Error::Invariant(format!("training loss diverged at epoch {epoch}")));
        }
    }
    Ok(last)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub mixup_batches_per_epoch: usize,
    pub final_loss: Option<f64>,
    pub flags: Vec<String>,
}

/// Trains a classifier on `real` with Mixup partners from `synth`.
pub fn train_classifier(
    real: &LabeledSampleSet,
    synth: &LabeledSampleSet,
    cfg: &TrainConfig,
    classes: usize,
) -> Result<(Classifier, TrainSummary)> {
    cfg.validate("train")?;
    if real.is_empty() {
        return Err(Error::Data("no real training rows".into()));
    }
    for set in [real, synth] {
        if let Some(m) = set.max_label() {
            if m >= classes {
                return Err(Error::UnknownClass { class: m, classes });
            }
        }
    }
    let mut flags = Vec::new();
    if real.counts(classes)?.iter().filter(|&&n| n > 0).count() < 2 {
        flags.push("single_class_training_data".to_string());
    }
    let mut clf = Classifier::new(cfg.classifier, real.dim(), classes, cfg.hidden, cfg.seed);
    if cfg.standardize {
        clf.standardize_on(real);
    }
    let mut rng = rng::stream(&[cfg.seed, rng::tag::TRAIN]);
    let probe = build_epoch_batches(real, synth, cfg, classes, &mut rng::stream(&[cfg.seed]))?;
    let loss = fit(&mut clf, cfg.epochs, cfg.lr, cfg.momentum, |_| {
        build_epoch_batches(real, synth, cfg, classes, &mut rng)
    })?;
    let mixup_batches = probe.iter().filter(|b| b.mixup).count();
    if cfg.mixup_mode != MixupMode::None && mixup_batches == 0 {
        flags.push("no_mixup_batches".to_string());
    }
    Ok((
        clf,
        TrainSummary {
            epochs: cfg.epochs,
            batches_per_epoch: probe.len(),
            mixup_batches_per_epoch: mixup_batches,
            final_loss: (cfg.epochs > 0).then_some(loss),
            flags,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    /// Top-1 accuracy per class, in percent.
    pub per_class_top1: Vec<f64>,
    pub head_top1: Option<f64>,
    pub tail_top1: Option<f64>,
    pub overall_top1: f64,
    pub head_classes: Vec<usize>,
    pub tail_classes: Vec<usize>,
    pub train_counts: Vec<usize>,
    /// Oracle diversity of each class's synthetic rows, when there are any.
    #[serde(default)]
    pub diversity: Vec<Option<f64>>,
    /// Row c: fraction of class-c synthetic rows the oracle assigns to each class.
    #[serde(default)]
    pub confusion: Vec<Vec<f64>>,
    #[serde(default)]
    pub flags: Vec<String>,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
    #[serde(default)]
    pub config: serde_json::Value,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Per-class, head, tail and overall (macro) top-1 accuracy. A class is head
/// when its training count reaches `head_threshold`.
pub fn evaluate<P: Predict + ?Sized>(
    model: &P,
    test: &LabeledSampleSet,
    train_counts: &[usize],
    head_threshold: usize,
) -> Result<MetricsReport> {
    let classes = train_counts.len();
    let counts = test.counts(classes)?;
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Data(format!("test set has no samples of class {c}")));
    }
    let correct: Vec<usize> = test
        .rows()
        .par_iter()
        .map(|r| {
            let mut v = vec![0usize; classes];
            if model.predict(&r.x) == r.label {
                v[r.label] = 1;
            }
            v
        })
        .reduce(
            || vec![0usize; classes],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );
    let per_class: Vec<f64> = correct
        .iter()
        .zip(&counts)
        .map(|(&k, &n)| 100.0 * k as f64 / n as f64)
        .collect();
    let (head, tail): (Vec<usize>, Vec<usize>) =
        (0..classes).partition(|&c| train_counts[c] >= head_threshold);
    Ok(MetricsReport {
        label: String::new(),
        head_top1: mean(head.iter().map(|&c| per_class[c])),
        tail_top1: mean(tail.iter().map(|&c| per_class[c])),
        overall_top1: mean(per_class.iter().copied()).unwrap_or(0.0),
        per_class_top1: per_class,
        head_classes: head,
        tail_classes: tail,
        train_counts: train_counts.to_vec(),
        diversity: Vec::new(),
        confusion: Vec::new(),
        flags: Vec::new(),
        meta: BTreeMap::new(),
        config: serde_json::Value::Null,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.1}")).unwrap_or_else(|| "-".into())
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    /// Aligned Head / Tail / Overall table followed by per-class accuracy.
    pub fn to_table(&self) -> String {
        let name = if self.label.is_empty() { "run" } else { &self.label };
        let w = name.len().max(6);
        let mut s = String::new();
        let _ = writeln!(s, "{:<w$}  {:>6}  {:>6}  {:>7}", "Method", "Head", "Tail", "Overall");
        let _ = writeln!(
            s,
            "{:<w$}  {:>6}  {:>6}  {:>7.1}",
            name,
            fmt_opt(self.head_top1),
            fmt_opt(self.tail_top1),
            self.overall_top1
        );
        s.push('\n');
        let _ = writeln!(s, "{:>5}  {:>5}  {:>6}", "class", "train", "top1");
        for (c, acc) in self.per_class_top1.iter().enumerate() {
            let _ = writeln!(s, "{:>5}  {:>5}  {:>6.1}", c, self.train_counts.get(c).copied().unwrap_or(0), acc);
        }
        s
    }
}

fn posteriors(points: &[Vec<f64>], world: &GaussianMixtureWorld) -> Result<Vec<Vec<f64>>> {
    points.par_iter().map(|x| world.oracle_posterior(x)).collect()
}

/// `exp(mean KL(p(c|x) || mean_x p(c|x)))` under the oracle posterior.
pub fn diversity_score(points: &[Vec<f64>], world: &GaussianMixtureWorld) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::Data("diversity of an empty set".into()));
    }
    let post = posteriors(points, world)?;
    let c = world.num_classes();
    let n = post.len() as f64;
    let mut marginal = vec![0.0; c];
    for p in &post {
        marginal.iter_mut().zip(p).for_each(|(m, v)| *m += v / n);
    }
    let kl: f64 = post
        .iter()
        .map(|p| {
            p.iter()
                .zip(&marginal)
                .filter(|(v, _)| **v > 0.0)
                .map(|(v, m)| v * (v / m).ln())
                .sum::<f64>()
        })
        .sum::<f64>()
        / n;
    Ok(kl.max(0.0).exp())
}

/// Fraction of `points` whose oracle argmax is `c_minus`.
pub fn confusion_rate(points: &[Vec<f64>], world: &GaussianMixtureWorld, c_minus: usize) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::Data("confusion rate of an empty set".into()));
    }
    if c_minus >= world.num_classes() {
        return Err(Error::UnknownClass {
            class: c_minus,
            classes: world.num_classes(),
        });
    }
    let hits = points
        .par_iter()
        .map(|x| world.oracle_argmax(x).map(|k| (k == c_minus) as usize))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(hits as f64 / points.len() as f64)
}

/// Oracle confusion matrix of a labeled set; rows of absent classes are zero.
pub fn confusion_matrix(set: &LabeledSampleSet, world: &GaussianMixtureWorld) -> Result<Vec<Vec<f64>>> {
    let c = world.num_classes();
    let mut m = vec![vec![0.0; c]; c];
    let counts = set.counts(c)?;
    let preds = set
        .rows()
        .par_iter()
        .map(|r| world.oracle_argmax(&r.x).map(|k| (r.label, k)))
        .collect::<Result<Vec<_>>>()?;
    for (l, k) in preds {
        m[l][k] += 1.0 / counts[l] as f64;
    }
    Ok(m)
}
