//! Analytic class-conditional Gaussian-mixture worlds.
//!
//! A world plays three roles: it generates the "real" data, its exact score
//! stands in for a trained noise-prediction network, and its Bayes posterior
//! is the oracle classifier used by the metrics.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{LabeledSampleSet, Provenance, Row};
use crate::error::{check_dim, Error, Result};
use crate::rng;
use crate::schedule::NoiseSchedule;

pub const DEFAULT_KAPPA: f64 = 8.0;
const SUM_TOL: f64 = 1e-9;

/// Serializable description of a world, as stored in preset files and configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub name: String,
    pub dim: usize,
    /// Softmax sharpness mapping condition logits to class-blend weights.
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    /// Class priors; uniform when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub priors: Option<Vec<f64>>,
    pub classes: Vec<ClassSpec>,
}

fn default_kappa() -> f64 {
    DEFAULT_KAPPA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    pub components: Vec<Component>,
}

/// Isotropic Gaussian mixture component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub std: f64,
}

/// Class condition fed to the denoiser.
#[derive(Debug, Clone, PartialEq)]
pub enum Condition {
    /// The unconditional token ∅; the denoiser falls back to class priors.
    Null,
    /// Logits over classes, mapped to blend weights by `softmax(kappa * y)`.
    Logits(Vec<f64>),
}

impl Condition {
    pub fn one_hot(class: usize, classes: usize) -> Self {
        let mut v = vec![0.0; classes];
        v[class] = 1.0;
        Condition::Logits(v)
    }

    pub fn is_null(&self) -> bool {
        matches!(self, Condition::Null)
    }

    pub fn logits(&self) -> Option<&[f64]> {
        match self {
            Condition::Null => None,
            Condition::Logits(v) => Some(v),
        }
    }
}

#[derive(Debug, Clone)]
struct FlatComponent {
    class: usize,
    log_weight: f64,
    mean: Vec<f64>,
    var: f64,
}

#[derive(Debug, Clone)]
pub struct GaussianMixtureWorld {
    spec: WorldSpec,
    priors: Vec<f64>,
    flat: Vec<FlatComponent>,
}

impl GaussianMixtureWorld {
    pub fn new(spec: WorldSpec) -> Result<Self> {
        let field = |f: &str| format!("world.{f}");
        if spec.dim == 0 {
            return Err(Error::config(field("dim"), "must be positive"));
        }
        if spec.classes.is_empty() {
            return Err(Error::config(field("classes"), "at least one class required"));
        }
        if !(spec.kappa > 0.0 && spec.kappa.is_finite()) {
            return Err(Error::config(field("kappa"), "must be positive and finite"));
        }
        let c = spec.classes.len();
        let priors = match &spec.priors {
            None => vec![1.0 / c as f64; c],
            Some(p) => {
                if p.len() != c {
                    return Err(Error::config(
                        field("priors"),
                        format!("{} priors for {c} classes", p.len()),
                    ));
                }
                if p.iter().any(|v| !(*v > 0.0 && *v <= 1.0)) {
                    return Err(Error::config(field("priors"), "priors must lie in (0, 1]"));
                }
                let s: f64 = p.iter().sum();
                if (s - 1.0).abs() > SUM_TOL {
                    return Err(Error::config(field("priors"), format!("priors sum to {s}")));
                }
                p.clone()
            }
        };
        let mut flat = Vec::new();
        for (ci, class) in spec.classes.iter().enumerate() {
            let at = |f: &str| format!("world.classes[{ci}].{f}");
            if class.components.is_empty() {
                return Err(Error::config(at("components"), "class has no components"));
            }
            let mut total = 0.0;
            for (k, comp) in class.components.iter().enumerate() {
                if !(comp.weight > 0.0 && comp.weight <= 1.0) {
                    return Err(Error::config(
                        at(&format!("components[{k}].weight")),
                        "weight must lie in (0, 1]",
                    ));
                }
                if !(comp.std > 0.0 && comp.std.is_finite()) {
                    return Err(Error::config(
                        at(&format!("components[{k}].std")),
                        "std must be positive",
                    ));
                }
                if comp.mean.len() != spec.dim {
                    return Err(Error::config(
                        at(&format!("components[{k}].mean")),
                        format!("mean has {} entries, world dim is {}", comp.mean.len(), spec.dim),
                    ));
                }
                total += comp.weight;
                flat.push(FlatComponent {
                    class: ci,
                    log_weight: comp.weight.ln(),
                    mean: comp.mean.clone(),
                    var: comp.std * comp.std,
                });
            }
            if (total - 1.0).abs() > SUM_TOL {
                return Err(Error::config(
                    at("components"),
                    format!("component weights sum to {total}"),
                ));
            }
        }
        Ok(Self { spec, priors, flat })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: WorldSpec =
            toml::from_str(text).map_err(|e| Error::config("world", e.to_string()))?;
        Self::new(spec)
    }

    pub fn spec(&self) -> &WorldSpec {
        &self.spec
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn num_classes(&self) -> usize {
        self.spec.classes.len()
    }

    pub fn kappa(&self) -> f64 {
        self.spec.kappa
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    pub fn class_name(&self, class: usize) -> &str {
        &self.spec.classes[class].name
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.spec.classes.iter().position(|c| c.name == name)
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class < self.num_classes() {
            Ok(())
        } else {
            Err(Error::UnknownClass {
                class,
                classes: self.num_classes(),
            })
        }
    }

    /// Closed-form mean and (full) covariance of a class's clean distribution.
    pub fn class_moments(&self, class: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        self.check_class(class)?;
        let d = self.dim();
        let comps = &self.spec.classes[class].components;
        let mut mean = vec![0.0; d];
        for c in comps {
            for i in 0..d {
                mean[i] += c.weight * c.mean[i];
            }
        }
        let mut cov = vec![vec![0.0; d]; d];
        for c in comps {
            for i in 0..d {
                for j in 0..d {
                    let mut v = (c.mean[i] - mean[i]) * (c.mean[j] - mean[j]);
                    if i == j {
                        v += c.std * c.std;
                    }
                    cov[i][j] += c.weight * v;
                }
            }
        }
        Ok((mean, cov))
    }

    /// Class-blend weights a condition induces.
    pub fn class_weights(&self, condition: &Condition) -> Result<Vec<f64>> {
        match condition {
            Condition::Null => Ok(self.priors.clone()),
            Condition::Logits(y) => {
                check_dim(self.num_classes(), y.len())?;
                Ok(softmax(&y.iter().map(|v| self.kappa() * v).collect::<Vec<_>>()))
            }
        }
    }

    /// n i.i.d. draws from class `class`, labeled and tagged as real data.
    pub fn sample_class_data(&self, class: usize, n: usize, seed: u64) -> Result<LabeledSampleSet> {
        self.check_class(class)?;
        let mut rng = rng::stream(&[seed, rng::tag::REAL_TRAIN, class as u64]);
        let comps = &self.spec.classes[class].components;
        let mut set = LabeledSampleSet::new(self.dim());
        for _ in 0..n {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = comps.len() - 1;
            for (k, c) in comps.iter().enumerate() {
                acc += c.weight;
                if u < acc {
                    pick = k;
                    break;
                }
            }
            let c = &comps[pick];
            let x = c
                .mean
                .iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + c.std * z
                })
                .collect();
            set.push(Row::new(x, class, Provenance::Real, seed))?;
        }
        Ok(set)
    }

    /// Log-weights and per-component log-densities of the noised mixture
    /// selected by `weights`, at noise level `alpha_bar`.
    fn component_terms(&self, weights: &[f64], x: &[f64], alpha_bar: f64) -> Vec<f64> {
        let sa = alpha_bar.sqrt();
        let d = self.dim() as f64;
        self.flat
            .iter()
            .map(|c| {
                let var = alpha_bar * c.var + 1.0 - alpha_bar;
                let sq: f64 = x
                    .iter()
                    .zip(&c.mean)
                    .map(|(xi, mi)| {
                        let r = xi - sa * mi;
                        r * r
                    })
                    .sum();
                weights[c.class].ln() + c.log_weight
                    - 0.5 * d * (2.0 * std::f64::consts::PI * var).ln()
                    - 0.5 * sq / var
            })
            .collect()
    }

    fn log_density_at(&self, condition: &Condition, x: &[f64], alpha_bar: f64) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        let w = self.class_weights(condition)?;
        Ok(log_sum_exp(&self.component_terms(&w, x, alpha_bar)))
    }

    /// `log p_t(x | condition)` of the noised data distribution at train timestep `t`.
    pub fn log_density_t(
        &self,
        condition: &Condition,
        x: &[f64],
        t: usize,
        schedule: &NoiseSchedule,
    ) -> Result<f64> {
        self.log_density_at(condition, x, schedule.alpha_bar_at(t))
    }

    /// Exact noise prediction `-sqrt(1 - ᾱ_t) ∇_x log p_t(x | condition)`.
    pub fn analytic_eps(
        &self,
        condition: &Condition,
        x: &[f64],
        t: usize,
        schedule: &NoiseSchedule,
    ) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        let w = self.class_weights(condition)?;
        Ok(self.eps_with_weights(&w, x, schedule.alpha_bar_at(t)))
    }

    pub(crate) fn eps_with_weights(&self, weights: &[f64], x: &[f64], alpha_bar: f64) -> Vec<f64> {
        let terms = self.component_terms(weights, x, alpha_bar);
        let lse = log_sum_exp(&terms);
        let sa = alpha_bar.sqrt();
        let mut eps = vec![0.0; x.len()];
        for (c, term) in self.flat.iter().zip(&terms) {
            let r = (term - lse).exp();
            if r == 0.0 {
                continue;
            }
            let var = alpha_bar * c.var + 1.0 - alpha_bar;
            for i in 0..x.len() {
                eps[i] += r * (x[i] - sa * c.mean[i]) / var;
            }
        }
        let s = (1.0 - alpha_bar).sqrt();
        eps.iter_mut().for_each(|e| *e *= s);
        eps
    }

    /// Bayes posterior over classes under the clean data distribution.
    pub fn oracle_posterior(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        let terms = self.component_terms(&self.priors, x, 1.0);
        let mut per_class = vec![f64::NEG_INFINITY; self.num_classes()];
        for (c, term) in self.flat.iter().zip(&terms) {
            per_class[c.class] = log_add(per_class[c.class], *term);
        }
        Ok(softmax(&per_class))
    }

    pub fn oracle_argmax(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.oracle_posterior(x)?))
    }
}

/// Per-class training counts following an exponential profile with ratio
/// `imbalance` between the first and last class.
pub fn build_longtail(classes: usize, n_max: usize, imbalance: f64) -> Result<Vec<usize>> {
    if n_max < 1 {
        return Err(Error::InvalidArgument("n_max must be at least 1".into()));
    }
    if !(imbalance >= 1.0) || !imbalance.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "imbalance factor must be >= 1, got {imbalance}"
        )));
    }
    if classes == 0 {
        return Err(Error::InvalidArgument("need at least one class".into()));
    }
    if classes < 2 {
        if imbalance > 1.0 {
            return Err(Error::InvalidArgument(
                "an imbalance factor above 1 needs at least 2 classes".into(),
            ));
        }
        return Ok(vec![n_max]);
    }
    let last = (classes - 1) as f64;
    let mut counts: Vec<usize> = (0..classes)
        .map(|c| {
            let n = n_max as f64 * imbalance.powf(-(c as f64) / last);
            (n.round() as usize).max(1)
        })
        .collect();
    counts[0] = n_max;
    counts[classes - 1] = ((n_max as f64 / imbalance).round() as usize).max(1);
    Ok(counts)
}

/// Exact-score denoiser backed by a world and a schedule.
pub trait Denoiser: Sync {
    fn dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    /// Noise prediction at train timestep `t`.
    fn predict_eps(&self, x: &[f64], t: usize, condition: &Condition) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy)]
pub struct AnalyticDenoiser<'a> {
    pub world: &'a GaussianMixtureWorld,
    pub schedule: &'a NoiseSchedule,
}

impl<'a> AnalyticDenoiser<'a> {
    pub fn new(world: &'a GaussianMixtureWorld, schedule: &'a NoiseSchedule) -> Self {
        Self { world, schedule }
    }
}

impl Denoiser for AnalyticDenoiser<'_> {
    fn dim(&self) -> usize {
        self.world.dim()
    }

    fn num_classes(&self) -> usize {
        self.world.num_classes()
    }

    fn predict_eps(&self, x: &[f64], t: usize, condition: &Condition) -> Result<Vec<f64>> {
        self.world.analytic_eps(condition, x, t, self.schedule)
    }
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(v);
    v.iter().map(|x| (x - lse).exp()).collect()
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn log_add(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Named worlds shipped with the crate.
pub mod presets {
    use super::GaussianMixtureWorld;
    use crate::error::{Error, Result};

    const PRESETS: &[(&str, &str)] = &[
        ("overlap5", include_str!("../presets/overlap5.toml")),
        ("ring4", include_str!("../presets/ring4.toml")),
        ("blobs3d", include_str!("../presets/blobs3d.toml")),
        ("gauss1", include_str!("../presets/gauss1.toml")),
    ];

    pub fn names() -> impl Iterator<Item = &'static str> {
        PRESETS.iter().map(|(n, _)| *n)
    }

    pub fn source(name: &str) -> Option<&'static str> {
        PRESETS.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
    }

    pub fn load(name: &str) -> Result<GaussianMixtureWorld> {
        let src = source(name).ok_or_else(|| {
            Error::config(
                "world.preset",
                format!(
                    "unknown preset {name:?}; available: {}",
                    names().collect::<Vec<_>>().join(", ")
                ),
            )
        })?;
        GaussianMixtureWorld::from_toml(src)
    }
}
