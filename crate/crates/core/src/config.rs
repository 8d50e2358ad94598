//! Experiment configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{AnnealConfig, GuidancePolicy, PolicyKind, DEFAULT_W};
use crate::io::sha256_hex;
use crate::sampler::SamplerConfig;
use crate::schedule::{NoiseSchedule, ScheduleParams};
use crate::selection::{FeatureExtractor, DEFAULT_REFERENCE_PER_CLASS};
use crate::train::{ClassifierKind, MixupMode, TrainConfig, DEFAULT_HEAD_THRESHOLD};
use crate::world::{presets, GaussianMixtureWorld, WorldSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct WorldSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<WorldSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage1Section {
    #[serde(default = "d_ref")]
    pub reference_per_class: usize,
    /// Defaults to identity for 2-D worlds, a random projection otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extractor: Option<FeatureExtractor>,
    /// Pool real training rows with the reference rows before averaging.
    #[serde(default)]
    pub mix_real: bool,
    #[serde(default = "d_ref_policy")]
    pub policy: GuidancePolicy,
}

fn d_ref() -> usize {
    DEFAULT_REFERENCE_PER_CLASS
}
fn d_ref_policy() -> GuidancePolicy {
    GuidancePolicy::cads(DEFAULT_W, AnnealConfig::default())
}

impl Default for Stage1Section {
    fn default() -> Self {
        Self {
            reference_per_class: d_ref(),
            extractor: None,
            mix_real: false,
            policy: d_ref_policy(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LongtailSection {
    #[serde(default = "d_nmax")]
    pub n_max: usize,
    #[serde(default = "d_if")]
    pub imbalance: f64,
    #[serde(default = "d_test")]
    pub test_per_class: usize,
    #[serde(default = "d_head")]
    pub head_threshold: usize,
}

fn d_nmax() -> usize {
    200
}
fn d_if() -> f64 {
    100.0
}
fn d_test() -> usize {
    500
}
fn d_head() -> usize {
    DEFAULT_HEAD_THRESHOLD
}

impl Default for LongtailSection {
    fn default() -> Self {
        Self {
            n_max: d_nmax(),
            imbalance: d_if(),
            test_per_class: d_test(),
            head_threshold: d_head(),
        }
    }
}

/// Training parameters shared by every run; the Mixup mode varies per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "d_modes")]
    pub mixup_modes: Vec<MixupMode>,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_beta")]
    pub mixup_beta_a: f64,
    #[serde(default = "d_classifier")]
    pub classifier: ClassifierKind,
    #[serde(default = "d_hidden")]
    pub hidden: usize,
    #[serde(default = "d_true")]
    pub standardize: bool,
}

fn d_modes() -> Vec<MixupMode> {
    vec![MixupMode::None, MixupMode::All]
}
fn d_epochs() -> usize {
    TrainConfig::default().epochs
}
fn d_batch() -> usize {
    TrainConfig::default().batch_size
}
fn d_lr() -> f64 {
    TrainConfig::default().lr
}
fn d_momentum() -> f64 {
    TrainConfig::default().momentum
}
fn d_beta() -> f64 {
    TrainConfig::default().mixup_beta_a
}
fn d_classifier() -> ClassifierKind {
    TrainConfig::default().classifier
}
fn d_hidden() -> usize {
    TrainConfig::default().hidden
}
fn d_true() -> bool {
    true
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            mixup_modes: d_modes(),
            epochs: d_epochs(),
            batch_size: d_batch(),
            lr: d_lr(),
            momentum: d_momentum(),
            mixup_beta_a: d_beta(),
            classifier: d_classifier(),
            hidden: d_hidden(),
            standardize: true,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self, mode: MixupMode, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            mixup_mode: mode,
            mixup_beta_a: self.mixup_beta_a,
            classifier: self.classifier,
            hidden: self.hidden,
            standardize: self.standardize,
            seed,
        }
    }
}

fn d_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}

fn d_world() -> WorldSection {
    WorldSection {
        preset: Some("overlap5".into()),
        spec: None,
    }
}

fn d_policies() -> Vec<GuidancePolicy> {
    [PolicyKind::Cfg, PolicyKind::Cads, PolicyKind::Ccfg, PolicyKind::DiscDs]
        .into_iter()
        .map(GuidancePolicy::default_for)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "d_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Worker cap; 0 lets rayon decide. Never changes results.
    #[serde(default)]
    pub threads: usize,
    #[serde(default = "d_world")]
    pub world: WorldSection,
    #[serde(default)]
    pub schedule: ScheduleParams,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub stage1: Stage1Section,
    #[serde(default)]
    pub longtail: LongtailSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default = "d_policies")]
    pub policies: Vec<GuidancePolicy>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: d_seeds(),
            out_dir: None,
            threads: 0,
            world: d_world(),
            schedule: ScheduleParams::default(),
            sampler: SamplerConfig::default(),
            stage1: Stage1Section::default(),
            longtail: LongtailSection::default(),
            train: TrainSection::default(),
            policies: d_policies(),
        }
    }
}

/// A validated config with its world and schedule built.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: ExperimentConfig,
    pub world: GaussianMixtureWorld,
    pub schedule: NoiseSchedule,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(0);
            Error::config(format!("{}:{line}", origin.display()), e.message().to_string())
        })
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn world(&self) -> Result<GaussianMixtureWorld> {
        match (&self.world.preset, &self.world.spec) {
            (Some(name), None) => presets::load(name),
            (None, Some(spec)) => GaussianMixtureWorld::new(spec.clone()),
            (Some(_), Some(_)) => Err(Error::config("world", "set either `preset` or `spec`, not both")),
            (None, None) => Err(Error::config("world.preset", "missing; name a preset or give `world.spec`")),
        }
    }

    pub fn extractor(&self, dim: usize) -> FeatureExtractor {
        self.stage1.extractor.unwrap_or_else(|| FeatureExtractor::default_for(dim))
    }

    /// Checks every section and builds the world and schedule.
    pub fn resolve(self) -> Result<Resolved> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must not be empty"));
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(s) = self.seeds.iter().find(|s| !seen.insert(**s)) {
            return Err(Error::config("seeds", format!("seed {s} listed twice")));
        }
        let world = self.world()?;
        let schedule = self.schedule.build().map_err(|e| match e {
            Error::InvalidArgument(m) => Error::config("schedule", m),
            e => e,
        })?;
        self.sampler.validate(&schedule, "sampler")?;
        if self.stage1.reference_per_class == 0 {
            return Err(Error::config("stage1.reference_per_class", "must be at least 1"));
        }
        if let Some(x) = &self.stage1.extractor {
            x.validate("stage1.extractor")?;
        }
        self.stage1.policy.validate("stage1.policy")?;
        if self.stage1.policy.kind != PolicyKind::Cads {
            return Err(Error::config("stage1.policy.kind", "reference sets use a `cads` policy"));
        }
        let lt = &self.longtail;
        if lt.n_max == 0 {
            return Err(Error::config("longtail.n_max", "must be at least 1"));
        }
        if !(lt.imbalance >= 1.0 && lt.imbalance.is_finite()) {
            return Err(Error::config("longtail.imbalance", "must be >= 1"));
        }
        if world.num_classes() < 2 && lt.imbalance > 1.0 {
            return Err(Error::config("longtail.imbalance", "needs at least 2 classes"));
        }
        if world.num_classes() < 2 {
            return Err(Error::config("world", "experiments need at least 2 classes"));
        }
        if lt.test_per_class == 0 {
            return Err(Error::config("longtail.test_per_class", "must be at least 1"));
        }
        if self.train.mixup_modes.is_empty() {
            return Err(Error::config("train.mixup_modes", "must not be empty"));
        }
        for (i, m) in self.train.mixup_modes.iter().enumerate() {
            if self.train.mixup_modes[..i].contains(m) {
                return Err(Error::config("train.mixup_modes", format!("`{}` listed twice", m.as_str())));
            }
        }
        self.train.train_config(MixupMode::None, 0).validate("train")?;
        let needs_policies = self.train.mixup_modes.iter().any(|m| *m != MixupMode::None);
        if needs_policies && self.policies.is_empty() {
            return Err(Error::config("policies", "mixup runs need at least one policy"));
        }
        let mut names = std::collections::BTreeSet::new();
        for (i, p) in self.policies.iter().enumerate() {
            let field = format!("policies[{i}]");
            p.validate(&field)?;
            let name = p.display_name();
            if !name.chars().all(|c| c.is_ascii_alphanumeric() || "_-.".contains(c)) {
                return Err(Error::config(format!("{field}.name"), "use letters, digits, '_', '-' or '.'"));
            }
            if name == BASELINE {
                return Err(Error::config(format!("{field}.name"), format!("`{BASELINE}` is reserved")));
            }
            if !names.insert(name.to_string()) {
                return Err(Error::config(format!("{field}.name"), format!("duplicate policy name `{name}`")));
            }
        }
        Ok(Resolved {
            config: self,
            world,
            schedule,
        })
    }
}

/// Label of the real-only run.
pub const BASELINE: &str = "real_only";

impl Resolved {
    /// SHA-256 of the resolved config, ignoring output location and thread
    /// count.
    pub fn hash(&self) -> String {
        let mut c = self.config.clone();
        c.out_dir = None;
        c.threads = 0;
        sha256_hex(c.to_toml().as_bytes())
    }

    pub fn classes(&self) -> usize {
        self.world.num_classes()
    }
}
