//! File-driven experiment stages. Every stage reads its inputs from, and
//! writes its outputs to, the output directory, so any stage can be rerun on
//! its own.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Resolved, BASELINE};
use crate::dataset::LabeledSampleSet;
use crate::error::{Error, Result};
use crate::guidance::GuidancePolicy;
use crate::io::{file_sha256, write_atomic};
use crate::rng::{self, tag};
use crate::sampler::{self, InitKind, SampleRequest, SamplerConfig};
use crate::selection::{self, NegativePromptMap};
use crate::train::{self, MetricsReport, MixupMode};
use crate::world::{build_longtail, AnalyticDenoiser};

pub const MANIFEST: &str = "manifest.json";
pub const AGGREGATE_JSON: &str = "aggregate.json";
pub const AGGREGATE_TXT: &str = "aggregate.txt";

fn mode_index(mode: MixupMode) -> u64 {
    match mode {
        MixupMode::None => 0,
        MixupMode::Random => 1,
        MixupMode::All => 2,
    }
}

/// One training run of the experiment grid.
#[derive(Debug, Clone)]
struct RunSpec<'a> {
    policy: Option<&'a GuidancePolicy>,
    mode: MixupMode,
}

impl RunSpec<'_> {
    fn label(&self) -> String {
        match self.policy {
            None => BASELINE.to_string(),
            Some(p) => format!("{}/{}", p.display_name(), self.mode.as_str()),
        }
    }

    fn file_stem(&self) -> String {
        self.label().replace('/', "__")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; absent with a single seed.
    pub std: Option<f64>,
}

impl Stat {
    fn of(v: &[f64]) -> Option<Self> {
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = (v.len() > 1)
            .then(|| (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        Some(Self { mean, std })
    }

    fn show(s: &Option<Self>) -> String {
        match s {
            None => "-".into(),
            Some(Stat { mean, std: Some(sd) }) => format!("{mean:.2} ± {sd:.2}"),
            Some(Stat { mean, std: None }) => format!("{mean:.2}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub label: String,
    pub policy: String,
    pub mixup: String,
    /// `fixed 0.8`, `dynamic 0.8`, or `-` for policies without a sharpness.
    pub tau: String,
    pub seeds: Vec<u64>,
    pub head: Option<Stat>,
    pub tail: Option<Stat>,
    pub overall: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub config_hash: String,
    pub rows: Vec<AggregateRow>,
}

impl Aggregate {
    pub fn row(&self, label: &str) -> Option<&AggregateRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("aggregate serializes");
        s.push('\n');
        s
    }

    /// Mean ± sample std over seeds, one row per run label.
    pub fn to_table(&self) -> String {
        let cells: Vec<[String; 5]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.label.clone(),
                    r.tau.clone(),
                    Stat::show(&r.head),
                    Stat::show(&r.tail),
                    Stat::show(&r.overall),
                ]
            })
            .collect();
        let head = ["Method", "tau", "Head", "Tail", "Overall"].map(String::from);
        let mut width = [0usize; 5];
        for row in std::iter::once(&head).chain(&cells) {
            for (w, c) in width.iter_mut().zip(row) {
                *w = (*w).max(c.chars().count());
            }
        }
        let mut s = format!("# config_hash {}\n", self.config_hash);
        for row in std::iter::once(&head).chain(&cells) {
            let mut line = String::new();
            for (i, (c, w)) in row.iter().zip(width).enumerate() {
                let pad = w - c.chars().count();
                if i < 2 {
                    let _ = write!(line, "{c}{}", " ".repeat(pad));
                } else {
                    let _ = write!(line, "{}{c}", " ".repeat(pad));
                }
                if i < 4 {
                    line.push_str("  ");
                }
            }
            s.push_str(line.trim_end());
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
struct Manifest {
    config_hash: String,
    seeds: Vec<u64>,
    config: String,
    /// Stage name -> output path (relative to the output dir) -> SHA-256.
    stages: BTreeMap<String, BTreeMap<String, String>>,
}

pub struct Pipeline {
    resolved: Resolved,
    out: PathBuf,
    threads: usize,
    hash: String,
}

impl Pipeline {
    pub fn new(resolved: Resolved, out: PathBuf, threads: usize) -> Self {
        let hash = resolved.hash();
        Self {
            resolved,
            out,
            threads,
            hash,
        }
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.out.join(format!("seed_{seed}"))
    }

    pub fn real_path(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("real_train.tsv")
    }

    pub fn test_path(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("test.tsv")
    }

    pub fn reference_path(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("reference.tsv")
    }

    pub fn negatives_path(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("negatives.json")
    }

    pub fn synth_path(&self, seed: u64, policy: &str) -> PathBuf {
        self.seed_dir(seed).join(format!("synth_{policy}.tsv"))
    }

    pub fn runs_dir(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("runs")
    }

    fn run<T: Send>(&self, stage: &'static str, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.threads)
            .build()
            .map_err(|e| Error::Invariant(format!("thread pool: {e}")))?;
        pool.install(f).map_err(|e| e.in_stage(stage))
    }

    fn stamp(&self, set: &mut LabeledSampleSet, seed: u64, kind: &str) {
        set.meta.insert("config_hash".into(), self.hash.clone());
        set.meta.insert("seed".into(), seed.to_string());
        set.meta.insert("kind".into(), kind.into());
    }

    fn read_set(&self, path: &Path, hint: &str) -> Result<LabeledSampleSet> {
        if !path.exists() {
            return Err(Error::Data(format!("{} is missing; run `{hint}` first", path.display())));
        }
        let set = LabeledSampleSet::read_file(path)?;
        match set.meta.get("config_hash") {
            Some(h) if *h == self.hash => Ok(set),
            _ => Err(Error::Data(format!(
                "{} was written under a different config; rerun `{hint}`",
                path.display()
            ))),
        }
    }

    fn record(&self, stage: &str, files: &[PathBuf]) -> Result<()> {
        let path = self.out.join(MANIFEST);
        let mut m = std::fs::read_to_string(&path)
            .ok()
            .and_then(|t| serde_json::from_str::<Manifest>(&t).ok())
            .filter(|m| m.config_hash == self.hash)
            .unwrap_or_default();
        m.config_hash = self.hash.clone();
        m.seeds = self.resolved.config.seeds.clone();
        let mut c = self.resolved.config.clone();
        c.out_dir = None;
        c.threads = 0;
        m.config = c.to_toml();
        let entry = m.stages.entry(stage.to_string()).or_default();
        entry.clear();
        for f in files {
            let rel = f.strip_prefix(&self.out).unwrap_or(f).to_string_lossy().replace('\\', "/");
            entry.insert(rel, file_sha256(f)?);
        }
        let mut text = serde_json::to_string_pretty(&m).expect("manifest serializes");
        text.push('\n');
        write_atomic(&path, text.as_bytes())
    }

    fn seeds(&self) -> &[u64] {
        &self.resolved.config.seeds
    }

    /// Long-tail training split, balanced test split and the CADS reference
    /// set for every seed.
    pub fn gen_ref(&self) -> Result<Vec<PathBuf>> {
        self.run("gen-ref", || {
            let r = &self.resolved;
            let cfg = &r.config;
            let lt = &cfg.longtail;
            let counts = build_longtail(r.classes(), lt.n_max, lt.imbalance)?;
            let den = AnalyticDenoiser::new(&r.world, &r.schedule);
            let mut files = Vec::new();
            for &seed in self.seeds() {
                let mut real = LabeledSampleSet::new(r.world.dim());
                let mut test = LabeledSampleSet::new(r.world.dim());
                let train_seed = rng::derive_seed(&[seed, tag::REAL_TRAIN]);
                let test_seed = rng::derive_seed(&[seed, tag::TEST]);
                for (c, &n) in counts.iter().enumerate() {
                    real.extend(r.world.sample_class_data(c, n, train_seed)?)?;
                    test.extend(r.world.sample_class_data(c, lt.test_per_class, test_seed)?)?;
                }
                let sampler_cfg = SamplerConfig {
                    master_seed: rng::derive_seed(&[seed, tag::REFERENCE]),
                    ..cfg.sampler
                };
                let mut reference = selection::generate_reference_set(
                    &den,
                    &r.schedule,
                    &cfg.stage1.policy,
                    cfg.stage1.reference_per_class,
                    &sampler_cfg,
                    Some(&real),
                )?;
                self.stamp(&mut real, seed, "real_train");
                self.stamp(&mut test, seed, "test");
                self.stamp(&mut reference, seed, "reference");
                for (set, path) in [
                    (&real, self.real_path(seed)),
                    (&test, self.test_path(seed)),
                    (&reference, self.reference_path(seed)),
                ] {
                    set.write_file(&path)?;
                    files.push(path);
                }
            }
            self.record("gen-ref", &files)?;
            Ok(files)
        })
    }

    /// Negative-class map for every seed from its reference set.
    pub fn select_neg(&self) -> Result<Vec<PathBuf>> {
        self.run("select-neg", || {
            let r = &self.resolved;
            let fmap = r.config.extractor(r.world.dim()).prepare(r.world.dim())?;
            let mut files = Vec::new();
            for &seed in self.seeds() {
                let mut pool = self.read_set(&self.reference_path(seed), "gen-ref")?;
                if r.config.stage1.mix_real {
                    pool.extend(self.read_set(&self.real_path(seed), "gen-ref")?)?;
                }
                let mut map = selection::select_negatives(&pool, &fmap, r.classes())?;
                map.meta.insert("config_hash".into(), self.hash.clone());
                map.meta.insert("seed".into(), seed.to_string());
                let path = self.negatives_path(seed);
                map.write_file(&path)?;
                files.push(path);
            }
            self.record("select-neg", &files)?;
            Ok(files)
        })
    }

    fn read_negatives(&self, seed: u64) -> Result<NegativePromptMap> {
        let path = self.negatives_path(seed);
        if !path.exists() {
            return Err(Error::Data(format!(
                "{} is missing; contrastive policies need `select-neg` first",
                path.display()
            )));
        }
        let map = NegativePromptMap::read_file(&path)?;
        if map.meta.get("config_hash") != Some(&self.hash) {
            return Err(Error::Data(format!(
                "{} was written under a different config; rerun `select-neg`",
                path.display()
            )));
        }
        if map.num_classes() != self.resolved.classes() {
            return Err(Error::Data(format!(
                "{} covers {} classes, the world has {}",
                path.display(),
                map.num_classes(),
                self.resolved.classes()
            )));
        }
        Ok(map)
    }

    /// Synthetic top-up set per policy, sized by the uniformization quotas.
    pub fn synth(&self) -> Result<Vec<PathBuf>> {
        self.run("synth", || {
            let r = &self.resolved;
            let cfg = &r.config;
            let den = AnalyticDenoiser::new(&r.world, &r.schedule);
            let mut files = Vec::new();
            for &seed in self.seeds() {
                let real = self.read_set(&self.real_path(seed), "gen-ref")?;
                let quotas = train::uniformize_plan(&real.counts(r.classes())?);
                let negatives = if cfg.policies.iter().any(|p| p.kind.needs_negative()) {
                    Some(self.read_negatives(seed)?)
                } else {
                    None
                };
                let sampler_cfg = SamplerConfig {
                    master_seed: rng::derive_seed(&[seed, tag::SYNTH]),
                    ..cfg.sampler
                };
                for policy in &cfg.policies {
                    let mut set = LabeledSampleSet::new(r.world.dim());
                    for (c, &q) in quotas.iter().enumerate() {
                        if q == 0 {
                            continue;
                        }
                        let pool = match cfg.sampler.init {
                            InitKind::FromReal => real.class_points(c),
                            InitKind::PureNoise => Vec::new(),
                        };
                        let neg = match (&negatives, policy.kind.needs_negative()) {
                            (Some(m), true) => Some(m.negative_of(c)?),
                            _ => None,
                        };
                        let req = SampleRequest {
                            init_pool: &pool,
                            ..SampleRequest::new(policy, c, neg, q)
                        };
                        set.extend(sampler::sample(&den, &r.schedule, &sampler_cfg, &req)?)?;
                    }
                    self.stamp(&mut set, seed, "synthetic");
                    set.meta.insert("policy".into(), policy.display_name().into());
                    let path = self.synth_path(seed, policy.display_name());
                    set.write_file(&path)?;
                    files.push(path);
                }
            }
            self.record("synth", &files)?;
            Ok(files)
        })
    }

    fn run_specs(&self) -> Vec<RunSpec<'_>> {
        let cfg = &self.resolved.config;
        let mut specs = Vec::new();
        if cfg.train.mixup_modes.contains(&MixupMode::None) {
            specs.push(RunSpec {
                policy: None,
                mode: MixupMode::None,
            });
        }
        for &mode in cfg.train.mixup_modes.iter().filter(|m| **m != MixupMode::None) {
            for p in &cfg.policies {
                specs.push(RunSpec {
                    policy: Some(p),
                    mode,
                });
            }
        }
        specs
    }

    fn train_one(
        &self,
        seed: u64,
        spec: &RunSpec<'_>,
        real: &LabeledSampleSet,
        test: &LabeledSampleSet,
        counts: &[usize],
    ) -> Result<(MetricsReport, train::Classifier)> {
        let r = &self.resolved;
        let classes = r.classes();
        let synth = match spec.policy {
            None => LabeledSampleSet::new(r.world.dim()),
            Some(p) => {
                let s = self.read_set(&self.synth_path(seed, p.display_name()), "synth")?;
                if s.dim() != real.dim() {
                    return Err(Error::Data(format!(
                        "synthetic set for `{}` has dim {}, real data has {}",
                        p.display_name(),
                        s.dim(),
                        real.dim()
                    )));
                }
                if let Some(m) = s.max_label() {
                    if m >= classes {
                        return Err(Error::UnknownClass { class: m, classes });
                    }
                }
                s
            }
        };
        let mut flags = Vec::new();
        let mode = if spec.mode != MixupMode::None && synth.is_empty() {
            flags.push("empty_synthetic_set_trained_without_mixup".to_string());
            MixupMode::None
        } else {
            spec.mode
        };
        let tcfg = r
            .config
            .train
            .train_config(mode, rng::derive_seed(&[seed, tag::TRAIN, mode_index(spec.mode)]));
        let (clf, summary) = train::train_classifier(real, &synth, &tcfg, classes)?;
        let mut report = train::evaluate(&clf, test, counts, r.config.longtail.head_threshold)?;
        report.label = spec.label();
        report.flags = flags;
        report.flags.extend(summary.flags.iter().cloned());
        if !synth.is_empty() {
            report.diversity = (0..classes)
                .map(|c| {
                    let pts = synth.class_points(c);
                    if pts.is_empty() {
                        Ok(None)
                    } else {
                        train::diversity_score(&pts, &r.world).map(Some)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            report.confusion = train::confusion_matrix(&synth, &r.world)?;
        }
        report.meta.insert("config_hash".into(), self.hash.clone());
        report.meta.insert("seed".into(), seed.to_string());
        report.meta.insert("mixup".into(), spec.mode.as_str().into());
        report.meta.insert(
            "policy".into(),
            spec.policy.map(|p| p.display_name()).unwrap_or(BASELINE).into(),
        );
        report.config = serde_json::json!({
            "policy": spec.policy,
            "train": tcfg,
            "summary": summary,
        });
        Ok((report, clf))
    }

    /// Trains and evaluates every (policy, Mixup mode) run for every seed,
    /// then writes the aggregate.
    pub fn train_eval(&self) -> Result<Aggregate> {
        self.run("train-eval", || {
            let r = &self.resolved;
            let classes = r.classes();
            let lt = &r.config.longtail;
            let expected = build_longtail(classes, lt.n_max, lt.imbalance)?;
            let specs = self.run_specs();
            let mut files = Vec::new();
            for &seed in self.seeds() {
                let real = self.read_set(&self.real_path(seed), "gen-ref")?;
                let test = self.read_set(&self.test_path(seed), "gen-ref")?;
                let counts = real.counts(classes)?;
                if counts != expected {
                    return Err(Error::Data(format!(
                        "real split class counts {counts:?} do not match the long-tail profile {expected:?}"
                    )));
                }
                if test.dim() != real.dim() {
                    return Err(Error::Data("test and training sets differ in dimension".into()));
                }
                let results = specs
                    .par_iter()
                    .map(|spec| self.train_one(seed, spec, &real, &test, &counts))
                    .collect::<Result<Vec<_>>>()?;
                let dir = self.runs_dir(seed);
                for (spec, (report, clf)) in specs.iter().zip(results) {
                    let stem = spec.file_stem();
                    let json = dir.join(format!("{stem}.json"));
                    let txt = dir.join(format!("{stem}.txt"));
                    let weights = dir.join(format!("{stem}.weights.json"));
                    write_atomic(&json, report.to_json().as_bytes())?;
                    let table = format!("# config_hash {}\n{}", self.hash, report.to_table());
                    write_atomic(&txt, table.as_bytes())?;
                    clf.write_file(&weights)?;
                    files.extend([json, txt, weights]);
                }
            }
            self.record("train-eval", &files)?;
            Ok(())
        })?;
        self.report()
    }

    /// Rebuilds the aggregate from the per-run reports on disk.
    pub fn report(&self) -> Result<Aggregate> {
        self.run("report", || {
            let cfg = &self.resolved.config;
            let mut rows = Vec::new();
            for spec in self.run_specs() {
                let mut head = Vec::new();
                let mut tail = Vec::new();
                let mut overall = Vec::new();
                for &seed in self.seeds() {
                    let path = self.runs_dir(seed).join(format!("{}.json", spec.file_stem()));
                    if !path.exists() {
                        return Err(Error::Data(format!(
                            "{} is missing; run `train-eval` first",
                            path.display()
                        )));
                    }
                    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                    let rep = MetricsReport::from_json(&text, &path)?;
                    if rep.meta.get("config_hash") != Some(&self.hash) {
                        return Err(Error::Data(format!(
                            "{} was written under a different config; rerun `train-eval`",
                            path.display()
                        )));
                    }
                    head.extend(rep.head_top1);
                    tail.extend(rep.tail_top1);
                    overall.push(rep.overall_top1);
                }
                let tau = spec
                    .policy
                    .and_then(|p| p.tau.map(|t| format!("{} {t}", tau_mode_str(p))))
                    .unwrap_or_else(|| "-".into());
                rows.push(AggregateRow {
                    label: spec.label(),
                    policy: spec.policy.map(|p| p.display_name()).unwrap_or(BASELINE).into(),
                    mixup: spec.mode.as_str().into(),
                    tau,
                    seeds: cfg.seeds.clone(),
                    head: Stat::of(&head),
                    tail: Stat::of(&tail),
                    overall: Stat::of(&overall),
                });
            }
            let agg = Aggregate {
                config_hash: self.hash.clone(),
                rows,
            };
            let json = self.out.join(AGGREGATE_JSON);
            let txt = self.out.join(AGGREGATE_TXT);
            write_atomic(&json, agg.to_json().as_bytes())?;
            write_atomic(&txt, agg.to_table().as_bytes())?;
            self.record("report", &[json, txt])?;
            Ok(agg)
        })
    }

    /// All stages in order.
    pub fn e2e(&self) -> Result<Aggregate> {
        self.gen_ref()?;
        if self.resolved.config.policies.iter().any(|p| p.kind.needs_negative()) {
            self.select_neg()?;
        }
        self.synth()?;
        self.train_eval()
    }
}

fn tau_mode_str(p: &GuidancePolicy) -> &'static str {
    match p.tau_mode() {
        crate::guidance::TauMode::Fixed => "fixed",
        crate::guidance::TauMode::Dynamic => "dynamic",
    }
}
