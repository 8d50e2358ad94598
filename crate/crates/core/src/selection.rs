//! Reference-set generation and negative-class selection by feature
//! similarity.

use std::collections::BTreeMap;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledSampleSet;
use crate::error::{check_dim, Error, Result};
use crate::guidance::{GuidancePolicy, PolicyKind};
use crate::rng;
use crate::sampler::{self, InitKind, SampleRequest, SampleTag, SamplerConfig};
use crate::schedule::NoiseSchedule;
use crate::world::Denoiser;

pub const DEFAULT_REFERENCE_PER_CLASS: usize = 64;
const DEFAULT_PROJECTION_SEED: u64 = 0x5EED;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FeatureExtractor {
    Identity,
    /// Gaussian random projection with entries N(0, 1/out_dim).
    RandomProjection { out_dim: usize, seed: u64 },
}

impl FeatureExtractor {
    /// Identity for 2-D data, a fixed-seed projection otherwise.
    pub fn default_for(dim: usize) -> Self {
        if dim <= 2 {
            Self::Identity
        } else {
            Self::RandomProjection {
                out_dim: dim,
                seed: DEFAULT_PROJECTION_SEED,
            }
        }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        if let Self::RandomProjection { out_dim: 0, .. } = self {
            return Err(Error::config(format!("{field}.out_dim"), "must be positive"));
        }
        Ok(())
    }

    /// Materializes the extractor for inputs of dimension `dim`.
    pub fn prepare(&self, dim: usize) -> Result<FeatureMap> {
        self.validate("extractor")?;
        let matrix = match *self {
            Self::Identity => None,
            Self::RandomProjection { out_dim, seed } => {
                let mut r = rng::stream(&[seed, rng::tag::PROJECTION]);
                let scale = 1.0 / (out_dim as f64).sqrt();
                Some(
                    (0..out_dim)
                        .map(|_| {
                            (0..dim)
                                .map(|_| {
                                    let z: f64 = StandardNormal.sample(&mut r);
                                    scale * z
                                })
                                .collect()
                        })
                        .collect(),
                )
            }
        };
        Ok(FeatureMap { dim, matrix })
    }
}

/// A prepared extractor; pure and shareable across threads.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    dim: usize,
    matrix: Option<Vec<Vec<f64>>>,
}

impl FeatureMap {
    pub fn extract(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, x.len())?;
        Ok(match &self.matrix {
            None => x.to_vec(),
            Some(m) => m
                .iter()
                .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
                .collect(),
        })
    }
}

/// CADS reference samples for every class. Classes with real samples start
/// from them (cycled when scarce); the rest start from pure noise.
pub fn generate_reference_set<D: Denoiser + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    policy: &GuidancePolicy,
    per_class_n: usize,
    cfg: &SamplerConfig,
    real: Option<&LabeledSampleSet>,
) -> Result<LabeledSampleSet> {
    if policy.kind != PolicyKind::Cads {
        return Err(Error::InvalidArgument(format!(
            "reference sets use a cads policy, got `{}`",
            policy.kind.as_str()
        )));
    }
    if per_class_n == 0 {
        return Err(Error::InvalidArgument("per_class_n must be at least 1".into()));
    }
    let mut out = LabeledSampleSet::new(denoiser.dim());
    for class in 0..denoiser.num_classes() {
        let pool = real.map(|r| r.class_points(class)).unwrap_or_default();
        let class_cfg = SamplerConfig {
            init: if pool.is_empty() {
                InitKind::PureNoise
            } else {
                InitKind::FromReal
            },
            ..*cfg
        };
        let req = SampleRequest {
            init_pool: &pool,
            tag: SampleTag::Reference,
            ..SampleRequest::new(policy, class, None, per_class_n)
        };
        out.extend(sampler::sample(denoiser, schedule, &class_cfg, &req)?)?;
    }
    Ok(out)
}

pub fn mean_feature(points: &[Vec<f64>], map: &FeatureMap) -> Result<Vec<f64>> {
    if points.is_empty() {
        return Err(Error::Data("mean feature of an empty class".into()));
    }
    let feats = points
        .par_iter()
        .map(|p| map.extract(p))
        .collect::<Result<Vec<_>>>()?;
    let n = feats.len() as f64;
    let mut mean = vec![0.0; feats[0].len()];
    for f in &feats {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

pub fn cosine_similarity(v: &[f64], w: &[f64]) -> Result<f64> {
    check_dim(v.len(), w.len())?;
    let vv: f64 = v.iter().map(|a| a * a).sum();
    let ww: f64 = w.iter().map(|a| a * a).sum();
    if vv == 0.0 || ww == 0.0 {
        return Err(Error::Degenerate("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = v.iter().zip(w).map(|(a, b)| a * b).sum();
    // sqrt of the product keeps sim(v, v) == 1 exactly.
    Ok((dot / (vv * ww).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativeEntry {
    pub class: usize,
    pub negative: usize,
    /// Cosine similarity to every class, self included.
    pub similarities: Vec<f64>,
    /// Set when the maximum was shared and the smallest id won.
    pub tie: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativePromptMap {
    pub entries: Vec<NegativeEntry>,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl NegativePromptMap {
    pub fn num_classes(&self) -> usize {
        self.entries.len()
    }

    pub fn negative_of(&self, class: usize) -> Result<usize> {
        self.entries
            .get(class)
            .map(|e| e.negative)
            .ok_or(Error::UnknownClass {
                class,
                classes: self.entries.len(),
            })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("map serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let map: Self = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        map.check()?;
        Ok(map)
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_json().as_bytes())
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    fn check(&self) -> Result<()> {
        let c = self.entries.len();
        for (i, e) in self.entries.iter().enumerate() {
            if e.class != i || e.negative >= c || e.negative == i || e.similarities.len() != c {
                return Err(Error::Data(format!("malformed negative map entry for class {i}")));
            }
        }
        Ok(())
    }
}

/// Picks, for every class, the other class whose mean feature is most
/// cosine-similar. Ties go to the smallest class id.
pub fn select_negatives(
    reference: &LabeledSampleSet,
    map: &FeatureMap,
    classes: usize,
) -> Result<NegativePromptMap> {
    if classes < 2 {
        return Err(Error::InvalidArgument("negative selection needs at least 2 classes".into()));
    }
    if let Some(m) = reference.max_label() {
        if m >= classes {
            return Err(Error::UnknownClass { class: m, classes });
        }
    }
    let means = (0..classes)
        .map(|c| {
            let pts = reference.class_points(c);
            if pts.is_empty() {
                return Err(Error::Data(format!("reference set has no samples of class {c}")));
            }
            mean_feature(&pts, map)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sim = vec![vec![1.0; classes]; classes];
    for i in 0..classes {
        for j in i + 1..classes {
            let s = cosine_similarity(&means[i], &means[j])?;
            sim[i][j] = s;
            sim[j][i] = s;
        }
    }
    let entries = sim
        .into_iter()
        .enumerate()
        .map(|(c, row)| {
            let mut best: Option<usize> = None;
            let mut tie = false;
            for (j, &s) in row.iter().enumerate() {
                if j == c {
                    continue;
                }
                match best {
                    None => best = Some(j),
                    Some(b) if s > row[b] => {
                        best = Some(j);
                        tie = false;
                    }
                    Some(b) if s == row[b] => tie = true,
                    _ => {}
                }
            }
            NegativeEntry {
                class: c,
                negative: best.expect("at least one candidate"),
                similarities: row,
                tie,
            }
        })
        .collect();
    Ok(NegativePromptMap {
        entries,
        meta: BTreeMap::new(),
    })
}
