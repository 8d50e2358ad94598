//! Reverse diffusion: per-step condition preparation, guided noise
//! prediction, and the reverse update.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabeledSampleSet, Provenance, Row};
use crate::error::{check_dim, Error, Result};
use crate::guidance::{self, mean_std, GuidancePolicy};
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::world::{Condition, Denoiser};

pub const DEFAULT_NUM_STEPS: usize = 50;
pub const DEFAULT_STRENGTH: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepperKind {
    /// DDPM ancestral step with variance β_t = 1 - ᾱ_t / ᾱ_prev.
    Ancestral,
    /// Deterministic DDIM (η = 0).
    Ddim,
    /// Second-order multistep update in data-prediction form.
    Multistep2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    PureNoise,
    /// Start from a forward-noised real sample.
    FromReal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    #[serde(default = "d_steps")]
    pub num_steps: usize,
    #[serde(default = "d_stepper")]
    pub stepper: StepperKind,
    #[serde(default = "d_init")]
    pub init: InitKind,
    /// Noising strength for `from_real`, as a normalized time in (0, 1].
    #[serde(default = "d_strength")]
    pub strength: f64,
    #[serde(default)]
    pub master_seed: u64,
}

fn d_steps() -> usize {
    DEFAULT_NUM_STEPS
}
fn d_stepper() -> StepperKind {
    StepperKind::Ddim
}
fn d_init() -> InitKind {
    InitKind::PureNoise
}
fn d_strength() -> f64 {
    DEFAULT_STRENGTH
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_steps: DEFAULT_NUM_STEPS,
            stepper: StepperKind::Ddim,
            init: InitKind::PureNoise,
            strength: DEFAULT_STRENGTH,
            master_seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule, field: &str) -> Result<()> {
        if self.num_steps == 0 || self.num_steps > schedule.train_steps() {
            return Err(Error::config(
                format!("{field}.num_steps"),
                format!("must lie in [1, {}]", schedule.train_steps()),
            ));
        }
        if !(self.strength > 0.0 && self.strength <= 1.0) {
            return Err(Error::config(format!("{field}.strength"), "must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Forward-noises a real sample to the first grid step whose normalized time
/// does not exceed `strength`. Returns the noised point and that step.
pub fn init_from_real<R: Rng + ?Sized>(
    x0: &[f64],
    strength: f64,
    schedule: &NoiseSchedule,
    num_steps: usize,
    rng: &mut R,
) -> Result<(Vec<f64>, usize)> {
    if !(strength > 0.0 && strength <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "strength must lie in (0, 1], got {strength}"
        )));
    }
    let mut start = num_steps - 1;
    for step in 0..num_steps {
        if schedule.normalized_time(step, num_steps)? <= strength {
            start = step;
            break;
        }
    }
    let eps: Vec<f64> = (0..x0.len()).map(|_| StandardNormal.sample(rng)).collect();
    let t = schedule.train_timestep(start, num_steps)?;
    Ok((schedule.forward_diffuse(x0, t, &eps)?, start))
}

/// Stateful reverse update; the multistep variant remembers the previous
/// data prediction.
#[derive(Debug, Clone)]
pub struct ReverseStepper {
    kind: StepperKind,
    num_steps: usize,
    prev: Option<(Vec<f64>, f64)>,
}

fn half_log_snr(alpha_bar: f64) -> f64 {
    0.5 * (alpha_bar / (1.0 - alpha_bar)).ln()
}

impl ReverseStepper {
    pub fn new(kind: StepperKind, num_steps: usize) -> Self {
        Self {
            kind,
            num_steps,
            prev: None,
        }
    }

    /// Advances `x_t` at grid `step` to the next (less noisy) grid point.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        x_t: &[f64],
        eps_hat: &[f64],
        step: usize,
        schedule: &NoiseSchedule,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        check_dim(x_t.len(), eps_hat.len())?;
        let t = schedule.train_timestep(step, self.num_steps)?;
        let ab = schedule.alpha_bar_at(t);
        let ab_prev = schedule.alpha_bar_prev(step, self.num_steps)?;
        let x0_hat = predict_x0(x_t, eps_hat, ab);
        let out = match self.kind {
            StepperKind::Ddim => ddim_update(&x0_hat, eps_hat, ab_prev),
            StepperKind::Ancestral => {
                let beta = 1.0 - ab / ab_prev;
                let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
                let ct = (ab / ab_prev).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
                let final_step = step + 1 == self.num_steps;
                let sigma = if final_step { 0.0 } else { beta.sqrt() };
                x_t.iter()
                    .zip(&x0_hat)
                    .map(|(x, x0)| {
                        let mean = c0 * x0 + ct * x;
                        if final_step {
                            mean
                        } else {
                            let z: f64 = StandardNormal.sample(rng);
                            mean + sigma * z
                        }
                    })
                    .collect()
            }
            StepperKind::Multistep2 => {
                if ab_prev >= 1.0 {
                    x0_hat.clone()
                } else {
                    let lam = half_log_snr(ab);
                    let lam_prev = half_log_snr(ab_prev);
                    let h = lam_prev - lam;
                    let data = match &self.prev {
                        Some((d_last, h_last)) if h > 0.0 => {
                            let r = h_last / h;
                            let k = 0.5 / r;
                            x0_hat
                                .iter()
                                .zip(d_last)
                                .map(|(d, dl)| (1.0 + k) * d - k * dl)
                                .collect::<Vec<_>>()
                        }
                        _ => x0_hat.clone(),
                    };
                    let ratio = ((1.0 - ab_prev) / (1.0 - ab)).sqrt();
                    let coef = ab_prev.sqrt() * (-(-h).exp_m1());
                    self.prev = Some((x0_hat.clone(), h));
                    x_t.iter()
                        .zip(&data)
                        .map(|(x, d)| ratio * x + coef * d)
                        .collect()
                }
            }
        };
        Ok(out)
    }
}

/// `x̂0 = (x_t - sqrt(1 - ᾱ_t) ε̂) / sqrt(ᾱ_t)`.
pub fn predict_x0(x_t: &[f64], eps_hat: &[f64], alpha_bar: f64) -> Vec<f64> {
    let s = (1.0 - alpha_bar).sqrt();
    let a = alpha_bar.sqrt();
    x_t.iter().zip(eps_hat).map(|(x, e)| (x - s * e) / a).collect()
}

/// `sqrt(ᾱ_prev) x̂0 + sqrt(1 - ᾱ_prev) ε̂`.
pub fn ddim_update(x0_hat: &[f64], eps_hat: &[f64], alpha_bar_prev: f64) -> Vec<f64> {
    let a = alpha_bar_prev.sqrt();
    let s = (1.0 - alpha_bar_prev).sqrt();
    x0_hat.iter().zip(eps_hat).map(|(x0, e)| a * x0 + s * e).collect()
}

/// Role of the generated rows in the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SampleTag {
    Reference,
    #[default]
    Synthetic,
}

#[derive(Debug, Clone)]
pub struct SampleRequest<'a> {
    pub policy: &'a GuidancePolicy,
    pub pos_class: usize,
    pub neg_class: Option<usize>,
    pub n: usize,
    /// Real samples used for `from_real` initialization, cycled when scarce.
    /// Empty means pure-noise starts.
    pub init_pool: &'a [Vec<f64>],
    pub tag: SampleTag,
}

impl<'a> SampleRequest<'a> {
    pub fn new(policy: &'a GuidancePolicy, pos_class: usize, neg_class: Option<usize>, n: usize) -> Self {
        Self {
            policy,
            pos_class,
            neg_class,
            n,
            init_pool: &[],
            tag: SampleTag::Synthetic,
        }
    }
}

// RNG lanes of one trajectory.
const LANE_STATE: u64 = 0;
const LANE_POS: u64 = 1;
const LANE_NEG: u64 = 2;

struct Trajectory<'r, D: ?Sized> {
    denoiser: &'r D,
    schedule: &'r NoiseSchedule,
    cfg: &'r SamplerConfig,
    req: &'r SampleRequest<'r>,
}

impl<D: Denoiser + ?Sized> Trajectory<'_, D> {
    fn seed(&self, index: usize) -> u64 {
        rng::derive_seed(&[
            self.cfg.master_seed,
            rng::tag::SAMPLER,
            self.req.pos_class as u64,
            index as u64,
        ])
    }

    fn lane(seed: u64, lane: u64) -> ChaCha8Rng {
        rng::stream(&[seed, lane])
    }

    fn prepare(
        &self,
        class: usize,
        t_norm: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Condition> {
        let classes = self.denoiser.num_classes();
        let clean = Condition::one_hot(class, classes);
        match (&self.req.policy.anneal, self.req.policy.anneals()) {
            (Some(anneal), true) => {
                let (mu_in, sigma_in) = mean_std(clean.logits().unwrap_or(&[]));
                let annealed = guidance::anneal_condition(&clean, t_norm, anneal, rng)?;
                let logits = annealed.logits().unwrap_or(&[]);
                Ok(Condition::Logits(guidance::rescale_condition(
                    logits, mu_in, sigma_in, anneal.psi,
                )?))
            }
            _ => Ok(clean),
        }
    }

    /// Runs one trajectory; `trace` receives every intermediate state.
    fn run(&self, index: usize, mut trace: Option<&mut Vec<Vec<f64>>>) -> Result<Row> {
        let seed = self.seed(index);
        let mut state_rng = Self::lane(seed, LANE_STATE);
        let mut pos_rng = Self::lane(seed, LANE_POS);
        let mut neg_rng = Self::lane(seed, LANE_NEG);
        let n_steps = self.cfg.num_steps;
        let dim = self.denoiser.dim();
        let policy = self.req.policy;

        let (mut x, start) = match (self.cfg.init, self.req.init_pool.is_empty()) {
            (InitKind::FromReal, false) => {
                let x0 = &self.req.init_pool[index % self.req.init_pool.len()];
                check_dim(dim, x0.len())?;
                init_from_real(x0, self.cfg.strength, self.schedule, n_steps, &mut state_rng)?
            }
            _ => (
                (0..dim).map(|_| StandardNormal.sample(&mut state_rng)).collect(),
                0,
            ),
        };
        if let Some(tr) = trace.as_deref_mut() {
            tr.push(x.clone());
        }
        let mut stepper = ReverseStepper::new(self.cfg.stepper, n_steps);
        for step in start..n_steps {
            let t = self.schedule.train_timestep(step, n_steps)?;
            let t_norm = t as f64 / self.schedule.train_steps() as f64;
            let gamma_t = match (&policy.anneal, policy.anneals()) {
                (Some(a), true) => guidance::gamma(t_norm, a),
                _ => 1.0,
            };
            let pos = self.prepare(self.req.pos_class, t_norm, &mut pos_rng)?;
            let eps_null = self.denoiser.predict_eps(&x, t, &Condition::Null)?;
            let eps_pos = self.denoiser.predict_eps(&x, t, &pos)?;
            let eps_neg = match self.req.neg_class {
                Some(neg) if policy.kind.needs_negative() => {
                    let cond = self.prepare(neg, t_norm, &mut neg_rng)?;
                    Some(self.denoiser.predict_eps(&x, t, &cond)?)
                }
                _ => None,
            };
            let eps = policy.combine(gamma_t, &eps_null, &eps_pos, eps_neg.as_deref())?;
            x = stepper.step(&x, &eps, step, self.schedule, &mut state_rng)?;
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Invariant(format!(
                    "non-finite state at step {step} of sample {index}"
                )));
            }
            if let Some(tr) = trace.as_deref_mut() {
                tr.push(x.clone());
            }
        }
        let provenance = match self.req.tag {
            SampleTag::Reference => Provenance::Reference {
                policy: policy.display_name().to_string(),
            },
            SampleTag::Synthetic => Provenance::Synthetic {
                policy: policy.display_name().to_string(),
                neg_class: self.req.neg_class,
            },
        };
        Ok(Row::new(x, self.req.pos_class, provenance, seed))
    }
}

fn validate_request<D: Denoiser + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    req: &SampleRequest<'_>,
) -> Result<()> {
    req.policy.validate("policy")?;
    cfg.validate(schedule, "sampler")?;
    let classes = denoiser.num_classes();
    if req.pos_class >= classes {
        return Err(Error::UnknownClass {
            class: req.pos_class,
            classes,
        });
    }
    match (req.policy.kind.needs_negative(), req.neg_class) {
        (true, None) => {
            return Err(Error::InvalidArgument(format!(
                "policy `{}` needs a negative class",
                req.policy.kind.as_str()
            )))
        }
        (false, Some(_)) => {
            return Err(Error::InvalidArgument(format!(
                "policy `{}` takes no negative class",
                req.policy.kind.as_str()
            )))
        }
        (true, Some(neg)) if neg == req.pos_class => {
            return Err(Error::InvalidArgument(format!(
                "negative class {neg} equals the positive class"
            )))
        }
        (true, Some(neg)) if neg >= classes => {
            return Err(Error::UnknownClass { class: neg, classes })
        }
        _ => {}
    }
    Ok(())
}

/// Generates `req.n` samples of `req.pos_class`.
///
/// Each sample draws from its own RNG substreams keyed by
/// `(master_seed, pos_class, index)`, so the output does not depend on the
/// rayon pool size.
pub fn sample<D: Denoiser + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    req: &SampleRequest<'_>,
) -> Result<LabeledSampleSet> {
    validate_request(denoiser, schedule, cfg, req)?;
    let traj = Trajectory {
        denoiser,
        schedule,
        cfg,
        req,
    };
    let rows = (0..req.n)
        .into_par_iter()
        .map(|i| traj.run(i, None))
        .collect::<Result<Vec<_>>>()?;
    let mut set = LabeledSampleSet::new(denoiser.dim());
    for r in rows {
        set.push(r)?;
    }
    Ok(set)
}

/// Every state visited by sample `index` of the request, starting point first.
pub fn trace<D: Denoiser + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    req: &SampleRequest<'_>,
    index: usize,
) -> Result<Vec<Vec<f64>>> {
    validate_request(denoiser, schedule, cfg, req)?;
    let traj = Trajectory {
        denoiser,
        schedule,
        cfg,
        req,
    };
    let mut states = Vec::new();
    traj.run(index, Some(&mut states))?;
    Ok(states)
}
