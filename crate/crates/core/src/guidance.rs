//! Guidance formulas: condition annealing and rescaling, classifier-free
//! guidance, contrastive guidance weights, annealing-synchronized sharpness
//! and the final linear blend of the two guided predictions.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::world::Condition;

pub const DEFAULT_W: f64 = 2.0;
pub const DEFAULT_TAU1: f64 = 0.5;
pub const DEFAULT_TAU2: f64 = 0.9;
pub const DEFAULT_NOISE_SCALE: f64 = 0.1;
pub const DEFAULT_PSI: f64 = 1.0;
pub const DEFAULT_TAU: f64 = 0.8;
pub const DEFAULT_ALPHA: f64 = 0.8;

/// Condition-annealing parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnealConfig {
    /// γ = 1 at and below this normalized time.
    #[serde(default = "d_tau1")]
    pub tau1: f64,
    /// γ = 0 at and above this normalized time.
    #[serde(default = "d_tau2")]
    pub tau2: f64,
    /// Initial noise scale `s`.
    #[serde(default = "d_noise_scale")]
    pub noise_scale: f64,
    /// Mixing factor ψ between the rescaled and raw annealed condition.
    #[serde(default = "d_psi")]
    pub psi: f64,
}

fn d_tau1() -> f64 {
    DEFAULT_TAU1
}
fn d_tau2() -> f64 {
    DEFAULT_TAU2
}
fn d_noise_scale() -> f64 {
    DEFAULT_NOISE_SCALE
}
fn d_psi() -> f64 {
    DEFAULT_PSI
}

impl Default for AnnealConfig {
    fn default() -> Self {
        Self {
            tau1: DEFAULT_TAU1,
            tau2: DEFAULT_TAU2,
            noise_scale: DEFAULT_NOISE_SCALE,
            psi: DEFAULT_PSI,
        }
    }
}

impl AnnealConfig {
    pub fn validate(&self, field: &str) -> Result<()> {
        let at = |f: &str| format!("{field}.{f}");
        if !(0.0..=1.0).contains(&self.tau1) {
            return Err(Error::config(at("tau1"), "must lie in [0, 1]"));
        }
        if !(self.tau2 > self.tau1 && self.tau2 <= 1.0) {
            return Err(Error::config(at("tau2"), "must lie in (tau1, 1]"));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::config(at("noise_scale"), "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.psi) {
            return Err(Error::config(at("psi"), "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Annealing schedule γ(t): 1 below `tau1`, 0 above `tau2`, linear between.
pub fn gamma(t_norm: f64, cfg: &AnnealConfig) -> f64 {
    let t = t_norm.clamp(0.0, 1.0);
    if t <= cfg.tau1 {
        1.0
    } else if t >= cfg.tau2 {
        0.0
    } else {
        ((cfg.tau2 - t) / (cfg.tau2 - cfg.tau1)).clamp(0.0, 1.0)
    }
}

/// `ŷ = sqrt(γ) y + s sqrt(1 - γ) n` for a given noise draw `n`.
pub fn anneal_with_noise(y: &[f64], gamma_t: f64, noise_scale: f64, noise: &[f64]) -> Result<Vec<f64>> {
    check_dim(y.len(), noise.len())?;
    let a = gamma_t.sqrt();
    let b = noise_scale * (1.0 - gamma_t).sqrt();
    Ok(y.iter().zip(noise).map(|(yi, ni)| a * yi + b * ni).collect())
}

/// Anneals a class condition, drawing fresh standard-normal noise from `rng`.
pub fn anneal_condition<R: Rng + ?Sized>(
    y: &Condition,
    t_norm: f64,
    cfg: &AnnealConfig,
    rng: &mut R,
) -> Result<Condition> {
    let logits = y
        .logits()
        .ok_or_else(|| Error::InvalidArgument("the null condition is never annealed".into()))?;
    let noise: Vec<f64> = (0..logits.len()).map(|_| StandardNormal.sample(rng)).collect();
    anneal_with_noise(logits, gamma(t_norm, cfg), cfg.noise_scale, &noise).map(Condition::Logits)
}

/// Population mean and standard deviation over the entries of `v`.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Restores the clean condition's statistics and mixes with the raw annealed
/// condition: `ψ · rescaled + (1 - ψ) · ŷ`.
pub fn rescale_condition(yhat: &[f64], mu_in: f64, sigma_in: f64, psi: f64) -> Result<Vec<f64>> {
    if psi == 0.0 {
        return Ok(yhat.to_vec());
    }
    let (mean, std) = mean_std(yhat);
    if !(std > 0.0) {
        return Err(Error::Degenerate(
            "annealed condition has zero variance; rescaling is undefined".into(),
        ));
    }
    Ok(yhat
        .iter()
        .map(|v| {
            let rescaled = (v - mean) / std * sigma_in + mu_in;
            psi * rescaled + (1.0 - psi) * v
        })
        .collect())
}

/// Classifier-free guidance `ε_∅ + w (ε_cond - ε_∅)`.
///
/// `w = 1` returns the conditional prediction and `w = 0` the unconditional
/// one bit for bit.
pub fn cfg_combine(eps_null: &[f64], eps_cond: &[f64], w: f64) -> Result<Vec<f64>> {
    check_dim(eps_null.len(), eps_cond.len())?;
    if w == 1.0 {
        return Ok(eps_cond.to_vec());
    }
    if w == 0.0 {
        return Ok(eps_null.to_vec());
    }
    Ok(eps_null
        .iter()
        .zip(eps_cond)
        .map(|(n, c)| n + w * (c - n))
        .collect())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Contrastive guidance weights for the positive and negative branch.
///
/// With `d± = ‖ε_∅ - ε_±‖²`: `w⁺ = 2w / (1 + e^{-τ d⁺})` and
/// `w⁻ = -2w e^{-τ d⁻} / (1 + e^{-τ d⁻})`.
pub fn ccfg_weights(
    eps_null: &[f64],
    eps_pos: &[f64],
    eps_neg: &[f64],
    w: f64,
    tau_eff: f64,
) -> Result<(f64, f64)> {
    check_dim(eps_null.len(), eps_pos.len())?;
    check_dim(eps_null.len(), eps_neg.len())?;
    Ok(ccfg_weights_from_distances(
        sq_dist(eps_null, eps_pos),
        sq_dist(eps_null, eps_neg),
        w,
        tau_eff,
    ))
}

pub fn ccfg_weights_from_distances(d_pos: f64, d_neg: f64, w: f64, tau_eff: f64) -> (f64, f64) {
    let e_pos = (-tau_eff * d_pos).exp();
    let e_neg = (-tau_eff * d_neg).exp();
    let w_plus = 2.0 * w / (1.0 + e_pos);
    let w_minus = -2.0 * w * e_neg / (1.0 + e_neg);
    (w_plus, w_minus)
}

/// `ε_∅ + w⁺ (ε_pos - ε_∅) + w⁻ (ε_neg - ε_∅)`.
pub fn ccfg_combine(
    eps_null: &[f64],
    eps_pos: &[f64],
    eps_neg: &[f64],
    w_plus: f64,
    w_minus: f64,
) -> Result<Vec<f64>> {
    check_dim(eps_null.len(), eps_pos.len())?;
    check_dim(eps_null.len(), eps_neg.len())?;
    Ok((0..eps_null.len())
        .map(|i| {
            let n = eps_null[i];
            n + (w_plus * (eps_pos[i] - n) + w_minus * (eps_neg[i] - n))
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauMode {
    Fixed,
    Dynamic,
}

/// `τ sqrt(γ)` in dynamic mode, `τ` in fixed mode.
pub fn dynamic_tau(tau: f64, gamma_t: f64) -> f64 {
    tau * gamma_t.sqrt()
}

pub fn effective_tau(mode: TauMode, tau: f64, gamma_t: f64) -> f64 {
    match mode {
        TauMode::Fixed => tau,
        TauMode::Dynamic => dynamic_tau(tau, gamma_t),
    }
}

/// `α ε_cads + (1 - α) ε_ccfg`; the endpoints return one input bit for bit.
pub fn disc_ds_noise(eps_cads: &[f64], eps_ccfg: &[f64], alpha: f64) -> Result<Vec<f64>> {
    check_dim(eps_cads.len(), eps_ccfg.len())?;
    if alpha == 1.0 {
        return Ok(eps_cads.to_vec());
    }
    if alpha == 0.0 {
        return Ok(eps_ccfg.to_vec());
    }
    Ok(eps_cads
        .iter()
        .zip(eps_ccfg)
        .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Cfg,
    Cads,
    Ccfg,
    DiscDs,
}

impl PolicyKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PolicyKind::Cfg => "cfg",
            PolicyKind::Cads => "cads",
            PolicyKind::Ccfg => "ccfg",
            PolicyKind::DiscDs => "disc_ds",
        }
    }

    pub fn needs_negative(&self) -> bool {
        matches!(self, PolicyKind::Ccfg | PolicyKind::DiscDs)
    }
}

/// Which positive prediction the contrastive weights measure distance to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceSource {
    /// Raw prediction under the (annealed) positive condition.
    #[default]
    Conditional,
    /// Output of the classifier-free guidance combination.
    CfgOutput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidancePolicy {
    /// Label used in file names and reports; defaults to the kind.
    #[serde(default)]
    pub name: String,
    pub kind: PolicyKind,
    #[serde(default = "d_w")]
    pub w: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anneal: Option<AnnealConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_mode: Option<TauMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distance: Option<DistanceSource>,
}

fn d_w() -> f64 {
    DEFAULT_W
}

impl GuidancePolicy {
    fn base(kind: PolicyKind) -> Self {
        Self {
            name: kind.as_str().to_string(),
            kind,
            w: DEFAULT_W,
            anneal: None,
            tau: None,
            tau_mode: None,
            alpha: None,
            distance: None,
        }
    }

    pub fn cfg(w: f64) -> Self {
        Self { w, ..Self::base(PolicyKind::Cfg) }
    }

    pub fn cads(w: f64, anneal: AnnealConfig) -> Self {
        Self {
            w,
            anneal: Some(anneal),
            ..Self::base(PolicyKind::Cads)
        }
    }

    /// Contrastive guidance; pass `anneal` to corrupt both conditions.
    pub fn ccfg(w: f64, tau: f64, tau_mode: TauMode, anneal: Option<AnnealConfig>) -> Self {
        Self {
            w,
            anneal,
            tau: Some(tau),
            tau_mode: Some(tau_mode),
            ..Self::base(PolicyKind::Ccfg)
        }
    }

    pub fn disc_ds(w: f64, anneal: AnnealConfig, tau: f64, tau_mode: TauMode, alpha: f64) -> Self {
        Self {
            w,
            anneal: Some(anneal),
            tau: Some(tau),
            tau_mode: Some(tau_mode),
            alpha: Some(alpha),
            ..Self::base(PolicyKind::DiscDs)
        }
    }

    /// Defaults: w = 2, τ₁ = 0.5, τ₂ = 0.9, s = 0.1, ψ = 1, τ = 0.8 (dynamic), α = 0.8.
    pub fn default_for(kind: PolicyKind) -> Self {
        let anneal = AnnealConfig::default();
        match kind {
            PolicyKind::Cfg => Self::cfg(DEFAULT_W),
            PolicyKind::Cads => Self::cads(DEFAULT_W, anneal),
            PolicyKind::Ccfg => Self::ccfg(DEFAULT_W, DEFAULT_TAU, TauMode::Fixed, None),
            PolicyKind::DiscDs => {
                Self::disc_ds(DEFAULT_W, anneal, DEFAULT_TAU, TauMode::Dynamic, DEFAULT_ALPHA)
            }
        }
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn display_name(&self) -> &str {
        if self.name.is_empty() {
            self.kind.as_str()
        } else {
            &self.name
        }
    }

    pub fn tau_mode(&self) -> TauMode {
        self.tau_mode.unwrap_or(TauMode::Dynamic)
    }

    pub fn distance(&self) -> DistanceSource {
        self.distance.unwrap_or_default()
    }

    /// Whether conditions are annealed at each step.
    pub fn anneals(&self) -> bool {
        self.kind != PolicyKind::Cfg && self.anneal.is_some()
    }

    /// Checks the field combination against the policy kind. `field` prefixes
    /// error messages (e.g. `policies[2]`).
    pub fn validate(&self, field: &str) -> Result<()> {
        let at = |f: &str| format!("{field}.{f}");
        if self.name.contains(char::is_whitespace) || self.name.contains('/') {
            return Err(Error::config(at("name"), "must not contain whitespace or '/'"));
        }
        if !(self.w > 0.0 && self.w.is_finite()) {
            return Err(Error::config(at("w"), "guidance scale must be positive"));
        }
        let kind = self.kind.as_str();
        let forbid = |present: bool, f: &str| -> Result<()> {
            if present {
                Err(Error::config(at(f), format!("not used by policy kind `{kind}`")))
            } else {
                Ok(())
            }
        };
        let require = |present: bool, f: &str| -> Result<()> {
            if present {
                Ok(())
            } else {
                Err(Error::config(at(f), format!("required by policy kind `{kind}`")))
            }
        };
        match self.kind {
            PolicyKind::Cfg => {
                forbid(self.anneal.is_some(), "anneal")?;
                forbid(self.tau.is_some(), "tau")?;
                forbid(self.alpha.is_some(), "alpha")?;
            }
            PolicyKind::Cads => {
                require(self.anneal.is_some(), "anneal")?;
                forbid(self.tau.is_some(), "tau")?;
                forbid(self.alpha.is_some(), "alpha")?;
            }
            PolicyKind::Ccfg => {
                require(self.tau.is_some(), "tau")?;
                forbid(self.alpha.is_some(), "alpha")?;
            }
            PolicyKind::DiscDs => {
                require(self.anneal.is_some(), "anneal")?;
                require(self.tau.is_some(), "tau")?;
                require(self.alpha.is_some(), "alpha")?;
            }
        }
        if self.tau.is_none() {
            forbid(self.tau_mode.is_some(), "tau_mode")?;
            forbid(self.distance.is_some(), "distance")?;
        }
        if let Some(tau) = self.tau {
            if !(tau >= 0.0 && tau.is_finite()) {
                return Err(Error::config(at("tau"), "must be >= 0"));
            }
        }
        if let Some(alpha) = self.alpha {
            if !(0.0..=1.0).contains(&alpha) {
                return Err(Error::config(at("alpha"), "must lie in [0, 1]"));
            }
        }
        if let Some(a) = &self.anneal {
            a.validate(&at("anneal"))?;
        }
        Ok(())
    }

    /// Combines one step's predictions into the noise estimate handed to the
    /// reverse stepper. `gamma_t` is the annealing level of this step (1 when
    /// the policy does not anneal); `eps_neg` is required for contrastive kinds.
    pub fn combine(
        &self,
        gamma_t: f64,
        eps_null: &[f64],
        eps_pos: &[f64],
        eps_neg: Option<&[f64]>,
    ) -> Result<Vec<f64>> {
        match self.kind {
            PolicyKind::Cfg | PolicyKind::Cads => cfg_combine(eps_null, eps_pos, self.w),
            PolicyKind::Ccfg => self.contrastive(gamma_t, eps_null, eps_pos, eps_neg, None),
            PolicyKind::DiscDs => {
                let alpha = self
                    .alpha
                    .ok_or_else(|| Error::config("alpha", "required by disc_ds"))?;
                let eps_cads = cfg_combine(eps_null, eps_pos, self.w)?;
                let eps_ccfg =
                    self.contrastive(gamma_t, eps_null, eps_pos, eps_neg, Some(&eps_cads))?;
                disc_ds_noise(&eps_cads, &eps_ccfg, alpha)
            }
        }
    }

    fn contrastive(
        &self,
        gamma_t: f64,
        eps_null: &[f64],
        eps_pos: &[f64],
        eps_neg: Option<&[f64]>,
        cfg_out: Option<&[f64]>,
    ) -> Result<Vec<f64>> {
        let eps_neg = eps_neg.ok_or_else(|| {
            Error::InvalidArgument("contrastive guidance needs a negative prediction".into())
        })?;
        let tau = self
            .tau
            .ok_or_else(|| Error::config("tau", "required by contrastive guidance"))?;
        let tau_eff = effective_tau(self.tau_mode(), tau, gamma_t);
        let cfg_buf;
        let pos_for_distance = match self.distance() {
            DistanceSource::Conditional => eps_pos,
            DistanceSource::CfgOutput => match cfg_out {
                Some(c) => c,
                None => {
                    cfg_buf = cfg_combine(eps_null, eps_pos, self.w)?;
                    &cfg_buf
                }
            },
        };
        let (w_plus, w_minus) = ccfg_weights(eps_null, pos_for_distance, eps_neg, self.w, tau_eff)?;
        ccfg_combine(eps_null, eps_pos, eps_neg, w_plus, w_minus)
    }
}
