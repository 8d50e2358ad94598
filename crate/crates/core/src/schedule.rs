//! Forward diffusion process: linear-β schedule, the inference step grid and
//! forward noising.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_BETA_MIN: f64 = 1e-4;
pub const DEFAULT_BETA_MAX: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleParams {
    pub train_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            train_steps: DEFAULT_TRAIN_STEPS,
            beta_min: DEFAULT_BETA_MIN,
            beta_max: DEFAULT_BETA_MAX,
        }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.train_steps, self.beta_min, self.beta_max)
    }
}

/// Discrete-time variance-preserving noise schedule.
///
/// `alpha_bar[t]` is the cumulative product of `1 - beta[i]` for `i <= t`;
/// index 0 is the least noisy train timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear β from `beta_min` to `beta_max` over `train_steps` steps.
    pub fn linear(train_steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if train_steps < 2 {
            return Err(Error::InvalidArgument(format!(
                "schedule needs at least 2 train steps, got {train_steps}"
            )));
        }
        let in_range = |b: f64| b > 0.0 && b < 1.0;
        if !in_range(beta_min) || !in_range(beta_max) {
            return Err(Error::InvalidArgument(format!(
                "betas must lie in (0, 1), got [{beta_min}, {beta_max}]"
            )));
        }
        if beta_min > beta_max {
            return Err(Error::InvalidArgument(format!(
                "beta_min {beta_min} exceeds beta_max {beta_max}"
            )));
        }
        let last = (train_steps - 1) as f64;
        let beta: Vec<f64> = (0..train_steps)
            .map(|i| beta_min + (beta_max - beta_min) * i as f64 / last)
            .collect();
        Ok(Self::from_betas(beta))
    }

    fn from_betas(beta: Vec<f64>) -> Self {
        let mut acc = 1.0;
        let alpha_bar = beta
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Self { beta, alpha_bar }
    }

    pub fn train_steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Train timestep visited at inference `step` of an `num_steps` grid.
    ///
    /// The grid spreads `num_steps` points uniformly over `T-1 ..= 0`, so
    /// step 0 is the noisiest timestep and the last step is timestep 0.
    pub fn train_timestep(&self, step: usize, num_steps: usize) -> Result<usize> {
        if num_steps == 0 || step >= num_steps {
            return Err(Error::InvalidArgument(format!(
                "step {step} outside inference grid of {num_steps} steps"
            )));
        }
        if num_steps > self.train_steps() {
            return Err(Error::InvalidArgument(format!(
                "{num_steps} inference steps exceed {} train steps",
                self.train_steps()
            )));
        }
        let top = (self.train_steps() - 1) as f64;
        if num_steps == 1 {
            return Ok(self.train_steps() - 1);
        }
        let remaining = (num_steps - 1 - step) as f64;
        Ok((top * remaining / (num_steps - 1) as f64).round() as usize)
    }

    /// `train_timestep(step) / T`; 1 at the noisiest end, 0 at the last step.
    pub fn normalized_time(&self, step: usize, num_steps: usize) -> Result<f64> {
        Ok(self.train_timestep(step, num_steps)? as f64 / self.train_steps() as f64)
    }

    /// ᾱ of the timestep that follows `step` on the grid; 1 after the final step.
    pub fn alpha_bar_prev(&self, step: usize, num_steps: usize) -> Result<f64> {
        if step + 1 >= num_steps {
            // validates `step`
            self.train_timestep(step, num_steps)?;
            Ok(1.0)
        } else {
            Ok(self.alpha_bar[self.train_timestep(step + 1, num_steps)?])
        }
    }

    /// `x_t = sqrt(ᾱ_t) x0 + sqrt(1 - ᾱ_t) eps`.
    pub fn forward_diffuse(&self, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        check_dim(x0.len(), eps.len())?;
        if t >= self.train_steps() {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside schedule of {} steps",
                self.train_steps()
            )));
        }
        Ok(diffuse_with(x0, eps, self.alpha_bar[t]))
    }
}

pub(crate) fn diffuse_with(x0: &[f64], eps: &[f64], alpha_bar: f64) -> Vec<f64> {
    let a = alpha_bar.sqrt();
    let s = (1.0 - alpha_bar).sqrt();
    x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn default_schedule() -> NoiseSchedule {
        ScheduleParams::default().build().unwrap()
    }

    #[test]
    fn first_alpha_bar_is_one_minus_beta_min() {
        let s = default_schedule();
        assert!((s.alpha_bar_at(0) - 0.9999).abs() < 1e-15);
    }

    #[test]
    fn constant_half_beta_gives_powers_of_two() {
        let s = NoiseSchedule::linear(2, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar(), &[0.5, 0.25]);
    }

    #[test]
    fn default_terminal_alpha_bar_matches_reference() {
        // Independent float64 cumulative product (numpy.cumprod) of the same grid.
        let s = default_schedule();
        let expected = 4.035829765375676e-05;
        assert!((s.alpha_bar_at(999) - expected).abs() / expected < 1e-10);
    }

    #[test]
    fn alpha_bar_matches_explicit_product_and_decreases() {
        let s = NoiseSchedule::linear(300, 3e-4, 0.05).unwrap();
        for t in 0..300 {
            let prod: f64 = s.beta()[..=t].iter().map(|b| 1.0 - b).product();
            assert!((s.alpha_bar_at(t) - prod).abs() <= 1e-12 * prod);
            if t > 0 {
                assert!(s.alpha_bar_at(t) < s.alpha_bar_at(t - 1));
            }
        }
        assert!(s.alpha_bar_at(299) > 0.0);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(NoiseSchedule::linear(1, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
        assert!(NoiseSchedule::linear(10, 0.03, 0.02).is_err());
    }

    #[test]
    fn normalized_time_grid_endpoints() {
        let s = default_schedule();
        assert!((s.normalized_time(0, 50).unwrap() - 0.999).abs() < 1e-12);
        assert_eq!(s.normalized_time(49, 50).unwrap(), 0.0);
        assert_eq!(s.normalized_time(1, 2).unwrap(), 0.0);
        assert_eq!(s.normalized_time(0, 2).unwrap(), 999.0 / 1000.0);
        assert!(s.normalized_time(50, 50).is_err());
        assert!(s.normalized_time(0, 0).is_err());
    }

    #[test]
    fn normalized_time_is_non_increasing_along_grid() {
        let s = default_schedule();
        for n in [1, 2, 7, 50, 1000] {
            let ts: Vec<f64> = (0..n).map(|i| s.normalized_time(i, n).unwrap()).collect();
            assert!(ts.windows(2).all(|w| w[0] > w[1]), "grid of {n} not strictly decreasing");
        }
    }

    #[test]
    fn forward_diffuse_substitution() {
        let s = NoiseSchedule::linear(2, 0.75, 0.75).unwrap();
        // alpha_bar[0] = 0.25
        let x = s.forward_diffuse(&[1.0, 0.0], 0, &[0.0, 1.0]).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-15);
        assert!((x[1] - 0.75f64.sqrt()).abs() < 1e-15);
        assert!(s.forward_diffuse(&[1.0], 0, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn forward_diffuse_limits() {
        let x0 = [0.3, -1.2];
        let eps = [2.0, 0.5];
        assert_eq!(diffuse_with(&x0, &eps, 1.0), x0.to_vec());
        assert_eq!(diffuse_with(&x0, &eps, 0.0), eps.to_vec());
    }

    #[test]
    fn forward_diffuse_preserves_marginal() {
        let s = default_schedule();
        let t = 400;
        let ab = s.alpha_bar_at(t);
        let x0 = [1.5, -0.5];
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let eps: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut rng)).collect();
            let x = s.forward_diffuse(&x0, t, &eps).unwrap();
            for d in 0..2 {
                sum[d] += x[d];
                sq[d] += x[d] * x[d];
            }
        }
        let var_expected = 1.0 - ab;
        for d in 0..2 {
            let mean = sum[d] / n as f64;
            let var = sq[d] / n as f64 - mean * mean;
            let tol = 3.0 * var_expected.sqrt() / (n as f64).sqrt();
            assert!((mean - ab.sqrt() * x0[d]).abs() < tol);
            assert!((var - var_expected).abs() / var_expected < 0.05);
        }
    }
}
