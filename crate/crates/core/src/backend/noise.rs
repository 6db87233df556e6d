//! Noise schedule and deterministic (eta = 0) DDIM stepping in both directions.

use serde::{Deserialize, Serialize};

use super::BackendError;
use crate::tensor::Latent;

/// Beta-schedule parameters of the trained model. The per-run
/// [`NoiseSchedule`] is derived from these for a chosen step count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Offset added to the subsampled training timesteps.
    pub steps_offset: usize,
}

impl Default for BetaSchedule {
    /// Scaled-linear schedule of Stable Diffusion 1.x.
    fn default() -> Self {
        Self { train_steps: 1000, beta_start: 0.00085, beta_end: 0.012, steps_offset: 1 }
    }
}

/// Cumulative signal levels `alpha_bar[t]` for `t = 0..=T`.
///
/// `alpha_bar[0] = 1` and the sequence strictly decreases in `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self, BackendError> {
        if alpha_bar.len() < 2 {
            return Err(BackendError::InvalidSchedule("need at least one step".into()));
        }
        if alpha_bar[0] != 1.0 {
            return Err(BackendError::InvalidSchedule("alpha_bar[0] must be 1".into()));
        }
        if alpha_bar.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(BackendError::InvalidSchedule("alpha_bar must lie in (0, 1]".into()));
        }
        if alpha_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(BackendError::InvalidSchedule("alpha_bar must strictly decrease".into()));
        }
        Ok(Self { alpha_bar })
    }

    /// Scaled-linear betas over the training steps, subsampled to `steps`
    /// inference steps.
    pub fn scaled_linear(beta: &BetaSchedule, steps: usize) -> Result<Self, BackendError> {
        if steps == 0 || steps > beta.train_steps {
            return Err(BackendError::InvalidSchedule(format!(
                "steps must be in [1, {}], got {steps}",
                beta.train_steps
            )));
        }
        let (lo, hi) = (beta.beta_start.sqrt(), beta.beta_end.sqrt());
        let n = beta.train_steps;
        let mut cumprod = Vec::with_capacity(n);
        let mut acc = 1.0;
        for k in 0..n {
            let frac = if n == 1 { 0.0 } else { k as f64 / (n - 1) as f64 };
            let b = lo + (hi - lo) * frac;
            acc *= 1.0 - b * b;
            cumprod.push(acc);
        }
        let ratio = n / steps;
        if (steps - 1) * ratio + beta.steps_offset >= n {
            return Err(BackendError::InvalidSchedule(format!(
                "{steps} steps with offset {} overrun {n} training steps",
                beta.steps_offset
            )));
        }
        let mut alpha_bar = vec![1.0];
        for t in 1..=steps {
            alpha_bar.push(cumprod[(t - 1) * ratio + beta.steps_offset]);
        }
        Self::from_alpha_bar(alpha_bar)
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_step(&self, t: usize) -> Result<(), BackendError> {
        if t == 0 || t > self.steps() {
            return Err(BackendError::TimestepOutOfRange { t, steps: self.steps() });
        }
        Ok(())
    }

    /// One denoising step `z_t -> z_{t-1}` with predicted noise `eps`.
    pub fn ddim_step(&self, z_t: &Latent, eps: &Latent, t: usize) -> Result<Latent, BackendError> {
        self.check_step(t)?;
        check_same(z_t, eps)?;
        Ok(ddim_transfer(z_t, eps, self.alpha_bar[t], self.alpha_bar[t - 1]))
    }

    /// One inversion step `z_{t-1} -> z_t`, the algebraic inverse of
    /// [`Self::ddim_step`] for the same `eps`.
    pub fn ddim_invert_step(&self, z_prev: &Latent, eps: &Latent, t: usize) -> Result<Latent, BackendError> {
        self.check_step(t)?;
        check_same(z_prev, eps)?;
        Ok(ddim_transfer(z_prev, eps, self.alpha_bar[t - 1], self.alpha_bar[t]))
    }
}

/// Moves `z` from signal level `alpha_from` to `alpha_to` along the
/// deterministic DDIM path defined by `eps`: predict `x0`, then re-noise it.
pub fn ddim_transfer(z: &Latent, eps: &Latent, alpha_from: f64, alpha_to: f64) -> Latent {
    let (sa_from, sb_from) = (alpha_from.sqrt(), (1.0 - alpha_from).sqrt());
    let (sa_to, sb_to) = (alpha_to.sqrt(), (1.0 - alpha_to).sqrt());
    let mut out = z.clone();
    ndarray::Zip::from(&mut out).and(eps).for_each(|z, &e| {
        let x0 = (*z - sb_from * e) / sa_from;
        *z = sa_to * x0 + sb_to * e;
    });
    out
}

fn check_same(a: &Latent, b: &Latent) -> Result<(), BackendError> {
    if a.dim() != b.dim() {
        return Err(BackendError::ShapeMismatch(format!("latent {:?} vs eps {:?}", a.dim(), b.dim())));
    }
    Ok(())
}
