use ndarray::{Array4, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear-beta variance schedule with a DDIM inference subsequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub inference_steps: usize,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            train_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            inference_steps: 30,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub params: ScheduleParams,
    /// `betas[t - 1]` is the variance added at step `t`.
    pub betas: Vec<f64>,
    /// `alpha_bar[t]` for `t` in `0..=T`; `alpha_bar[0] = 1`.
    pub alpha_bar: Vec<f64>,
    /// Strictly increasing timesteps in `[1, T]`.
    pub inference: Vec<usize>,
}

pub fn make_schedule(
    train_steps: usize,
    beta_start: f64,
    beta_end: f64,
    inference_steps: usize,
) -> Result<NoiseSchedule> {
    NoiseSchedule::new(ScheduleParams {
        train_steps,
        beta_start,
        beta_end,
        inference_steps,
    })
}

impl NoiseSchedule {
    pub fn new(params: ScheduleParams) -> Result<Self> {
        let ScheduleParams {
            train_steps: t_max,
            beta_start,
            beta_end,
            inference_steps,
        } = params;
        if t_max == 0 {
            return Err(Error::Validation("schedule needs at least one timestep".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Validation(format!(
                "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        if inference_steps == 0 || inference_steps > t_max {
            return Err(Error::Validation(format!(
                "inference steps must be in 1..={t_max}, got {inference_steps}"
            )));
        }
        let betas: Vec<f64> = (0..t_max)
            .map(|i| {
                if t_max == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64
                }
            })
            .collect();
        let mut alpha_bar = Vec::with_capacity(t_max + 1);
        alpha_bar.push(1.0);
        for b in &betas {
            let prev = *alpha_bar.last().unwrap();
            alpha_bar.push(prev * (1.0 - b));
        }
        let inference = if inference_steps == 1 {
            vec![t_max]
        } else {
            (0..inference_steps)
                .map(|k| {
                    (1.0 + k as f64 * (t_max - 1) as f64 / (inference_steps - 1) as f64).round()
                        as usize
                })
                .collect()
        };
        Ok(NoiseSchedule {
            params,
            betas,
            alpha_bar,
            inference,
        })
    }

    pub fn train_steps(&self) -> usize {
        self.params.train_steps
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar.get(t).copied().ok_or_else(|| {
            Error::Validation(format!("timestep {t} outside 0..={}", self.train_steps()))
        })
    }

    /// Descending `(t, t_prev)` pairs visited by the sampler, ending at 0.
    pub fn reverse_pairs(&self) -> Vec<(usize, usize)> {
        let mut steps = self.inference.clone();
        steps.reverse();
        let mut out = Vec::with_capacity(steps.len());
        for (i, &t) in steps.iter().enumerate() {
            out.push((t, steps.get(i + 1).copied().unwrap_or(0)));
        }
        out
    }

    /// Same schedule with a different number of inference steps.
    pub fn with_inference_steps(&self, steps: usize) -> Result<Self> {
        NoiseSchedule::new(ScheduleParams {
            inference_steps: steps,
            ..self.params.clone()
        })
    }
}

fn check_shapes(a: &Array4<f64>, b: &Array4<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Structural(format!(
            "latent shapes differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// `sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`.
pub fn add_noise(
    z0: &Array4<f64>,
    t: usize,
    eps: &Array4<f64>,
    schedule: &NoiseSchedule,
) -> Result<Array4<f64>> {
    check_shapes(z0, eps)?;
    let ab = schedule.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Zip::from(z0).and(eps).map_collect(|&z, &e| a * z + b * e))
}

/// Clean-latent estimate `(z_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)`.
pub fn ddim_estimate_z0(
    z_t: &Array4<f64>,
    eps_hat: &Array4<f64>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Array4<f64>> {
    check_shapes(z_t, eps_hat)?;
    let ab = schedule.alpha_bar(t)?;
    if ab <= 0.0 {
        return Err(Error::Validation(format!("alpha_bar is zero at t={t}")));
    }
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Zip::from(z_t).and(eps_hat).map_collect(|&z, &e| (z - b * e) / a))
}

/// Deterministic DDIM move to `t_prev` given the clean estimate and noise.
pub fn ddim_step(
    z0_hat: &Array4<f64>,
    eps: &Array4<f64>,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<Array4<f64>> {
    add_noise(z0_hat, t_prev, eps, schedule)
}
