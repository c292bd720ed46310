//! Noise schedules, latent codec and the denoisers driven by the sampler.

pub mod analytic;
pub mod checkpoint;
pub mod latent;
pub mod layers;
pub mod network;
pub mod schedule;
pub mod train;

use std::sync::Arc;

use ndarray::{Array3, Array4};

use crate::compositor::CompositeImage;
use crate::error::{Error, Result};

pub use analytic::{GaussianComponent, GaussianMixtureDenoiser};
pub use latent::{decode_stack, encode_stack, LatentStack, LATENT_CHANNELS};
pub use network::{ArchConfig, CoupledDenoiser, ParamGroup};
pub use schedule::{add_noise, ddim_estimate_z0, ddim_step, make_schedule, NoiseSchedule, ScheduleParams};

/// Per-stage image features, each `C_s x H_s x W_s`.
#[derive(Clone, Debug, PartialEq)]
pub struct Features(pub Vec<Array3<f64>>);

/// What the denoiser is conditioned on. `Null` selects the learned null
/// embedding used for classifier-free guidance.
#[derive(Clone, Debug, PartialEq)]
pub enum Conditioning {
    Null,
    Image(Arc<Features>),
}

impl Conditioning {
    pub fn is_null(&self) -> bool {
        matches!(self, Conditioning::Null)
    }
}

/// A noise predictor over an `N x 4 x H x W` latent stack.
pub trait Denoiser: Send + Sync {
    fn schedule(&self) -> &NoiseSchedule;

    /// Image features for `image`. They do not depend on the timestep, so
    /// callers compute them once per image.
    fn condition(&self, image: &CompositeImage) -> Result<Conditioning>;

    /// Noise prediction. With `coupled = false` every slot is denoised
    /// independently by the base model, ignoring `cond`.
    fn eps(&self, z: &Array4<f64>, t: usize, cond: &Conditioning, coupled: bool) -> Result<Array4<f64>>;

    /// `grad^T d eps / d z`, evaluated at `z`.
    fn eps_vjp(
        &self,
        z: &Array4<f64>,
        t: usize,
        cond: &Conditioning,
        coupled: bool,
        grad: &Array4<f64>,
    ) -> Result<Array4<f64>>;

    /// Whether the sampler should differentiate through this model by default.
    fn prefers_exact_gradient(&self) -> bool;
}

/// [`Denoiser::eps`] on a tagged latent with a finiteness check.
pub fn predict_eps(
    model: &dyn Denoiser,
    z: &LatentStack,
    t: usize,
    cond: &Conditioning,
    coupled: bool,
) -> Result<LatentStack> {
    let eps = model.eps(&z.values, t, cond, coupled)?;
    check_finite(&eps, t, "noise prediction")?;
    Ok(LatentStack { values: eps, timestep: t })
}

pub(crate) fn check_finite(a: &Array4<f64>, timestep: usize, what: &str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical {
            timestep,
            message: format!("non-finite {what}"),
        })
    }
}
