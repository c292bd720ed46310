//! Exact noise prediction for a Gaussian-mixture prior on each layer slot.
//!
//! With a prior `sum_k pi_k N(mu_k, var_k I)` on a slot's clean latent, the
//! noised marginal at level `abar` is `sum_k pi_k N(sqrt(abar) mu_k, s_k I)`
//! with `s_k = abar var_k + 1 - abar`, so the score and therefore the
//! optimal noise prediction are available in closed form.

use std::sync::Arc;

use ndarray::{Array3, Array4, ArrayView3, ArrayViewMut3, Axis, Zip};

use super::{Conditioning, Denoiser, Features, NoiseSchedule};
use crate::compositor::CompositeImage;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianComponent {
    pub weight: f64,
    /// `4 x H x W`.
    pub mean: Array3<f64>,
    pub variance: f64,
}

/// The same mixture prior applied to every slot independently. Conditioning
/// and coupling are ignored.
#[derive(Clone, Debug)]
pub struct GaussianMixtureDenoiser {
    schedule: NoiseSchedule,
    components: Vec<GaussianComponent>,
}

struct SlotTerms {
    resp: Vec<f64>,
    /// Per-component `(sqrt(abar) mu_k - z) / s_k`.
    dirs: Vec<Array3<f64>>,
    inv_var: Vec<f64>,
}

impl GaussianMixtureDenoiser {
    pub fn new(schedule: NoiseSchedule, components: Vec<GaussianComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Validation("mixture needs at least one component".into()));
        }
        let shape = components[0].mean.dim();
        for c in &components {
            if c.mean.dim() != shape {
                return Err(Error::Structural("mixture means differ in shape".into()));
            }
            if !(c.weight > 0.0) || !(c.variance >= 0.0) {
                return Err(Error::Validation(
                    "component weights must be positive and variances non-negative".into(),
                ));
            }
        }
        Ok(GaussianMixtureDenoiser { schedule, components })
    }

    pub fn gaussian(schedule: NoiseSchedule, mean: Array3<f64>, variance: f64) -> Result<Self> {
        Self::new(
            schedule,
            vec![GaussianComponent {
                weight: 1.0,
                mean,
                variance,
            }],
        )
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    fn slot_terms(&self, z: ArrayView3<f64>, ab: f64) -> SlotTerms {
        let d = z.len() as f64;
        let sa = ab.sqrt();
        let mut logits = Vec::with_capacity(self.components.len());
        let mut dirs = Vec::with_capacity(self.components.len());
        let mut inv_var = Vec::with_capacity(self.components.len());
        for c in &self.components {
            let s = ab * c.variance + 1.0 - ab;
            let dir = Zip::from(&c.mean).and(z).map_collect(|&m, &v| (sa * m - v) / s);
            let sq: f64 = dir.iter().map(|v| v * v).sum::<f64>() * s;
            logits.push(c.weight.ln() - 0.5 * d * s.ln() - 0.5 * sq);
            dirs.push(dir);
            inv_var.push(1.0 / s);
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut resp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = resp.iter().sum();
        resp.iter_mut().for_each(|r| *r /= total);
        SlotTerms { resp, dirs, inv_var }
    }

    fn check(&self, z: &Array4<f64>) -> Result<()> {
        let shape = self.components[0].mean.dim();
        let (_, c, h, w) = z.dim();
        if (c, h, w) != shape {
            return Err(Error::Structural(format!(
                "latent slot is {:?}, prior is {shape:?}",
                (c, h, w)
            )));
        }
        Ok(())
    }

    fn fill_eps(&self, z: ArrayView3<f64>, ab: f64, mut out: ArrayViewMut3<f64>) {
        let terms = self.slot_terms(z, ab);
        let scale = -(1.0 - ab).sqrt();
        out.fill(0.0);
        for (r, dir) in terms.resp.iter().zip(&terms.dirs) {
            out.scaled_add(scale * r, dir);
        }
    }

    fn fill_vjp(&self, z: ArrayView3<f64>, v: ArrayView3<f64>, ab: f64, mut out: ArrayViewMut3<f64>) {
        let terms = self.slot_terms(z, ab);
        let scale = -(1.0 - ab).sqrt();
        let mut mean_dir = Array3::<f64>::zeros(z.dim());
        for (r, dir) in terms.resp.iter().zip(&terms.dirs) {
            mean_dir.scaled_add(*r, dir);
        }
        let mean_dot = (&mean_dir * &v).sum();
        out.fill(0.0);
        for ((r, dir), iv) in terms.resp.iter().zip(&terms.dirs).zip(&terms.inv_var) {
            out.scaled_add(-scale * r * iv, &v);
            let dot = (dir * &v).sum();
            out.scaled_add(scale * r * dot, dir);
        }
        out.scaled_add(-scale * mean_dot, &mean_dir);
    }
}

impl Denoiser for GaussianMixtureDenoiser {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn condition(&self, _image: &CompositeImage) -> Result<Conditioning> {
        Ok(Conditioning::Image(Arc::new(Features(Vec::new()))))
    }

    fn eps(&self, z: &Array4<f64>, t: usize, _cond: &Conditioning, _coupled: bool) -> Result<Array4<f64>> {
        self.check(z)?;
        let ab = self.schedule.alpha_bar(t)?;
        let mut out = Array4::<f64>::zeros(z.dim());
        if ab >= 1.0 {
            return Ok(out);
        }
        for (zs, os) in z.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
            self.fill_eps(zs, ab, os);
        }
        Ok(out)
    }

    fn eps_vjp(
        &self,
        z: &Array4<f64>,
        t: usize,
        _cond: &Conditioning,
        _coupled: bool,
        grad: &Array4<f64>,
    ) -> Result<Array4<f64>> {
        self.check(z)?;
        if grad.dim() != z.dim() {
            return Err(Error::Structural("gradient shape differs from latent".into()));
        }
        let ab = self.schedule.alpha_bar(t)?;
        let mut out = Array4::<f64>::zeros(z.dim());
        if ab >= 1.0 {
            return Ok(out);
        }
        for ((zs, gs), os) in z
            .axis_iter(Axis(0))
            .zip(grad.axis_iter(Axis(0)))
            .zip(out.axis_iter_mut(Axis(0)))
        {
            self.fill_vjp(zs, gs, ab, os);
        }
        Ok(out)
    }

    fn prefers_exact_gradient(&self) -> bool {
        true
    }
}
