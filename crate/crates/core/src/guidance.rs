//! Guided sampling of layer stacks.
//!
//! Each reverse step combines conditional and unconditional noise
//! predictions, estimates the clean latent, scores it against the target
//! image through a differentiable composite (plus a prior score-matching
//! term), nudges the noisy latent down that gradient and re-evaluates the
//! noise at the nudged point. Every few steps the current estimate is
//! reordered, hallucinated layers are erased and empty slots are moved to
//! the back.

use ndarray::{s, Array3, Array4, ArrayView2, ArrayView3, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::compositor::{
    composite_planes, composite_planes_backward, soft_mask_derivative, soft_mask_value, CompositeImage,
    LayerImage, LayerStack, DEFAULT_DELTA, DEFAULT_SHARPNESS,
};
use crate::diffusion::latent::{decode_planes, empty_latent, permute_slots};
use crate::diffusion::{check_finite, ddim_estimate_z0, decode_stack, Conditioning, Denoiser, NoiseSchedule};
use crate::error::{Error, Result};

/// Largest stack the exhaustive ordering search accepts.
pub const MAX_PERMUTE_LAYERS: usize = 8;

/// Orderings whose losses differ by less than this are treated as ties.
const TIE_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    /// Inference steps.
    pub steps: usize,
    /// Guidance step size.
    pub w: f64,
    /// Weight of the prior score-matching term.
    pub lambda: f64,
    pub cfg_scale: f64,
    /// Steps between reorder/erase/sort interventions.
    pub update_period: usize,
    pub erase_visibility_threshold: f64,
    pub empty_alpha_threshold: f64,
    /// Differentiate through the denoiser; `None` defers to the model.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact_gradient: Option<bool>,
    /// Condition on the image. When false every prediction uses the null
    /// embedding.
    pub use_conditioning: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            steps: 30,
            w: 1e4,
            lambda: 1e-7,
            cfg_scale: 3.0,
            update_period: 5,
            erase_visibility_threshold: 0.01,
            empty_alpha_threshold: 0.001,
            exact_gradient: None,
            use_conditioning: true,
        }
    }
}

impl GuidanceConfig {
    /// Plain DDIM: no guidance, no CFG extrapolation, no interventions.
    pub fn disabled() -> Self {
        GuidanceConfig {
            w: 0.0,
            lambda: 0.0,
            cfg_scale: 1.0,
            update_period: usize::MAX,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if self.steps == 0 {
            return fail("steps must be at least 1".into());
        }
        if !(self.w >= 0.0 && self.w.is_finite()) {
            return fail(format!("w must be finite and non-negative, got {}", self.w));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda must be finite and non-negative, got {}", self.lambda));
        }
        if !self.cfg_scale.is_finite() {
            return fail("cfg_scale must be finite".into());
        }
        if self.update_period == 0 {
            return fail("update_period must be at least 1".into());
        }
        for (name, v) in [
            ("erase_visibility_threshold", self.erase_visibility_threshold),
            ("empty_alpha_threshold", self.empty_alpha_threshold),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return fail(format!("{name} must lie in (0, 1), got {v}"));
            }
        }
        Ok(())
    }

    fn is_guided(&self) -> bool {
        self.w > 0.0 || self.lambda > 0.0
    }
}

/// Something the sampler did to the layer order or contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    /// Slot `i` now holds former slot `permutation[i]`.
    Permute { permutation: Vec<usize> },
    Erase { layers: Vec<usize> },
    Sort { permutation: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub t: usize,
    pub t_prev: usize,
    pub composite_loss: f64,
    /// Only evaluated when its weight is positive.
    pub psm_loss: Option<f64>,
    pub events: Vec<Event>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleTrace {
    pub steps: Vec<StepRecord>,
    /// MSE between the composite of the final stack and the image.
    pub final_composite_mse: f64,
}

/// Image in `3 x H x W` layout plus its conditioning.
pub struct Target {
    pub pixels: Array3<f64>,
    pub cond: Conditioning,
}

impl Target {
    pub fn new(model: &dyn Denoiser, image: &CompositeImage, use_conditioning: bool) -> Result<Self> {
        let cond = if use_conditioning {
            model.condition(image)?
        } else {
            Conditioning::Null
        };
        Ok(Target {
            pixels: channel_major(&image.pixels),
            cond,
        })
    }
}

fn channel_major(pixels: &Array3<f64>) -> Array3<f64> {
    pixels.view().permuted_axes([2, 0, 1]).as_standard_layout().to_owned()
}

/// MSE between `target` (`3 x H x W`) and the composite of the given planes
/// using soft masks of the alphas, optionally with gradients with respect to
/// colours and alphas.
fn planes_loss(
    target: &Array3<f64>,
    colors: &Array4<f64>,
    alphas: &Array3<f64>,
    want_grad: bool,
) -> Result<(f64, Option<(Array4<f64>, Array3<f64>)>)> {
    let (_, _, h, w) = colors.dim();
    if target.dim() != (3, h, w) {
        return Err(Error::Structural(format!(
            "image is {:?}, layers are {h}x{w}",
            (target.dim().1, target.dim().2)
        )));
    }
    let masks = alphas.mapv(|a| soft_mask_value(a, DEFAULT_SHARPNESS));
    let color_views: Vec<ArrayView3<f64>> = colors.outer_iter().collect();
    let mask_views: Vec<ArrayView2<f64>> = masks.outer_iter().collect();
    let tape = composite_planes(&color_views, &mask_views, DEFAULT_DELTA);
    let n = tape.output.len() as f64;
    let diff = &tape.output - target;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    if !want_grad {
        return Ok((loss, None));
    }
    let g_out = diff.mapv(|d| 2.0 * d / n);
    let (g_colors, g_masks) = composite_planes_backward(&tape, &color_views, &mask_views, &g_out);
    let g_colors = ndarray::stack(Axis(0), &g_colors.iter().map(|a| a.view()).collect::<Vec<_>>())
        .expect("equal shapes");
    let mut g_alphas = ndarray::stack(Axis(0), &g_masks.iter().map(|a| a.view()).collect::<Vec<_>>())
        .expect("equal shapes");
    Zip::from(&mut g_alphas)
        .and(alphas)
        .for_each(|g, &a| *g *= soft_mask_derivative(a, DEFAULT_SHARPNESS));
    Ok((loss, Some((g_colors, g_alphas))))
}

fn stack_planes(stack: &LayerStack) -> (Array4<f64>, Array3<f64>) {
    let (h, w) = stack.dims();
    let n = stack.len();
    let mut colors = Array4::<f64>::zeros((n, 3, h, w));
    let mut alphas = Array3::<f64>::zeros((n, h, w));
    for (i, l) in stack.layers.iter().enumerate() {
        colors.index_axis_mut(Axis(0), i).assign(&l.color.view().permuted_axes([2, 0, 1]));
        alphas.index_axis_mut(Axis(0), i).assign(&l.alpha);
    }
    (colors, alphas)
}

/// Mean squared error between `image` and the soft-masked composite of
/// `estimate`.
pub fn compositional_loss(image: &CompositeImage, estimate: &LayerStack) -> Result<f64> {
    let (colors, alphas) = stack_planes(estimate);
    Ok(planes_loss(&channel_major(&image.pixels), &colors, &alphas, false)?.0)
}

/// Compositional loss of a clean latent estimate and its gradient with
/// respect to that latent.
pub fn latent_compositional_loss(target: &Array3<f64>, z0: &Array4<f64>) -> Result<(f64, Array4<f64>)> {
    let (colors, alphas) = clamped_planes(z0);
    let (loss, grads) = planes_loss(target, &colors, &alphas, true)?;
    let (g_colors, g_alphas) = grads.expect("gradient requested");
    let mut grad = Array4::<f64>::zeros(z0.dim());
    grad.slice_mut(s![.., 0..3, .., ..]).assign(&(g_colors * 0.5));
    grad.index_axis_mut(Axis(1), 3).assign(&(g_alphas * 0.5));
    Zip::from(&mut grad).and(z0).for_each(|g, &z| {
        if !(-1.0..=1.0).contains(&z) {
            *g = 0.0;
        }
    });
    Ok((loss, grad))
}

/// Decoded planes clamped to the valid range, as the final decode does.
fn clamped_planes(z0: &Array4<f64>) -> (Array4<f64>, Array3<f64>) {
    let (colors, alphas) = decode_planes(z0);
    (colors.mapv(|v| v.clamp(0.0, 1.0)), alphas.mapv(|v| v.clamp(0.0, 1.0)))
}

/// Mean squared gap between the uncoupled base prediction and the coupled,
/// conditioned prediction at the clean estimate.
pub fn psm_loss(model: &dyn Denoiser, z0_hat: &Array4<f64>, t: usize, cond: &Conditioning) -> Result<f64> {
    let base = model.eps(z0_hat, t, &Conditioning::Null, false)?;
    let adapted = model.eps(z0_hat, t, cond, true)?;
    Ok((&base - &adapted).mapv(|d| d * d).mean().unwrap_or(0.0))
}

/// [`psm_loss`] and its gradient with respect to `z0_hat`, with the base
/// prediction held constant.
fn psm_loss_grad(
    model: &dyn Denoiser,
    z0_hat: &Array4<f64>,
    t: usize,
    cond: &Conditioning,
) -> Result<(f64, Array4<f64>)> {
    let base = model.eps(z0_hat, t, &Conditioning::Null, false)?;
    let adapted = model.eps(z0_hat, t, cond, true)?;
    let diff = &base - &adapted;
    let n = diff.len() as f64;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    let upstream = diff.mapv(|d| -2.0 * d / n);
    let grad = model.eps_vjp(z0_hat, t, cond, true, &upstream)?;
    Ok((loss, grad))
}

/// Classifier-free guided noise prediction.
fn cfg_eps(model: &dyn Denoiser, z: &Array4<f64>, t: usize, target: &Target, scale: f64) -> Result<Array4<f64>> {
    let cond = model.eps(z, t, &target.cond, true)?;
    if scale == 1.0 || target.cond.is_null() {
        return Ok(cond);
    }
    let uncond = model.eps(z, t, &Conditioning::Null, true)?;
    Ok(Zip::from(&uncond).and(&cond).map_collect(|&u, &c| u + scale * (c - u)))
}

/// `grad^T` times the Jacobian of the guided noise prediction.
fn cfg_vjp(
    model: &dyn Denoiser,
    z: &Array4<f64>,
    t: usize,
    target: &Target,
    scale: f64,
    grad: &Array4<f64>,
) -> Result<Array4<f64>> {
    let cond = model.eps_vjp(z, t, &target.cond, true, grad)?;
    if scale == 1.0 || target.cond.is_null() {
        return Ok(cond);
    }
    let uncond = model.eps_vjp(z, t, &Conditioning::Null, true, grad)?;
    Ok(Zip::from(&uncond).and(&cond).map_collect(|&u, &c| (1.0 - scale) * u + scale * c))
}

/// Guidance objective at `z_t`.
pub struct GuidanceGradient {
    pub eps: Array4<f64>,
    pub z0_hat: Array4<f64>,
    pub composite_loss: f64,
    pub psm_loss: Option<f64>,
    /// Gradient of the total guidance loss with respect to `z_t`.
    pub grad: Array4<f64>,
}

/// Evaluates the guidance loss at `z_t` and its gradient. With
/// `exact = false` the clean estimate's Jacobian is taken as
/// `1 / sqrt(abar_t)` times the identity.
pub fn guidance_gradient(
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    z_t: &Array4<f64>,
    t: usize,
    target: &Target,
    config: &GuidanceConfig,
    exact: bool,
) -> Result<GuidanceGradient> {
    let eps = cfg_eps(model, z_t, t, target, config.cfg_scale)?;
    check_finite(&eps, t, "noise prediction")?;
    let z0_hat = ddim_estimate_z0(z_t, &eps, t, schedule)?;
    let (composite_loss, mut g) = latent_compositional_loss(&target.pixels, &z0_hat)?;
    let psm = if config.lambda > 0.0 {
        let (l, gp) = psm_loss_grad(model, &z0_hat, t, &target.cond)?;
        g.scaled_add(config.lambda, &gp);
        Some(l)
    } else {
        None
    };
    let ab = schedule.alpha_bar(t)?;
    let mut grad = g.clone();
    if exact {
        let jt = cfg_vjp(model, z_t, t, target, config.cfg_scale, &g)?;
        grad.scaled_add(-(1.0 - ab).sqrt(), &jt);
    }
    grad.mapv_inplace(|v| v / ab.sqrt());
    check_finite(&grad, t, "guidance gradient")?;
    Ok(GuidanceGradient {
        eps,
        z0_hat,
        composite_loss,
        psm_loss: psm,
        grad,
    })
}

/// Result of one reverse step.
pub struct GuidedStep {
    pub z_prev: Array4<f64>,
    pub z0_hat: Array4<f64>,
    /// Noise used to re-noise the clean estimate.
    pub noise: Array4<f64>,
    pub record: StepRecord,
}

fn resolve_exact(model: &dyn Denoiser, config: &GuidanceConfig) -> bool {
    config.exact_gradient.unwrap_or_else(|| model.prefers_exact_gradient())
}

/// One guided reverse step from `t` to `t_prev`.
pub fn guided_step(
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    z_t: &Array4<f64>,
    t: usize,
    t_prev: usize,
    target: &Target,
    config: &GuidanceConfig,
) -> Result<GuidedStep> {
    if t <= t_prev {
        return Err(Error::Validation(format!("step must go backwards, got {t} -> {t_prev}")));
    }
    let exact = resolve_exact(model, config);
    let (z0_hat, noise, composite_loss, psm) = if config.is_guided() {
        let gg = guidance_gradient(model, schedule, z_t, t, target, config, exact)?;
        let mut z_tilde = z_t.clone();
        z_tilde.scaled_add(-config.w, &gg.grad);
        let noise = if config.w > 0.0 {
            cfg_eps(model, &z_tilde, t, target, config.cfg_scale)?
        } else {
            gg.eps
        };
        (gg.z0_hat, noise, gg.composite_loss, gg.psm_loss)
    } else {
        let eps = cfg_eps(model, z_t, t, target, config.cfg_scale)?;
        check_finite(&eps, t, "noise prediction")?;
        let z0_hat = ddim_estimate_z0(z_t, &eps, t, schedule)?;
        let (colors, alphas) = clamped_planes(&z0_hat);
        let (l, _) = planes_loss(&target.pixels, &colors, &alphas, false)?;
        (z0_hat, eps, l, None)
    };
    let ab = schedule.alpha_bar(t_prev)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let z_prev = Zip::from(&z0_hat).and(&noise).map_collect(|&z, &e| a * z + b * e);
    if !z_prev.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical {
            timestep: t,
            message: format!("guided update diverged with w = {}; try a smaller w", config.w),
        });
    }
    Ok(GuidedStep {
        z_prev,
        z0_hat,
        noise,
        record: StepRecord {
            step: 0,
            t,
            t_prev,
            composite_loss,
            psm_loss: psm,
            events: Vec::new(),
        },
    })
}

fn binarized_empty(layer: &LayerImage, threshold: f64) -> bool {
    let n = layer.alpha.len().max(1) as f64;
    (layer.alpha.iter().filter(|&&a| a >= 0.5).count() as f64 / n) < threshold
}

struct OrderSearch<'a> {
    colors: Vec<Vec<f64>>,
    masks: Vec<Vec<f64>>,
    target: &'a [f64],
    premult: Vec<Vec<f64>>,
    cover: Vec<Vec<f64>>,
    perm: Vec<usize>,
    used: Vec<bool>,
    best: f64,
    best_perm: Vec<usize>,
}

impl OrderSearch<'_> {
    fn visit(&mut self, depth: usize) {
        let n = self.colors.len();
        if depth == n {
            let hw = self.cover[n].len();
            let (p, c) = (&self.premult[n], &self.cover[n]);
            let mut loss = 0.0;
            for k in 0..3 {
                for j in 0..hw {
                    let d = p[k * hw + j] / (c[j] + DEFAULT_DELTA) - self.target[k * hw + j];
                    loss += d * d;
                }
            }
            loss /= (3 * hw) as f64;
            if self.best.is_infinite() || loss < self.best - TIE_TOLERANCE * (1.0 + self.best) {
                self.best = loss;
                self.best_perm.clone_from(&self.perm);
            }
            return;
        }
        for i in 0..n {
            if self.used[i] {
                continue;
            }
            self.used[i] = true;
            self.perm[depth] = i;
            {
                let (lo, hi) = self.premult.split_at_mut(depth + 1);
                let (prev, next) = (&lo[depth], &mut hi[0]);
                let (clo, chi) = self.cover.split_at_mut(depth + 1);
                let (cprev, cnext) = (&clo[depth], &mut chi[0]);
                let (x, m) = (&self.colors[i], &self.masks[i]);
                let hw = m.len();
                for j in 0..hw {
                    cnext[j] = m[j] + (1.0 - m[j]) * cprev[j];
                }
                for k in 0..3 {
                    for j in 0..hw {
                        let q = k * hw + j;
                        next[q] = m[j] * x[q] + (1.0 - m[j]) * prev[q];
                    }
                }
            }
            self.visit(depth + 1);
            self.used[i] = false;
        }
    }
}

/// Exhaustively searches layer orderings for the lowest compositional loss.
/// Slot `i` of the result holds input layer `perm[i]`; ties go to the
/// lexicographically smallest permutation.
pub fn permute_update(estimate: &LayerStack, image: &CompositeImage) -> Result<Vec<usize>> {
    let n = estimate.len();
    if n > MAX_PERMUTE_LAYERS {
        return Err(Error::Capability(format!(
            "exhaustive ordering search supports at most {MAX_PERMUTE_LAYERS} layers, got {n}; \
             use a sampled search for larger stacks"
        )));
    }
    let (h, w) = estimate.dims();
    if image.dims() != (h, w) {
        return Err(Error::Structural(format!(
            "image is {:?}, layers are {h}x{w}",
            image.dims()
        )));
    }
    let hw = h * w;
    let (colors, alphas) = stack_planes(estimate);
    let target = channel_major(&image.pixels);
    let mut search = OrderSearch {
        colors: colors.outer_iter().map(|c| c.iter().copied().collect()).collect(),
        masks: alphas
            .outer_iter()
            .map(|a| a.iter().map(|&v| soft_mask_value(v, DEFAULT_SHARPNESS)).collect())
            .collect(),
        target: target.as_slice().expect("standard layout"),
        premult: vec![vec![0.0; 3 * hw]; n + 1],
        cover: vec![vec![0.0; hw]; n + 1],
        perm: vec![0; n],
        used: vec![false; n],
        best: f64::INFINITY,
        best_perm: (0..n).collect(),
    };
    search.visit(0);
    Ok(search.best_perm)
}

/// Replaces every non-background layer whose visible share is below
/// `threshold` with the empty layer. Returns the new stack and the erased
/// indices. Layers already empty under `empty_threshold` are left alone.
pub fn erase_update(stack: &LayerStack, threshold: f64, empty_threshold: f64) -> Result<(LayerStack, Vec<usize>)> {
    let bin = stack.binarized();
    let panoptic = crate::compositor::panoptic_project(&bin);
    let (h, w) = stack.dims();
    let mut out = stack.clone();
    let mut erased = Vec::new();
    for i in 1..stack.len() {
        if binarized_empty(&bin.layers[i], empty_threshold) {
            continue;
        }
        let vis = crate::compositor::visibility_from_labels(&panoptic, &bin.layers[i].alpha, i);
        if vis.fraction < threshold {
            out.layers[i] = LayerImage::empty(h, w);
            erased.push(i);
        }
    }
    Ok((out, erased))
}

/// Stable permutation that keeps the background first and moves layers
/// with binarized coverage below `empty_threshold` to the end.
pub fn sort_update(stack: &LayerStack, empty_threshold: f64) -> Vec<usize> {
    let (mut full, mut empty): (Vec<usize>, Vec<usize>) =
        (1..stack.len()).partition(|&i| !binarized_empty(&stack.layers[i], empty_threshold));
    let mut perm = vec![0];
    perm.append(&mut full);
    perm.append(&mut empty);
    perm
}

fn is_identity(perm: &[usize]) -> bool {
    perm.iter().enumerate().all(|(i, &p)| i == p)
}

/// Applies permute, erase and sort to the state after a step.
fn intervene(
    step: &mut GuidedStep,
    image: &CompositeImage,
    schedule: &NoiseSchedule,
    config: &GuidanceConfig,
) -> Result<()> {
    let perm = permute_update(&decode_stack(&step.z0_hat)?, image)?;
    if !is_identity(&perm) {
        step.z0_hat = permute_slots(&step.z0_hat, &perm);
        step.z_prev = permute_slots(&step.z_prev, &perm);
        step.noise = permute_slots(&step.noise, &perm);
        step.record.events.push(Event::Permute { permutation: perm });
    }
    let (stack, erased) = erase_update(
        &decode_stack(&step.z0_hat)?,
        config.erase_visibility_threshold,
        config.empty_alpha_threshold,
    )?;
    if !erased.is_empty() {
        let (_, _, h, w) = step.z0_hat.dim();
        let empty = empty_latent(h, w);
        let ab = schedule.alpha_bar(step.record.t_prev)?;
        for &i in &erased {
            step.z0_hat.index_axis_mut(Axis(0), i).assign(&empty);
            let renoised = &empty * ab.sqrt() + &step.noise.index_axis(Axis(0), i) * (1.0 - ab).sqrt();
            step.z_prev.index_axis_mut(Axis(0), i).assign(&renoised);
        }
        step.record.events.push(Event::Erase { layers: erased });
    }
    let perm = sort_update(&stack, config.empty_alpha_threshold);
    if !is_identity(&perm) {
        step.z0_hat = permute_slots(&step.z0_hat, &perm);
        step.z_prev = permute_slots(&step.z_prev, &perm);
        step.noise = permute_slots(&step.noise, &perm);
        step.record.events.push(Event::Sort { permutation: perm });
    }
    Ok(())
}

/// Standard normal latent of shape `N x 4 x H x W` drawn from `seed`.
pub fn initial_noise(n_layers: usize, h: usize, w: usize, seed: u64) -> Array4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_simple_fn((n_layers, 4, h, w), || StandardNormal.sample(&mut rng))
}

/// Runs the full reverse loop from `z_init` and returns the final clean
/// latent with one record per step.
pub fn sample_latent(
    model: &dyn Denoiser,
    image: &CompositeImage,
    z_init: Array4<f64>,
    config: &GuidanceConfig,
) -> Result<(Array4<f64>, Vec<StepRecord>)> {
    config.validate()?;
    let schedule = model.schedule().with_inference_steps(config.steps)?;
    let target = Target::new(model, image, config.use_conditioning)?;
    let mut z = z_init;
    let mut records = Vec::with_capacity(config.steps);
    for (k, (t, t_prev)) in schedule.reverse_pairs().into_iter().enumerate() {
        let mut step = guided_step(model, &schedule, &z, t, t_prev, &target, config)?;
        step.record.step = k;
        if (k + 1) % config.update_period == 0 {
            intervene(&mut step, image, &schedule, config)?;
        }
        records.push(step.record);
        z = step.z_prev;
    }
    Ok((z, records))
}

/// Finishes a sampled latent: clamps, binarizes alphas and replaces empty
/// layers with the canonical empty layer.
pub fn finalize(z0: &Array4<f64>, empty_threshold: f64) -> Result<LayerStack> {
    let stack = decode_stack(z0)?.binarized();
    let (h, w) = stack.dims();
    let layers = stack
        .layers
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            if i > 0 && binarized_empty(&l, empty_threshold) {
                LayerImage::empty(h, w)
            } else {
                l
            }
        })
        .collect();
    LayerStack::new(layers)
}

/// Samples an `n_layers` decomposition of `image`.
pub fn sample(
    model: &dyn Denoiser,
    image: &CompositeImage,
    n_layers: usize,
    config: &GuidanceConfig,
    seed: u64,
) -> Result<(LayerStack, SampleTrace)> {
    let (h, w) = image.dims();
    let z_init = initial_noise(n_layers, h, w, seed);
    let (z0, steps) = sample_latent(model, image, z_init, config)?;
    let stack = finalize(&z0, config.empty_alpha_threshold)?;
    let mse = crate::compositor::composite(&stack, DEFAULT_DELTA)?.mse(image)?;
    Ok((
        stack,
        SampleTrace {
            steps,
            final_composite_mse: mse,
        },
    ))
}
