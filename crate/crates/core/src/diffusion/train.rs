//! Denoising-objective training for the base model and for the coupling and
//! adapter weights on top of a frozen base.
//!
//! Mini-batches are split into fixed-size chunks that may run on any number
//! of workers; chunk gradients are summed in chunk order, so results depend
//! only on the seed.

use ndarray::{Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::latent::{encode_image, encode_stack};
use super::network::{add_into, CoupledDenoiser, GradSink, ParamGroup};
use super::schedule::add_noise;
use crate::error::{Error, Result};
use crate::scenegen::Dataset;

/// Name recorded in run metadata.
pub const OPTIMIZER: &str = "adam(beta1=0.9, beta2=0.999, eps=1e-8)";

const BASE_CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Probability of replacing the image conditioning by the null embedding.
    pub cond_dropout: f64,
    /// Parameter groups updated by adapter training.
    pub groups: Vec<ParamGroup>,
    /// Held-out loss is recorded every this many steps (0 disables it).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            lr: 1e-4,
            batch_size: 8,
            seed: 0,
            cond_dropout: 0.1,
            groups: vec![ParamGroup::Phi, ParamGroup::Psi],
            eval_every: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub optimizer: String,
    pub losses: Vec<f64>,
    /// `(step, loss)` on the held-out set with fixed noise.
    pub heldout: Vec<(usize, f64)>,
    pub theta_checksum: String,
}

/// One adapter training example: encoded image `3 x H x W` and the encoded
/// ground-truth stack `N x 4 x H x W`.
#[derive(Clone, Debug)]
pub struct StackSample {
    pub image: Array3<f64>,
    pub latent: Array4<f64>,
}

/// Every layer of every stack, encoded (`4 x H x W` each).
pub fn layer_samples(dataset: &Dataset) -> Vec<Array3<f64>> {
    dataset
        .entries
        .iter()
        .flat_map(|e| {
            let z = encode_stack(&e.scene.stack).values;
            z.outer_iter().map(|l| l.to_owned()).collect::<Vec<_>>()
        })
        .collect()
}

pub fn stack_samples(dataset: &Dataset) -> Vec<StackSample> {
    dataset
        .entries
        .iter()
        .map(|e| StackSample {
            image: encode_image(&e.scene.composite.pixels),
            latent: encode_stack(&e.scene.stack).values,
        })
        .collect()
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl Adam {
    fn new(model: &CoupledDenoiser) -> Self {
        Adam {
            m: model.params.zero_grads(),
            v: model.params.zero_grads(),
            step: 0,
        }
    }

    fn update(&mut self, model: &mut CoupledDenoiser, grads: &[Vec<f64>], groups: &[ParamGroup], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.step += 1;
        let c1 = 1.0 - B1.powi(self.step);
        let c2 = 1.0 - B2.powi(self.step);
        for (i, t) in model.params.tensors.iter_mut().enumerate() {
            if !groups.contains(&t.group) {
                continue;
            }
            for (k, p) in t.data.iter_mut().enumerate() {
                let g = grads[i][k];
                let m = &mut self.m[i][k];
                let v = &mut self.v[i][k];
                *m = B1 * *m + (1.0 - B1) * g;
                *v = B2 * *v + (1.0 - B2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
            }
        }
    }
}

fn normal4(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Array4<f64> {
    Array4::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

fn check_config(cfg: &TrainConfig) -> Result<()> {
    if !(cfg.lr >= 0.0) || !cfg.lr.is_finite() {
        return Err(Error::Validation(format!("learning rate must be >= 0, got {}", cfg.lr)));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Validation("batch size must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.cond_dropout) {
        return Err(Error::Validation("cond_dropout must be in [0, 1]".into()));
    }
    Ok(())
}

/// A batch of single layers with their timesteps and noise.
struct LayerBatch {
    z0: Array4<f64>,
    t: Vec<usize>,
    eps: Array4<f64>,
}

fn draw_layer_batch(rng: &mut ChaCha8Rng, layers: &[Array3<f64>], size: usize, t_max: usize) -> LayerBatch {
    let picks: Vec<usize> = (0..size).map(|_| rng.gen_range(0..layers.len())).collect();
    let views: Vec<_> = picks.iter().map(|&i| layers[i].view()).collect();
    let z0 = ndarray::stack(Axis(0), &views).expect("uniform layer shapes");
    let t = (0..size).map(|_| rng.gen_range(1..=t_max)).collect();
    let eps = normal4(rng, z0.dim());
    LayerBatch { z0, t, eps }
}

/// Loss and (optionally) theta gradients of a layer batch, mean over all
/// elements of the batch.
fn base_loss(
    model: &CoupledDenoiser,
    batch: &LayerBatch,
    want_grad: bool,
) -> Result<(f64, Option<Vec<Vec<f64>>>)> {
    let n = batch.z0.dim().0;
    let total = batch.z0.len() as f64;
    let chunks: Vec<(usize, usize)> = (0..n)
        .step_by(BASE_CHUNK)
        .map(|s| (s, BASE_CHUNK.min(n - s)))
        .collect();
    let parts: Vec<Result<(f64, Option<Vec<Vec<f64>>>)>> = chunks
        .par_iter()
        .map(|&(start, len)| {
            let z0 = batch.z0.slice(ndarray::s![start..start + len, .., .., ..]).to_owned();
            let eps = batch.eps.slice(ndarray::s![start..start + len, .., .., ..]).to_owned();
            let ts = &batch.t[start..start + len];
            let mut zt = z0.clone();
            for (i, &t) in ts.iter().enumerate() {
                let one = add_noise(
                    &z0.slice(ndarray::s![i..i + 1, .., .., ..]).to_owned(),
                    t,
                    &eps.slice(ndarray::s![i..i + 1, .., .., ..]).to_owned(),
                    &model.schedule,
                )?;
                zt.slice_mut(ndarray::s![i..i + 1, .., .., ..]).assign(&one);
            }
            let (pred, tape) = model.forward(&zt, ts, None, false);
            let diff = &pred - &eps;
            let loss = diff.iter().map(|d| d * d).sum::<f64>();
            let grads = if want_grad {
                let d_out = diff.mapv(|d| 2.0 * d / total);
                let mut sink = GradSink::new(&model.params, &[ParamGroup::Theta]);
                model.backward(&tape, &d_out, Some(&mut sink), false);
                Some(sink.bufs)
            } else {
                None
            };
            Ok((loss, grads))
        })
        .collect();
    let mut loss = 0.0;
    let mut grads: Option<Vec<Vec<f64>>> = None;
    for p in parts {
        let (l, g) = p?;
        loss += l;
        if let Some(g) = g {
            match grads.as_mut() {
                Some(acc) => add_into(acc, &g),
                None => grads = Some(g),
            }
        }
    }
    Ok((loss / total, grads))
}

/// Mean per-element denoising loss of single layers at fixed, seeded noise.
pub fn heldout_base_loss(model: &CoupledDenoiser, layers: &[Array3<f64>], seed: u64) -> Result<f64> {
    if layers.is_empty() {
        return Err(Error::Validation("held-out set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let views: Vec<_> = layers.iter().map(|l| l.view()).collect();
    let z0 = ndarray::stack(Axis(0), &views).expect("uniform layer shapes");
    let t = (0..layers.len())
        .map(|_| rng.gen_range(1..=model.schedule.train_steps()))
        .collect();
    let eps = normal4(&mut rng, z0.dim());
    Ok(base_loss(model, &LayerBatch { z0, t, eps }, false)?.0)
}

fn diverged(step: usize, loss: f64) -> Error {
    Error::Training {
        step,
        message: format!("loss became {loss}; lower the learning rate"),
    }
}

/// Trains the base weights on single layers, then marks them frozen.
pub fn train_base(
    model: &mut CoupledDenoiser,
    layers: &[Array3<f64>],
    heldout: &[Array3<f64>],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    check_config(cfg)?;
    if layers.is_empty() {
        return Err(Error::Validation("base training needs at least one layer".into()));
    }
    if model.theta_frozen {
        return Err(Error::ContractViolation(
            "base weights are frozen and cannot be retrained".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model);
    let mut log = TrainLog {
        optimizer: OPTIMIZER.into(),
        ..Default::default()
    };
    let eval_seed = cfg.seed ^ 0x5eed;
    for step in 0..cfg.steps {
        if cfg.eval_every > 0 && !heldout.is_empty() && step % cfg.eval_every == 0 {
            log.heldout.push((step, heldout_base_loss(model, heldout, eval_seed)?));
        }
        let batch = draw_layer_batch(&mut rng, layers, cfg.batch_size, model.schedule.train_steps());
        let (loss, grads) = base_loss(model, &batch, true)?;
        if !loss.is_finite() {
            return Err(diverged(step, loss));
        }
        adam.update(model, &grads.unwrap(), &[ParamGroup::Theta], cfg.lr);
        log.losses.push(loss);
        if (step + 1) % 100 == 0 {
            log::info!("base step {}/{}: loss {loss:.5}", step + 1, cfg.steps);
        }
    }
    if cfg.eval_every > 0 && !heldout.is_empty() {
        log.heldout.push((cfg.steps, heldout_base_loss(model, heldout, eval_seed)?));
    }
    model.theta_frozen = true;
    log.theta_checksum = model.params.checksum(ParamGroup::Theta);
    Ok(log)
}

struct StackDraw {
    index: usize,
    t: usize,
    eps: Array4<f64>,
    null: bool,
}

/// Loss of one stack example and the gradients of the requested groups.
fn stack_loss(
    model: &CoupledDenoiser,
    sample: &StackSample,
    draw: &StackDraw,
    groups: &[ParamGroup],
    scale: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let zt = add_noise(&sample.latent, draw.t, &draw.eps, &model.schedule)?;
    let ts = vec![draw.t; zt.dim().0];
    let (features, adapter_tape) = if draw.null {
        (model.null_features(), None)
    } else {
        let (f, tape) = model.adapter_forward(&sample.image);
        (f, Some(tape))
    };
    let (pred, tape) = model.forward(&zt, &ts, Some(&features), true);
    let diff = &pred - &draw.eps;
    let loss = diff.iter().map(|d| d * d).sum::<f64>();
    let d_out = diff.mapv(|d| 2.0 * d * scale);
    let mut sink = GradSink::new(&model.params, groups);
    let (_, d_feat) = model.backward(&tape, &d_out, Some(&mut sink), false);
    if let Some(df) = d_feat {
        match adapter_tape {
            Some(at) => model.adapter_backward(&at, &df, &mut sink),
            None => model.null_backward(&df, &mut sink),
        }
    }
    Ok((loss, sink.bufs))
}

/// Loss of stack examples at fixed, seeded noise, always image-conditioned.
pub fn heldout_stack_loss(model: &CoupledDenoiser, samples: &[StackSample], seed: u64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Validation("held-out set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut count = 0usize;
    for s in samples {
        let t = rng.gen_range(1..=model.schedule.train_steps());
        let eps = normal4(&mut rng, s.latent.dim());
        let zt = add_noise(&s.latent, t, &eps, &model.schedule)?;
        let (f, _) = model.adapter_forward(&s.image);
        let (pred, _) = model.forward(&zt, &vec![t; zt.dim().0], Some(&f), true);
        total += (&pred - &eps).iter().map(|d| d * d).sum::<f64>();
        count += eps.len();
    }
    Ok(total / count as f64)
}

/// Trains coupling, adapter and gates against the denoising objective on
/// whole stacks, leaving the frozen base untouched.
pub fn train_adapter(
    model: &mut CoupledDenoiser,
    samples: &[StackSample],
    heldout: &[StackSample],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    check_config(cfg)?;
    if cfg.groups.contains(&ParamGroup::Theta) {
        return Err(Error::ContractViolation(
            "adapter training may not update the base weights".into(),
        ));
    }
    if !model.theta_frozen {
        return Err(Error::ContractViolation(
            "adapter training requires a frozen base".into(),
        ));
    }
    if samples.is_empty() {
        return Err(Error::Validation("adapter training needs at least one stack".into()));
    }
    for s in samples.iter().chain(heldout) {
        if s.latent.dim().0 != model.arch.n_layers {
            return Err(Error::Structural(format!(
                "stack has {} layers, model expects {}",
                s.latent.dim().0,
                model.arch.n_layers
            )));
        }
    }
    let theta_before = model.params.checksum(ParamGroup::Theta);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model);
    let mut log = TrainLog {
        optimizer: OPTIMIZER.into(),
        ..Default::default()
    };
    let eval_seed = cfg.seed ^ 0x5eed;
    let t_max = model.schedule.train_steps();
    for step in 0..cfg.steps {
        if cfg.eval_every > 0 && !heldout.is_empty() && step % cfg.eval_every == 0 {
            log.heldout.push((step, heldout_stack_loss(model, heldout, eval_seed)?));
        }
        let draws: Vec<StackDraw> = (0..cfg.batch_size)
            .map(|_| {
                let index = rng.gen_range(0..samples.len());
                let t = rng.gen_range(1..=t_max);
                let eps = normal4(&mut rng, samples[index].latent.dim());
                let null = rng.gen::<f64>() < cfg.cond_dropout;
                StackDraw { index, t, eps, null }
            })
            .collect();
        let scale = 1.0 / (cfg.batch_size * samples[0].latent.len()) as f64;
        let frozen: &CoupledDenoiser = model;
        let parts: Vec<Result<(f64, Vec<Vec<f64>>)>> = draws
            .par_iter()
            .map(|d| stack_loss(frozen, &samples[d.index], d, &cfg.groups, scale))
            .collect();
        let mut loss = 0.0;
        let mut grads = model.params.zero_grads();
        for p in parts {
            let (l, g) = p?;
            loss += l;
            add_into(&mut grads, &g);
        }
        loss *= scale;
        if !loss.is_finite() {
            return Err(diverged(step, loss));
        }
        adam.update(model, &grads, &cfg.groups, cfg.lr);
        model.clamp_gates();
        log.losses.push(loss);
        if (step + 1) % 100 == 0 {
            log::info!("adapter step {}/{}: loss {loss:.5}", step + 1, cfg.steps);
        }
    }
    if cfg.eval_every > 0 && !heldout.is_empty() {
        log.heldout.push((cfg.steps, heldout_stack_loss(model, heldout, eval_seed)?));
    }
    log.theta_checksum = model.params.checksum(ParamGroup::Theta);
    if log.theta_checksum != theta_before {
        return Err(Error::ContractViolation("base weights changed during adapter training".into()));
    }
    Ok(log)
}
