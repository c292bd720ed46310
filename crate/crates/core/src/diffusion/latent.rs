//! Layer stacks as diffusion latents.
//!
//! Each layer becomes four channels: its colour pre-composited on the gray
//! canvas, then its alpha, all mapped affinely from `[0, 1]` to `[-1, 1]`.

use ndarray::{s, Array3, Array4, ArrayView3, Axis};

use crate::compositor::{LayerImage, LayerStack, CANVAS_GRAY};
use crate::error::{Error, Result};

pub const LATENT_CHANNELS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct LatentStack {
    /// `N x 4 x H x W`.
    pub values: Array4<f64>,
    pub timestep: usize,
}

impl LatentStack {
    pub fn new(values: Array4<f64>, timestep: usize) -> Result<Self> {
        if values.dim().1 != LATENT_CHANNELS {
            return Err(Error::Structural(format!(
                "latents need {LATENT_CHANNELS} channels, got {}",
                values.dim().1
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical {
                timestep,
                message: "non-finite latent".into(),
            });
        }
        Ok(LatentStack { values, timestep })
    }

    pub fn n_layers(&self) -> usize {
        self.values.dim().0
    }
}

/// Encodes a stack at timestep 0.
pub fn encode_stack(stack: &LayerStack) -> LatentStack {
    let (h, w) = stack.dims();
    let mut values = Array4::<f64>::zeros((stack.len(), LATENT_CHANNELS, h, w));
    for (mut z, layer) in values.outer_iter_mut().zip(&stack.layers) {
        for y in 0..h {
            for x in 0..w {
                let a = layer.alpha[[y, x]];
                for c in 0..3 {
                    let v = a * layer.color[[y, x, c]] + (1.0 - a) * CANVAS_GRAY;
                    z[[c, y, x]] = 2.0 * v - 1.0;
                }
                z[[3, y, x]] = 2.0 * a - 1.0;
            }
        }
    }
    LatentStack { values, timestep: 0 }
}

/// Channel-first decoded planes of every layer: `(colours, alphas)` with
/// colours `N x 3 x H x W` and alphas `N x H x W`, unclamped.
pub fn decode_planes(z: &Array4<f64>) -> (Array4<f64>, Array3<f64>) {
    let colors = z.slice(s![.., 0..3, .., ..]).mapv(|v| 0.5 * (v + 1.0));
    let alphas = z.index_axis(Axis(1), 3).mapv(|v| 0.5 * (v + 1.0));
    (colors, alphas)
}

fn decode_layer(color: ArrayView3<f64>, alpha: ndarray::ArrayView2<f64>) -> LayerImage {
    let (_, h, w) = color.dim();
    let color = Array3::from_shape_fn((h, w, 3), |(y, x, c)| color[[c, y, x]].clamp(0.0, 1.0));
    let alpha = alpha.mapv(|a| a.clamp(0.0, 1.0));
    LayerImage { color, alpha }
}

/// Decodes latents to a layer stack with values clamped to `[0, 1]`.
pub fn decode_stack(z: &Array4<f64>) -> Result<LayerStack> {
    let (colors, alphas) = decode_planes(z);
    let layers = colors
        .outer_iter()
        .zip(alphas.outer_iter())
        .map(|(c, a)| decode_layer(c, a))
        .collect();
    LayerStack::new(layers)
}

/// The latent of [`LayerImage::empty`].
pub fn empty_latent(h: usize, w: usize) -> Array3<f64> {
    let mut z = Array3::<f64>::zeros((LATENT_CHANNELS, h, w));
    z.index_axis_mut(Axis(0), 3).fill(-1.0);
    z
}

/// Encodes an image as `3 x H x W` in `[-1, 1]`.
pub fn encode_image(pixels: &Array3<f64>) -> Array3<f64> {
    let (h, w, _) = pixels.dim();
    Array3::from_shape_fn((3, h, w), |(c, y, x)| 2.0 * pixels[[y, x, c]] - 1.0)
}

/// Reorders layer slots: output slot `i` takes input slot `perm[i]`.
pub fn permute_slots(z: &Array4<f64>, perm: &[usize]) -> Array4<f64> {
    let views: Vec<_> = perm.iter().map(|&p| z.index_axis(Axis(0), p)).collect();
    ndarray::stack(Axis(0), &views).expect("consistent slot shapes")
}
