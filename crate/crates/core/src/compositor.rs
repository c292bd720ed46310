//! Layer compositing algebra.
//!
//! A [`LayerStack`] is an ordered list of RGBA layers, index 0 being the
//! background and later layers sitting in front of earlier ones. Layers are
//! combined back to front with a coverage-normalised "over" recursion:
//!
//! ```text
//! P_i = m_i x_i + (1 - m_i) P_{i-1}        P_0 = 0
//! M_i = m_i     + (1 - m_i) M_{i-1}        M_0 = 0
//! out = P_N / (M_N + delta)
//! ```
//!
//! `P_i` is the coverage-weighted colour `M_i * xbar_i` of the running
//! composite, so `xbar_i = P_i / M_i` is the back-to-front composite of the
//! first `i` layers and `delta` only guards the final normalisation where no
//! layer covers a pixel.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis, Zip};

use crate::error::{Error, Result};

/// Guard added to the coverage before normalising the composite.
pub const DEFAULT_DELTA: f64 = 1e-6;
/// A layer covering less than this fraction of the frame counts as empty.
pub const EMPTY_COVERAGE: f64 = 0.001;
/// Threshold used to binarize continuous alphas.
pub const ALPHA_THRESHOLD: f64 = 0.5;
/// Default slope of the alpha-to-mask sigmoid.
pub const DEFAULT_SHARPNESS: f64 = 50.0;
/// Gray level of the canvas isolated layers are drawn on.
pub const CANVAS_GRAY: f64 = 0.5;

/// One RGBA object layer. `color` is `H x W x 3`, `alpha` is `H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerImage {
    pub color: Array3<f64>,
    pub alpha: Array2<f64>,
}

impl LayerImage {
    pub fn new(color: Array3<f64>, alpha: Array2<f64>) -> Result<Self> {
        let (h, w, c) = color.dim();
        if c != 3 {
            return Err(Error::Structural(format!("color must have 3 channels, got {c}")));
        }
        if alpha.dim() != (h, w) {
            return Err(Error::Structural(format!(
                "alpha is {:?} but color is {h}x{w}",
                alpha.dim()
            )));
        }
        let in_range = |v: &f64| v.is_finite() && (0.0..=1.0).contains(v);
        if !color.iter().all(in_range) || !alpha.iter().all(in_range) {
            return Err(Error::Validation(
                "layer values must be finite and in [0, 1]".into(),
            ));
        }
        Ok(Self { color, alpha })
    }

    /// The canonical empty layer: gray colour, zero alpha.
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            color: Array3::from_elem((height, width, 3), CANVAS_GRAY),
            alpha: Array2::zeros((height, width)),
        }
    }

    /// A fully opaque layer with the given colour.
    pub fn opaque(color: Array3<f64>) -> Result<Self> {
        let (h, w, _) = color.dim();
        Self::new(color, Array2::ones((h, w)))
    }

    pub fn height(&self) -> usize {
        self.alpha.nrows()
    }

    pub fn width(&self) -> usize {
        self.alpha.ncols()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.alpha.dim()
    }

    /// Fraction of pixels with non-zero alpha.
    pub fn coverage(&self) -> f64 {
        let n = self.alpha.len().max(1);
        self.alpha.iter().filter(|&&a| a > 0.0).count() as f64 / n as f64
    }

    pub fn is_empty(&self) -> bool {
        self.coverage() < EMPTY_COVERAGE
    }

    /// Copy with alpha thresholded to {0, 1}.
    pub fn binarized(&self) -> Self {
        Self {
            color: self.color.clone(),
            alpha: self.alpha.mapv(binarize),
        }
    }

    /// RGB over the gray canvas using the binarized alpha.
    pub fn canvased(&self) -> Array3<f64> {
        let mut out = self.color.clone();
        for ((y, x, _), v) in out.indexed_iter_mut() {
            if binarize(self.alpha[[y, x]]) == 0.0 {
                *v = CANVAS_GRAY;
            }
        }
        out
    }
}

pub fn binarize(a: f64) -> f64 {
    if a >= ALPHA_THRESHOLD {
        1.0
    } else {
        0.0
    }
}

/// Ordered layers, index 0 = background.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStack {
    pub layers: Vec<LayerImage>,
}

impl LayerStack {
    pub fn new(layers: Vec<LayerImage>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::Structural("a layer stack needs at least one layer".into()))?;
        let dims = first.dims();
        if let Some((i, l)) = layers.iter().enumerate().find(|(_, l)| l.dims() != dims) {
            return Err(Error::Structural(format!(
                "layer {i} is {:?}, expected {dims:?}",
                l.dims()
            )));
        }
        Ok(Self { layers })
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.layers[0].dims()
    }

    /// Background layer exists and is opaque everywhere.
    pub fn has_opaque_background(&self) -> bool {
        self.layers[0].alpha.iter().all(|&a| a == 1.0)
    }

    /// Appends empty layers until the stack holds `n` layers.
    pub fn padded(mut self, n: usize) -> Self {
        let (h, w) = self.dims();
        while self.layers.len() < n {
            self.layers.push(LayerImage::empty(h, w));
        }
        self
    }

    /// Stack with every alpha thresholded to {0, 1}.
    pub fn binarized(&self) -> Self {
        Self {
            layers: self.layers.iter().map(LayerImage::binarized).collect(),
        }
    }

    /// Reorders layers so that output slot `i` holds input layer `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            layers: perm.iter().map(|&i| self.layers[i].clone()).collect(),
        }
    }
}

/// `H x W x 3` image in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct CompositeImage {
    pub pixels: Array3<f64>,
}

impl CompositeImage {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        if pixels.dim().2 != 3 {
            return Err(Error::Structural("composite must have 3 channels".into()));
        }
        if !pixels.iter().all(|v| v.is_finite()) {
            return Err(Error::Validation("composite contains non-finite values".into()));
        }
        Ok(Self { pixels })
    }

    pub fn dims(&self) -> (usize, usize) {
        let (h, w, _) = self.pixels.dim();
        (h, w)
    }

    /// Mean squared error against another image of the same size.
    pub fn mse(&self, other: &CompositeImage) -> Result<f64> {
        if self.pixels.dim() != other.pixels.dim() {
            return Err(Error::Structural("image dimensions differ".into()));
        }
        let n = self.pixels.len() as f64;
        Ok(Zip::from(&self.pixels)
            .and(&other.pixels)
            .fold(0.0, |acc, a, b| acc + (a - b) * (a - b))
            / n)
    }
}

/// Per-pixel darkening in [0, 1]; zero means no shadow.
#[derive(Clone, Debug, PartialEq)]
pub struct ShadowMap {
    pub darkening: Array2<f64>,
}

/// Per-pixel label of the frontmost covering layer. Label 0 is the
/// background; a foreground layer at stack index `i` gets label `i + 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PanopticMap {
    pub labels: Array2<u32>,
}

/// Composites `stack` back to front and clamps the result to [0, 1].
pub fn composite(stack: &LayerStack, delta: f64) -> Result<CompositeImage> {
    if !(delta > 0.0) {
        return Err(Error::Validation(format!("delta must be positive, got {delta}")));
    }
    LayerStack::new(stack.layers.clone())?;
    for l in &stack.layers {
        if !l.color.iter().chain(l.alpha.iter()).all(|v| v.is_finite()) {
            return Err(Error::Validation("non-finite layer value".into()));
        }
    }
    let (h, w) = stack.dims();
    let mut premult = Array3::<f64>::zeros((h, w, 3));
    let mut cover = Array2::<f64>::zeros((h, w));
    for layer in &stack.layers {
        Zip::from(premult.lanes_mut(Axis(2)))
            .and(&mut cover)
            .and(layer.color.lanes(Axis(2)))
            .and(&layer.alpha)
            .for_each(|mut p, c, x, &m| {
                for k in 0..3 {
                    p[k] = m * x[k] + (1.0 - m) * p[k];
                }
                *c = m + (1.0 - m) * *c;
            });
    }
    Zip::from(premult.lanes_mut(Axis(2)))
        .and(&cover)
        .for_each(|mut p, &c| {
            for k in 0..3 {
                p[k] = (p[k] / (c + delta)).clamp(0.0, 1.0);
            }
        });
    Ok(CompositeImage { pixels: premult })
}

/// Channel-first compositing used inside differentiable code paths.
///
/// `colors[i]` is `3 x H x W`, `masks[i]` is `H x W`. Returns the unclamped
/// composite (`3 x H x W`) together with the prefix states needed by
/// [`composite_planes_backward`].
pub fn composite_planes(
    colors: &[ArrayView3<f64>],
    masks: &[ArrayView2<f64>],
    delta: f64,
) -> CompositeTape {
    let (_, h, w) = colors[0].dim();
    let n = colors.len();
    let mut premult = Vec::with_capacity(n + 1);
    let mut cover = Vec::with_capacity(n + 1);
    premult.push(Array3::<f64>::zeros((3, h, w)));
    cover.push(Array2::<f64>::zeros((h, w)));
    for i in 0..n {
        let mut p = premult[i].clone();
        let mut c = cover[i].clone();
        for k in 0..3 {
            Zip::from(p.index_axis_mut(Axis(0), k))
                .and(colors[i].index_axis(Axis(0), k))
                .and(masks[i])
                .for_each(|p, &x, &m| *p = m * x + (1.0 - m) * *p);
        }
        Zip::from(&mut c)
            .and(masks[i])
            .for_each(|c, &m| *c = m + (1.0 - m) * *c);
        premult.push(p);
        cover.push(c);
    }
    let mut out = premult[n].clone();
    for k in 0..3 {
        Zip::from(out.index_axis_mut(Axis(0), k))
            .and(&cover[n])
            .for_each(|o, &c| *o /= c + delta);
    }
    CompositeTape {
        premult,
        cover,
        output: out,
        delta,
    }
}

/// Forward states of [`composite_planes`].
pub struct CompositeTape {
    premult: Vec<Array3<f64>>,
    cover: Vec<Array2<f64>>,
    pub output: Array3<f64>,
    delta: f64,
}

/// Gradients of the composite with respect to layer colours and masks.
pub fn composite_planes_backward(
    tape: &CompositeTape,
    colors: &[ArrayView3<f64>],
    masks: &[ArrayView2<f64>],
    grad_output: &Array3<f64>,
) -> (Vec<Array3<f64>>, Vec<Array2<f64>>) {
    let n = colors.len();
    let (_, h, w) = grad_output.dim();
    let mut g_p = Array3::<f64>::zeros((3, h, w));
    let mut g_c = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let denom = tape.cover[n][[y, x]] + tape.delta;
            let mut acc = 0.0;
            for k in 0..3 {
                let g = grad_output[[k, y, x]];
                g_p[[k, y, x]] = g / denom;
                acc += g * tape.premult[n][[k, y, x]];
            }
            g_c[[y, x]] = -acc / (denom * denom);
        }
    }
    let mut g_colors = vec![Array3::<f64>::zeros((3, h, w)); n];
    let mut g_masks = vec![Array2::<f64>::zeros((h, w)); n];
    for i in (0..n).rev() {
        let prev_p = &tape.premult[i];
        let prev_c = &tape.cover[i];
        for y in 0..h {
            for x in 0..w {
                let m = masks[i][[y, x]];
                let mut gm = g_c[[y, x]] * (1.0 - prev_c[[y, x]]);
                for k in 0..3 {
                    let gp = g_p[[k, y, x]];
                    g_colors[i][[k, y, x]] = m * gp;
                    gm += gp * (colors[i][[k, y, x]] - prev_p[[k, y, x]]);
                    g_p[[k, y, x]] = (1.0 - m) * gp;
                }
                g_masks[i][[y, x]] = gm;
                g_c[[y, x]] *= 1.0 - m;
            }
        }
    }
    (g_colors, g_masks)
}

/// Darkens the background colour by `prod_i (1 - s_i)`; alpha is unchanged.
pub fn apply_shadows(background: &LayerImage, shadows: &[ShadowMap]) -> Result<LayerImage> {
    let dims = background.dims();
    let mut factor = Array2::<f64>::ones(dims);
    for (i, s) in shadows.iter().enumerate() {
        if s.darkening.dim() != dims {
            return Err(Error::Structural(format!(
                "shadow {i} is {:?}, background is {dims:?}",
                s.darkening.dim()
            )));
        }
        factor.zip_mut_with(&s.darkening, |f, &d| *f *= 1.0 - d);
    }
    let mut out = background.clone();
    Zip::from(out.color.lanes_mut(Axis(2)))
        .and(&factor)
        .for_each(|mut c, &f| c.mapv_inplace(|v| v * f));
    Ok(out)
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Differentiable foreground mask `sigmoid(sharpness * (alpha - 0.5))`.
pub fn soft_mask(layer: &LayerImage, sharpness: f64) -> Result<Array2<f64>> {
    if !(sharpness > 0.0) {
        return Err(Error::Validation(format!(
            "sharpness must be positive, got {sharpness}"
        )));
    }
    Ok(layer.alpha.mapv(|a| soft_mask_value(a, sharpness)))
}

#[inline]
pub fn soft_mask_value(alpha: f64, sharpness: f64) -> f64 {
    sigmoid(sharpness * (alpha - ALPHA_THRESHOLD))
}

/// Derivative of [`soft_mask_value`] with respect to alpha.
#[inline]
pub fn soft_mask_derivative(alpha: f64, sharpness: f64) -> f64 {
    let s = soft_mask_value(alpha, sharpness);
    sharpness * s * (1.0 - s)
}

/// Labels each pixel with the frontmost layer whose binarized alpha is set.
pub fn panoptic_project(stack: &LayerStack) -> PanopticMap {
    let mut labels = Array2::<u32>::zeros(stack.dims());
    for (i, layer) in stack.layers.iter().enumerate().skip(1) {
        Zip::from(&mut labels)
            .and(&layer.alpha)
            .for_each(|l, &a| {
                if binarize(a) == 1.0 {
                    *l = i as u32 + 1;
                }
            });
    }
    PanopticMap { labels }
}

/// Visible share of one layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Visibility {
    pub fraction: f64,
    /// The layer has no pixels with alpha >= 0.5; `fraction` is 0.
    pub empty: bool,
}

/// Fraction of the pixels of layer `index` (0-based) that survive in the
/// panoptic projection. The background (index 0) is always fully visible.
pub fn visibility_fraction(stack: &LayerStack, index: usize) -> Result<Visibility> {
    if index >= stack.len() {
        return Err(Error::Validation(format!(
            "layer index {index} out of range for {} layers",
            stack.len()
        )));
    }
    if index == 0 {
        return Ok(Visibility {
            fraction: 1.0,
            empty: false,
        });
    }
    let panoptic = panoptic_project(stack);
    Ok(visibility_from_labels(&panoptic, &stack.layers[index].alpha, index))
}

pub(crate) fn visibility_from_labels(
    panoptic: &PanopticMap,
    alpha: &Array2<f64>,
    index: usize,
) -> Visibility {
    let label = index as u32 + 1;
    let mut total = 0usize;
    let mut visible = 0usize;
    Zip::from(&panoptic.labels).and(alpha).for_each(|&l, &a| {
        if binarize(a) == 1.0 {
            total += 1;
            if l == label {
                visible += 1;
            }
        }
    });
    if total == 0 {
        Visibility {
            fraction: 0.0,
            empty: true,
        }
    } else {
        Visibility {
            fraction: visible as f64 / total as f64,
            empty: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array;

    fn flat(h: usize, w: usize, rgb: [f64; 3]) -> Array3<f64> {
        Array::from_shape_fn((h, w, 3), |(_, _, c)| rgb[c])
    }

    fn square(h: usize, w: usize, y0: usize, x0: usize, size: usize, rgb: [f64; 3]) -> LayerImage {
        let alpha = Array2::from_shape_fn((h, w), |(y, x)| {
            if (y0..y0 + size).contains(&y) && (x0..x0 + size).contains(&x) {
                1.0
            } else {
                0.0
            }
        });
        LayerImage::new(flat(h, w, rgb), alpha).unwrap()
    }

    #[test]
    fn empty_layer_is_identity() {
        let bg = LayerImage::opaque(flat(4, 4, [0.2, 0.7, 1.0])).unwrap();
        let stack = LayerStack::new(vec![bg.clone(), LayerImage::empty(4, 4)]).unwrap();
        let out = composite(&stack, DEFAULT_DELTA).unwrap();
        for (a, b) in out.pixels.iter().zip(bg.color.iter()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn all_transparent_stack_is_black() {
        let stack = LayerStack::new(vec![
            LayerImage::new(flat(3, 3, [0.9, 0.9, 0.9]), Array2::zeros((3, 3))).unwrap(),
            LayerImage::empty(3, 3),
        ])
        .unwrap();
        let out = composite(&stack, DEFAULT_DELTA).unwrap();
        assert!(out.pixels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn front_layer_wins() {
        let bg = LayerImage::opaque(flat(6, 6, [0.1, 0.1, 0.1])).unwrap();
        let a = square(6, 6, 0, 0, 4, [1.0, 0.0, 0.0]);
        let b = square(6, 6, 2, 2, 4, [0.0, 1.0, 0.0]);
        let out = composite(&LayerStack::new(vec![bg, a, b]).unwrap(), DEFAULT_DELTA).unwrap();
        assert_abs_diff_eq!(out.pixels[[3, 3, 1]], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(out.pixels[[0, 0, 0]], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(out.pixels[[5, 0, 0]], 0.1, epsilon = 1e-6);
    }

    #[test]
    fn mismatched_layers_are_rejected() {
        let err = LayerStack::new(vec![LayerImage::empty(4, 4), LayerImage::empty(4, 5)]);
        assert!(matches!(err, Err(Error::Structural(_))));
        let bad = LayerImage::new(flat(2, 2, [f64::NAN, 0.0, 0.0]), Array2::ones((2, 2)));
        assert!(matches!(bad, Err(Error::Validation(_))));
    }

    #[test]
    fn shadows_multiply() {
        let bg = LayerImage::opaque(flat(2, 2, [0.8, 0.8, 0.8])).unwrap();
        let none = apply_shadows(&bg, &[ShadowMap { darkening: Array2::zeros((2, 2)) }]).unwrap();
        assert_eq!(none, bg);

        let mut s = Array2::zeros((2, 2));
        s[[0, 0]] = 1.0;
        let out = apply_shadows(&bg, &[ShadowMap { darkening: s }]).unwrap();
        assert_eq!(out.color[[0, 0, 1]], 0.0);
        assert_eq!(out.color[[1, 1, 1]], 0.8);

        let half = ShadowMap { darkening: Array2::from_elem((2, 2), 0.5) };
        let out = apply_shadows(&bg, &[half.clone(), half]).unwrap();
        assert_abs_diff_eq!(out.color[[1, 0, 2]], 0.8 * 0.25, epsilon = 1e-15);

        let wrong = ShadowMap { darkening: Array2::zeros((3, 2)) };
        assert!(matches!(apply_shadows(&bg, &[wrong]), Err(Error::Structural(_))));
    }

    #[test]
    fn soft_mask_values() {
        let mid = LayerImage::new(flat(2, 2, [0.0; 3]), Array2::from_elem((2, 2), 0.5)).unwrap();
        assert!(soft_mask(&mid, 50.0).unwrap().iter().all(|&v| v == 0.5));
        let one = LayerImage::opaque(flat(2, 2, [0.0; 3])).unwrap();
        assert!(soft_mask(&one, 50.0).unwrap().iter().all(|&v| v > 0.999));
        let zero = LayerImage::empty(2, 2);
        assert!(soft_mask(&zero, 50.0).unwrap().iter().all(|&v| v < 0.001));
        assert!(soft_mask(&zero, 0.0).is_err());
    }

    #[test]
    fn soft_mask_derivative_matches_differences() {
        for &a in &[0.1, 0.45, 0.5, 0.52, 0.9] {
            let h = 1e-6;
            let fd = (soft_mask_value(a + h, 50.0) - soft_mask_value(a - h, 50.0)) / (2.0 * h);
            assert_abs_diff_eq!(soft_mask_derivative(a, 50.0), fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn panoptic_and_visibility() {
        let bg = LayerImage::opaque(flat(10, 10, [0.5; 3])).unwrap();
        let only_bg = LayerStack::new(vec![bg.clone(), LayerImage::empty(10, 10)]).unwrap();
        assert!(panoptic_project(&only_bg).labels.iter().all(|&l| l == 0));

        // 10x10 object at rows 0..10, partially covered by a 3-row band.
        let obj = square(10, 10, 0, 0, 10, [1.0, 0.0, 0.0]);
        let band = LayerImage::new(
            flat(10, 10, [0.0, 0.0, 1.0]),
            Array2::from_shape_fn((10, 10), |(y, _)| if y < 3 { 1.0 } else { 0.0 }),
        )
        .unwrap();
        let stack = LayerStack::new(vec![bg.clone(), obj.clone(), band]).unwrap();
        let v = visibility_fraction(&stack, 1).unwrap();
        assert_abs_diff_eq!(v.fraction, 0.7, epsilon = 1e-12);
        assert_eq!(visibility_fraction(&stack, 2).unwrap().fraction, 1.0);
        assert_eq!(visibility_fraction(&stack, 0).unwrap().fraction, 1.0);

        let hidden = square(10, 10, 2, 2, 3, [0.0, 1.0, 0.0]);
        let stack = LayerStack::new(vec![bg.clone(), hidden, obj]).unwrap();
        assert_eq!(visibility_fraction(&stack, 1).unwrap().fraction, 0.0);
        assert!(!panoptic_project(&stack).labels.iter().any(|&l| l == 2));

        let stack = LayerStack::new(vec![bg, LayerImage::empty(10, 10)]).unwrap();
        let v = visibility_fraction(&stack, 1).unwrap();
        assert!(v.empty);
        assert_eq!(v.fraction, 0.0);
    }

    #[test]
    fn composite_gradients_match_differences() {
        let (h, w, n) = (3, 2, 3);
        let mut seed = 7u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (seed >> 11) as f64 / (1u64 << 53) as f64
        };
        let colors: Vec<Array3<f64>> = (0..n).map(|_| Array3::from_shape_simple_fn((3, h, w), &mut next)).collect();
        let masks: Vec<Array2<f64>> = (0..n).map(|_| Array2::from_shape_simple_fn((h, w), &mut next)).collect();
        let weights = Array3::from_shape_simple_fn((3, h, w), &mut next);
        let loss = |colors: &[Array3<f64>], masks: &[Array2<f64>]| {
            let cv: Vec<_> = colors.iter().map(|c| c.view()).collect();
            let mv: Vec<_> = masks.iter().map(|m| m.view()).collect();
            (&composite_planes(&cv, &mv, 1e-3).output * &weights).sum()
        };
        let cv: Vec<_> = colors.iter().map(|c| c.view()).collect();
        let mv: Vec<_> = masks.iter().map(|m| m.view()).collect();
        let tape = composite_planes(&cv, &mv, 1e-3);
        let (gc, gm) = composite_planes_backward(&tape, &cv, &mv, &weights);
        let eps = 1e-6;
        for i in 0..n {
            let mut m2 = masks.clone();
            m2[i][[1, 1]] += eps;
            let up = loss(&colors, &m2);
            m2[i][[1, 1]] -= 2.0 * eps;
            let down = loss(&colors, &m2);
            assert_abs_diff_eq!(gm[i][[1, 1]], (up - down) / (2.0 * eps), epsilon = 1e-6);
            let mut c2 = colors.clone();
            c2[i][[2, 0, 1]] += eps;
            let up = loss(&c2, &masks);
            c2[i][[2, 0, 1]] -= 2.0 * eps;
            let down = loss(&c2, &masks);
            assert_abs_diff_eq!(gc[i][[2, 0, 1]], (up - down) / (2.0 * eps), epsilon = 1e-6);
        }
    }
}
