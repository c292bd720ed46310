//! Hand-differentiated building blocks on `(batch, channel, row, col)`
//! activations. Each forward returns whatever its backward needs.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array4, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, Zip};

/// Output columns `[x0, x1)` whose source column `x + dx` lies inside `[0, w)`.
fn valid_span(w: usize, dx: isize) -> (usize, usize) {
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx).clamp(0, w as isize) as usize;
    (x0.min(x1), x1)
}

/// Unfolds `x` into a `(c * k * k, b * h * w)` patch matrix, zero padded.
pub fn im2col(x: &Array4<f64>, k: usize) -> Array2<f64> {
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let (b, c, h, w) = x.dim();
    let pad = (k / 2) as isize;
    let hw = h * w;
    let ncols = b * hw;
    let mut cols = vec![0.0; c * k * k * ncols];
    for ci in 0..c {
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let (x0, x1) = valid_span(w, dx);
                if x0 >= x1 {
                    continue;
                }
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for bi in 0..b {
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = ((bi * c + ci) * h + sy as usize) * w;
                        let d = bi * hw + y * w;
                        dst[d + x0..d + x1].copy_from_slice(
                            &xs[src + (x0 as isize + dx) as usize..src + (x1 as isize + dx) as usize],
                        );
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((c * k * k, ncols), cols).unwrap()
}

/// Adjoint of [`im2col`].
pub fn col2im(cols: &Array2<f64>, shape: (usize, usize, usize, usize), k: usize) -> Array4<f64> {
    let (b, c, h, w) = shape;
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().unwrap();
    let pad = (k / 2) as isize;
    let hw = h * w;
    let ncols = b * hw;
    let mut out = vec![0.0; b * c * hw];
    for ci in 0..c {
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let (x0, x1) = valid_span(w, dx);
                if x0 >= x1 {
                    continue;
                }
                let row = (ci * k + ky) * k + kx;
                let src = &cs[row * ncols..(row + 1) * ncols];
                for bi in 0..b {
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let dst = ((bi * c + ci) * h + sy as usize) * w;
                        let s = bi * hw + y * w;
                        let d = &mut out[dst + (x0 as isize + dx) as usize..dst + (x1 as isize + dx) as usize];
                        for (o, v) in d.iter_mut().zip(&src[s + x0..s + x1]) {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
    Array4::from_shape_vec(shape, out).unwrap()
}

/// `(b, c, h, w)` -> `(c, b * h * w)`.
fn to_channel_major(x: &Array4<f64>) -> Array2<f64> {
    let (b, c, h, w) = x.dim();
    let hw = h * w;
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let mut out = vec![0.0; c * b * hw];
    for bi in 0..b {
        for ci in 0..c {
            out[ci * b * hw + bi * hw..][..hw].copy_from_slice(&xs[(bi * c + ci) * hw..][..hw]);
        }
    }
    Array2::from_shape_vec((c, b * hw), out).unwrap()
}

/// Inverse of [`to_channel_major`].
fn from_channel_major(m: &Array2<f64>, b: usize, h: usize, w: usize) -> Array4<f64> {
    let c = m.nrows();
    let hw = h * w;
    let m = m.as_standard_layout();
    let ms = m.as_slice().unwrap();
    let mut out = vec![0.0; b * c * hw];
    for bi in 0..b {
        for ci in 0..c {
            out[(bi * c + ci) * hw..][..hw].copy_from_slice(&ms[ci * b * hw + bi * hw..][..hw]);
        }
    }
    Array4::from_shape_vec((b, c, h, w), out).unwrap()
}

/// Same-padded stride-1 convolution with a `k x k` kernel (`k` odd).
/// Weights are `(c_out, c_in * k * k)`.
pub fn conv_forward(
    x: &Array4<f64>,
    weight: ArrayView2<f64>,
    bias: ArrayView1<f64>,
    k: usize,
) -> (Array4<f64>, Array2<f64>) {
    let (b, _, h, w) = x.dim();
    let cols = if k == 1 { to_channel_major(x) } else { im2col(x, k) };
    let c_out = weight.nrows();
    let mut out = Array2::<f64>::zeros((c_out, cols.ncols()));
    general_mat_mul(1.0, &weight, &cols, 0.0, &mut out);
    for (mut row, &bv) in out.axis_iter_mut(Axis(0)).zip(bias.iter()) {
        row.mapv_inplace(|v| v + bv);
    }
    (from_channel_major(&out, b, h, w), cols)
}

/// Backward of [`conv_forward`]. Weight and bias gradients are accumulated
/// into the given buffers when present; the input gradient is returned when
/// `need_input` is set.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    grad_out: &Array4<f64>,
    cols: &Array2<f64>,
    weight: ArrayView2<f64>,
    k: usize,
    in_channels: usize,
    grad_weight: Option<ArrayViewMut2<f64>>,
    grad_bias: Option<ArrayViewMut1<f64>>,
    need_input: bool,
) -> Option<Array4<f64>> {
    let (b, _, h, w) = grad_out.dim();
    let g = to_channel_major(grad_out);
    if let Some(mut gw) = grad_weight {
        general_mat_mul(1.0, &g, &cols.t(), 1.0, &mut gw);
    }
    if let Some(mut gb) = grad_bias {
        Zip::from(&mut gb)
            .and(g.rows())
            .for_each(|gb, row| *gb += row.sum());
    }
    if !need_input {
        return None;
    }
    let mut dcols = Array2::<f64>::zeros(cols.dim());
    general_mat_mul(1.0, &weight.t(), &g, 0.0, &mut dcols);
    Some(if k == 1 {
        from_channel_major(&dcols, b, h, w)
    } else {
        col2im(&dcols, (b, in_channels, h, w), k)
    })
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn silu(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| v * sigmoid(v))
}

/// Gradient of SiLU given its input.
pub fn silu_backward(input: &Array4<f64>, grad: &Array4<f64>) -> Array4<f64> {
    let mut out = grad.clone();
    Zip::from(&mut out).and(input).for_each(|g, &x| {
        let s = sigmoid(x);
        *g *= s * (1.0 + x * (1.0 - s));
    });
    out
}

/// 2x2 average pooling. Odd trailing rows/cols are dropped.
pub fn avg_pool2(x: &Array4<f64>) -> Array4<f64> {
    let (b, c, h, w) = x.dim();
    let (h2, w2) = (h / 2, w / 2);
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let mut out = Vec::with_capacity(b * c * h2 * w2);
    for plane in xs.chunks_exact(h * w) {
        for y in 0..h2 {
            let r0 = &plane[2 * y * w..(2 * y + 1) * w];
            let r1 = &plane[(2 * y + 1) * w..(2 * y + 2) * w];
            for x in 0..w2 {
                out.push(0.25 * (r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]));
            }
        }
    }
    Array4::from_shape_vec((b, c, h2, w2), out).unwrap()
}

pub fn avg_pool2_backward(grad: &Array4<f64>, h: usize, w: usize) -> Array4<f64> {
    let (b, c, h2, w2) = grad.dim();
    let g = grad.as_standard_layout();
    let gs = g.as_slice().unwrap();
    let mut out = vec![0.0; b * c * h * w];
    for (plane, gp) in out.chunks_exact_mut(h * w).zip(gs.chunks_exact(h2 * w2)) {
        for y in 0..2 * h2 {
            for x in 0..2 * w2 {
                plane[y * w + x] = 0.25 * gp[(y / 2) * w2 + x / 2];
            }
        }
    }
    Array4::from_shape_vec((b, c, h, w), out).unwrap()
}

/// Nearest-neighbour 2x upsampling to exactly `(h, w)`.
pub fn upsample2(x: &Array4<f64>, h: usize, w: usize) -> Array4<f64> {
    let (b, c, hs, ws) = x.dim();
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let mut out = Vec::with_capacity(b * c * h * w);
    for plane in xs.chunks_exact(hs * ws) {
        for y in 0..h {
            let row = &plane[(y / 2).min(hs - 1) * ws..][..ws];
            for x in 0..w {
                out.push(row[(x / 2).min(ws - 1)]);
            }
        }
    }
    Array4::from_shape_vec((b, c, h, w), out).unwrap()
}

pub fn upsample2_backward(grad: &Array4<f64>, hs: usize, ws: usize) -> Array4<f64> {
    let (b, c, h, w) = grad.dim();
    let g = grad.as_standard_layout();
    let gs = g.as_slice().unwrap();
    let mut out = vec![0.0; b * c * hs * ws];
    for (plane, gp) in out.chunks_exact_mut(hs * ws).zip(gs.chunks_exact(h * w)) {
        for y in 0..h {
            let row = &mut plane[(y / 2).min(hs - 1) * ws..][..ws];
            for x in 0..w {
                row[(x / 2).min(ws - 1)] += gp[y * w + x];
            }
        }
    }
    Array4::from_shape_vec((b, c, hs, ws), out).unwrap()
}

pub fn concat_channels(a: &Array4<f64>, b: &Array4<f64>) -> Array4<f64> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("matching spatial dims")
}

pub fn split_channels(x: &Array4<f64>, first: usize) -> (Array4<f64>, Array4<f64>) {
    (
        x.slice(s![.., ..first, .., ..]).to_owned(),
        x.slice(s![.., first.., .., ..]).to_owned(),
    )
}

/// Adds a per-(row, channel) bias `(b, c)` to `x`.
pub fn add_channel_bias(x: &mut Array4<f64>, bias: &Array2<f64>) {
    for (mut xb, bb) in x.outer_iter_mut().zip(bias.outer_iter()) {
        for (mut xc, &v) in xb.outer_iter_mut().zip(bb.iter()) {
            xc.mapv_inplace(|e| e + v);
        }
    }
}

/// Sums `x` over space: `(b, c, h, w)` -> `(b, c)`.
pub fn sum_spatial(x: &Array4<f64>) -> Array2<f64> {
    x.sum_axis(Axis(3)).sum_axis(Axis(2))
}

/// Sinusoidal embedding of a timestep.
pub fn timestep_embedding(t: usize, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let mut out = Array1::<f64>::zeros(dim);
    for k in 0..half {
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        out[k] = (t as f64 * freq).sin();
        out[k + half] = (t as f64 * freq).cos();
    }
    out
}
