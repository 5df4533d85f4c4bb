//! NHWC layer kernels with their backward passes.
//!
//! Convolution weights are stored as `[k, k, C_in, C_out]`, so a row of the
//! im2col patch matrix (ordered `ky, kx, c_in`) multiplies the weight viewed as
//! a `(k·k·C_in) × C_out` matrix.

use ndarray::{Array4, ArrayView4};

use super::real::{matmul, Real};

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub out_c: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_c
    }

    fn pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let k = g.kernel;
    let plen = g.patch_len();
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &mut cols[(oy * g.out_w + ox) * plen..][..plen];
            for ky in 0..k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                for kx in 0..k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    let dst = &mut row[(ky * k + kx) * g.in_c..][..g.in_c];
                    if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize {
                        dst.fill(T::zero());
                    } else {
                        let src = (iy as usize * g.in_w + ix as usize) * g.in_c;
                        dst.copy_from_slice(&img[src..src + g.in_c]);
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let k = g.kernel;
    let plen = g.patch_len();
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &cols[(oy * g.out_w + ox) * plen..][..plen];
            for ky in 0..k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.in_h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.in_w as isize {
                        continue;
                    }
                    let src = &row[(ky * k + kx) * g.in_c..][..g.in_c];
                    let dst = (iy as usize * g.in_w + ix as usize) * g.in_c;
                    for (d, s) in img[dst..dst + g.in_c].iter_mut().zip(src) {
                        *d = *d + *s;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward<T: Real>(x: ArrayView4<T>, weight: &[T], bias: &[T], g: &ConvGeom) -> Array4<T> {
    let n = x.dim().0;
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let in_len = g.in_h * g.in_w * g.in_c;
    let out_len = g.pixels() * g.out_c;
    let mut out = Array4::<T>::zeros((n, g.out_h, g.out_w, g.out_c));
    let os = out.as_slice_mut().expect("fresh array");
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.pixels() * g.patch_len()]
    };
    for i in 0..n {
        let img = &xs[i * in_len..(i + 1) * in_len];
        let dst = &mut os[i * out_len..(i + 1) * out_len];
        for px in dst.chunks_exact_mut(g.out_c) {
            px.copy_from_slice(bias);
        }
        let patches: &[T] = if g.is_pointwise() {
            img
        } else {
            im2col(img, g, &mut cols);
            &cols
        };
        matmul(
            g.pixels(),
            g.patch_len(),
            g.out_c,
            patches,
            false,
            weight,
            false,
            T::one(),
            dst,
        );
    }
    out
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// requested.
pub(crate) fn conv_backward<T: Real>(
    x: ArrayView4<T>,
    grad_out: ArrayView4<T>,
    weight: &[T],
    g: &ConvGeom,
    grad_weight: &mut [T],
    grad_bias: &mut [T],
    need_input_grad: bool,
) -> Option<Array4<T>> {
    let n = x.dim().0;
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let dy = grad_out.as_standard_layout();
    let dys = dy.as_slice().expect("standard layout");
    let in_len = g.in_h * g.in_w * g.in_c;
    let out_len = g.pixels() * g.out_c;
    let plen = g.patch_len();

    let mut dx = need_input_grad.then(|| Array4::<T>::zeros((n, g.in_h, g.in_w, g.in_c)));
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.pixels() * plen]
    };
    let mut dcols = if need_input_grad && !g.is_pointwise() {
        vec![T::zero(); g.pixels() * plen]
    } else {
        Vec::new()
    };

    for i in 0..n {
        let img = &xs[i * in_len..(i + 1) * in_len];
        let dyi = &dys[i * out_len..(i + 1) * out_len];
        for px in dyi.chunks_exact(g.out_c) {
            for (b, d) in grad_bias.iter_mut().zip(px) {
                *b = *b + *d;
            }
        }
        let patches: &[T] = if g.is_pointwise() {
            img
        } else {
            im2col(img, g, &mut cols);
            &cols
        };
        // dW (K×Cout) += patchesᵀ (K×P) · dY (P×Cout)
        matmul(
            plen,
            g.pixels(),
            g.out_c,
            patches,
            true,
            dyi,
            false,
            T::one(),
            grad_weight,
        );

        if let Some(dx) = dx.as_mut() {
            let dxs = dx.as_slice_mut().expect("fresh array");
            let dxi = &mut dxs[i * in_len..(i + 1) * in_len];
            // dPatches (P×K) = dY (P×Cout) · Wᵀ (Cout×K)
            if g.is_pointwise() {
                matmul(g.pixels(), g.out_c, plen, dyi, false, weight, true, T::zero(), dxi);
            } else {
                matmul(
                    g.pixels(),
                    g.out_c,
                    plen,
                    dyi,
                    false,
                    weight,
                    true,
                    T::zero(),
                    &mut dcols,
                );
                col2im_add(&dcols, g, dxi);
            }
        }
    }
    dx
}

/// Per-channel statistics used to normalise one batchnorm application.
#[derive(Debug, Clone)]
pub(crate) struct BnStats<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
    /// Unbiased batch variance, for the running estimate.
    pub unbiased_var: Vec<T>,
}

pub(crate) fn bn_batch_stats<T: Real>(x: ArrayView4<T>, eps: f64) -> BnStats<T> {
    let c = x.dim().3;
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let count = (xs.len() / c) as f64;
    let mut sum = vec![0.0f64; c];
    for px in xs.chunks_exact(c) {
        for (s, v) in sum.iter_mut().zip(px) {
            *s += v.to_f64().unwrap_or(f64::NAN);
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
    let mut sq = vec![0.0f64; c];
    for px in xs.chunks_exact(c) {
        for ((s, v), m) in sq.iter_mut().zip(px).zip(&mean) {
            let d = v.to_f64().unwrap_or(f64::NAN) - m;
            *s += d * d;
        }
    }
    let var: Vec<f64> = sq.iter().map(|s| s / count).collect();
    let unbiased: Vec<f64> = sq
        .iter()
        .map(|s| if count > 1.0 { s / (count - 1.0) } else { 0.0 })
        .collect();
    BnStats {
        mean: mean.iter().map(|&m| T::from_f64_lossy(m)).collect(),
        inv_std: var.iter().map(|&v| T::from_f64_lossy(1.0 / (v + eps).sqrt())).collect(),
        unbiased_var: unbiased.into_iter().map(T::from_f64_lossy).collect(),
    }
}

pub(crate) fn bn_apply<T: Real>(x: ArrayView4<T>, stats: &BnStats<T>, gamma: &[T], beta: &[T]) -> Array4<T> {
    let c = x.dim().3;
    let mut out = x.as_standard_layout().into_owned();
    let os = out.as_slice_mut().expect("standard layout");
    let scale: Vec<T> = gamma.iter().zip(&stats.inv_std).map(|(g, s)| *g * *s).collect();
    for px in os.chunks_exact_mut(c) {
        for k in 0..c {
            px[k] = (px[k] - stats.mean[k]) * scale[k] + beta[k];
        }
    }
    out
}

/// Batchnorm backward. With `batch_stats` the statistics are treated as
/// functions of the input (training); otherwise they are constants.
pub(crate) fn bn_backward<T: Real>(
    x: ArrayView4<T>,
    grad_out: ArrayView4<T>,
    stats: &BnStats<T>,
    gamma: &[T],
    batch_stats: bool,
    grad_gamma: &mut [T],
    grad_beta: &mut [T],
) -> Array4<T> {
    let c = x.dim().3;
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let dy = grad_out.as_standard_layout();
    let dys = dy.as_slice().expect("standard layout");
    let count = (xs.len() / c) as f64;

    let mut sum_dy = vec![0.0f64; c];
    let mut sum_dy_xhat = vec![0.0f64; c];
    for (px, dpx) in xs.chunks_exact(c).zip(dys.chunks_exact(c)) {
        for k in 0..c {
            let xhat = ((px[k] - stats.mean[k]) * stats.inv_std[k]).to_f64().unwrap_or(0.0);
            let d = dpx[k].to_f64().unwrap_or(0.0);
            sum_dy[k] += d;
            sum_dy_xhat[k] += d * xhat;
        }
    }
    for k in 0..c {
        grad_beta[k] = grad_beta[k] + T::from_f64_lossy(sum_dy[k]);
        grad_gamma[k] = grad_gamma[k] + T::from_f64_lossy(sum_dy_xhat[k]);
    }

    let mut dx = Array4::<T>::zeros(x.dim());
    let dxs = dx.as_slice_mut().expect("fresh array");
    let scale: Vec<T> = gamma.iter().zip(&stats.inv_std).map(|(g, s)| *g * *s).collect();
    if batch_stats {
        let mean_dy: Vec<T> = sum_dy.iter().map(|s| T::from_f64_lossy(s / count)).collect();
        let mean_dy_xhat: Vec<T> = sum_dy_xhat.iter().map(|s| T::from_f64_lossy(s / count)).collect();
        for ((px, dpx), out) in xs.chunks_exact(c).zip(dys.chunks_exact(c)).zip(dxs.chunks_exact_mut(c)) {
            for k in 0..c {
                let xhat = (px[k] - stats.mean[k]) * stats.inv_std[k];
                out[k] = scale[k] * (dpx[k] - mean_dy[k] - xhat * mean_dy_xhat[k]);
            }
        }
    } else {
        for (dpx, out) in dys.chunks_exact(c).zip(dxs.chunks_exact_mut(c)) {
            for k in 0..c {
                out[k] = scale[k] * dpx[k];
            }
        }
    }
    dx
}

pub(crate) fn relu_inplace<T: Real>(x: &mut Array4<T>) {
    x.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
}

pub(crate) fn relu_backward<T: Real>(output: ArrayView4<T>, grad_out: ArrayView4<T>) -> Array4<T> {
    let mut dx = grad_out.to_owned();
    ndarray::Zip::from(&mut dx).and(&output).for_each(|d, &o| {
        if o <= T::zero() {
            *d = T::zero();
        }
    });
    dx
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct PoolGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeom {
    /// Input window rows/cols clipped to the image, for output position `o`.
    fn window(&self, o: usize, len: usize) -> std::ops::Range<usize> {
        let start = (o * self.stride) as isize - self.pad as isize;
        let end = (start + self.kernel as isize).min(len as isize);
        (start.max(0) as usize)..(end.max(0) as usize)
    }
}

pub(crate) fn maxpool_forward<T: Real>(x: ArrayView4<T>, g: &PoolGeom) -> Array4<T> {
    let (n, h, w, c) = x.dim();
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let mut out = Array4::<T>::from_elem((n, g.out_h, g.out_w, c), T::neg_infinity());
    let os = out.as_slice_mut().expect("fresh array");
    for i in 0..n {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let o = &mut os[((i * g.out_h + oy) * g.out_w + ox) * c..][..c];
                for iy in g.window(oy, h) {
                    for ix in g.window(ox, w) {
                        let v = &xs[((i * h + iy) * w + ix) * c..][..c];
                        for (o, &v) in o.iter_mut().zip(v) {
                            if v > *o {
                                *o = v;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Routes each output gradient to the first input position holding the max.
pub(crate) fn maxpool_backward<T: Real>(
    x: ArrayView4<T>,
    output: ArrayView4<T>,
    grad_out: ArrayView4<T>,
    g: &PoolGeom,
) -> Array4<T> {
    let (n, h, w, c) = x.dim();
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let output = output.as_standard_layout();
    let ys = output.as_slice().expect("standard layout");
    let dy = grad_out.as_standard_layout();
    let dys = dy.as_slice().expect("standard layout");
    let mut dx = Array4::<T>::zeros((n, h, w, c));
    let dxs = dx.as_slice_mut().expect("fresh array");
    let mut done = vec![false; c];
    for i in 0..n {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let base = ((i * g.out_h + oy) * g.out_w + ox) * c;
                let target = &ys[base..][..c];
                let grad = &dys[base..][..c];
                done.fill(false);
                for iy in g.window(oy, h) {
                    for ix in g.window(ox, w) {
                        let at = ((i * h + iy) * w + ix) * c;
                        let v = &xs[at..][..c];
                        let d = &mut dxs[at..][..c];
                        for k in 0..c {
                            if !done[k] && v[k] == target[k] {
                                d[k] = d[k] + grad[k];
                                done[k] = true;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}
