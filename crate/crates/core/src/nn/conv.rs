//! Convolution, transposed convolution and max-pooling with explicit
//! backward passes. Forward/backward use im2col + GEMM; batch samples are
//! processed in parallel and reduced in index order so results stay
//! bit-deterministic.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView3, Axis};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::Param;

pub fn conv_out_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

pub fn tconv_out_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input - 1) * stride + k - 2 * pad
}

/// Gather sliding windows of `x` into a `[C·K·K, Ho·Wo]` matrix.
fn im2col(x: &ArrayView3<f64>, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(w, k, stride, pad);
    let mut col = Array2::zeros((c * k * k, ho * wo));
    let xs = x.as_slice().expect("contiguous input");
    let cs = col.as_slice_mut().unwrap();
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let base = row * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = (ci * h + iy as usize) * w;
                    let dst = base + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            cs[dst + ox] = xs[src + ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add a `[C·K·K, Hc·Wc]` column matrix back into a `[C, H, W]`
/// image; exact adjoint of [`im2col`].
fn col2im(
    col: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let hc = conv_out_size(h, k, stride, pad);
    let wc = conv_out_size(w, k, stride, pad);
    let mut out = Array3::zeros((c, h, w));
    let os = out.as_slice_mut().unwrap();
    let cs = col.as_slice().expect("contiguous col");
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let base = row * hc * wc;
                for oy in 0..hc {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = (ci * h + iy as usize) * w;
                    let src = base + oy * wc;
                    for ox in 0..wc {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            os[dst + ix as usize] += cs[src + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// 2-D convolution layer, weight `[Co, Ci, K, K]` plus bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Param,
    pub b: Param,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init_scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = Param::he_uniform(
            format!("{name}.w"),
            &[co, ci, k, k],
            ci * k * k,
            init_scale,
            rng,
        );
        let b = Param::zeros(format!("{name}.b"), &[co]);
        Conv2d { w, b, stride, pad }
    }

    fn k(&self) -> usize {
        self.w.value.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.w.value.shape()[0]
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let (n, ci, h, w) = x.dim();
        assert_eq!(ci, self.w.value.shape()[1], "{}: input channels", self.w.name);
        let k = self.k();
        let co = self.out_channels();
        let ho = conv_out_size(h, k, self.stride, self.pad);
        let wo = conv_out_size(w, k, self.stride, self.pad);
        let w_mat = self
            .w
            .value
            .view()
            .into_shape_with_order((co, ci * k * k))
            .unwrap()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let bias = self.b.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut out = Array4::zeros((n, co, ho, wo));
        out.axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(x.axis_iter(Axis(0)).into_par_iter())
            .for_each(|(mut on, xn)| {
                let col = im2col(&xn, k, self.stride, self.pad);
                let y = w_mat.dot(&col); // [Co, Ho*Wo]
                for c in 0..co {
                    let row = y.row(c);
                    let mut plane = on.slice_mut(s![c, .., ..]);
                    let p = plane.as_slice_mut().unwrap();
                    let b = bias[c];
                    for (pi, yi) in p.iter_mut().zip(row.iter()) {
                        *pi = yi + b;
                    }
                }
            });
        out
    }

    /// Accumulate weight/bias gradients and return the input gradient.
    pub fn backward(&mut self, x: &Array4<f64>, gout: &Array4<f64>) -> Array4<f64> {
        let (n, ci, h, w) = x.dim();
        let k = self.k();
        let co = self.out_channels();
        let (gn, gco, ho, wo) = gout.dim();
        assert_eq!((gn, gco), (n, co), "{}: grad shape", self.w.name);
        let w_mat = self
            .w
            .value
            .view()
            .into_shape_with_order((co, ci * k * k))
            .unwrap()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let parts: Vec<(Array2<f64>, Array1<f64>, Array3<f64>)> = x
            .axis_iter(Axis(0))
            .into_par_iter()
            .zip(gout.axis_iter(Axis(0)).into_par_iter())
            .map(|(xn, gn)| {
                let col = im2col(&xn, k, self.stride, self.pad);
                let g_mat = gn
                    .into_shape_with_order((co, ho * wo))
                    .unwrap()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap();
                let gw = g_mat.dot(&col.t()); // [Co, Ci*K*K]
                let gb = g_mat.sum_axis(Axis(1));
                let gcol = w_mat.t().dot(&g_mat); // [Ci*K*K, Ho*Wo]
                let gx = col2im(&gcol, ci, h, w, k, self.stride, self.pad);
                (gw, gb, gx)
            })
            .collect();
        let mut gx = Array4::zeros((n, ci, h, w));
        let mut gw_acc = self
            .w
            .grad
            .view_mut()
            .into_shape_with_order((co, ci * k * k))
            .unwrap()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let mut gb_acc = self.b.grad.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
        for (i, (gw, gb, gxi)) in parts.into_iter().enumerate() {
            gw_acc += &gw;
            gb_acc += &gb;
            gx.index_axis_mut(Axis(0), i).assign(&gxi);
        }
        gx
    }
}

/// 2-D transposed convolution, weight `[Ci, Co, K, K]` plus bias; the
/// spatial upsampling blocks use k=4, stride=2, pad=1 for an exact ×2.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub w: Param,
    pub b: Param,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    pub fn new(
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init_scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = Param::he_uniform(
            format!("{name}.w"),
            &[ci, co, k, k],
            ci * k * k,
            init_scale,
            rng,
        );
        let b = Param::zeros(format!("{name}.b"), &[co]);
        ConvTranspose2d { w, b, stride, pad }
    }

    fn k(&self) -> usize {
        self.w.value.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.w.value.shape()[1]
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let (n, ci, h, w) = x.dim();
        assert_eq!(ci, self.w.value.shape()[0], "{}: input channels", self.w.name);
        let k = self.k();
        let co = self.out_channels();
        let ho = tconv_out_size(h, k, self.stride, self.pad);
        let wo = tconv_out_size(w, k, self.stride, self.pad);
        let w_mat = self
            .w
            .value
            .view()
            .into_shape_with_order((ci, co * k * k))
            .unwrap()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let bias = self.b.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut out = Array4::zeros((n, co, ho, wo));
        out.axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(x.axis_iter(Axis(0)).into_par_iter())
            .for_each(|(mut on, xn)| {
                let x_mat = xn
                    .into_shape_with_order((ci, h * w))
                    .unwrap()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap();
                let cols = w_mat.t().dot(&x_mat); // [Co*K*K, H*W]
                let y = col2im(&cols, co, ho, wo, k, self.stride, self.pad);
                on.assign(&y);
                for c in 0..co {
                    let b = bias[c];
                    on.slice_mut(s![c, .., ..]).mapv_inplace(|v| v + b);
                }
            });
        out
    }

    pub fn backward(&mut self, x: &Array4<f64>, gout: &Array4<f64>) -> Array4<f64> {
        let (n, ci, h, w) = x.dim();
        let k = self.k();
        let co = self.out_channels();
        let parts: Vec<(Array2<f64>, Array1<f64>, Array2<f64>)> = x
            .axis_iter(Axis(0))
            .into_par_iter()
            .zip(gout.axis_iter(Axis(0)).into_par_iter())
            .map(|(xn, gn)| {
                let gcol = im2col(&gn, k, self.stride, self.pad); // [Co*K*K, H*W]
                let x_mat = xn
                    .into_shape_with_order((ci, h * w))
                    .unwrap()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap();
                let gw = x_mat.dot(&gcol.t()); // [Ci, Co*K*K]
                let mut gb = Array1::zeros(co);
                for c in 0..co {
                    gb[c] = gn.slice(s![c, .., ..]).sum();
                }
                (gw, gb, gcol)
            })
            .collect();
        let w_mat = self
            .w
            .value
            .view()
            .into_shape_with_order((ci, co * k * k))
            .unwrap()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let mut gx = Array4::zeros((n, ci, h, w));
        {
            let mut gw_acc = self
                .w
                .grad
                .view_mut()
                .into_shape_with_order((ci, co * k * k))
                .unwrap()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            let mut gb_acc =
                self.b.grad.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
            for (i, (gw, gb, gcol)) in parts.iter().enumerate() {
                gw_acc += gw;
                gb_acc += gb;
                let gxm = w_mat.dot(gcol); // [Ci, H*W]
                let gxi = gxm.into_shape_with_order((ci, h, w)).unwrap();
                gx.index_axis_mut(Axis(0), i).assign(&gxi);
            }
        }
        gx
    }
}

/// Max pooling with cached argmax indices for the backward pass.
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct PoolCache {
    argmax: Array4<usize>, // flat (iy*W+ix) index per output element
    input_hw: (usize, usize),
}

impl MaxPool2d {
    pub fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, PoolCache) {
        let (n, c, h, w) = x.dim();
        let ho = conv_out_size(h, self.k, self.stride, self.pad);
        let wo = conv_out_size(w, self.k, self.stride, self.pad);
        let mut out = Array4::zeros((n, c, ho, wo));
        let mut arg = Array4::zeros((n, c, ho, wo));
        for ni in 0..n {
            for ci in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for ky in 0..self.k {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..self.k {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let v = x[[ni, ci, iy as usize, ix as usize]];
                                if v > best {
                                    best = v;
                                    best_idx = iy as usize * w + ix as usize;
                                }
                            }
                        }
                        out[[ni, ci, oy, ox]] = best;
                        arg[[ni, ci, oy, ox]] = best_idx;
                    }
                }
            }
        }
        (out, PoolCache { argmax: arg, input_hw: (h, w) })
    }

    pub fn backward(&self, cache: &PoolCache, gout: &Array4<f64>) -> Array4<f64> {
        let (n, c, ho, wo) = gout.dim();
        let (h, w) = cache.input_hw;
        let mut gx = Array4::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let idx = cache.argmax[[ni, ci, oy, ox]];
                        gx[[ni, ci, idx / w, idx % w]] += gout[[ni, ci, oy, ox]];
                    }
                }
            }
        }
        gx
    }
}
