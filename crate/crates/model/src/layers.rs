//! Layer primitives with explicit forward and backward passes.
//!
//! Activations are channel-major, `(C, B, H, W)`, so a convolution is one
//! GEMM between the reshaped kernel and an im2col matrix whose columns run
//! over `(B, OH, OW)`; the product is already in activation layout.

use ndarray::{s, Array1, Array2, Array4, ArrayView2, Axis, Zip};

use crate::real::Real;

pub const LEAKY_SLOPE: f64 = 0.2;

fn out_len(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Unfolds `x` into a `(C*K*K, B*OH*OW)` matrix, zero outside the image.
pub fn im2col<F: Real>(x: &Array4<F>, k: usize, stride: usize, pad: usize) -> Array2<F> {
    let x = x.as_standard_layout();
    let (c, b, h, w) = x.dim();
    let (oh, ow) = (out_len(h, k, stride, pad), out_len(w, k, stride, pad));
    let xs = x.as_slice().expect("standard layout");
    let ncols = b * oh * ow;
    let mut col = vec![F::zero(); c * k * k * ncols];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * ncols..(row + 1) * ncols];
                for bi in 0..b {
                    let plane = &xs[(ci * b + bi) * h * w..(ci * b + bi + 1) * h * w];
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let d = &mut dst[(bi * oh + oy) * ow..(bi * oh + oy + 1) * ow];
                        for (ox, v) in d.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *v = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((c * k * k, ncols), col).expect("im2col shape")
}

/// Adjoint of [`im2col`]: scatters columns back, summing overlaps.
pub fn col2im<F: Real>(
    col: ArrayView2<F>,
    dims: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let (c, b, h, w) = dims;
    let (oh, ow) = (out_len(h, k, stride, pad), out_len(w, k, stride, pad));
    let col = col.as_standard_layout();
    let cs = col.as_slice().expect("standard layout");
    let ncols = b * oh * ow;
    let mut out = vec![F::zero(); c * b * h * w];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cs[row * ncols..(row + 1) * ncols];
                for bi in 0..b {
                    let plane = &mut out[(ci * b + bi) * h * w..(ci * b + bi + 1) * h * w];
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let d = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let s = &src[(bi * oh + oy) * ow..(bi * oh + oy + 1) * ow];
                        for (ox, &v) in s.iter().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                d[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    Array4::from_shape_vec(dims, out).expect("col2im shape")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<F> {
    /// `(out, in, k, k)`.
    pub weight: Array4<F>,
    pub bias: Option<Array1<F>>,
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvCache<F> {
    col: Array2<F>,
    in_dim: (usize, usize, usize, usize),
}

impl<F: Real> Conv2d<F> {
    pub fn zeros(out_ch: usize, in_ch: usize, k: usize, stride: usize, pad: usize, bias: bool) -> Self {
        Self {
            weight: Array4::zeros((out_ch, in_ch, k, k)),
            bias: bias.then(|| Array1::zeros(out_ch)),
            stride,
            pad,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Array4::zeros(self.weight.dim()),
            bias: self.bias.as_ref().map(|b| Array1::zeros(b.len())),
            stride: self.stride,
            pad: self.pad,
        }
    }

    fn kernel_matrix(&self) -> ArrayView2<'_, F> {
        let (o, c, k, _) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((o, c * k * k))
            .expect("contiguous weight")
    }

    pub fn forward(&self, x: &Array4<F>) -> (Array4<F>, ConvCache<F>) {
        let k = self.kernel();
        let (c, b, h, w) = x.dim();
        assert_eq!(c, self.weight.dim().1, "conv input channels");
        let (oh, ow) = (
            out_len(h, k, self.stride, self.pad),
            out_len(w, k, self.stride, self.pad),
        );
        let col = im2col(x, k, self.stride, self.pad);
        let mut y = self.kernel_matrix().dot(&col);
        if let Some(bias) = &self.bias {
            for (mut row, &bv) in y.axis_iter_mut(Axis(0)).zip(bias.iter()) {
                row.mapv_inplace(|v| v + bv);
            }
        }
        let o = self.weight.dim().0;
        let y = y.into_shape_with_order((o, b, oh, ow)).expect("conv output shape");
        (
            y,
            ConvCache {
                col,
                in_dim: (c, b, h, w),
            },
        )
    }

    /// Returns the input gradient and, if `grad` is given, accumulates the
    /// parameter gradients into it.
    pub fn backward(&self, cache: &ConvCache<F>, dy: &Array4<F>, grad: Option<&mut Conv2d<F>>) -> Array4<F> {
        let (o, b, oh, ow) = dy.dim();
        let dy = dy.as_standard_layout();
        let dy2 = dy.view().into_shape_with_order((o, b * oh * ow)).expect("dy shape");
        if let Some(g) = grad {
            let dw = dy2.dot(&cache.col.t());
            let (go, gc, gk, _) = g.weight.dim();
            let mut gw = g
                .weight
                .view_mut()
                .into_shape_with_order((go, gc * gk * gk))
                .expect("contiguous grad");
            gw += &dw;
            if let Some(gb) = g.bias.as_mut() {
                *gb += &dy2.sum_axis(Axis(1));
            }
        }
        let dcol = self.kernel_matrix().t().dot(&dy2);
        col2im(dcol.view(), cache.in_dim, self.kernel(), self.stride, self.pad)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<F> {
    /// `(out, in)`.
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Real> Linear<F> {
    pub fn zeros(out_f: usize, in_f: usize) -> Self {
        Self {
            weight: Array2::zeros((out_f, in_f)),
            bias: Array1::zeros(out_f),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.weight.nrows(), self.weight.ncols())
    }

    /// `x` is `(in, B)`.
    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        let mut y = self.weight.dot(x);
        for (mut row, &bv) in y.axis_iter_mut(Axis(0)).zip(self.bias.iter()) {
            row.mapv_inplace(|v| v + bv);
        }
        y
    }

    pub fn backward(&self, x: &Array2<F>, dy: &Array2<F>, grad: Option<&mut Linear<F>>) -> Array2<F> {
        if let Some(g) = grad {
            g.weight += &dy.dot(&x.t());
            g.bias += &dy.sum_axis(Axis(1));
        }
        self.weight.t().dot(dy)
    }
}

pub fn leaky_relu<F: Real>(mut x: Array4<F>) -> Array4<F> {
    let slope = F::from_f64(LEAKY_SLOPE).unwrap();
    x.mapv_inplace(|v| if v > F::zero() { v } else { v * slope });
    x
}

/// Gradient through a leaky ReLU given its output `y` (same sign as input).
pub fn leaky_relu_backward<F: Real>(y: &Array4<F>, dy: &Array4<F>) -> Array4<F> {
    let slope = F::from_f64(LEAKY_SLOPE).unwrap();
    Zip::from(y)
        .and(dy)
        .map_collect(|&yv, &g| if yv > F::zero() { g } else { g * slope })
}

/// 2x2 mean pooling; trailing odd rows/columns are dropped.
pub fn avg_pool2<F: Real>(x: &Array4<F>) -> Array4<F> {
    let (c, b, h, w) = x.dim();
    let quarter = F::from_f64(0.25).unwrap();
    Array4::from_shape_fn((c, b, h / 2, w / 2), |(ci, bi, y, xx)| {
        (x[[ci, bi, 2 * y, 2 * xx]]
            + x[[ci, bi, 2 * y + 1, 2 * xx]]
            + x[[ci, bi, 2 * y, 2 * xx + 1]]
            + x[[ci, bi, 2 * y + 1, 2 * xx + 1]])
            * quarter
    })
}

pub fn avg_pool2_backward<F: Real>(dy: &Array4<F>, in_dim: (usize, usize, usize, usize)) -> Array4<F> {
    let quarter = F::from_f64(0.25).unwrap();
    let (_, _, oh, ow) = dy.dim();
    Array4::from_shape_fn(in_dim, |(ci, bi, y, x)| {
        if y / 2 < oh && x / 2 < ow {
            dy[[ci, bi, y / 2, x / 2]] * quarter
        } else {
            F::zero()
        }
    })
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<F: Real>(x: &Array4<F>) -> Array4<F> {
    let (c, b, h, w) = x.dim();
    Array4::from_shape_fn((c, b, 2 * h, 2 * w), |(ci, bi, y, xx)| x[[ci, bi, y / 2, xx / 2]])
}

pub fn upsample2_backward<F: Real>(dy: &Array4<F>) -> Array4<F> {
    let (c, b, h, w) = dy.dim();
    Array4::from_shape_fn((c, b, h / 2, w / 2), |(ci, bi, y, x)| {
        dy[[ci, bi, 2 * y, 2 * x]]
            + dy[[ci, bi, 2 * y + 1, 2 * x]]
            + dy[[ci, bi, 2 * y, 2 * x + 1]]
            + dy[[ci, bi, 2 * y + 1, 2 * x + 1]]
    })
}

/// Channel concatenation `[a; b]`.
pub fn concat_channels<F: Real>(a: &Array4<F>, b: &Array4<F>) -> Array4<F> {
    ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("matching spatial dims")
}

pub fn split_channels<F: Real>(d: &Array4<F>, first: usize) -> (Array4<F>, Array4<F>) {
    (
        d.slice(s![..first, .., .., ..]).to_owned(),
        d.slice(s![first.., .., .., ..]).to_owned(),
    )
}

/// Spatial mean, `(C, B, H, W) -> (C, B)`.
pub fn global_mean<F: Real>(x: &Array4<F>) -> Array2<F> {
    let (_, _, h, w) = x.dim();
    let n = F::from_usize(h * w).unwrap();
    x.sum_axis(Axis(3)).sum_axis(Axis(2)).mapv(|v| v / n)
}

pub fn global_mean_backward<F: Real>(dy: &Array2<F>, in_dim: (usize, usize, usize, usize)) -> Array4<F> {
    let (_, _, h, w) = in_dim;
    let n = F::from_usize(h * w).unwrap();
    Array4::from_shape_fn(in_dim, |(c, b, _, _)| dy[[c, b]] / n)
}

/// `(B, C, H, W) <-> (C, B, H, W)`.
pub fn swap_batch_channels<F: Real>(x: &Array4<F>) -> Array4<F> {
    x.view().permuted_axes([1, 0, 2, 3]).as_standard_layout().into_owned()
}
