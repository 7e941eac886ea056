//! 2D convolution and 2x2 transposed convolution via im2col + GEMM.

use ndarray::{Array2, Array4, ArrayD, ArrayView2, ArrayView4, IntoDimension};

use super::Param;
use crate::error::{Error, Result};
use crate::rng::RandomSource;

/// Output spatial extent of a convolution along one axis.
fn conv_out(dim: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (dim + 2 * pad - kernel) / stride + 1
}

/// Unfold `x` (N,C,H,W) into a matrix of shape (C*k*k, N*Ho*Wo).
///
/// Row `(c*k + ki)*k + kj`, column `(n*Ho + i)*Wo + j` holds
/// `x[n, c, i*s + ki - p, j*s + kj - p]`, zero where out of bounds.
fn im2col(x: &ArrayView4<f64>, kernel: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (n_batch, channels, height, width) = x.dim();
    let ho = conv_out(height, kernel, stride, pad);
    let wo = conv_out(width, kernel, stride, pad);
    let row_len = n_batch * ho * wo;
    let mut cols = Array2::<f64>::zeros((channels * kernel * kernel, row_len));

    let xs = x.as_slice().expect("input must be standard layout");
    let cols_slice = cols.as_slice_mut().unwrap();
    let (sn, sc) = (channels * height * width, height * width);

    for c in 0..channels {
        for ki in 0..kernel {
            for kj in 0..kernel {
                let r = (c * kernel + ki) * kernel + kj;
                let row = &mut cols_slice[r * row_len..(r + 1) * row_len];
                // valid j range so that j*s + kj - p lands in [0, width)
                let j_lo = if kj >= pad {
                    0
                } else {
                    (pad - kj).div_ceil(stride)
                };
                let j_hi = {
                    let top = width as isize - 1 - kj as isize + pad as isize;
                    if top < 0 {
                        0
                    } else {
                        ((top as usize) / stride + 1).min(wo)
                    }
                };
                for n in 0..n_batch {
                    let x_base = n * sn + c * sc;
                    for i in 0..ho {
                        let ii = (i * stride + ki) as isize - pad as isize;
                        if ii < 0 || ii >= height as isize {
                            continue;
                        }
                        let src = &xs[x_base + ii as usize * width..][..width];
                        let dst = &mut row[(n * ho + i) * wo..][..wo];
                        if stride == 1 && j_hi > j_lo {
                            let src_off = j_lo + kj - pad;
                            let span = j_hi - j_lo;
                            dst[j_lo..j_hi].copy_from_slice(&src[src_off..src_off + span]);
                        } else {
                            for j in j_lo..j_hi {
                                let jj = (j * stride + kj) as isize - pad as isize;
                                dst[j] = src[jj as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold a (C*k*k, N*Ho*Wo) gradient matrix back onto the input grid
/// (scatter-add), inverse of [`im2col`].
fn col2im(
    gcols: &Array2<f64>,
    shape: (usize, usize, usize, usize),
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (n_batch, channels, height, width) = shape;
    let ho = conv_out(height, kernel, stride, pad);
    let wo = conv_out(width, kernel, stride, pad);
    let row_len = n_batch * ho * wo;
    let mut gx = Array4::<f64>::zeros(shape);
    let gxs = gx.as_slice_mut().unwrap();
    let gc = gcols.as_slice().expect("gcols must be standard layout");
    let (sn, sc) = (channels * height * width, height * width);

    for c in 0..channels {
        for ki in 0..kernel {
            for kj in 0..kernel {
                let r = (c * kernel + ki) * kernel + kj;
                let row = &gc[r * row_len..(r + 1) * row_len];
                let j_lo = if kj >= pad {
                    0
                } else {
                    (pad - kj).div_ceil(stride)
                };
                let j_hi = {
                    let top = width as isize - 1 - kj as isize + pad as isize;
                    if top < 0 {
                        0
                    } else {
                        ((top as usize) / stride + 1).min(wo)
                    }
                };
                for n in 0..n_batch {
                    let x_base = n * sn + c * sc;
                    for i in 0..ho {
                        let ii = (i * stride + ki) as isize - pad as isize;
                        if ii < 0 || ii >= height as isize {
                            continue;
                        }
                        let dst = &mut gxs[x_base + ii as usize * width..][..width];
                        let src = &row[(n * ho + i) * wo..][..wo];
                        for j in j_lo..j_hi {
                            let jj = (j * stride + kj) as isize - pad as isize;
                            dst[jj as usize] += src[j];
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Reorder (Cout, N*Ho*Wo) GEMM output into (N, Cout, Ho, Wo), adding bias.
fn mat_to_feat(y2: &Array2<f64>, n: usize, cout: usize, ho: usize, wo: usize, bias: &[f64]) -> Array4<f64> {
    let mut y = Array4::<f64>::zeros((n, cout, ho, wo));
    let plane = ho * wo;
    let ys = y.as_slice_mut().unwrap();
    let y2s = y2.as_slice().unwrap();
    for co in 0..cout {
        let b = bias[co];
        let row = &y2s[co * n * plane..(co + 1) * n * plane];
        for ni in 0..n {
            let dst = &mut ys[(ni * cout + co) * plane..][..plane];
            let src = &row[ni * plane..(ni + 1) * plane];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + b;
            }
        }
    }
    y
}

/// Reorder (N, Cout, Ho, Wo) into (Cout, N*Ho*Wo) — inverse of [`mat_to_feat`].
fn feat_to_mat(gy: &ArrayView4<f64>) -> Array2<f64> {
    let (n, cout, ho, wo) = gy.dim();
    let plane = ho * wo;
    let mut m = Array2::<f64>::zeros((cout, n * plane));
    let ms = m.as_slice_mut().unwrap();
    let gys = gy.as_slice().expect("gradient must be standard layout");
    for co in 0..cout {
        let row = &mut ms[co * n * plane..(co + 1) * n * plane];
        for ni in 0..n {
            row[ni * plane..(ni + 1) * plane]
                .copy_from_slice(&gys[(ni * cout + co) * plane..][..plane]);
        }
    }
    m
}

/// 2D convolution with square kernel, configurable stride and zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param, // (Cout, Cin, k, k)
    pub bias: Param,   // (Cout,)
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    cache: Option<Array4<f64>>,
}

impl Conv2d {
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut RandomSource,
    ) -> Self {
        // He initialization for ReLU stacks.
        let std = (2.0 / (in_channels * kernel * kernel) as f64).sqrt();
        let mut w = ArrayD::zeros(vec![out_channels, in_channels, kernel, kernel].into_dimension());
        for v in w.iter_mut() {
            *v = rng.normal(0.0, std);
        }
        let b = ArrayD::zeros(vec![out_channels].into_dimension());
        Conv2d {
            weight: Param::new(format!("{name}.weight"), w),
            bias: Param::new(format!("{name}.bias"), b),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            cache: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward(&mut self, x: &Array4<f64>, train: bool) -> Result<Array4<f64>> {
        let (n, c, h, w) = x.dim();
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "{}: expected {} input channels, got {c}",
                self.weight.name, self.in_channels
            )));
        }
        if h + 2 * self.pad < self.kernel || w + 2 * self.pad < self.kernel {
            return Err(Error::Shape(format!(
                "{}: input {h}x{w} smaller than kernel {}",
                self.weight.name, self.kernel
            )));
        }
        let cols = im2col(&x.view(), self.kernel, self.stride, self.pad);
        let wmat = self.weight_mat();
        let y2 = wmat.dot(&cols);
        let ho = conv_out(h, self.kernel, self.stride, self.pad);
        let wo = conv_out(w, self.kernel, self.stride, self.pad);
        let y = mat_to_feat(&y2, n, self.out_channels, ho, wo, self.bias.value.as_slice().unwrap());
        if train {
            self.cache = Some(x.clone());
        }
        Ok(y)
    }

    /// Backprop: accumulates weight/bias gradients, returns input gradient.
    pub fn backward(&mut self, gy: &Array4<f64>) -> Array4<f64> {
        let x = self.cache.take().expect("Conv2d::backward without forward(train)");
        let gy2 = feat_to_mat(&gy.view());
        // Recompute the unfolding rather than caching it: the column matrix is
        // k*k times larger than the input.
        let cols = im2col(&x.view(), self.kernel, self.stride, self.pad);
        let gw = gy2.dot(&cols.t());
        {
            let mut gwv = self
                .weight
                .grad
                .view_mut()
                .into_shape_with_order((self.out_channels, self.in_channels * self.kernel * self.kernel))
                .unwrap();
            gwv += &gw;
        }
        {
            let gb = gy2.sum_axis(ndarray::Axis(1));
            let mut gbv = self.bias.grad.view_mut().into_shape_with_order(self.out_channels).unwrap();
            gbv += &gb;
        }
        let gcols = self.weight_mat().t().dot(&gy2);
        col2im(&gcols, x.dim(), self.kernel, self.stride, self.pad)
    }

    fn weight_mat(&self) -> ArrayView2<f64> {
        self.weight
            .value
            .view()
            .into_shape_with_order((self.out_channels, self.in_channels * self.kernel * self.kernel))
            .unwrap()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

use ndarray::ArrayD;
use ndarray::IntoDimension;

/// Transposed convolution with 2x2 kernel and stride 2 (exact 2x upsampling).
///
/// Windows do not overlap, so each output pixel is produced by exactly one
/// input pixel: `y[n,co,2i+a,2j+b] = sum_ci x[n,ci,i,j] * w[ci,co,a,b] + bias`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2x2 {
    pub weight: Param, // (Cin, Cout, 2, 2)
    pub bias: Param,   // (Cout,)
    in_channels: usize,
    out_channels: usize,
    cache: Option<Array4<f64>>,
}

impl ConvTranspose2x2 {
    pub fn new(name: &str, in_channels: usize, out_channels: usize, rng: &mut RandomSource) -> Self {
        let std = (2.0 / (in_channels * 4) as f64).sqrt();
        let mut w = ArrayD::zeros(vec![in_channels, out_channels, 2, 2].into_dimension());
        for v in w.iter_mut() {
            *v = rng.normal(0.0, std);
        }
        let b = ArrayD::zeros(vec![out_channels].into_dimension());
        ConvTranspose2x2 {
            weight: Param::new(format!("{name}.weight"), w),
            bias: Param::new(format!("{name}.bias"), b),
            in_channels,
            out_channels,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>, train: bool) -> Result<Array4<f64>> {
        let (n, c, h, w) = x.dim();
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "{}: expected {} input channels, got {c}",
                self.weight.name, self.in_channels
            )));
        }
        let x2 = feat_to_mat(&x.view()); // (Cin, N*H*W)
        let wmat = self
            .weight
            .value
            .view()
            .into_shape_with_order((self.in_channels, self.out_channels * 4))
            .unwrap();
        let y2 = wmat.t().dot(&x2); // (Cout*4, N*H*W)

        let mut y = Array4::<f64>::zeros((n, self.out_channels, 2 * h, 2 * w));
        let ys = y.as_slice_mut().unwrap();
        let y2s = y2.as_slice().unwrap();
        let bias = self.bias.value.as_slice().unwrap();
        let in_plane = h * w;
        let out_plane = 4 * in_plane;
        for co in 0..self.out_channels {
            for a in 0..2 {
                for bcol in 0..2 {
                    let row = &y2s[(co * 4 + a * 2 + bcol) * n * in_plane..][..n * in_plane];
                    for ni in 0..n {
                        let dst_base = (ni * self.out_channels + co) * out_plane;
                        for i in 0..h {
                            let dst_row = dst_base + (2 * i + a) * 2 * w + bcol;
                            let src = &row[ni * in_plane + i * w..][..w];
                            for (j, &v) in src.iter().enumerate() {
                                ys[dst_row + 2 * j] = v + bias[co];
                            }
                        }
                    }
                }
            }
        }
        if train {
            self.cache = Some(x.clone());
        }
        Ok(y)
    }

    pub fn backward(&mut self, gy: &Array4<f64>) -> Array4<f64> {
        let x = self.cache.take().expect("ConvTranspose2x2::backward without forward(train)");
        let (n, _, h, w) = x.dim();
        let in_plane = h * w;

        // Gather gy into (Cout*4, N*H*W).
        let mut gy2 = Array2::<f64>::zeros((self.out_channels * 4, n * in_plane));
        {
            let gys = gy.as_slice().expect("gradient must be standard layout");
            let g2 = gy2.as_slice_mut().unwrap();
            let out_plane = 4 * in_plane;
            for co in 0..self.out_channels {
                for a in 0..2 {
                    for bcol in 0..2 {
                        let row = &mut g2[(co * 4 + a * 2 + bcol) * n * in_plane..][..n * in_plane];
                        for ni in 0..n {
                            let src_base = (ni * self.out_channels + co) * out_plane;
                            for i in 0..h {
                                let src_row = src_base + (2 * i + a) * 2 * w + bcol;
                                let dst = &mut row[ni * in_plane + i * w..][..w];
                                for (j, d) in dst.iter_mut().enumerate() {
                                    *d = gys[src_row + 2 * j];
                                }
                            }
                        }
                    }
                }
            }
        }

        let x2 = feat_to_mat(&x.view());
        let gw = x2.dot(&gy2.t()); // (Cin, Cout*4)
        {
            let mut gwv = self
                .weight
                .grad
                .view_mut()
                .into_shape_with_order((self.in_channels, self.out_channels * 4))
                .unwrap();
            gwv += &gw;
        }
        {
            let per_row = gy2.sum_axis(ndarray::Axis(1)); // (Cout*4,)
            let gbv = self.bias.grad.as_slice_mut().unwrap();
            for co in 0..self.out_channels {
                for q in 0..4 {
                    gbv[co] += per_row[co * 4 + q];
                }
            }
        }
        let wmat = self
            .weight
            .value
            .view()
            .into_shape_with_order((self.in_channels, self.out_channels * 4))
            .unwrap();
        let gx2 = wmat.dot(&gy2); // (Cin, N*H*W)

        let mut gx = Array4::<f64>::zeros(x.dim());
        {
            let gxs = gx.as_slice_mut().unwrap();
            let g2 = gx2.as_slice().unwrap();
            let cin = self.in_channels;
            for ci in 0..cin {
                let row = &g2[ci * n * in_plane..][..n * in_plane];
                for ni in 0..n {
                    gxs[(ni * cin + ci) * in_plane..][..in_plane]
                        .copy_from_slice(&row[ni * in_plane..][..in_plane]);
                }
            }
        }
        gx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Bias-broadcast helper shared by tests.
#[allow(dead_code)]
fn bias_view(b: &Param) -> Array1<f64> {
    b.value.view().into_shape_with_order(b.value.len()).unwrap().to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn rand_x(rng: &mut RandomSource, shape: (usize, usize, usize, usize)) -> Array4<f64> {
        let mut x = Array4::zeros(shape);
        for v in x.iter_mut() {
            *v = rng.normal(0.0, 1.0);
        }
        x
    }

    /// Brute-force convolution oracle: direct 7-deep loop over the definition.
    fn conv_oracle(
        x: &Array4<f64>,
        w: &ArrayD<f64>,
        b: &[f64],
        stride: usize,
        pad: usize,
    ) -> Array4<f64> {
        let (n, cin, h, wd) = x.dim();
        let k = w.shape()[2];
        let cout = w.shape()[0];
        let ho = conv_out(h, k, stride, pad);
        let wo = conv_out(wd, k, stride, pad);
        let mut y = Array4::zeros((n, cout, ho, wo));
        for ni in 0..n {
            for co in 0..cout {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let ii = (i * stride + ki) as isize - pad as isize;
                                    let jj = (j * stride + kj) as isize - pad as isize;
                                    if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < wd {
                                        acc += x[[ni, ci, ii as usize, jj as usize]]
                                            * w[[co, ci, ki, kj]];
                                    }
                                }
                            }
                        }
                        y[[ni, co, i, j]] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_oracle() {
        let mut rng = RandomSource::from_seed(11);
        for &(stride, pad, k) in &[(1usize, 1usize, 3usize), (2, 1, 3), (1, 0, 1)] {
            let mut conv = Conv2d::new("c", 3, 4, k, stride, pad, &mut rng);
            let x = rand_x(&mut rng, (2, 3, 9, 7));
            let y = conv.forward(&x, false).unwrap();
            let b: Vec<f64> = conv.bias.value.iter().copied().collect();
            let y_ref = conv_oracle(&x, &conv.weight.value, &b, stride, pad);
            let max_err = (&y - &y_ref).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max_err < 1e-10, "stride={stride} pad={pad} k={k}: err {max_err}");
        }
    }

    /// Central finite differences of scalar loss sum(y * r) wrt x and params.
    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = RandomSource::from_seed(5);
        let mut conv = Conv2d::new("c", 2, 3, 3, 1, 1, &mut rng);
        let x = rand_x(&mut rng, (2, 2, 6, 5));
        let r = rand_x(&mut rng, (2, 3, 6, 5));

        let y = conv.forward(&x, true).unwrap();
        assert_eq!(y.dim(), (2, 3, 6, 5));
        let gx = conv.backward(&r.clone());

        let eps = 1e-6;
        // input gradient
        for &idx in &[(0, 0, 0, 0), (1, 1, 3, 2), (0, 1, 5, 4)] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let fp = (&conv.forward(&xp, false).unwrap() * &r).sum();
            let fm = (&conv.forward(&xm, false).unwrap() * &r).sum();
            let fd = (fp - fm) / (2.0 * eps);
            assert!((fd - gx[idx]).abs() < 1e-5, "fd {fd} vs {}", gx[idx]);
        }
        // weight gradient
        for &widx in &[[0usize, 0, 0, 0], [2, 1, 2, 2], [1, 0, 1, 2]] {
            let orig = conv.weight.value[widx.as_slice()];
            conv.weight.value[widx.as_slice()] = orig + eps;
            let fp = (&conv.forward(&x, false).unwrap() * &r).sum();
            conv.weight.value[widx.as_slice()] = orig - eps;
            let fm = (&conv.forward(&x, false).unwrap() * &r).sum();
            conv.weight.value[widx.as_slice()] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            let an = conv.weight.grad[widx.as_slice()];
            assert!((fd - an).abs() < 1e-5, "fd {fd} vs {an}");
        }
    }

    #[test]
    fn transpose_conv_upsamples_and_matches_finite_differences() {
        let mut rng = RandomSource::from_seed(9);
        let mut up = ConvTranspose2x2::new("u", 3, 2, &mut rng);
        let x = rand_x(&mut rng, (2, 3, 4, 5));
        let y = up.forward(&x, true).unwrap();
        assert_eq!(y.dim(), (2, 2, 8, 10));

        // definition check at one output location: y[n,co,2i+a,2j+b]
        let (ni, co, i, j, a, b) = (1, 0, 2, 3, 1, 0);
        let mut want = up.bias.value[[co]];
        for ci in 0..3 {
            want += x[[ni, ci, i, j]] * up.weight.value[[ci, co, a, b]];
        }
        assert!((y[[ni, co, 2 * i + a, 2 * j + b]] - want).abs() < 1e-12);

        let r = rand_x(&mut rng, (2, 2, 8, 10));
        let gx = up.backward(&r.clone());
        let eps = 1e-6;
        for &idx in &[(0, 0, 0, 0), (1, 2, 3, 4)] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let fp = (&up.forward(&xp, false).unwrap() * &r).sum();
            let fm = (&up.forward(&xm, false).unwrap() * &r).sum();
            let fd = (fp - fm) / (2.0 * eps);
            assert!((fd - gx[idx]).abs() < 1e-5);
        }
        for &widx in &[[0usize, 0, 0, 0], [2, 1, 1, 1]] {
            let orig = up.weight.value[widx.as_slice()];
            up.weight.value[widx.as_slice()] = orig + eps;
            let fp = (&up.forward(&x, false).unwrap() * &r).sum();
            up.weight.value[widx.as_slice()] = orig - eps;
            let fm = (&up.forward(&x, false).unwrap() * &r).sum();
            up.weight.value[widx.as_slice()] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            let an = up.weight.grad[widx.as_slice()];
            assert!((fd - an).abs() < 1e-5, "fd {fd} vs {an}");
        }
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let mut rng = RandomSource::from_seed(2);
        let mut conv = Conv2d::new("c", 4, 2, 3, 1, 1, &mut rng);
        let x = rand_x(&mut rng, (1, 3, 8, 8));
        assert!(matches!(conv.forward(&x, false), Err(Error::Shape(_))));
    }
}
