//! Layer primitives with explicit backward passes.
//!
//! Convolutions lower to GEMM through `im2col`; several batch items are
//! packed side by side in one column buffer so the matrix products stay wide
//! even when channel counts are small.

use super::param::Param;
use super::tensor::Tensor;

/// Upper bound on the `im2col` buffer, in floats.
const MAX_COL_FLOATS: usize = 1 << 18;

/// `C = alpha * A * B + beta * C` over strided row/column views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    a_strides: (isize, isize),
    b: &[f32],
    b_strides: (isize, isize),
    beta: f32,
    c: &mut [f32],
    c_strides: (isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: every view addresses at most m*k, k*n and m*n elements inside the
    // given slices; callers pass strides describing dense row- or column-major
    // layouts of exactly those sizes.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            c_strides.0,
            c_strides.1,
        );
    }
}

/// Output columns `lo..hi` whose input column `ox*s + kx - pad` lies in `0..w`.
fn valid_range(kx: usize, s: usize, pad: isize, w: usize, wo: usize) -> (usize, usize) {
    let off = kx as isize - pad;
    let lo = if off >= 0 { 0 } else { ((-off) as usize).div_ceil(s) };
    let limit = w as isize - off;
    let hi = if limit <= 0 { 0 } else { ((limit as usize).div_ceil(s)).min(wo) };
    (lo.min(hi), hi)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        let k = in_channels * kernel * kernel;
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                vec![out_channels, in_channels, kernel, kernel],
                vec![0.0; out_channels * k],
            ),
            bias: bias.then(|| Param::new(format!("{name}.bias"), vec![out_channels], vec![0.0; out_channels])),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn chunk_len(&self, batch: usize, out_plane: usize) -> usize {
        let per = self.in_channels * self.kernel * self.kernel * out_plane;
        (MAX_COL_FLOATS / per.max(1)).clamp(1, batch.max(1))
    }

    fn im2col(&self, x: &Tensor, start: usize, len: usize, cols: &mut Vec<f32>) {
        let [_, cin, h, w] = x.shape();
        let (ho, wo) = self.output_size(h, w);
        let (k, s, pad) = (self.kernel, self.stride, self.padding as isize);
        let plane = ho * wo;
        let ncols = len * plane;
        cols.clear();
        cols.resize(cin * k * k * ncols, 0.0);
        let data = x.data();
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                    for b in 0..len {
                        let src = &data[((start + b) * cin + ci) * h * w..((start + b) * cin + ci + 1) * h * w];
                        let dst = &mut dst_row[b * plane..(b + 1) * plane];
                        for oy in 0..ho {
                            let iy = (oy * s + ky) as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                            let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                            let (lo, hi) = valid_range(kx, s, pad, w, wo);
                            if s == 1 {
                                let first = (lo + kx) as isize - pad;
                                dst_row[lo..hi].copy_from_slice(&src_row[first as usize..first as usize + hi - lo]);
                            } else {
                                for ox in lo..hi {
                                    dst_row[ox] = src_row[((ox * s + kx) as isize - pad) as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], start: usize, len: usize, grad_in: &mut Tensor) {
        let [_, cin, h, w] = grad_in.shape();
        let (ho, wo) = self.output_size(h, w);
        let (k, s, pad) = (self.kernel, self.stride, self.padding as isize);
        let plane = ho * wo;
        let ncols = len * plane;
        let data = grad_in.data_mut();
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src_row = &cols[row * ncols..(row + 1) * ncols];
                    for b in 0..len {
                        let dst = &mut data[((start + b) * cin + ci) * h * w..((start + b) * cin + ci + 1) * h * w];
                        let src = &src_row[b * plane..(b + 1) * plane];
                        for oy in 0..ho {
                            let iy = (oy * s + ky) as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                            let src_row = &src[oy * wo..(oy + 1) * wo];
                            let (lo, hi) = valid_range(kx, s, pad, w, wo);
                            if s == 1 {
                                let first = ((lo + kx) as isize - pad) as usize;
                                for (d, v) in dst_row[first..first + hi - lo].iter_mut().zip(&src_row[lo..hi]) {
                                    *d += v;
                                }
                            } else {
                                for ox in lo..hi {
                                    dst_row[((ox * s + kx) as isize - pad) as usize] += src_row[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let [n, cin, h, w] = x.shape();
        assert_eq!(cin, self.in_channels, "{}: channel mismatch", self.weight.name);
        let (ho, wo) = self.output_size(h, w);
        let plane = ho * wo;
        let cout = self.out_channels;
        let kk = cin * self.kernel * self.kernel;
        let mut out = Tensor::zeros([n, cout, ho, wo]);
        let chunk = self.chunk_len(n, plane);
        let mut cols = Vec::new();
        let mut tmp = Vec::new();
        let mut start = 0;
        while start < n {
            let len = chunk.min(n - start);
            self.im2col(x, start, len, &mut cols);
            let ncols = len * plane;
            tmp.clear();
            tmp.resize(cout * ncols, 0.0);
            gemm(
                cout,
                kk,
                ncols,
                1.0,
                &self.weight.value,
                (kk as isize, 1),
                &cols,
                (ncols as isize, 1),
                0.0,
                &mut tmp,
                (ncols as isize, 1),
            );
            let od = out.data_mut();
            for b in 0..len {
                for co in 0..cout {
                    let bias = self.bias.as_ref().map_or(0.0, |p| p.value[co]);
                    let dst = &mut od[((start + b) * cout + co) * plane..((start + b) * cout + co + 1) * plane];
                    let src = &tmp[co * ncols + b * plane..co * ncols + (b + 1) * plane];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d = s + bias;
                    }
                }
            }
            start += len;
        }
        out
    }

    /// Accumulates parameter gradients (when `accumulate`) and returns the
    /// input gradient (when `need_input_grad`).
    pub fn backward(&mut self, x: &Tensor, grad_out: &Tensor, accumulate: bool, need_input_grad: bool) -> Option<Tensor> {
        let [n, cin, h, w] = x.shape();
        let (ho, wo) = self.output_size(h, w);
        let plane = ho * wo;
        let cout = self.out_channels;
        let kk = cin * self.kernel * self.kernel;
        let mut grad_in = need_input_grad.then(|| Tensor::zeros(x.shape()));
        if !accumulate && !need_input_grad {
            return None;
        }
        let chunk = self.chunk_len(n, plane);
        let mut cols = Vec::new();
        let mut g = Vec::new();
        let mut dcols = Vec::new();
        let god = grad_out.data();
        let mut start = 0;
        while start < n {
            let len = chunk.min(n - start);
            let ncols = len * plane;
            g.clear();
            g.resize(cout * ncols, 0.0);
            for b in 0..len {
                for co in 0..cout {
                    let src = &god[((start + b) * cout + co) * plane..((start + b) * cout + co + 1) * plane];
                    g[co * ncols + b * plane..co * ncols + (b + 1) * plane].copy_from_slice(src);
                }
            }
            if accumulate {
                self.im2col(x, start, len, &mut cols);
                gemm(
                    cout,
                    ncols,
                    kk,
                    1.0,
                    &g,
                    (ncols as isize, 1),
                    &cols,
                    (1, ncols as isize),
                    1.0,
                    &mut self.weight.grad,
                    (kk as isize, 1),
                );
                if let Some(bias) = self.bias.as_mut() {
                    for co in 0..cout {
                        bias.grad[co] += g[co * ncols..(co + 1) * ncols].iter().sum::<f32>();
                    }
                }
            }
            if let Some(gi) = grad_in.as_mut() {
                dcols.clear();
                dcols.resize(kk * ncols, 0.0);
                gemm(
                    kk,
                    cout,
                    ncols,
                    1.0,
                    &self.weight.value,
                    (1, kk as isize),
                    &g,
                    (ncols as isize, 1),
                    0.0,
                    &mut dcols,
                    (ncols as isize, 1),
                );
                self.col2im(&dcols, start, len, gi);
            }
            start += len;
        }
        grad_in
    }

    pub fn params(&self) -> Vec<&Param> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Param::len)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(name: &str, in_features: usize, out_features: usize) -> Self {
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                vec![out_features, in_features],
                vec![0.0; in_features * out_features],
            ),
            bias: Param::new(format!("{name}.bias"), vec![out_features], vec![0.0; out_features]),
            in_features,
            out_features,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let n = x.batch();
        assert_eq!(x.numel(), n * self.in_features, "{}: feature mismatch", self.weight.name);
        let (fi, fo) = (self.in_features, self.out_features);
        let mut out = vec![0.0; n * fo];
        for row in out.chunks_exact_mut(fo) {
            row.copy_from_slice(&self.bias.value);
        }
        gemm(
            n,
            fi,
            fo,
            1.0,
            x.data(),
            (fi as isize, 1),
            &self.weight.value,
            (1, fi as isize),
            1.0,
            &mut out,
            (fo as isize, 1),
        );
        Tensor::from_vec([n, fo, 1, 1], out)
    }

    pub fn backward(&mut self, x: &Tensor, grad_out: &Tensor, accumulate: bool, need_input_grad: bool) -> Option<Tensor> {
        let n = x.batch();
        let (fi, fo) = (self.in_features, self.out_features);
        let gy = grad_out.data();
        if accumulate {
            gemm(
                fo,
                n,
                fi,
                1.0,
                gy,
                (1, fo as isize),
                x.data(),
                (fi as isize, 1),
                1.0,
                &mut self.weight.grad,
                (fi as isize, 1),
            );
            for row in gy.chunks_exact(fo) {
                for (g, v) in self.bias.grad.iter_mut().zip(row) {
                    *g += v;
                }
            }
        }
        need_input_grad.then(|| {
            let mut gx = vec![0.0; n * fi];
            gemm(
                n,
                fo,
                fi,
                1.0,
                gy,
                (fo as isize, 1),
                &self.weight.value,
                (fi as isize, 1),
                0.0,
                &mut gx,
                (fi as isize, 1),
            );
            Tensor::from_vec(x.shape(), gx)
        })
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f32>,
    batch_stats: Option<(Vec<f32>, Vec<f32>)>,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), vec![channels], vec![1.0; channels]),
            beta: Param::new(format!("{name}.beta"), vec![channels], vec![0.0; channels]),
            running_mean: Param::buffer(format!("{name}.running_mean"), vec![channels], vec![0.0; channels]),
            running_var: Param::buffer(format!("{name}.running_var"), vec![channels], vec![1.0; channels]),
            channels,
        }
    }

    /// With `batch_stats` the batch mean and biased variance normalize the
    /// input; otherwise the running estimates do.
    pub fn forward(&self, x: &Tensor, batch_stats: bool) -> (Tensor, BnCache) {
        let [n, c, h, w] = x.shape();
        let plane = h * w;
        let count = (n * plane) as f64;
        let data = x.data();
        let mut mean = vec![0.0f32; c];
        let mut var = vec![0.0f32; c];
        if batch_stats {
            for ch in 0..c {
                let (mut s, mut s2) = (0.0f64, 0.0f64);
                for b in 0..n {
                    for &v in &data[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                        s += v as f64;
                        s2 += (v as f64) * (v as f64);
                    }
                }
                let m = s / count;
                mean[ch] = m as f32;
                var[ch] = (s2 / count - m * m).max(0.0) as f32;
            }
        } else {
            mean.copy_from_slice(&self.running_mean.value);
            var.copy_from_slice(&self.running_var.value);
        }
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        {
            let xh = xhat.data_mut();
            let yd = y.data_mut();
            for b in 0..n {
                for ch in 0..c {
                    let range = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                    let (g, bt) = (self.gamma.value[ch], self.beta.value[ch]);
                    for i in range {
                        let v = (data[i] - mean[ch]) * inv_std[ch];
                        xh[i] = v;
                        yd[i] = g * v + bt;
                    }
                }
            }
        }
        let batch_stats = batch_stats.then(|| {
            let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            (mean, var.iter().map(|v| (*v as f64 * unbiased) as f32).collect())
        });
        (
            y,
            BnCache {
                xhat,
                inv_std,
                batch_stats,
            },
        )
    }

    pub fn update_running(&mut self, cache: &BnCache) {
        if let Some((mean, var)) = &cache.batch_stats {
            for ch in 0..self.channels {
                let rm = &mut self.running_mean.value[ch];
                *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mean[ch];
                let rv = &mut self.running_var.value[ch];
                *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * var[ch];
            }
        }
    }

    pub fn backward(&mut self, cache: &BnCache, grad_out: &Tensor, accumulate: bool) -> Tensor {
        let [n, c, h, w] = grad_out.shape();
        let plane = h * w;
        let m = (n * plane) as f32;
        let gy = grad_out.data();
        let xh = cache.xhat.data();
        let mut gx = Tensor::zeros(grad_out.shape());
        let gxd = gx.data_mut();
        for ch in 0..c {
            let (mut sum_g, mut sum_gx) = (0.0f64, 0.0f64);
            for b in 0..n {
                for i in (b * c + ch) * plane..(b * c + ch + 1) * plane {
                    sum_g += gy[i] as f64;
                    sum_gx += (gy[i] * xh[i]) as f64;
                }
            }
            if accumulate {
                self.gamma.grad[ch] += sum_gx as f32;
                self.beta.grad[ch] += sum_g as f32;
            }
            let g = self.gamma.value[ch];
            let inv = cache.inv_std[ch];
            let train = cache.batch_stats.is_some();
            let (mean_g, mean_gx) = ((sum_g / m as f64) as f32, (sum_gx / m as f64) as f32);
            for b in 0..n {
                for i in (b * c + ch) * plane..(b * c + ch + 1) * plane {
                    gxd[i] = if train {
                        g * inv * (gy[i] - mean_g - xh[i] * mean_gx)
                    } else {
                        g * inv * gy[i]
                    };
                }
            }
        }
        gx
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta, &self.running_mean, &self.running_var]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta, &mut self.running_mean, &mut self.running_var]
    }
}

/// Positions of the maxima chosen by a 2x2 max-pooling layer, as flat indices
/// into each input plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Switches {
    pub input_shape: [usize; 4],
    pub index: Vec<u32>,
}

/// 2x2, stride-2 max pooling. Ties resolve to the first element in scan order.
pub fn max_pool2(x: &Tensor) -> (Tensor, Switches) {
    let [n, c, h, w] = x.shape();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, ho, wo]);
    let mut index = vec![0u32; n * c * ho * wo];
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut at = 2 * oy * w + 2 * ox;
                let mut best = src[base + at];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = (2 * oy + dy) * w + 2 * ox + dx;
                    if src[base + i] > best {
                        best = src[base + i];
                        at = i;
                    }
                }
                let o = p * ho * wo + oy * wo + ox;
                dst[o] = best;
                index[o] = at as u32;
            }
        }
    }
    (
        out,
        Switches {
            input_shape: x.shape(),
            index,
        },
    )
}

pub fn max_pool2_backward(sw: &Switches, grad_out: &Tensor) -> Tensor {
    let [_, _, h, w] = sw.input_shape;
    let mut gx = Tensor::zeros(sw.input_shape);
    let plane_out = grad_out.plane_len();
    let gy = grad_out.data();
    let gxd = gx.data_mut();
    for (o, &i) in sw.index.iter().enumerate() {
        let p = o / plane_out;
        gxd[p * h * w + i as usize] += gy[o];
    }
    gx
}

/// Places each value at the location its paired pooling layer took the max
/// from; every other output is zero.
pub fn max_unpool2(x: &Tensor, sw: &Switches) -> Tensor {
    let [n, c, h, w] = sw.input_shape;
    assert_eq!(x.shape(), [n, c, h / 2, w / 2], "unpool input does not match switches");
    let mut out = Tensor::zeros(sw.input_shape);
    let plane_in = x.plane_len();
    let src = x.data();
    let dst = out.data_mut();
    for (o, &i) in sw.index.iter().enumerate() {
        let p = o / plane_in;
        dst[p * h * w + i as usize] = src[o];
    }
    out
}

pub fn max_unpool2_backward(sw: &Switches, grad_out: &Tensor) -> Tensor {
    let [n, c, h, w] = sw.input_shape;
    let mut gx = Tensor::zeros([n, c, h / 2, w / 2]);
    let plane_in = (h / 2) * (w / 2);
    let gy = grad_out.data();
    for (o, (g, &i)) in gx.data_mut().iter_mut().zip(&sw.index).enumerate() {
        let p = o / plane_in;
        *g = gy[p * h * w + i as usize];
    }
    gx
}

pub fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: [usize; 4]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i * 37) % 23) as f32 / 23.0 - 0.4).collect())
    }

    fn direct_conv(conv: &Conv2d, x: &Tensor) -> Tensor {
        let [n, cin, h, w] = x.shape();
        let (ho, wo) = conv.output_size(h, w);
        let k = conv.kernel;
        let mut out = Tensor::zeros([n, conv.out_channels, ho, wo]);
        for b in 0..n {
            for co in 0..conv.out_channels {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = conv.bias.as_ref().map_or(0.0, |p| p.value[co]) as f64;
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                                    let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let wv = conv.weight.value[((co * cin + ci) * k + ky) * k + kx];
                                    let xv = x.data()[((b * cin + ci) * h + iy as usize) * w + ix as usize];
                                    s += (wv * xv) as f64;
                                }
                            }
                        }
                        out.data_mut()[((b * conv.out_channels + co) * ho + oy) * wo + ox] = s as f32;
                    }
                }
            }
        }
        out
    }

    fn seeded_conv(cin: usize, cout: usize, k: usize, s: usize, p: usize) -> Conv2d {
        let mut conv = Conv2d::new("c", cin, cout, k, s, p, true);
        for (i, v) in conv.weight.value.iter_mut().enumerate() {
            *v = ((i * 7919) % 101) as f32 / 101.0 - 0.5;
        }
        for (i, v) in conv.bias.as_mut().unwrap().value.iter_mut().enumerate() {
            *v = i as f32 * 0.1;
        }
        conv
    }

    #[test]
    fn conv_matches_direct_loops() {
        for (k, s, p) in [(3, 1, 1), (4, 2, 1), (4, 1, 0)] {
            let conv = seeded_conv(3, 5, k, s, p);
            let x = ramp([2, 3, 8, 8]);
            let fast = conv.forward(&x);
            let slow = direct_conv(&conv, &x);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-4, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut conv = seeded_conv(2, 3, 4, 2, 1);
        let x = ramp([2, 2, 6, 6]);
        // loss = sum(out * r) for a fixed r
        let out = conv.forward(&x);
        let r = ramp(out.shape());
        let gx = conv.backward(&x, &r, true, true).unwrap();
        let loss = |conv: &Conv2d, x: &Tensor| -> f64 {
            direct_conv(conv, x).data().iter().zip(r.data()).map(|(a, b)| (a * b) as f64).sum()
        };
        let eps = 1e-2;
        for i in [0, 7, 31, 50, 71] {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * eps as f64);
            assert!((fd - gx.data()[i] as f64).abs() < 1e-3, "input {i}: {fd} vs {}", gx.data()[i]);
        }
        for i in [0, 5, 40, 95] {
            let mut cp = conv.clone();
            cp.weight.value[i] += eps;
            let mut cm = conv.clone();
            cm.weight.value[i] -= eps;
            let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * eps as f64);
            assert!((fd - conv.weight.grad[i] as f64).abs() < 1e-3, "weight {i}");
        }
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut lin = Linear::new("fc", 5, 3);
        for (i, v) in lin.weight.value.iter_mut().enumerate() {
            *v = (i as f32 - 7.0) * 0.05;
        }
        let x = ramp([2, 5, 1, 1]);
        let r = ramp([2, 3, 1, 1]);
        let gx = lin.backward(&x, &r, true, true).unwrap();
        let loss = |l: &Linear, x: &Tensor| -> f64 {
            l.forward(x).data().iter().zip(r.data()).map(|(a, b)| (a * b) as f64).sum()
        };
        let eps = 1e-2;
        for i in 0..10 {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let fd = (loss(&lin, &xp) - loss(&lin, &xm)) / (2.0 * eps as f64);
            assert!((fd - gx.data()[i] as f64).abs() < 1e-4);
        }
        for i in 0..15 {
            let mut lp = lin.clone();
            lp.weight.value[i] += eps;
            let mut lm = lin.clone();
            lm.weight.value[i] -= eps;
            let fd = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * eps as f64);
            assert!((fd - lin.weight.grad[i] as f64).abs() < 1e-4);
        }
    }

    #[test]
    fn batchnorm_train_backward_matches_finite_differences() {
        let mut bn = BatchNorm2d::new("bn", 2);
        bn.gamma.value = vec![1.5, 0.7];
        let x = ramp([3, 2, 3, 3]);
        let r = ramp([3, 2, 3, 3]).map(|v| v * v + 0.1);
        let (_, cache) = bn.forward(&x, true);
        let gx = bn.backward(&cache, &r, true);
        let loss = |x: &Tensor| -> f64 {
            bn.forward(x, true).0.data().iter().zip(r.data()).map(|(a, b)| (a * b) as f64).sum()
        };
        let eps = 1e-2;
        for i in [0, 4, 9, 20, 53] {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * eps as f64);
            assert!((fd - gx.data()[i] as f64).abs() < 2e-3, "{fd} vs {}", gx.data()[i]);
        }
    }

    #[test]
    fn unpool_places_values_at_switches() {
        let x = Tensor::from_vec([1, 1, 2, 4], vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 1.0]);
        let (p, sw) = max_pool2(&x);
        assert_eq!(p.data(), &[5.0, 9.0]);
        let u = max_unpool2(&p, &sw);
        assert_eq!(u.shape(), [1, 1, 2, 4]);
        assert_eq!(u.data(), &[0.0, 5.0, 0.0, 0.0, 0.0, 0.0, 9.0, 0.0]);
        let g = max_unpool2_backward(&sw, &Tensor::from_vec([1, 1, 2, 4], (0..8).map(|v| v as f32).collect()));
        assert_eq!(g.data(), &[1.0, 6.0]);
        let gp = max_pool2_backward(&sw, &Tensor::from_vec([1, 1, 1, 2], vec![2.0, 3.0]));
        assert_eq!(gp.data(), &[0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 3.0, 0.0]);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-200.0) >= 0.0 && sigmoid(200.0) <= 1.0);
        assert!(sigmoid(-200.0).is_finite());
    }
}
