//! Raw numeric kernels on flat slices. Shape checking happens in the tape.

/// Geometry of a 2-D convolution or pooling window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn valid(&self) -> bool {
        self.stride > 0
            && self.kernel_h > 0
            && self.kernel_w > 0
            && self.height + 2 * self.padding >= self.kernel_h
            && self.width + 2 * self.padding >= self.kernel_w
    }
}

/// `c = op(a) * op(b)` (or `c += ...` when `accumulate`), where `op(a)` is
/// `m x k` and `op(b)` is `k x n`. A transposed operand is stored in the
/// untransposed orientation, row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_transposed { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_transposed { (1, k) } else { (n, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements and the
    // strides above address only those elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds one `[C, H, W]` image into a `[C*kh*kw, Ho*Wo]` patch matrix.
pub fn im2col(image: &[f64], g: &Conv2dGeometry, cols: &mut [f64]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let plane = ho * wo;
    debug_assert_eq!(cols.len(), g.patch_len() * plane);
    let pad = g.padding as isize;
    for c in 0..g.channels {
        let src = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oi in 0..ho {
                    let ii = (oi * g.stride + ki) as isize - pad;
                    let out_row = &mut dst[oi * wo..(oi + 1) * wo];
                    if ii < 0 || ii >= g.height as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src_row = &src[ii as usize * g.width..(ii as usize + 1) * g.width];
                    for (oj, out) in out_row.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - pad;
                        *out = if jj < 0 || jj >= g.width as isize {
                            0.0
                        } else {
                            src_row[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
pub fn col2im_add(cols: &[f64], g: &Conv2dGeometry, image: &mut [f64]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let plane = ho * wo;
    let pad = g.padding as isize;
    for c in 0..g.channels {
        let dst = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oi in 0..ho {
                    let ii = (oi * g.stride + ki) as isize - pad;
                    if ii < 0 || ii >= g.height as isize {
                        continue;
                    }
                    let dst_row = &mut dst[ii as usize * g.width..(ii as usize + 1) * g.width];
                    for oj in 0..wo {
                        let jj = (oj * g.stride + kj) as isize - pad;
                        if jj >= 0 && jj < g.width as isize {
                            dst_row[jj as usize] += src[oi * wo + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Forward 2-D convolution (cross-correlation) without bias.
/// `x` is `[N, C, H, W]`, `w` is `[F, C, kh, kw]`; returns `[N, F, Ho, Wo]`.
pub fn conv2d_forward(x: &[f64], n: usize, w: &[f64], filters: usize, g: &Conv2dGeometry) -> Vec<f64> {
    let plane = g.out_height() * g.out_width();
    let in_len = g.channels * g.height * g.width;
    let mut out = vec![0.0; n * filters * plane];
    let mut cols = vec![0.0; g.patch_len() * plane];
    for s in 0..n {
        im2col(&x[s * in_len..(s + 1) * in_len], g, &mut cols);
        gemm(
            filters,
            g.patch_len(),
            plane,
            w,
            false,
            &cols,
            false,
            &mut out[s * filters * plane..(s + 1) * filters * plane],
            false,
        );
    }
    out
}

/// Gradients of [`conv2d_forward`]. Either output can be skipped.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    n: usize,
    w: &[f64],
    filters: usize,
    g: &Conv2dGeometry,
    upstream: &[f64],
    mut grad_x: Option<&mut [f64]>,
    mut grad_w: Option<&mut [f64]>,
) {
    let plane = g.out_height() * g.out_width();
    let in_len = g.channels * g.height * g.width;
    let patch = g.patch_len();
    let mut cols = vec![0.0; patch * plane];
    for s in 0..n {
        let up = &upstream[s * filters * plane..(s + 1) * filters * plane];
        if let Some(gw) = grad_w.as_deref_mut() {
            im2col(&x[s * in_len..(s + 1) * in_len], g, &mut cols);
            // dW += dY * cols^T
            gemm(filters, plane, patch, up, false, &cols, true, gw, true);
        }
        if let Some(gx) = grad_x.as_deref_mut() {
            // dcols = W^T * dY
            gemm(patch, filters, plane, w, true, up, false, &mut cols, false);
            col2im_add(&cols, g, &mut gx[s * in_len..(s + 1) * in_len]);
        }
    }
}

/// Max pooling over `[N, C, H, W]`. Returns the pooled values and, for each
/// output, the flat input index of the first maximal element in its window.
pub fn max_pool_forward(x: &[f64], n: usize, g: &Conv2dGeometry) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let mut out = Vec::with_capacity(n * g.channels * ho * wo);
    let mut argmax = Vec::with_capacity(out.capacity());
    for plane in 0..n * g.channels {
        let base = plane * g.height * g.width;
        for oi in 0..ho {
            for oj in 0..wo {
                let mut best_idx = usize::MAX;
                let mut best = f64::NEG_INFINITY;
                for ki in 0..g.kernel_h {
                    let ii = oi * g.stride + ki;
                    for kj in 0..g.kernel_w {
                        let jj = oj * g.stride + kj;
                        let idx = base + ii * g.width + jj;
                        if best_idx == usize::MAX || x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (out, argmax)
}

pub fn avg_pool_forward(x: &[f64], n: usize, g: &Conv2dGeometry) -> Vec<f64> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let area = (g.kernel_h * g.kernel_w) as f64;
    let mut out = Vec::with_capacity(n * g.channels * ho * wo);
    for plane in 0..n * g.channels {
        let base = plane * g.height * g.width;
        for oi in 0..ho {
            for oj in 0..wo {
                let mut acc = 0.0;
                for ki in 0..g.kernel_h {
                    let row = base + (oi * g.stride + ki) * g.width + oj * g.stride;
                    acc += x[row..row + g.kernel_w].iter().sum::<f64>();
                }
                out.push(acc / area);
            }
        }
    }
    out
}

pub fn avg_pool_backward(upstream: &[f64], n: usize, g: &Conv2dGeometry, grad_x: &mut [f64]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let area = (g.kernel_h * g.kernel_w) as f64;
    for plane in 0..n * g.channels {
        let base = plane * g.height * g.width;
        for oi in 0..ho {
            for oj in 0..wo {
                let share = upstream[(plane * ho + oi) * wo + oj] / area;
                for ki in 0..g.kernel_h {
                    let row = base + (oi * g.stride + ki) * g.width + oj * g.stride;
                    for v in &mut grad_x[row..row + g.kernel_w] {
                        *v += share;
                    }
                }
            }
        }
    }
}

/// Centre subtracted by [`crate::tensor::Tape::channel_normalize`].
#[derive(Debug, Clone, PartialEq)]
pub enum NormCenter {
    /// Mean of the presented batch.
    Batch,
    /// A per-channel constant.
    Fixed(Vec<f64>),
}

/// Divisor used by [`crate::tensor::Tape::channel_normalize`].
#[derive(Debug, Clone, PartialEq)]
pub enum NormScale {
    /// `sqrt(var_B + eps)` with the biased batch variance.
    BatchStd { eps: f64 },
    /// `(max_B - min_B + eps)^power`.
    BatchRange { eps: f64, power: f64 },
    /// A per-channel constant.
    Fixed(Vec<f64>),
}

/// Forward quantities kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ChannelNormSaved {
    pub batch_center: bool,
    pub batch_std: bool,
    /// Per-channel divisor.
    pub scale: Vec<f64>,
    /// `(argmin, argmax, power, range + eps)` per channel for range scaling.
    pub range: Option<(Vec<usize>, Vec<usize>, f64, Vec<f64>)>,
}

fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2..].iter().product())
}

/// Visits `(channel, flat_index_range)` runs in flat order.
fn for_each_run(shape: &[usize], mut f: impl FnMut(usize, std::ops::Range<usize>)) {
    let (n, c, inner) = channel_layout(shape);
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * inner;
            f(ch, base..base + inner);
        }
    }
}

pub fn channel_norm_forward(x: &[f64], shape: &[usize], center: &NormCenter, scale: &NormScale) -> (Vec<f64>, ChannelNormSaved) {
    let (n, c, inner) = channel_layout(shape);
    let m = (n * inner) as f64;
    let mean = match center {
        NormCenter::Fixed(v) => v.clone(),
        NormCenter::Batch => {
            let mut acc = vec![0.0; c];
            for_each_run(shape, |ch, r| {
                for &v in &x[r] {
                    acc[ch] += v;
                }
            });
            acc.iter_mut().for_each(|v| *v /= m);
            acc
        }
    };
    let mut range = None;
    let divisor = match scale {
        NormScale::Fixed(v) => v.clone(),
        NormScale::BatchStd { eps } => {
            let mut var = vec![0.0; c];
            for_each_run(shape, |ch, r| {
                for &v in &x[r] {
                    let d = v - mean[ch];
                    var[ch] += d * d;
                }
            });
            var.iter().map(|v| (v / m + eps).powf(0.5)).collect()
        }
        NormScale::BatchRange { eps, power } => {
            let mut lo = vec![f64::INFINITY; c];
            let mut hi = vec![f64::NEG_INFINITY; c];
            let mut arg_lo = vec![usize::MAX; c];
            let mut arg_hi = vec![usize::MAX; c];
            for_each_run(shape, |ch, r| {
                for i in r {
                    let v = x[i];
                    if arg_lo[ch] == usize::MAX || v < lo[ch] {
                        lo[ch] = v;
                        arg_lo[ch] = i;
                    }
                    if arg_hi[ch] == usize::MAX || v > hi[ch] {
                        hi[ch] = v;
                        arg_hi[ch] = i;
                    }
                }
            });
            let shifted: Vec<f64> = hi.iter().zip(&lo).map(|(h, l)| h - l + eps).collect();
            let divisor = shifted.iter().map(|r| r.powf(*power)).collect();
            range = Some((arg_lo, arg_hi, *power, shifted));
            divisor
        }
    };
    let mut out = vec![0.0; x.len()];
    for_each_run(shape, |ch, r| {
        let (mu, s) = (mean[ch], divisor[ch]);
        for i in r {
            out[i] = (x[i] - mu) / s;
        }
    });
    let saved = ChannelNormSaved {
        batch_center: matches!(center, NormCenter::Batch),
        batch_std: matches!(scale, NormScale::BatchStd { .. }),
        scale: divisor,
        range,
    };
    (out, saved)
}

/// Accumulates `d loss / d x` into `grad_x` given the forward output `y`
/// and upstream gradient `g`.
pub fn channel_norm_backward(shape: &[usize], y: &[f64], g: &[f64], saved: &ChannelNormSaved, grad_x: &mut [f64]) {
    let (n, c, inner) = channel_layout(shape);
    let m = (n * inner) as f64;
    let mut sum_g = vec![0.0; c];
    let mut sum_gy = vec![0.0; c];
    for_each_run(shape, |ch, r| {
        for i in r {
            sum_g[ch] += g[i];
            sum_gy[ch] += g[i] * y[i];
        }
    });
    for_each_run(shape, |ch, r| {
        let s = saved.scale[ch];
        let centre_term = if saved.batch_center { sum_g[ch] / m } else { 0.0 };
        let std_term = if saved.batch_std { sum_gy[ch] / m } else { 0.0 };
        for i in r {
            grad_x[i] += (g[i] - centre_term - y[i] * std_term) / s;
        }
    });
    if let Some((arg_lo, arg_hi, power, shifted)) = &saved.range {
        for ch in 0..c {
            let d_range = -power * sum_gy[ch] / shifted[ch];
            grad_x[arg_hi[ch]] += d_range;
            grad_x[arg_lo[ch]] -= d_range;
        }
    }
}
