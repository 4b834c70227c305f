//! Raw forward/backward math for the heavyweight ops.
//!
//! Convolution is im2col + GEMM. The column buffer is rebuilt in the backward
//! pass instead of being kept on the tape, which keeps node contexts small.

use crate::tensor::{Elem, Shape, Tensor};

pub struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvDims {
    pub fn infer(input: Shape, kernel: Shape, stride: usize, padding: usize) -> Option<Self> {
        let span_h = input.h + 2 * padding;
        let span_w = input.w + 2 * padding;
        if span_h < kernel.h || span_w < kernel.w {
            return None;
        }
        Some(ConvDims {
            batch: input.n,
            in_ch: input.c,
            out_ch: kernel.n,
            in_h: input.h,
            in_w: input.w,
            kh: kernel.h,
            kw: kernel.w,
            out_h: (span_h - kernel.h) / stride + 1,
            out_w: (span_w - kernel.w) / stride + 1,
            stride,
            padding,
        })
    }

    fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    fn cols(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }
}

/// Lower the input into a (batch*out_h*out_w) x (in_ch*kh*kw) patch matrix.
fn im2col<E: Elem>(input: &[E], d: &ConvDims, col: &mut [E]) {
    let k = d.cols();
    let mut row = 0usize;
    for n in 0..d.batch {
        let base_n = n * d.in_ch * d.in_h * d.in_w;
        for oy in 0..d.out_h {
            let iy0 = (oy * d.stride) as isize - d.padding as isize;
            for ox in 0..d.out_w {
                let ix0 = (ox * d.stride) as isize - d.padding as isize;
                let dst = &mut col[row * k..(row + 1) * k];
                let mut j = 0usize;
                for ci in 0..d.in_ch {
                    let base_c = base_n + ci * d.in_h * d.in_w;
                    for ky in 0..d.kh {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= d.in_h as isize {
                            for slot in dst[j..j + d.kw].iter_mut() {
                                *slot = E::zero();
                            }
                            j += d.kw;
                            continue;
                        }
                        let base_y = base_c + iy as usize * d.in_w;
                        for kx in 0..d.kw {
                            let ix = ix0 + kx as isize;
                            dst[j] = if ix < 0 || ix >= d.in_w as isize {
                                E::zero()
                            } else {
                                input[base_y + ix as usize]
                            };
                            j += 1;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add a patch-matrix gradient back onto the input layout.
fn col2im_add<E: Elem>(col: &[E], d: &ConvDims, grad_in: &mut [E]) {
    let k = d.cols();
    let mut row = 0usize;
    for n in 0..d.batch {
        let base_n = n * d.in_ch * d.in_h * d.in_w;
        for oy in 0..d.out_h {
            let iy0 = (oy * d.stride) as isize - d.padding as isize;
            for ox in 0..d.out_w {
                let ix0 = (ox * d.stride) as isize - d.padding as isize;
                let src = &col[row * k..(row + 1) * k];
                let mut j = 0usize;
                for ci in 0..d.in_ch {
                    let base_c = base_n + ci * d.in_h * d.in_w;
                    for ky in 0..d.kh {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= d.in_h as isize {
                            j += d.kw;
                            continue;
                        }
                        let base_y = base_c + iy as usize * d.in_w;
                        for kx in 0..d.kw {
                            let ix = ix0 + kx as isize;
                            if ix >= 0 && ix < d.in_w as isize {
                                grad_in[base_y + ix as usize] =
                                    grad_in[base_y + ix as usize] + src[j];
                            }
                            j += 1;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub fn conv2d_forward<E: Elem>(input: &[E], kernel: &[E], bias: &[E], d: &ConvDims) -> Vec<E> {
    let m = d.rows();
    let k = d.cols();
    let n = d.out_ch;
    let mut col = vec![E::zero(); m * k];
    im2col(input, d, &mut col);

    // out_mat(m, out_ch) = col(m, k) * kernel(out_ch, k)^T
    let mut out_mat = vec![E::zero(); m * n];
    unsafe {
        E::gemm(
            m,
            k,
            n,
            E::one(),
            col.as_ptr(),
            k as isize,
            1,
            kernel.as_ptr(),
            1,
            k as isize,
            E::zero(),
            out_mat.as_mut_ptr(),
            n as isize,
            1,
        );
    }

    // scatter (m, out_ch) rows into NCHW and add bias
    let plane = d.out_h * d.out_w;
    let mut out = vec![E::zero(); d.batch * n * plane];
    for b in 0..d.batch {
        for p in 0..plane {
            let row = &out_mat[(b * plane + p) * n..(b * plane + p + 1) * n];
            for (co, &v) in row.iter().enumerate() {
                out[(b * n + co) * plane + p] = v + bias[co];
            }
        }
    }
    out
}

pub struct ConvGrads<E: Elem> {
    pub input: Vec<E>,
    pub kernel: Vec<E>,
    pub bias: Vec<E>,
}

pub fn conv2d_backward<E: Elem>(
    input: &[E],
    kernel: &[E],
    grad_out: &[E],
    d: &ConvDims,
) -> ConvGrads<E> {
    let m = d.rows();
    let k = d.cols();
    let n = d.out_ch;
    let plane = d.out_h * d.out_w;

    // gather grad_out NCHW -> (m, out_ch)
    let mut gy = vec![E::zero(); m * n];
    for b in 0..d.batch {
        for co in 0..n {
            let src = &grad_out[(b * n + co) * plane..(b * n + co + 1) * plane];
            for (p, &v) in src.iter().enumerate() {
                gy[(b * plane + p) * n + co] = v;
            }
        }
    }

    let mut grad_bias = vec![E::zero(); n];
    for row in gy.chunks_exact(n) {
        for (co, &v) in row.iter().enumerate() {
            grad_bias[co] = grad_bias[co] + v;
        }
    }

    let mut col = vec![E::zero(); m * k];
    im2col(input, d, &mut col);

    // grad_kernel(out_ch, k) = gy(m, out_ch)^T * col(m, k)
    let mut grad_kernel = vec![E::zero(); n * k];
    unsafe {
        E::gemm(
            n,
            m,
            k,
            E::one(),
            gy.as_ptr(),
            1,
            n as isize,
            col.as_ptr(),
            k as isize,
            1,
            E::zero(),
            grad_kernel.as_mut_ptr(),
            k as isize,
            1,
        );
    }

    // grad_col(m, k) = gy(m, out_ch) * kernel(out_ch, k)
    let mut grad_col = vec![E::zero(); m * k];
    unsafe {
        E::gemm(
            m,
            n,
            k,
            E::one(),
            gy.as_ptr(),
            n as isize,
            1,
            kernel.as_ptr(),
            k as isize,
            1,
            E::zero(),
            grad_col.as_mut_ptr(),
            k as isize,
            1,
        );
    }
    let mut grad_input = vec![E::zero(); input.len()];
    col2im_add(&grad_col, d, &mut grad_input);

    ConvGrads {
        input: grad_input,
        kernel: grad_kernel,
        bias: grad_bias,
    }
}

/// 2x2 max pool with stride 2. Returns pooled values and the flat input index
/// of each window maximum (first occurrence wins on ties).
pub fn maxpool2_forward<E: Elem>(input: &[E], shape: Shape) -> (Vec<E>, Vec<u32>) {
    let (oh, ow) = (shape.h / 2, shape.w / 2);
    let mut out = Vec::with_capacity(shape.n * shape.c * oh * ow);
    let mut argmax = Vec::with_capacity(out.capacity());
    for n in 0..shape.n {
        for c in 0..shape.c {
            let base = (n * shape.c + c) * shape.h * shape.w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let i00 = base + (2 * oy) * shape.w + 2 * ox;
                    let idx = [i00, i00 + 1, i00 + shape.w, i00 + shape.w + 1];
                    let mut best = idx[0];
                    for &i in &idx[1..] {
                        if input[i] > input[best] {
                            best = i;
                        }
                    }
                    out.push(input[best]);
                    argmax.push(best as u32);
                }
            }
        }
    }
    (out, argmax)
}

pub fn maxpool2_backward<E: Elem>(grad_out: &[E], argmax: &[u32], in_len: usize) -> Vec<E> {
    let mut grad_in = vec![E::zero(); in_len];
    for (&g, &i) in grad_out.iter().zip(argmax) {
        grad_in[i as usize] = grad_in[i as usize] + g;
    }
    grad_in
}

pub fn upsample_nearest2_forward<E: Elem>(input: &[E], shape: Shape) -> Vec<E> {
    let (oh, ow) = (shape.h * 2, shape.w * 2);
    let mut out = vec![E::zero(); shape.n * shape.c * oh * ow];
    for nc in 0..shape.n * shape.c {
        let src = &input[nc * shape.h * shape.w..(nc + 1) * shape.h * shape.w];
        let dst = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
        for y in 0..shape.h {
            for x in 0..shape.w {
                let v = src[y * shape.w + x];
                let o = (2 * y) * ow + 2 * x;
                dst[o] = v;
                dst[o + 1] = v;
                dst[o + ow] = v;
                dst[o + ow + 1] = v;
            }
        }
    }
    out
}

pub fn upsample_nearest2_backward<E: Elem>(grad_out: &[E], in_shape: Shape) -> Vec<E> {
    let (oh, ow) = (in_shape.h * 2, in_shape.w * 2);
    let mut grad_in = vec![E::zero(); in_shape.numel()];
    for nc in 0..in_shape.n * in_shape.c {
        let src = &grad_out[nc * oh * ow..(nc + 1) * oh * ow];
        let dst = &mut grad_in[nc * in_shape.h * in_shape.w..(nc + 1) * in_shape.h * in_shape.w];
        for y in 0..in_shape.h {
            for x in 0..in_shape.w {
                let o = (2 * y) * ow + 2 * x;
                dst[y * in_shape.w + x] = src[o] + src[o + 1] + src[o + ow] + src[o + ow + 1];
            }
        }
    }
    grad_in
}

/// Per-channel running statistics for batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<E: Elem> {
    pub mean: Vec<E>,
    pub var: Vec<E>,
}

impl<E: Elem> RunningStats<E> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![E::zero(); channels],
            var: vec![E::one(); channels],
        }
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Saved context for the batch-norm backward pass: per-channel mean and
/// 1/sqrt(var+eps) actually used in the forward (batch stats in train mode,
/// running stats in eval mode), plus whether batch stats were used.
pub struct BnSaved<E: Elem> {
    pub mean: Vec<E>,
    pub inv_std: Vec<E>,
    pub train: bool,
}

pub fn batch_norm_forward<E: Elem>(
    input: &[E],
    shape: Shape,
    gamma: &[E],
    beta: &[E],
    train: bool,
    stats: &mut RunningStats<E>,
) -> (Vec<E>, BnSaved<E>) {
    let count = shape.n * shape.h * shape.w;
    let plane = shape.h * shape.w;
    let eps = E::from_f64(BN_EPS);
    let mut mean = vec![E::zero(); shape.c];
    let mut inv_std = vec![E::zero(); shape.c];

    if train {
        let inv_count = E::one() / E::from_f64(count as f64);
        for c in 0..shape.c {
            let mut sum = E::zero();
            let mut sq = E::zero();
            for n in 0..shape.n {
                let base = (n * shape.c + c) * plane;
                for &v in &input[base..base + plane] {
                    sum = sum + v;
                    sq = sq + v * v;
                }
            }
            let m = sum * inv_count;
            let var = (sq * inv_count - m * m).max(E::zero());
            mean[c] = m;
            inv_std[c] = E::one() / (var + eps).sqrt();
            let mom = E::from_f64(BN_MOMENTUM);
            stats.mean[c] = mom * stats.mean[c] + (E::one() - mom) * m;
            stats.var[c] = mom * stats.var[c] + (E::one() - mom) * var;
        }
    } else {
        for c in 0..shape.c {
            mean[c] = stats.mean[c];
            inv_std[c] = E::one() / (stats.var[c] + eps).sqrt();
        }
    }

    let mut out = vec![E::zero(); input.len()];
    for n in 0..shape.n {
        for c in 0..shape.c {
            let base = (n * shape.c + c) * plane;
            let scale = gamma[c] * inv_std[c];
            let shift = beta[c] - mean[c] * scale;
            for i in base..base + plane {
                out[i] = input[i] * scale + shift;
            }
        }
    }
    (out, BnSaved { mean, inv_std, train })
}

pub struct BnGrads<E: Elem> {
    pub input: Vec<E>,
    pub gamma: Vec<E>,
    pub beta: Vec<E>,
}

pub fn batch_norm_backward<E: Elem>(
    input: &[E],
    shape: Shape,
    gamma: &[E],
    saved: &BnSaved<E>,
    grad_out: &[E],
) -> BnGrads<E> {
    let count = shape.n * shape.h * shape.w;
    let plane = shape.h * shape.w;
    let mut grad_in = vec![E::zero(); input.len()];
    let mut grad_gamma = vec![E::zero(); shape.c];
    let mut grad_beta = vec![E::zero(); shape.c];

    for c in 0..shape.c {
        let m = saved.mean[c];
        let istd = saved.inv_std[c];
        let mut sum_dy = E::zero();
        let mut sum_dy_xhat = E::zero();
        for n in 0..shape.n {
            let base = (n * shape.c + c) * plane;
            for i in base..base + plane {
                let xhat = (input[i] - m) * istd;
                sum_dy = sum_dy + grad_out[i];
                sum_dy_xhat = sum_dy_xhat + grad_out[i] * xhat;
            }
        }
        grad_gamma[c] = sum_dy_xhat;
        grad_beta[c] = sum_dy;

        if saved.train {
            // batch statistics depend on the input, so the full formula applies
            let inv_count = E::one() / E::from_f64(count as f64);
            let k = gamma[c] * istd * inv_count;
            let cnt = E::from_f64(count as f64);
            for n in 0..shape.n {
                let base = (n * shape.c + c) * plane;
                for i in base..base + plane {
                    let xhat = (input[i] - m) * istd;
                    grad_in[i] = k * (cnt * grad_out[i] - sum_dy - xhat * sum_dy_xhat);
                }
            }
        } else {
            let k = gamma[c] * istd;
            for n in 0..shape.n {
                let base = (n * shape.c + c) * plane;
                for i in base..base + plane {
                    grad_in[i] = k * grad_out[i];
                }
            }
        }
    }

    BnGrads {
        input: grad_in,
        gamma: grad_gamma,
        beta: grad_beta,
    }
}

/// Naive quadruple-loop convolution used as an independent oracle in tests.
pub fn conv2d_reference<E: Elem>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    bias: &[E],
    stride: usize,
    padding: usize,
) -> Tensor<E> {
    let d = ConvDims::infer(input.shape(), kernel.shape(), stride, padding).unwrap();
    let mut out = vec![E::zero(); d.batch * d.out_ch * d.out_h * d.out_w];
    let x = input.data();
    let w = kernel.data();
    for n in 0..d.batch {
        for co in 0..d.out_ch {
            for oy in 0..d.out_h {
                for ox in 0..d.out_w {
                    let mut acc = bias[co];
                    for ci in 0..d.in_ch {
                        for ky in 0..d.kh {
                            let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                            if iy < 0 || iy >= d.in_h as isize {
                                continue;
                            }
                            for kx in 0..d.kw {
                                let ix = (ox * d.stride + kx) as isize - d.padding as isize;
                                if ix < 0 || ix >= d.in_w as isize {
                                    continue;
                                }
                                let xi = ((n * d.in_ch + ci) * d.in_h + iy as usize) * d.in_w
                                    + ix as usize;
                                let wi = ((co * d.in_ch + ci) * d.kh + ky) * d.kw + kx;
                                acc = acc + x[xi] * w[wi];
                            }
                        }
                    }
                    out[((n * d.out_ch + co) * d.out_h + oy) * d.out_w + ox] = acc;
                }
            }
        }
    }
    Tensor::new(Shape::new(d.batch, d.out_ch, d.out_h, d.out_w), out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rand_vec(rng: &mut StdRng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn conv_matches_reference_oracle() {
        let mut rng = StdRng::seed_from_u64(11);
        let input =
            Tensor::new(Shape::new(1, 2, 5, 5), rand_vec(&mut rng, 50)).unwrap();
        let kernel =
            Tensor::new(Shape::new(3, 2, 3, 3), rand_vec(&mut rng, 54)).unwrap();
        let bias = rand_vec(&mut rng, 3);
        let d = ConvDims::infer(input.shape(), kernel.shape(), 1, 1).unwrap();
        let fast = conv2d_forward(input.data(), kernel.data(), &bias, &d);
        let slow = conv2d_reference(&input, &kernel, &bias, 1, 1);
        for (a, b) in fast.iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn conv_strided_output_size() {
        let input = Tensor::<f32>::zeros(Shape::new(2, 3, 7, 9));
        let kernel = Tensor::<f32>::zeros(Shape::new(4, 3, 3, 3));
        let d = ConvDims::infer(input.shape(), kernel.shape(), 2, 1).unwrap();
        assert_eq!((d.out_h, d.out_w), (4, 5));
    }

    #[test]
    fn maxpool_picks_first_on_ties() {
        let input = Tensor::new(Shape::new(1, 1, 2, 2), vec![7.0f32; 4]).unwrap();
        let (out, arg) = maxpool2_forward(input.data(), input.shape());
        assert_eq!(out, vec![7.0]);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn maxpool_matches_window_scan() {
        let mut rng = StdRng::seed_from_u64(3);
        let shape = Shape::new(1, 3, 8, 8);
        let data: Vec<f64> = rand_vec(&mut rng, shape.numel());
        let (out, _) = maxpool2_forward(&data, shape);
        for c in 0..3 {
            for oy in 0..4 {
                for ox in 0..4 {
                    let mut best = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let i = (c * 8 + 2 * oy + dy) * 8 + 2 * ox + dx;
                            best = best.max(data[i]);
                        }
                    }
                    assert_eq!(out[(c * 4 + oy) * 4 + ox], best);
                }
            }
        }
    }

    #[test]
    fn upsample_then_average_is_identity() {
        let mut rng = StdRng::seed_from_u64(9);
        let shape = Shape::new(2, 2, 3, 3);
        let data = rand_vec(&mut rng, shape.numel());
        let up = upsample_nearest2_forward(&data, shape);
        // average each 2x2 block back down
        let (oh, ow) = (shape.h * 2, shape.w * 2);
        for nc in 0..shape.n * shape.c {
            for y in 0..shape.h {
                for x in 0..shape.w {
                    let o = nc * oh * ow + (2 * y) * ow + 2 * x;
                    let avg = (up[o] + up[o + 1] + up[o + ow] + up[o + ow + 1]) / 4.0;
                    assert!((avg - data[nc * 9 + y * shape.w + x]).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn batch_norm_normalizes_in_train_mode() {
        let mut rng = StdRng::seed_from_u64(5);
        let shape = Shape::new(4, 3, 6, 6);
        let data: Vec<f64> = (0..shape.numel())
            .map(|_| rng.gen_range(-2.0..5.0))
            .collect();
        let gamma = vec![2.0; 3];
        let beta = vec![5.0; 3];
        let mut stats = RunningStats::new(3);
        let (out, _) = batch_norm_forward(&data, shape, &gamma, &beta, true, &mut stats);
        let plane = 36;
        for c in 0..3 {
            let mut vals = Vec::new();
            for n in 0..4 {
                let base = (n * 3 + c) * plane;
                vals.extend_from_slice(&out[base..base + plane]);
            }
            let m: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let v: f64 = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!((m - 5.0).abs() < 1e-5, "mean {m}");
            assert!((v.sqrt() - 2.0).abs() < 1e-3, "std {}", v.sqrt());
        }
    }

    #[test]
    fn batch_norm_eval_matches_closed_form() {
        let shape = Shape::new(1, 2, 1, 2);
        let data = vec![0.3f64, -1.2, 2.0, 0.5];
        let gamma = vec![1.5, 0.5];
        let beta = vec![0.1, -0.2];
        let mut stats = RunningStats {
            mean: vec![0.25, -0.5],
            var: vec![1.9, 0.3],
        };
        let (out, _) = batch_norm_forward(&data, shape, &gamma, &beta, false, &mut stats);
        for c in 0..2 {
            for x in 0..2 {
                let v = data[c * 2 + x];
                let expect =
                    (v - stats.mean[c]) / (stats.var[c] + BN_EPS).sqrt() * gamma[c] + beta[c];
                assert!((out[c * 2 + x] - expect).abs() < 1e-12);
            }
        }
    }
}
