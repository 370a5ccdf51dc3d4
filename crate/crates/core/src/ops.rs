//! Primitive tensor operations.
//!
//! Every operation is a pure function of its inputs. Convolutions use zero
//! padding; out-of-range taps read zero.

use crate::counter::OpCounter;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Epsilon for [`l2_normalize_rows`] when no other value is given.
pub const L2_EPS: f64 = 1e-12;

/// Epsilon used by [`group_norm`] in the pyramid.
pub const GROUP_NORM_EPS: f64 = 1e-5;

/// A stride-one 2-D convolution: weights `out × in × K × K`, bias `out`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    weights: Tensor,
    bias: Tensor,
    dilation: usize,
    padding: usize,
}

impl ConvSpec {
    /// Convolution with "same" padding `dilation·(K−1)/2`.
    pub fn new(weights: Tensor, bias: Tensor, dilation: usize) -> Result<Self> {
        let k = match weights.dims() {
            [_, _, k, _] => *k,
            d => return Err(Error::shape("conv_spec", "out × in × K × K weights", format!("{d:?}"))),
        };
        Self::with_padding(weights, bias, dilation, dilation * (k.saturating_sub(1)) / 2)
    }

    pub fn with_padding(weights: Tensor, bias: Tensor, dilation: usize, padding: usize) -> Result<Self> {
        let (out_ch, _, kh, kw) = weights.nchw("conv_spec")?;
        if kh != kw {
            return Err(Error::invalid("conv_spec", format!("kernel must be square, got {kh}×{kw}")));
        }
        if kh % 2 == 0 {
            return Err(Error::invalid("conv_spec", format!("kernel size must be odd, got {kh}")));
        }
        if dilation == 0 {
            return Err(Error::invalid("conv_spec", "dilation must be positive"));
        }
        if bias.dims() != [out_ch] {
            return Err(Error::shape("conv_spec", format!("bias [{out_ch}]"), format!("{:?}", bias.dims())));
        }
        Ok(ConvSpec {
            weights,
            bias,
            dilation,
            padding,
        })
    }

    /// Zero weights and bias.
    pub fn zeros(out_ch: usize, in_ch: usize, k: usize, dilation: usize) -> Result<Self> {
        Self::new(Tensor::zeros(&[out_ch, in_ch, k, k]), Tensor::zeros(&[out_ch]), dilation)
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn out_channels(&self) -> usize {
        self.weights.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.dims()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.weights.dims()[2]
    }

    /// Output extent for an input extent, `None` when the window does not fit.
    pub fn output_extent(&self, input: usize) -> Option<usize> {
        (input + 2 * self.padding).checked_sub(self.dilation * (self.kernel_size() - 1))
    }
}

/// Stride-one convolution with zero padding.
pub fn conv2d(input: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    conv2d_counted(input, spec, &mut OpCounter::new())
}

pub fn conv2d_counted(input: &Tensor, spec: &ConvSpec, counter: &mut OpCounter) -> Result<Tensor> {
    let (n, c_in, h, w) = input.nchw("conv2d")?;
    if c_in != spec.in_channels() {
        return Err(Error::shape("conv2d", format!("{} input channels", spec.in_channels()), c_in));
    }
    let (h_out, w_out) = match (spec.output_extent(h), spec.output_extent(w)) {
        (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
        _ => return Err(Error::invalid("conv2d", format!("{h}×{w} input too small for kernel"))),
    };
    let c_out = spec.out_channels();
    let k = spec.kernel_size();
    let d = spec.dilation;
    let pad = spec.padding as isize;
    let x = input.data();
    let wt = spec.weights.data();
    let bias = spec.bias.data();

    let mut out = vec![0.0; n * c_out * h_out * w_out];
    for b in 0..n {
        for o in 0..c_out {
            let plane = &mut out[(b * c_out + o) * h_out * w_out..][..h_out * w_out];
            plane.fill(bias[o]);
            for ci in 0..c_in {
                let src = &x[(b * c_in + ci) * h * w..][..h * w];
                for kh in 0..k {
                    for kw in 0..k {
                        let wv = wt[((o * c_in + ci) * k + kh) * k + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        let dy = (kh * d) as isize - pad;
                        let dx = (kw * d) as isize - pad;
                        // ow range with 0 <= ow + dx < w
                        let ow_lo = (-dx).max(0) as usize;
                        let ow_hi = (w as isize - dx).min(w_out as isize);
                        if ow_hi <= ow_lo as isize {
                            continue;
                        }
                        let ow_hi = ow_hi as usize;
                        for oh in 0..h_out {
                            let ih = oh as isize + dy;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let row = &src[ih as usize * w..][..w];
                            let dst = &mut plane[oh * w_out..][..w_out];
                            for ow in ow_lo..ow_hi {
                                dst[ow] += wv * row[(ow as isize + dx) as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    counter.record_macs((n * c_out * c_in * k * k * h_out * w_out) as u64);
    let dtype = input.dtype().promote(spec.weights.dtype());
    Ok(Tensor::from_raw(dtype, vec![n, c_out, h_out, w_out], out))
}

/// Pointwise operation kinds. Binary kinds carry their second operand.
#[derive(Debug, Clone, Copy)]
pub enum Elementwise<'a> {
    Relu,
    Sigmoid,
    Scale(f64),
    Add(&'a Tensor),
    Mul(&'a Tensor),
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn elementwise(input: &Tensor, kind: Elementwise<'_>) -> Result<Tensor> {
    let binary = |other: &Tensor, f: fn(f64, f64) -> f64| -> Result<Tensor> {
        if input.dims() != other.dims() {
            return Err(Error::shape(
                "elementwise",
                format!("{:?}", input.dims()),
                format!("{:?}", other.dims()),
            ));
        }
        let data = input.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor::from_raw(
            input.dtype().promote(other.dtype()),
            input.dims().to_vec(),
            data,
        ))
    };
    match kind {
        Elementwise::Relu => Ok(input.map(|v| v.max(0.0))),
        Elementwise::Sigmoid => Ok(input.map(sigmoid)),
        Elementwise::Scale(alpha) => Ok(input.map(|v| alpha * v)),
        Elementwise::Add(other) => binary(other, |a, b| a + b),
        Elementwise::Mul(other) => binary(other, |a, b| a * b),
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    elementwise(a, Elementwise::Add(b))
}

/// Dense matrix product of two 2-D tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul_counted(a, b, &mut OpCounter::new())
}

/// [`matmul`] recording `rows(a)·cols(b)·inner` MACs.
pub fn matmul_counted(a: &Tensor, b: &Tensor, counter: &mut OpCounter) -> Result<Tensor> {
    let (m, k) = a.matrix_dims("matmul")?;
    let (k2, n) = b.matrix_dims("matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", format!("inner extent {k}"), k2));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    counter.record_macs((m * n * k) as u64);
    Ok(Tensor::from_raw(a.dtype().promote(b.dtype()), vec![m, n], out))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.matrix_dims("transpose")?;
    let d = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Ok(Tensor::from_raw(a.dtype(), vec![n, m], out))
}

/// Row-wise softmax, stabilized by subtracting each row's maximum.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let (_, n) = logits.matrix_dims("softmax_rows")?;
    if logits.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "softmax_rows" });
    }
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(n) {
        softmax_in_place(row);
    }
    Ok(logits.with_data(out))
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Divides each row by its Euclidean norm plus `eps`; zero rows stay zero.
pub fn l2_normalize_rows(x: &Tensor, eps: f64) -> Result<Tensor> {
    let (_, n) = x.matrix_dims("l2_normalize_rows")?;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        let inv = 1.0 / (row.iter().map(|v| v * v).sum::<f64>().sqrt() + eps);
        for v in row {
            *v *= inv;
        }
    }
    Ok(x.with_data(out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rescale {
    NearestUp2x,
    MaxPoolDown2x,
}

pub fn rescale(input: &Tensor, mode: Rescale) -> Result<Tensor> {
    let (n, c, h, w) = input.nchw("rescale")?;
    let x = input.data();
    match mode {
        Rescale::NearestUp2x => {
            let (ho, wo) = (2 * h, 2 * w);
            let mut out = vec![0.0; n * c * ho * wo];
            for p in 0..n * c {
                let src = &x[p * h * w..][..h * w];
                let dst = &mut out[p * ho * wo..][..ho * wo];
                for oh in 0..ho {
                    for ow in 0..wo {
                        dst[oh * wo + ow] = src[(oh / 2) * w + ow / 2];
                    }
                }
            }
            Ok(Tensor::from_raw(input.dtype(), vec![n, c, ho, wo], out))
        }
        Rescale::MaxPoolDown2x => {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::invalid("rescale", format!("maxpool needs even extents, got {h}×{w}")));
            }
            let (ho, wo) = (h / 2, w / 2);
            let mut out = vec![0.0; n * c * ho * wo];
            for p in 0..n * c {
                let src = &x[p * h * w..][..h * w];
                let dst = &mut out[p * ho * wo..][..ho * wo];
                for oh in 0..ho {
                    for ow in 0..wo {
                        let (r, s) = (2 * oh, 2 * ow);
                        dst[oh * wo + ow] = src[r * w + s]
                            .max(src[r * w + s + 1])
                            .max(src[(r + 1) * w + s])
                            .max(src[(r + 1) * w + s + 1]);
                    }
                }
            }
            Ok(Tensor::from_raw(input.dtype(), vec![n, c, ho, wo], out))
        }
    }
}

/// Concatenates 4-D maps along channels, in list order.
pub fn channel_concat(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::invalid("channel_concat", "empty input list"))?;
    let (n, _, h, w) = first.nchw("channel_concat")?;
    let mut total_c = 0;
    let mut dtype = first.dtype();
    for t in inputs {
        let (tn, tc, th, tw) = t.nchw("channel_concat")?;
        if (tn, th, tw) != (n, h, w) {
            return Err(Error::shape(
                "channel_concat",
                format!("batch {n}, spatial {h}×{w}"),
                format!("batch {tn}, spatial {th}×{tw}"),
            ));
        }
        total_c += tc;
        dtype = dtype.promote(t.dtype());
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * total_c * plane);
    for b in 0..n {
        for t in inputs {
            let tc = t.dims()[1];
            out.extend_from_slice(&t.data()[b * tc * plane..(b + 1) * tc * plane]);
        }
    }
    Ok(Tensor::from_raw(dtype, vec![n, total_c, h, w], out))
}

/// Two-channel map of the per-position channel mean (0) and maximum (1).
pub fn channel_stats(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.nchw("channel_stats")?;
    let plane = h * w;
    let x = input.data();
    let mut out = vec![0.0; n * 2 * plane];
    for b in 0..n {
        let (mean, max) = out[b * 2 * plane..(b + 1) * 2 * plane].split_at_mut(plane);
        max.fill(f64::NEG_INFINITY);
        for ci in 0..c {
            let src = &x[(b * c + ci) * plane..][..plane];
            for p in 0..plane {
                mean[p] += src[p];
                max[p] = max[p].max(src[p]);
            }
        }
        for m in mean.iter_mut() {
            *m /= c as f64;
        }
    }
    Ok(Tensor::from_raw(input.dtype(), vec![n, 2, h, w], out))
}

/// Bilinear read of one `h × w` plane at fractional `(y, x)`. Corners
/// outside the plane contribute zero.
#[inline]
pub fn sample_plane(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y0 = y.floor();
    let x0 = x.floor();
    let ly = y - y0;
    let lx = x - x0;
    let (y0, x0) = (y0 as isize, x0 as isize);
    let read = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            0.0
        } else {
            plane[r as usize * w + c as usize]
        }
    };
    (1.0 - ly) * (1.0 - lx) * read(y0, x0)
        + (1.0 - ly) * lx * read(y0, x0 + 1)
        + ly * (1.0 - lx) * read(y0 + 1, x0)
        + ly * lx * read(y0 + 1, x0 + 1)
}

/// Samples every channel of `input` (`B × C × H × W`) at the positions in
/// `coords` (`B × 2 × Ho × Wo`, channel 0 = y, channel 1 = x).
pub fn bilinear_sample(input: &Tensor, coords: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.nchw("bilinear_sample")?;
    let (cn, two, ho, wo) = coords.nchw("bilinear_sample")?;
    if cn != n || two != 2 {
        return Err(Error::shape(
            "bilinear_sample",
            format!("coords [{n}, 2, Ho, Wo]"),
            format!("{:?}", coords.dims()),
        ));
    }
    let x = input.data();
    let cd = coords.data();
    let plane_out = ho * wo;
    let mut out = vec![0.0; n * c * plane_out];
    for b in 0..n {
        let ys = &cd[b * 2 * plane_out..][..plane_out];
        let xs = &cd[(b * 2 + 1) * plane_out..][..plane_out];
        for ci in 0..c {
            let src = &x[(b * c + ci) * h * w..][..h * w];
            let dst = &mut out[(b * c + ci) * plane_out..][..plane_out];
            for p in 0..plane_out {
                dst[p] = sample_plane(src, h, w, ys[p], xs[p]);
            }
        }
    }
    Ok(Tensor::from_raw(input.dtype(), vec![n, c, ho, wo], out))
}

/// Group normalization parameters: per-channel affine `gamma`, `beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupNorm {
    pub groups: usize,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl GroupNorm {
    /// Unit scale, zero shift.
    pub fn identity(channels: usize, groups: usize) -> Self {
        GroupNorm {
            groups,
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            eps: GROUP_NORM_EPS,
        }
    }
}

pub fn group_norm(input: &Tensor, norm: &GroupNorm) -> Result<Tensor> {
    let (n, c, h, w) = input.nchw("group_norm")?;
    let g = norm.groups;
    if g == 0 || c % g != 0 {
        return Err(Error::invalid("group_norm", format!("{c} channels not divisible into {g} groups")));
    }
    if norm.gamma.dims() != [c] || norm.beta.dims() != [c] {
        return Err(Error::shape(
            "group_norm",
            format!("affine [{c}]"),
            format!("{:?} / {:?}", norm.gamma.dims(), norm.beta.dims()),
        ));
    }
    let per_group = (c / g) * h * w;
    let x = input.data();
    let (gamma, beta) = (norm.gamma.data(), norm.beta.data());
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for gi in 0..g {
            let start = (b * c + gi * (c / g)) * h * w;
            let chunk = &x[start..start + per_group];
            let mean = chunk.iter().sum::<f64>() / per_group as f64;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per_group as f64;
            let inv = 1.0 / (var + norm.eps).sqrt();
            for (i, v) in chunk.iter().enumerate() {
                let ch = gi * (c / g) + i / (h * w);
                out[start + i] = (v - mean) * inv * gamma[ch] + beta[ch];
            }
        }
    }
    Ok(Tensor::from_raw(input.dtype(), input.dims().to_vec(), out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::Seeded;
    use proptest::prelude::*;

    fn t(dims: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(dims, data.to_vec()).unwrap()
    }

    /// Sliding-window reference with explicit bounds checks.
    fn conv_oracle(x: &Tensor, wt: &Tensor, bias: &[f64], d: usize, pad: usize) -> Tensor {
        let (n, ci, h, w) = x.nchw("o").unwrap();
        let (co, _, k, _) = wt.nchw("o").unwrap();
        let ho = h + 2 * pad - d * (k - 1);
        let wo = w + 2 * pad - d * (k - 1);
        let mut out = Vec::new();
        for b in 0..n {
            for o in 0..co {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = bias[o];
                        for c in 0..ci {
                            for kh in 0..k {
                                for kw in 0..k {
                                    let ih = (oh + kh * d) as i64 - pad as i64;
                                    let iw = (ow + kw * d) as i64 - pad as i64;
                                    if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < w {
                                        acc += wt.at4(o, c, kh, kw) * x.at4(b, c, ih as usize, iw as usize);
                                    }
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
        Tensor::new(&[n, co, ho, wo], out).unwrap()
    }

    #[test]
    fn conv_identity_and_constant() {
        let x = t(&[1, 1, 2, 2], &[1.0, -2.0, 3.5, 4.0]);
        let id = ConvSpec::new(t(&[1, 1, 1, 1], &[1.0]), t(&[1], &[0.0]), 1).unwrap();
        assert_eq!(conv2d(&x, &id).unwrap(), x);

        let c = ConvSpec::new(Tensor::zeros(&[1, 1, 3, 3]), t(&[1], &[0.5]), 1).unwrap();
        let y = conv2d(&x, &c).unwrap();
        assert_eq!(y.dims(), &[1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn conv_matches_sliding_window_oracle() {
        let mut rng = Seeded::new(7);
        let x = rng.uniform(&[1, 1, 7, 7], 1.0);
        let w = rng.uniform(&[1, 1, 3, 3], 1.0);
        let spec = ConvSpec::new(w.clone(), t(&[1], &[0.25]), 2).unwrap();
        let got = conv2d(&x, &spec).unwrap();
        let want = conv_oracle(&x, &w, &[0.25], 2, 2);
        assert!(got.max_abs_diff(&want).unwrap() <= 1e-12);

        // multi-channel, explicit padding that shrinks the output
        let x = rng.uniform(&[2, 3, 6, 5], 1.0);
        let w = rng.uniform(&[4, 3, 3, 3], 1.0);
        let b = rng.uniform(&[4], 1.0);
        let spec = ConvSpec::with_padding(w.clone(), b.clone(), 1, 0).unwrap();
        let got = conv2d(&x, &spec).unwrap();
        assert_eq!(got.dims(), &[2, 4, 4, 3]);
        let want = conv_oracle(&x, &w, b.data(), 1, 0);
        assert!(got.max_abs_diff(&want).unwrap() <= 1e-12);
    }

    #[test]
    fn conv_rejects_bad_specs() {
        assert!(ConvSpec::zeros(1, 1, 2, 1).is_err());
        assert!(ConvSpec::new(Tensor::zeros(&[2, 1, 3, 3]), Tensor::zeros(&[3]), 1).is_err());
        let spec = ConvSpec::zeros(1, 2, 3, 1).unwrap();
        let err = conv2d(&Tensor::zeros(&[1, 3, 4, 4]), &spec).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn conv_counts_macs() {
        let spec = ConvSpec::zeros(4, 3, 1, 1).unwrap();
        let mut c = OpCounter::new();
        conv2d_counted(&Tensor::zeros(&[1, 3, 2, 5]), &spec, &mut c).unwrap();
        assert_eq!(c.macs(), 4 * 3 * 10);
    }

    #[test]
    fn elementwise_cases() {
        let x = t(&[3], &[-1.0, 0.0, 2.0]);
        assert_eq!(elementwise(&x, Elementwise::Relu).unwrap().data(), &[0.0, 0.0, 2.0]);
        assert_eq!(elementwise(&t(&[1], &[0.0]), Elementwise::Sigmoid).unwrap().data(), &[0.5]);
        assert_eq!(elementwise(&x, Elementwise::Add(&Tensor::zeros(&[3]))).unwrap(), x);
        assert_eq!(elementwise(&x, Elementwise::Scale(2.0)).unwrap().data(), &[-2.0, 0.0, 4.0]);
        assert_eq!(
            elementwise(&x, Elementwise::Mul(&x)).unwrap().data(),
            &[1.0, 0.0, 4.0]
        );
        assert!(elementwise(&x, Elementwise::Add(&Tensor::zeros(&[2]))).is_err());
        let s = elementwise(&t(&[2], &[-800.0, 800.0]), Elementwise::Sigmoid).unwrap();
        assert!(s.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn matmul_cases() {
        let mut rng = Seeded::new(3);
        let m = rng.uniform(&[3, 4], 1.0);
        assert_eq!(matmul(&Tensor::eye(3), &m).unwrap(), m);
        assert!(matmul(&Tensor::zeros(&[2, 3]), &m).unwrap().data().iter().all(|&v| v == 0.0));

        let b = rng.uniform(&[4, 2], 1.0);
        let mut c = OpCounter::new();
        let got = matmul_counted(&m, &b, &mut c).unwrap();
        assert_eq!(c.macs(), 3 * 2 * 4);
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for p in 0..4 {
                    acc += m.at2(i, p) * b.at2(p, j);
                }
                assert_eq!(got.at2(i, j), acc);
            }
        }
        assert!(matmul(&m, &m).is_err());
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax_rows(&t(&[1, 1], &[7.0])).unwrap().data(), &[1.0]);
        let p = softmax_rows(&t(&[1, 2], &[0.0, 2f64.ln()])).unwrap();
        assert!((p.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((p.data()[1] - 2.0 / 3.0).abs() < 1e-15);
        let u = softmax_rows(&Tensor::full(&[1, 5], 3.0)).unwrap();
        assert!(u.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
        let huge = t(&[2, 3], &[1e4, -1e4, 0.0, -1e4, -1e4, 1e4]);
        let p = softmax_rows(&huge).unwrap();
        for row in p.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn l2_normalize_cases() {
        let y = l2_normalize_rows(&t(&[1, 2], &[3.0, 4.0]), L2_EPS).unwrap();
        assert!((y.data()[0] - 0.6).abs() < 1e-12 && (y.data()[1] - 0.8).abs() < 1e-12);
        assert_eq!(l2_normalize_rows(&Tensor::zeros(&[1, 3]), L2_EPS).unwrap().data(), &[0.0; 3]);
        let r = Seeded::new(11).uniform(&[1, 9], 2.0);
        let n = l2_normalize_rows(&r, L2_EPS).unwrap().norm();
        assert!((1.0 - 1e-6..=1.0).contains(&n));
    }

    #[test]
    fn rescale_cases() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let up = rescale(&x, Rescale::NearestUp2x).unwrap();
        assert_eq!(
            up.data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
        assert_eq!(rescale(&x, Rescale::MaxPoolDown2x).unwrap().data(), &[4.0]);
        assert!(rescale(&Tensor::zeros(&[1, 1, 3, 2]), Rescale::MaxPoolDown2x).is_err());
    }

    #[test]
    fn concat_cases() {
        let a = Tensor::zeros(&[1, 512, 2, 2]);
        let b = Tensor::full(&[1, 256, 2, 2], 1.0);
        let c = Tensor::full(&[1, 256, 2, 2], 2.0);
        let out = channel_concat(&[&a, &b, &c]).unwrap();
        assert_eq!(out.dims(), &[1, 1024, 2, 2]);
        assert_eq!(channel_concat(&[&a]).unwrap(), a);

        let mut rng = Seeded::new(5);
        let x = rng.uniform(&[2, 3, 2, 3], 1.0);
        let y = rng.uniform(&[2, 2, 2, 3], 1.0);
        let cat = channel_concat(&[&x, &y]).unwrap();
        for bb in 0..2 {
            for ch in 0..2 {
                for h in 0..2 {
                    for w in 0..3 {
                        assert_eq!(cat.at4(bb, 3 + ch, h, w), y.at4(bb, ch, h, w));
                    }
                }
            }
        }
        assert!(channel_concat(&[&a, &Tensor::zeros(&[1, 1, 2, 3])]).is_err());
    }

    #[test]
    fn channel_stats_cases() {
        let x = channel_concat(&[&Tensor::full(&[1, 1, 2, 2], 1.0), &Tensor::full(&[1, 1, 2, 2], 3.0)]).unwrap();
        let s = channel_stats(&x).unwrap();
        assert_eq!(s.data(), &[2., 2., 2., 2., 3., 3., 3., 3.]);
        let one = Seeded::new(1).uniform(&[1, 1, 3, 3], 1.0);
        let s = channel_stats(&one).unwrap();
        assert_eq!(&s.data()[..9], one.data());
        assert_eq!(&s.data()[9..], one.data());

        let x = Seeded::new(2).uniform(&[2, 5, 3, 4], 1.0);
        let s = channel_stats(&x).unwrap();
        for b in 0..2 {
            for h in 0..3 {
                for w in 0..4 {
                    let vals: Vec<f64> = (0..5).map(|c| x.at4(b, c, h, w)).collect();
                    let mean = vals.iter().sum::<f64>() / 5.0;
                    let max = vals.iter().cloned().fold(f64::MIN, f64::max);
                    assert!((s.at4(b, 0, h, w) - mean).abs() < 1e-15);
                    assert_eq!(s.at4(b, 1, h, w), max);
                }
            }
        }
    }

    #[test]
    fn bilinear_cases() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let coords = t(&[1, 2, 1, 3], &[0.0, 1.0, 0.5, 1.0, 0.0, 0.5]);
        let s = bilinear_sample(&x, &coords).unwrap();
        assert_eq!(s.data(), &[2.0, 3.0, 2.5]);

        let mut rng = Seeded::new(9);
        let x = rng.uniform(&[1, 2, 4, 5], 1.0);
        let coords = rng.uniform(&[1, 2, 3, 3], 3.0);
        let s = bilinear_sample(&x, &coords).unwrap();
        for c in 0..2 {
            for p in 0..9 {
                let (y, xx) = (coords.data()[p], coords.data()[9 + p]);
                // explicit four-corner weighted sum
                let (fy, fx) = (y.floor(), xx.floor());
                let mut acc = 0.0;
                for (cy, wy) in [(fy, 1.0 - (y - fy)), (fy + 1.0, y - fy)] {
                    for (cx, wx) in [(fx, 1.0 - (xx - fx)), (fx + 1.0, xx - fx)] {
                        if cy >= 0.0 && cx >= 0.0 && cy <= 3.0 && cx <= 4.0 {
                            acc += wy * wx * x.at4(0, c, cy as usize, cx as usize);
                        }
                    }
                }
                assert!((s.data()[c * 9 + p] - acc).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn group_norm_cases() {
        let c = group_norm(&Tensor::full(&[1, 4, 2, 2], 3.0), &GroupNorm::identity(4, 2)).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));

        let x = Seeded::new(4).uniform(&[2, 6, 3, 3], 5.0);
        let per_channel = group_norm(&x, &GroupNorm::identity(6, 6)).unwrap();
        for b in 0..2 {
            for ch in 0..6 {
                let vals: Vec<f64> = (0..9).map(|i| x.data()[(b * 6 + ch) * 9 + i]).collect();
                let m = vals.iter().sum::<f64>() / 9.0;
                let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 9.0;
                for (i, a) in vals.iter().enumerate() {
                    let want = (a - m) / (v + 1e-5).sqrt();
                    assert!((per_channel.data()[(b * 6 + ch) * 9 + i] - want).abs() < 1e-12);
                }
            }
        }

        let y = group_norm(&x, &GroupNorm::identity(6, 3)).unwrap();
        for chunk in y.data().chunks(18) {
            let m = chunk.iter().sum::<f64>() / 18.0;
            let v = chunk.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 18.0;
            assert!(m.abs() < 1e-5);
            assert!((1.0 - 1e-4..=1.0 + 1e-4).contains(&v), "variance {v}");
        }
        assert!(group_norm(&x, &GroupNorm::identity(6, 4)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]

        #[test]
        fn conv_is_linear(seed in any::<u64>(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0, d in 1usize..3) {
            let mut rng = Seeded::new(seed);
            let x = rng.uniform(&[1, 2, 6, 6], 1.0);
            let y = rng.uniform(&[1, 2, 6, 6], 1.0);
            let spec = ConvSpec::new(rng.uniform(&[3, 2, 3, 3], 1.0), Tensor::zeros(&[3]), d).unwrap();
            let mix = add(&x.map(|v| alpha * v), &y.map(|v| beta * v)).unwrap();
            let lhs = conv2d(&mix, &spec).unwrap();
            let rhs = add(
                &conv2d(&x, &spec).unwrap().map(|v| alpha * v),
                &conv2d(&y, &spec).unwrap().map(|v| beta * v),
            ).unwrap();
            let scale = lhs.max_abs().max(1e-300);
            prop_assert!(lhs.max_abs_diff(&rhs).unwrap() / scale <= 1e-10);
        }

        #[test]
        fn softmax_rows_sum_to_one(row in proptest::collection::vec(-1e4f64..1e4, 1..20)) {
            let n = row.len();
            let p = softmax_rows(&Tensor::new(&[1, n], row).unwrap()).unwrap();
            prop_assert!((p.sum() - 1.0).abs() < 1e-6);
            prop_assert!(p.data().iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn pool_inverts_upsample(seed in any::<u64>(), h in 1usize..5, w in 1usize..5) {
            let x = Seeded::new(seed).uniform(&[1, 2, h, w], 1.0);
            let up = rescale(&x, Rescale::NearestUp2x).unwrap();
            prop_assert_eq!(rescale(&up, Rescale::MaxPoolDown2x).unwrap(), x);
        }
    }
}
