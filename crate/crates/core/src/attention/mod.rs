//! Exact softmax attention and its first-order linearization.
//!
//! Maps are flattened into `C × N` sequences ([`SequencedMap`]) with
//! positions in row-major spatial order. Queries come from one map and
//! keys/values from another (they may differ in `N`).
//!
//! The linearized similarity replaces `exp(qᵀk)` by `1 + q̂ᵀk̂` with
//! unit-normalized `q̂`, `k̂`. Because the weight is affine in `k̂`, the sum
//! over keys factors:
//!
//! ```text
//! out_i = (Σ_j v_j + Mᵀ q̂_i) / (N_k + q̂_iᵀ s_k + eps),   M = Σ_j k̂_j v_jᵀ,  s_k = Σ_j k̂_j
//! ```
//!
//! so [`lt_attention`] costs `O(N·C²)` with `C² + 2C` auxiliary storage,
//! while [`sa_exact`] stores the full `N_q × N_k` weight matrix.

pub mod graph;

use crate::counter::OpCounter;
use crate::error::{Error, Result};
use crate::init::Seeded;
use crate::ops::{self, ConvSpec, L2_EPS};
use crate::tensor::{DType, Tensor};

/// Default guard added to the linearized denominator.
pub const DENOM_EPS: f64 = 1e-6;

/// A `C × N` view of a single `C × H × W` map.
#[derive(Debug, Clone, PartialEq)]
pub struct SequencedMap {
    height: usize,
    width: usize,
    data: Tensor,
}

impl SequencedMap {
    /// Flattens batch item `batch` of a 4-D map.
    pub fn from_map(map: &Tensor, batch: usize) -> Result<Self> {
        let (_, c, h, w) = map.nchw("sequenced_map")?;
        let item = map.batch_item(batch)?;
        Ok(SequencedMap {
            height: h,
            width: w,
            data: item.reshape(&[c, h * w])?,
        })
    }

    /// Wraps a `C × (H·W)` matrix.
    pub fn from_matrix(data: Tensor, height: usize, width: usize) -> Result<Self> {
        let (_, n) = data.matrix_dims("sequenced_map")?;
        if n != height * width {
            return Err(Error::shape("sequenced_map", format!("{} positions", height * width), n));
        }
        Ok(SequencedMap { height, width, data })
    }

    /// A `C × N` sequence laid out as a `1 × N` spatial row.
    pub fn from_sequence(data: Tensor) -> Result<Self> {
        let (_, n) = data.matrix_dims("sequenced_map")?;
        Self::from_matrix(data, 1, n)
    }

    /// Un-flattens to `1 × C × H × W`.
    pub fn to_map(&self) -> Tensor {
        self.data
            .reshape(&[1, self.channels(), self.height, self.width])
            .expect("dims consistent by construction")
    }

    pub fn channels(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn len(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn matrix(&self) -> &Tensor {
        &self.data
    }

    /// Reorders positions: position `j` of the result is position
    /// `perm[j]` of `self`.
    pub fn permute_positions(&self, perm: &[usize]) -> Result<Self> {
        let n = self.len();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid("permute_positions", "not a permutation of the positions"));
        }
        let src = self.data.data();
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(n) {
            out.extend(perm.iter().map(|&p| row[p]));
        }
        Ok(SequencedMap {
            height: self.height,
            width: self.width,
            data: self.data.with_data(out),
        })
    }

    /// Rows `start..start + count` (channels) as a new sequence.
    pub(crate) fn channel_slice(&self, start: usize, count: usize) -> SequencedMap {
        let n = self.len();
        let rows = self.data.data()[start * n..(start + count) * n].to_vec();
        SequencedMap {
            height: self.height,
            width: self.width,
            data: Tensor::from_raw(self.data.dtype(), vec![count, n], rows),
        }
    }

    fn with_matrix(&self, data: Tensor) -> SequencedMap {
        SequencedMap {
            height: self.height,
            width: self.width,
            data,
        }
    }
}

/// A 1×1 convolution acting on sequences: `weight` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pointwise {
    weight: Tensor,
    bias: Tensor,
}

impl Pointwise {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let (out, _) = weight.matrix_dims("pointwise")?;
        if bias.dims() != [out] {
            return Err(Error::shape("pointwise", format!("bias [{out}]"), format!("{:?}", bias.dims())));
        }
        Ok(Pointwise { weight, bias })
    }

    pub fn identity(c: usize) -> Self {
        Pointwise {
            weight: Tensor::eye(c),
            bias: Tensor::zeros(&[c]),
        }
    }

    pub fn zeros(out: usize, input: usize) -> Self {
        Pointwise {
            weight: Tensor::zeros(&[out, input]),
            bias: Tensor::zeros(&[out]),
        }
    }

    /// Weights uniform in `[-1/√in, 1/√in]`, zero bias.
    pub fn seeded(rng: &mut Seeded, out: usize, input: usize) -> Self {
        Pointwise {
            weight: rng.uniform(&[out, input], 1.0 / (input as f64).sqrt()),
            bias: Tensor::zeros(&[out]),
        }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    /// The same map as a 4-D 1×1 [`ConvSpec`].
    pub fn to_conv_spec(&self) -> ConvSpec {
        let (o, i) = (self.out_channels(), self.in_channels());
        ConvSpec::new(
            self.weight.reshape(&[o, i, 1, 1]).expect("same element count"),
            self.bias.clone(),
            1,
        )
        .expect("1×1 kernel is valid")
    }

    pub fn apply(&self, x: &SequencedMap) -> Result<SequencedMap> {
        self.apply_counted(x, &mut OpCounter::new())
    }

    pub fn apply_counted(&self, x: &SequencedMap, counter: &mut OpCounter) -> Result<SequencedMap> {
        if x.channels() != self.in_channels() {
            return Err(Error::shape("pointwise", format!("{} channels", self.in_channels()), x.channels()));
        }
        let y = ops::matmul_counted(&self.weight, x.matrix(), counter)?;
        let n = x.len();
        let mut data = y.data().to_vec();
        for (row, &b) in data.chunks_mut(n).zip(self.bias.data()) {
            row.iter_mut().for_each(|v| *v += b);
        }
        Ok(x.with_matrix(y.with_data(data)))
    }
}

/// Query/key/value embeddings of one attention block, plus the optional
/// output projection used when heads are concatenated.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    pub w_q: Pointwise,
    pub w_k: Pointwise,
    pub w_v: Pointwise,
    pub w_out: Option<Pointwise>,
}

impl ProjectionSet {
    pub fn new(w_q: Pointwise, w_k: Pointwise, w_v: Pointwise) -> Result<Self> {
        let c = w_q.out_channels();
        if w_k.out_channels() != c || w_v.out_channels() != c {
            return Err(Error::shape(
                "projection_set",
                format!("embedded width {c} for q, k and v"),
                format!("k {}, v {}", w_k.out_channels(), w_v.out_channels()),
            ));
        }
        Ok(ProjectionSet {
            w_q,
            w_k,
            w_v,
            w_out: None,
        })
    }

    pub fn with_output(mut self, w_out: Pointwise) -> Result<Self> {
        if w_out.out_channels() != self.channels() || w_out.in_channels() % self.channels() != 0 {
            return Err(Error::shape(
                "projection_set",
                format!("output projection (h·{0}) → {0}", self.channels()),
                format!("{} → {}", w_out.in_channels(), w_out.out_channels()),
            ));
        }
        self.w_out = Some(w_out);
        Ok(self)
    }

    /// Identity projections on `c` channels.
    pub fn identity(c: usize) -> Self {
        ProjectionSet {
            w_q: Pointwise::identity(c),
            w_k: Pointwise::identity(c),
            w_v: Pointwise::identity(c),
            w_out: None,
        }
    }

    /// Seeded q/k/v from `c_query`/`c_queried` inputs into `c` channels.
    pub fn seeded(rng: &mut Seeded, c_query: usize, c_queried: usize, c: usize) -> Self {
        ProjectionSet {
            w_q: Pointwise::seeded(rng, c, c_query),
            w_k: Pointwise::seeded(rng, c, c_queried),
            w_v: Pointwise::seeded(rng, c, c_queried),
            w_out: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.w_q.out_channels()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig {
    pub channels: usize,
    pub partitions: usize,
    pub denom_eps: f64,
    pub ffn_hidden: usize,
}

impl AttentionConfig {
    pub fn new(channels: usize, partitions: usize) -> Result<Self> {
        let cfg = AttentionConfig {
            channels,
            partitions,
            denom_eps: DENOM_EPS,
            ffn_hidden: 2 * channels,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.partitions == 0 || self.channels % self.partitions != 0 {
            return Err(Error::invalid(
                "attention_config",
                format!("{} channels not divisible into {} partitions", self.channels, self.partitions),
            ));
        }
        if !(self.denom_eps > 0.0) {
            return Err(Error::invalid("attention_config", "denom_eps must be positive"));
        }
        if self.ffn_hidden == 0 {
            return Err(Error::invalid("attention_config", "ffn_hidden must be positive"));
        }
        Ok(())
    }
}

pub fn project_qkv(
    x_query: &SequencedMap,
    x_queried: &SequencedMap,
    proj: &ProjectionSet,
) -> Result<(SequencedMap, SequencedMap, SequencedMap)> {
    project_qkv_counted(x_query, x_queried, proj, &mut OpCounter::new())
}

pub fn project_qkv_counted(
    x_query: &SequencedMap,
    x_queried: &SequencedMap,
    proj: &ProjectionSet,
    counter: &mut OpCounter,
) -> Result<(SequencedMap, SequencedMap, SequencedMap)> {
    Ok((
        proj.w_q.apply_counted(x_query, counter)?,
        proj.w_k.apply_counted(x_queried, counter)?,
        proj.w_v.apply_counted(x_queried, counter)?,
    ))
}

fn check_qkv(op: &'static str, q: &SequencedMap, k: &SequencedMap, v: &SequencedMap) -> Result<()> {
    if q.channels() != k.channels() {
        return Err(Error::shape(op, format!("key width {}", q.channels()), k.channels()));
    }
    if k.len() != v.len() {
        return Err(Error::shape(op, format!("{} value positions", k.len()), v.len()));
    }
    Ok(())
}

fn out_dtype(q: &SequencedMap, k: &SequencedMap, v: &SequencedMap) -> DType {
    q.data.dtype().promote(k.data.dtype()).promote(v.data.dtype())
}

/// Exact softmax attention `out_i = Σ_j softmax_j(q_iᵀk_j) v_j`.
///
/// Records `N_q·N_k·(C + C_v)` MACs and an auxiliary peak of `N_q·N_k`
/// (the stored weight matrix).
pub fn sa_exact(
    q: &SequencedMap,
    k: &SequencedMap,
    v: &SequencedMap,
    counter: &mut OpCounter,
) -> Result<SequencedMap> {
    check_qkv("sa_exact", q, k, v)?;
    let (c, cv, nq, nk) = (q.channels(), v.channels(), q.len(), k.len());
    let (qd, kd, vd) = (q.data.data(), k.data.data(), v.data.data());
    let mut local = OpCounter::new();

    let mut weights = vec![0.0; nq * nk];
    local.alloc_aux((nq * nk) as u64);
    for i in 0..nq {
        let row = &mut weights[i * nk..(i + 1) * nk];
        for ch in 0..c {
            let qv = qd[ch * nq + i];
            let krow = &kd[ch * nk..(ch + 1) * nk];
            for (w, &kv) in row.iter_mut().zip(krow) {
                *w += qv * kv;
            }
        }
        ops::softmax_in_place(row);
    }
    local.record_macs((nq * nk * c) as u64);

    let mut out = vec![0.0; cv * nq];
    for ch in 0..cv {
        let vrow = &vd[ch * nk..(ch + 1) * nk];
        for i in 0..nq {
            let wrow = &weights[i * nk..(i + 1) * nk];
            out[ch * nq + i] = wrow.iter().zip(vrow).map(|(w, v)| w * v).sum();
        }
    }
    local.record_macs((nq * nk * cv) as u64);
    local.free_aux((nq * nk) as u64);
    counter.absorb(local);

    Ok(q.with_matrix(Tensor::from_raw(out_dtype(q, k, v), vec![cv, nq], out)))
}

/// Position-wise two-layer map: 1×1 conv → relu → 1×1 conv.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub first: Pointwise,
    pub second: Pointwise,
}

impl FeedForward {
    pub fn new(first: Pointwise, second: Pointwise) -> Result<Self> {
        if first.out_channels() != second.in_channels() {
            return Err(Error::shape(
                "feed_forward",
                format!("hidden width {}", first.out_channels()),
                second.in_channels(),
            ));
        }
        Ok(FeedForward { first, second })
    }

    pub fn seeded(rng: &mut Seeded, channels: usize, hidden: usize) -> Self {
        FeedForward {
            first: Pointwise::seeded(rng, hidden, channels),
            second: Pointwise::seeded(rng, channels, hidden),
        }
    }

    pub fn forward(&self, x: &SequencedMap) -> Result<SequencedMap> {
        let h = self.first.apply(x)?;
        let h = h.with_matrix(ops::relu(h.matrix()));
        self.second.apply(&h)
    }
}

/// The position-wise feed-forward transform applied after aggregation.
pub fn f_theta(x: &SequencedMap, ffn: &FeedForward) -> Result<SequencedMap> {
    ffn.forward(x)
}

/// Concatenates per-head [`sa_exact`] outputs on channels and compresses
/// them with `w_out`.
pub fn multi_head_sa(
    x_query: &SequencedMap,
    x_queried: &SequencedMap,
    heads: &[ProjectionSet],
    w_out: &Pointwise,
) -> Result<SequencedMap> {
    if heads.is_empty() {
        return Err(Error::invalid("multi_head_sa", "at least one head required"));
    }
    let c = heads[0].channels();
    if heads.iter().any(|h| h.channels() != c) {
        return Err(Error::invalid("multi_head_sa", "heads disagree on embedded width"));
    }
    let mut counter = OpCounter::new();
    let mut rows = Vec::with_capacity(heads.len() * c * x_query.len());
    for head in heads {
        let (q, k, v) = project_qkv(x_query, x_queried, head)?;
        rows.extend_from_slice(sa_exact(&q, &k, &v, &mut counter)?.matrix().data());
    }
    let concat = SequencedMap::from_matrix(
        Tensor::from_raw(DType::F64, vec![heads.len() * c, x_query.len()], rows),
        x_query.height,
        x_query.width,
    )?;
    w_out.apply(&concat)
}

#[inline]
fn inv_norm(sq: f64) -> f64 {
    1.0 / (sq.sqrt() + L2_EPS)
}

/// Linearized attention evaluated term by term over every (query, key)
/// pair. This is the reference the factored form is checked against.
pub fn lt_bruteforce(q: &SequencedMap, k: &SequencedMap, v: &SequencedMap, eps: f64) -> Result<SequencedMap> {
    check_qkv("lt_bruteforce", q, k, v)?;
    let (c, cv, nq, nk) = (q.channels(), v.channels(), q.len(), k.len());
    let q_hat: Vec<Vec<f64>> = (0..nq)
        .map(|i| {
            let col: Vec<f64> = (0..c).map(|ch| q.data.at2(ch, i)).collect();
            let s = inv_norm(col.iter().map(|x| x * x).sum());
            col.iter().map(|x| x * s).collect()
        })
        .collect();
    let k_hat: Vec<Vec<f64>> = (0..nk)
        .map(|j| {
            let col: Vec<f64> = (0..c).map(|ch| k.data.at2(ch, j)).collect();
            let s = inv_norm(col.iter().map(|x| x * x).sum());
            col.iter().map(|x| x * s).collect()
        })
        .collect();
    let mut out = vec![0.0; cv * nq];
    for i in 0..nq {
        let mut num = vec![0.0; cv];
        let mut den = 0.0;
        for j in 0..nk {
            let sim: f64 = q_hat[i].iter().zip(&k_hat[j]).map(|(a, b)| a * b).sum();
            let w = 1.0 + sim;
            den += w;
            for (ch, n) in num.iter_mut().enumerate() {
                *n += w * v.data.at2(ch, j);
            }
        }
        for ch in 0..cv {
            out[ch * nq + i] = num[ch] / (den + eps);
        }
    }
    Ok(q.with_matrix(Tensor::from_raw(out_dtype(q, k, v), vec![cv, nq], out)))
}

/// Factored linearized attention.
///
/// Accumulates `S_v = Σ v_j`, `M = Σ k̂_j v_jᵀ` and `s_k = Σ k̂_j` in one pass
/// over the keys, then evaluates every query against them. Records
/// `N_k·C·C_v + N_q·C·C_v + N_q·C` MACs and an auxiliary peak of
/// `C·C_v + C_v + C`.
pub fn lt_attention(
    q: &SequencedMap,
    k: &SequencedMap,
    v: &SequencedMap,
    eps: f64,
    counter: &mut OpCounter,
) -> Result<SequencedMap> {
    check_qkv("lt_attention", q, k, v)?;
    let (c, cv, nq, nk) = (q.channels(), v.channels(), q.len(), k.len());
    let (qd, kd, vd) = (q.data.data(), k.data.data(), v.data.data());
    let mut local = OpCounter::new();

    let aux = (c * cv + cv + c) as u64;
    local.alloc_aux(aux);
    let mut m = vec![0.0; c * cv];
    let mut s_v = vec![0.0; cv];
    let mut s_k = vec![0.0; c];
    for j in 0..nk {
        let scale = inv_norm((0..c).map(|d| kd[d * nk + j] * kd[d * nk + j]).sum());
        for (ch, s) in s_v.iter_mut().enumerate() {
            *s += vd[ch * nk + j];
        }
        for d in 0..c {
            let kh = kd[d * nk + j] * scale;
            s_k[d] += kh;
            let mrow = &mut m[d * cv..(d + 1) * cv];
            for (ch, mv) in mrow.iter_mut().enumerate() {
                *mv += kh * vd[ch * nk + j];
            }
        }
    }
    local.record_macs((nk * c * cv) as u64);

    let mut out = vec![0.0; cv * nq];
    for i in 0..nq {
        let scale = inv_norm((0..c).map(|d| qd[d * nq + i] * qd[d * nq + i]).sum());
        let mut sim = 0.0;
        for d in 0..c {
            sim += qd[d * nq + i] * s_k[d];
        }
        let den = nk as f64 + scale * sim + eps;
        if !(den > 0.0) {
            return Err(Error::invalid("lt_attention", format!("non-positive denominator {den}")));
        }
        for ch in 0..cv {
            out[ch * nq + i] = s_v[ch];
        }
        for d in 0..c {
            let coef = qd[d * nq + i] * scale;
            let mrow = &m[d * cv..(d + 1) * cv];
            for (ch, mv) in mrow.iter().enumerate() {
                out[ch * nq + i] += mv * coef;
            }
        }
        for ch in 0..cv {
            out[ch * nq + i] /= den;
        }
    }
    local.record_macs((nq * c * cv + nq * c) as u64);
    local.free_aux(aux);
    counter.absorb(local);

    Ok(q.with_matrix(Tensor::from_raw(out_dtype(q, k, v), vec![cv, nq], out)))
}

/// Splits queries and keys channel-wise into `partitions` contiguous equal
/// parts, runs [`lt_attention`] per part against the full-width values and
/// averages the results.
pub fn multi_head_lt(
    q: &SequencedMap,
    k: &SequencedMap,
    v: &SequencedMap,
    partitions: usize,
    eps: f64,
    counter: &mut OpCounter,
) -> Result<SequencedMap> {
    check_qkv("multi_head_lt", q, k, v)?;
    let c = q.channels();
    if partitions == 0 || c % partitions != 0 {
        return Err(Error::invalid(
            "multi_head_lt",
            format!("{c} channels not divisible into {partitions} partitions"),
        ));
    }
    let part = c / partitions;
    let mut acc: Option<Vec<f64>> = None;
    for s in 0..partitions {
        let qs = q.channel_slice(s * part, part);
        let ks = k.channel_slice(s * part, part);
        let y = lt_attention(&qs, &ks, v, eps, counter)?;
        match &mut acc {
            None => acc = Some(y.data.into_data()),
            Some(a) => a.iter_mut().zip(y.data.data()).for_each(|(a, b)| *a += b),
        }
    }
    let inv = 1.0 / partitions as f64;
    let data: Vec<f64> = acc.unwrap().into_iter().map(|x| x * inv).collect();
    Ok(q.with_matrix(Tensor::from_raw(out_dtype(q, k, v), vec![v.channels(), q.len()], data)))
}

/// Interactive linearized attention between two 4-D maps.
///
/// Queries come from `query_map`, keys and values from `queried_map`; the
/// result has the query map's spatial shape and `proj.channels()` channels.
/// No positional encoding, feed-forward or residual is applied here.
pub fn cross_attention_block(
    query_map: &Tensor,
    queried_map: &Tensor,
    proj: &ProjectionSet,
    config: &AttentionConfig,
) -> Result<Tensor> {
    config.validate()?;
    let (nq, _, _, _) = query_map.nchw("cross_attention_block")?;
    let (nk, _, _, _) = queried_map.nchw("cross_attention_block")?;
    if nq != nk {
        return Err(Error::shape("cross_attention_block", format!("batch {nq}"), nk));
    }
    if proj.channels() != config.channels {
        return Err(Error::shape(
            "cross_attention_block",
            format!("{} embedded channels", config.channels),
            proj.channels(),
        ));
    }
    let mut items = Vec::with_capacity(nq);
    for b in 0..nq {
        let xq = SequencedMap::from_map(query_map, b)?;
        let xk = SequencedMap::from_map(queried_map, b)?;
        let (q, k, v) = project_qkv(&xq, &xk, proj)?;
        let y = multi_head_lt(&q, &k, &v, config.partitions, config.denom_eps, &mut OpCounter::new())?;
        items.push(y.to_map());
    }
    Tensor::stack_batch(&items)
}

/// Largest gap between softmax weights `softmax_j(t·sⱼ)` and the
/// first-order weights `(1 + t·sⱼ) / Σ(1 + t·sⱼ)` over similarities `s`.
pub fn mixing_weight_discrepancy(similarities: &[f64], t: f64) -> f64 {
    let mut soft: Vec<f64> = similarities.iter().map(|s| t * s).collect();
    ops::softmax_in_place(&mut soft);
    let lin: Vec<f64> = similarities.iter().map(|s| 1.0 + t * s).collect();
    let total: f64 = lin.iter().sum();
    soft.iter().zip(&lin).map(|(a, b)| (a - b / total).abs()).fold(0.0, f64::max)
}

/// Which attention core a counted block runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttentionKind {
    Exact,
    Linear { partitions: usize, eps: f64 },
}

/// Separate tallies for the four projections and the attention core.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BlockCounts {
    pub projections: OpCounter,
    pub core: OpCounter,
}

impl BlockCounts {
    pub fn total(&self) -> OpCounter {
        self.projections + self.core
    }
}

/// Project, attend, then apply the output projection, counting the
/// projection and core work separately. `proj.w_out` must be present.
pub fn attention_block_counted(
    x_query: &SequencedMap,
    x_queried: &SequencedMap,
    proj: &ProjectionSet,
    kind: AttentionKind,
) -> Result<(SequencedMap, BlockCounts)> {
    let w_out = proj
        .w_out
        .as_ref()
        .ok_or_else(|| Error::invalid("attention_block", "output projection required"))?;
    let mut counts = BlockCounts::default();
    let (q, k, v) = project_qkv_counted(x_query, x_queried, proj, &mut counts.projections)?;
    let y = match kind {
        AttentionKind::Exact => sa_exact(&q, &k, &v, &mut counts.core)?,
        AttentionKind::Linear { partitions, eps } => multi_head_lt(&q, &k, &v, partitions, eps, &mut counts.core)?,
    };
    let out = w_out.apply_counted(&y, &mut counts.projections)?;
    Ok((out, counts))
}

#[cfg(test)]
mod tests;
