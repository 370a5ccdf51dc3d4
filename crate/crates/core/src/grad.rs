//! Gradients for the attention path.
//!
//! [`Graph`] is a small tape: every node stores its forward value (computed
//! with the primitives in [`crate::ops`]) and the operation that produced
//! it. [`Graph::backward`] walks the tape in reverse and accumulates
//! adjoints. Only the differentiable subset used by attention is supported:
//! matrix products, pointwise arithmetic, row softmax, row normalization and
//! 1×1 convolutions.
//!
//! [`finite_diff_jacobian`] is the independent central-difference oracle.

use crate::error::{Error, Result};
use crate::ops::{self, Elementwise};
use crate::tensor::{DType, Tensor};

/// Central-difference Jacobian of `f` at `x`: row `i`, column `j` holds
/// `(f(x + h·e_j)_i − f(x − h·e_j)_i) / 2h`. Dims are `len(f(x)) × len(x)`.
pub fn finite_diff_jacobian<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if !(h > 0.0) {
        return Err(Error::invalid("finite_diff_jacobian", "step must be positive"));
    }
    let x = x.to_dtype(DType::F64);
    let m = f(&x)?.numel();
    let n = x.numel();
    let mut jac = vec![0.0; m * n];
    for j in 0..n {
        let v = x.data()[j];
        let plus = f(&x.with_value(j, v + h))?;
        let minus = f(&x.with_value(j, v - h))?;
        if plus.numel() != m || minus.numel() != m {
            return Err(Error::invalid("finite_diff_jacobian", "output size depends on input"));
        }
        for i in 0..m {
            jac[i * n + j] = (plus.data()[i] - minus.data()[i]) / (2.0 * h);
        }
    }
    Tensor::new(&[m, n], jac)
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    L2NormRows(Var, f64),
    Transpose(Var),
    SumRows(Var),
    AddRowBroadcast(Var, Var),
    DivColBroadcast(Var, Var),
    Linear { weight: Var, bias: Var, input: Var },
    Sum(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn dims_str(t: &Tensor) -> String {
    format!("{:?}", t.dims())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::elementwise(self.value(a), Elementwise::Add(self.value(b)))?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::elementwise(self.value(a), Elementwise::Mul(self.value(b)))?;
        Ok(self.push(y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Result<Var> {
        let y = ops::elementwise(self.value(a), Elementwise::Scale(alpha))?;
        Ok(self.push(y, Op::Scale(a, alpha)))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let y = self.value(a).map(|v| v + s);
        self.push(y, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let y = ops::elementwise(self.value(a), Elementwise::Relu)?;
        Ok(self.push(y, Op::Relu(a)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let y = ops::elementwise(self.value(a), Elementwise::Sigmoid)?;
        Ok(self.push(y, Op::Sigmoid(a)))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let y = ops::softmax_rows(self.value(a))?;
        Ok(self.push(y, Op::SoftmaxRows(a)))
    }

    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let y = ops::l2_normalize_rows(self.value(a), eps)?;
        Ok(self.push(y, Op::L2NormRows(a, eps)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let y = ops::transpose(self.value(a))?;
        Ok(self.push(y, Op::Transpose(a)))
    }

    /// Column sums of a 2-D node, as a `1 × cols` row.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (_, n) = x.matrix_dims("sum_rows")?;
        let mut out = vec![0.0; n];
        for row in x.data().chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let y = Tensor::from_raw(x.dtype(), vec![1, n], out);
        Ok(self.push(y, Op::SumRows(a)))
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_row_broadcast(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        let (_, n) = x.matrix_dims("add_row_broadcast")?;
        if r.dims() != [1, n] {
            return Err(Error::shape("add_row_broadcast", format!("[1, {n}]"), dims_str(r)));
        }
        let rd = r.data();
        let out = x
            .data()
            .chunks(n)
            .flat_map(|xr| xr.iter().zip(rd).map(|(a, b)| a + b))
            .collect();
        let y = Tensor::from_raw(x.dtype(), x.dims().to_vec(), out);
        Ok(self.push(y, Op::AddRowBroadcast(a, row)))
    }

    /// Divides row `i` of `a` by element `i` of the `rows × 1` column.
    pub fn div_col_broadcast(&mut self, a: Var, col: Var) -> Result<Var> {
        let (x, c) = (self.value(a), self.value(col));
        let (m, n) = x.matrix_dims("div_col_broadcast")?;
        if c.dims() != [m, 1] {
            return Err(Error::shape("div_col_broadcast", format!("[{m}, 1]"), dims_str(c)));
        }
        let cd = c.data();
        let out = x
            .data()
            .chunks(n)
            .zip(cd)
            .flat_map(|(xr, &d)| xr.iter().map(move |v| v / d))
            .collect();
        let y = Tensor::from_raw(x.dtype(), x.dims().to_vec(), out);
        Ok(self.push(y, Op::DivColBroadcast(a, col)))
    }

    /// A 1×1 convolution. `weight` is `out × in` or `out × in × 1 × 1`;
    /// `input` is an `in × N` sequence or a single-item `1 × in × H × W` map.
    pub fn linear(&mut self, weight: Var, bias: Var, input: Var) -> Result<Var> {
        let (w, b, x) = (self.value(weight), self.value(bias), self.value(input));
        let y = match (w.ndim(), x.ndim()) {
            (4, 4) => {
                let spec = ops::ConvSpec::new(w.clone(), b.clone(), 1)?;
                if spec.kernel_size() != 1 || x.dims()[0] != 1 {
                    return Err(Error::invalid("linear", "expects a 1×1 kernel and batch of one"));
                }
                ops::conv2d(x, &spec)?
            }
            (2, 2) => {
                let (out, _) = w.matrix_dims("linear")?;
                if b.dims() != [out] {
                    return Err(Error::shape("linear", format!("bias [{out}]"), dims_str(b)));
                }
                let y = ops::matmul(w, x)?;
                let n = y.dims()[1];
                let mut data = y.data().to_vec();
                for (row, &bv) in data.chunks_mut(n).zip(b.data()) {
                    row.iter_mut().for_each(|v| *v += bv);
                }
                y.with_data(data)
            }
            _ => {
                return Err(Error::shape(
                    "linear",
                    "2-D weight with 2-D input or 4-D weight with 4-D input",
                    format!("{} / {}", dims_str(w), dims_str(x)),
                ))
            }
        };
        Ok(self.push(y, Op::Linear { weight, bias, input }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let y = Tensor::scalar(self.value(a).sum());
        self.push(y, Op::Sum(a))
    }

    /// Reverse pass from a single-element node. Returns the adjoint of
    /// every node reachable from `out`.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).numel() != 1 {
            return Err(Error::invalid("backward", "output must hold a single element"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(vec![1.0]);

        for idx in (0..=out.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let y = node.value.data();
            let mut acc = |v: Var, d: Vec<f64>| match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(d).for_each(|(e, x)| *e += x),
                slot @ None => *slot = Some(d),
            };
            match node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(a), self.value(b));
                    let (m, k) = (av.dims()[0], av.dims()[1]);
                    let n = bv.dims()[1];
                    let (ad, bd) = (av.data(), bv.data());
                    let mut da = vec![0.0; m * k];
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bd[p * n + j];
                                db[p * n + j] += ad[i * k + p] * g[i * n + j];
                            }
                            da[i * k + p] = s;
                        }
                    }
                    acc(a, da);
                    acc(b, db);
                }
                Op::Add(a, b) => {
                    acc(a, g.clone());
                    acc(b, g);
                }
                Op::Mul(a, b) => {
                    let (ad, bd) = (self.value(a).data(), self.value(b).data());
                    acc(a, g.iter().zip(bd).map(|(g, b)| g * b).collect());
                    acc(b, g.iter().zip(ad).map(|(g, a)| g * a).collect());
                }
                Op::Scale(a, alpha) => acc(a, g.iter().map(|g| g * alpha).collect()),
                Op::AddScalar(a) => acc(a, g),
                Op::Relu(a) => {
                    let x = self.value(a).data();
                    acc(a, g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect());
                }
                Op::Sigmoid(a) => acc(a, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect()),
                Op::SoftmaxRows(a) => {
                    let n = node.value.dims()[1];
                    let mut d = vec![0.0; g.len()];
                    for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        for ((d, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d = y * (g - dot);
                        }
                    }
                    acc(a, d);
                }
                Op::L2NormRows(a, eps) => {
                    let x = self.value(a);
                    let n = x.dims()[1];
                    let mut d = vec![0.0; g.len()];
                    for ((dr, gr), xr) in d.chunks_mut(n).zip(g.chunks(n)).zip(x.data().chunks(n)) {
                        let r = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let denom = r + eps;
                        let xg: f64 = xr.iter().zip(gr).map(|(x, g)| x * g).sum();
                        // d(x/(r+eps)) = g/(r+eps) − x (x·g) / (r (r+eps)²); the
                        // second term vanishes at r = 0.
                        let coef = if r > 0.0 { xg / (r * denom * denom) } else { 0.0 };
                        for ((d, g), x) in dr.iter_mut().zip(gr).zip(xr) {
                            *d = g / denom - x * coef;
                        }
                    }
                    acc(a, d);
                }
                Op::Transpose(a) => {
                    let (m, n) = (node.value.dims()[0], node.value.dims()[1]);
                    let mut d = vec![0.0; g.len()];
                    for i in 0..m {
                        for j in 0..n {
                            d[j * m + i] = g[i * n + j];
                        }
                    }
                    acc(a, d);
                }
                Op::SumRows(a) => {
                    let rows = self.value(a).dims()[0];
                    acc(a, g.repeat(rows));
                }
                Op::AddRowBroadcast(a, row) => {
                    let n = node.value.dims()[1];
                    let mut dr = vec![0.0; n];
                    for gr in g.chunks(n) {
                        dr.iter_mut().zip(gr).for_each(|(d, g)| *d += g);
                    }
                    acc(a, g);
                    acc(row, dr);
                }
                Op::DivColBroadcast(a, col) => {
                    let n = node.value.dims()[1];
                    let x = self.value(a).data();
                    let c = self.value(col).data();
                    let mut da = vec![0.0; g.len()];
                    let mut dc = vec![0.0; c.len()];
                    for (i, &d) in c.iter().enumerate() {
                        for j in 0..n {
                            da[i * n + j] = g[i * n + j] / d;
                            dc[i] -= g[i * n + j] * x[i * n + j] / (d * d);
                        }
                    }
                    acc(a, da);
                    acc(col, dc);
                }
                Op::Linear { weight, bias, input } => {
                    let w = self.value(weight);
                    let x = self.value(input);
                    let (out_ch, in_ch) = (w.dims()[0], w.dims()[1]);
                    let n = x.numel() / in_ch;
                    let (wd, xd) = (w.data(), x.data());
                    let mut dw = vec![0.0; out_ch * in_ch];
                    let mut dx = vec![0.0; in_ch * n];
                    let mut db = vec![0.0; out_ch];
                    for o in 0..out_ch {
                        let gr = &g[o * n..(o + 1) * n];
                        db[o] = gr.iter().sum();
                        for c in 0..in_ch {
                            let xr = &xd[c * n..(c + 1) * n];
                            dw[o * in_ch + c] = gr.iter().zip(xr).map(|(g, x)| g * x).sum();
                            let wv = wd[o * in_ch + c];
                            dx[c * n..(c + 1) * n]
                                .iter_mut()
                                .zip(gr)
                                .for_each(|(d, g)| *d += wv * g);
                        }
                    }
                    acc(weight, dw);
                    acc(bias, db);
                    acc(input, dx);
                }
                Op::Sum(a) => {
                    let len = self.value(a).numel();
                    acc(a, vec![g[0]; len]);
                }
            }
        }

        let dims: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.dims().to_vec()).collect();
        Ok(Gradients { grads, dims })
    }
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    dims: Vec<Vec<usize>>,
}

impl Gradients {
    /// The adjoint of leaf `v`, shaped like its value; zero when `v` does
    /// not influence the output. Interior adjoints are released during the
    /// sweep and also read as zero.
    pub fn get(&self, v: Var) -> Tensor {
        let dims = self.dims[v.0].clone();
        let data = self.grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; dims.iter().product()]);
        Tensor::from_raw(DType::F64, dims, data)
    }
}

/// Largest elementwise relative error `|a − b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> Result<f64> {
    if analytic.numel() != numeric.numel() {
        return Err(Error::shape(
            "max_relative_error",
            analytic.numel(),
            numeric.numel(),
        ));
    }
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::Seeded;

    #[test]
    fn jacobian_of_identity_and_square() {
        let x = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let j = finite_diff_jacobian(|t| Ok(t.clone()), &x, 1e-5).unwrap();
        assert!(j.max_abs_diff(&Tensor::eye(3)).unwrap() < 1e-10);

        let j = finite_diff_jacobian(|t| Ok(t.map(|v| v * v)), &Tensor::scalar(3.0), 1e-5).unwrap();
        assert!((j.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn softmax_jacobian_matches_closed_form() {
        let x = Seeded::new(21).uniform(&[1, 5], 2.0);
        let j = finite_diff_jacobian(ops::softmax_rows, &x, 1e-5).unwrap();
        let p = ops::softmax_rows(&x).unwrap();
        let p = p.data();
        for a in 0..5 {
            for b in 0..5 {
                let want = if a == b { p[a] } else { 0.0 } - p[a] * p[b];
                assert!((j.at2(a, b) - want).abs() <= 1e-6);
            }
        }
    }

    /// Gradient of `sum(f(x) ⊙ probe)` by the tape vs. finite differences.
    fn check_unary(build: impl Fn(&mut Graph, Var) -> Result<Var>, x: Tensor, probe_seed: u64) {
        let out_dims = {
            let mut g = Graph::new();
            let v = g.leaf(x.clone());
            let y = build(&mut g, v).unwrap();
            g.value(y).dims().to_vec()
        };
        let probe = Seeded::new(probe_seed).uniform(&out_dims, 1.0);
        let loss = |t: &Tensor| -> Result<Tensor> {
            let mut g = Graph::new();
            let v = g.leaf(t.clone());
            let y = build(&mut g, v)?;
            let p = g.leaf(probe.clone());
            let m = g.mul(y, p)?;
            let s = g.sum(m);
            Ok(g.value(s).clone())
        };
        let mut g = Graph::new();
        let v = g.leaf(x.clone());
        let y = build(&mut g, v).unwrap();
        let p = g.leaf(probe.clone());
        let m = g.mul(y, p).unwrap();
        let s = g.sum(m);
        let analytic = g.backward(s).unwrap().get(v);
        let numeric = finite_diff_jacobian(loss, &x, 1e-5).unwrap();
        let err = max_relative_error(&analytic, &numeric, 1e-6).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn unary_ops_match_finite_differences() {
        let mut rng = Seeded::new(1);
        let x = rng.uniform(&[3, 4], 1.5);
        check_unary(|g, v| g.softmax_rows(v), x.clone(), 2);
        check_unary(|g, v| g.l2_normalize_rows(v, 1e-12), x.clone(), 3);
        check_unary(|g, v| g.sigmoid(v), x.clone(), 4);
        check_unary(|g, v| g.relu(v), x.map(|v| if v.abs() < 0.05 { 0.3 } else { v }), 5);
        check_unary(|g, v| g.scale(v, -2.5), x.clone(), 6);
        check_unary(|g, v| g.transpose(v), x.clone(), 7);
        check_unary(|g, v| g.sum_rows(v), x.clone(), 8);
        check_unary(|g, v| Ok(g.add_scalar(v, 4.0)), x.clone(), 9);
        let b = rng.uniform(&[4, 2], 1.0);
        check_unary(
            move |g, v| {
                let bv = g.leaf(b.clone());
                g.matmul(v, bv)
            },
            x.clone(),
            10,
        );
    }

    #[test]
    fn composition_matches_finite_differences() {
        let mut rng = Seeded::new(2);
        let w4 = rng.uniform(&[3, 2, 1, 1], 1.0);
        let bias = rng.uniform(&[3], 1.0);
        let x = rng.uniform(&[1, 2, 2, 2], 1.0);
        let build = |g: &mut Graph, wv: Var| -> Result<Var> {
            let b = g.leaf(bias.clone());
            let xv = g.leaf(x.clone());
            let y = g.linear(wv, b, xv)?;
            g.sigmoid(y)
        };
        check_unary(build, w4, 11);

        // Full attention-like chain on 2-D values, differentiating the input.
        let w = rng.uniform(&[3, 3], 1.0);
        let b = rng.uniform(&[3], 1.0);
        let row = rng.uniform(&[1, 3], 1.0);
        let chain = move |g: &mut Graph, xv: Var| -> Result<Var> {
            let wv = g.leaf(w.clone());
            let bv = g.leaf(b.clone());
            let h = g.linear(wv, bv, xv)?;
            let t = g.transpose(h)?;
            let n = g.l2_normalize_rows(t, 1e-12)?;
            let r = g.leaf(row.clone());
            let shifted = g.add_row_broadcast(n, r)?;
            let s = g.softmax_rows(shifted)?;
            let m = g.mul(s, s)?;
            let k = g.matmul(m, s)?;
            let den = g.sum_rows(k)?;
            let den = g.transpose(den)?;
            let den = g.add_scalar(den, 5.0);
            let kt = g.transpose(k)?;
            g.div_col_broadcast(kt, den)
        };
        check_unary(chain, rng.uniform(&[3, 3], 1.0), 12);
    }

    #[test]
    fn zero_row_normalization_has_finite_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 3]));
        let y = g.l2_normalize_rows(x, 1e-12).unwrap();
        let s = g.sum(y);
        let d = g.backward(s).unwrap().get(x);
        assert!(d.data().iter().all(|v| v.is_finite()));
    }
}
