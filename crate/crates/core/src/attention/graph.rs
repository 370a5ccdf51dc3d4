//! Attention expressed on the gradient tape.
//!
//! Inputs and outputs are `C × N` nodes, matching [`super::SequencedMap`].

use crate::error::Result;
use crate::grad::{Graph, Var};
use crate::ops::L2_EPS;

/// `softmax(QᵀK)` applied to `V`.
pub fn sa_exact(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
    let qt = g.transpose(q)?;
    let logits = g.matmul(qt, k)?;
    let w = g.softmax_rows(logits)?;
    let vt = g.transpose(v)?;
    let o = g.matmul(w, vt)?;
    g.transpose(o)
}

/// Factored linearized attention (same algebra as [`super::lt_attention`]).
pub fn lt_attention(g: &mut Graph, q: Var, k: Var, v: Var, eps: f64) -> Result<Var> {
    let nk = g.value(k).dims()[1];
    let qt = g.transpose(q)?;
    let q_hat = g.l2_normalize_rows(qt, L2_EPS)?;
    let kt = g.transpose(k)?;
    let k_hat = g.l2_normalize_rows(kt, L2_EPS)?;
    let vt = g.transpose(v)?;

    let s_v = g.sum_rows(vt)?;
    let k_hat_t = g.transpose(k_hat)?;
    let m = g.matmul(k_hat_t, vt)?;
    let qm = g.matmul(q_hat, m)?;
    let num = g.add_row_broadcast(qm, s_v)?;

    let s_k_row = g.sum_rows(k_hat)?;
    let s_k = g.transpose(s_k_row)?;
    let sim = g.matmul(q_hat, s_k)?;
    let den = g.add_scalar(sim, nk as f64 + eps);

    let o = g.div_col_broadcast(num, den)?;
    g.transpose(o)
}

/// Channel-partitioned linearized attention, averaged over partitions.
pub fn multi_head_lt(g: &mut Graph, q: Var, k: Var, v: Var, partitions: usize, eps: f64) -> Result<Var> {
    if partitions == 1 {
        return lt_attention(g, q, k, v, eps);
    }
    let c = g.value(q).dims()[0];
    let part = c / partitions;
    let mut acc: Option<Var> = None;
    for s in 0..partitions {
        // Row selection as a product with a fixed 0/1 selector.
        let mut sel = vec![0.0; part * c];
        for r in 0..part {
            sel[r * c + s * part + r] = 1.0;
        }
        let sel = g.leaf(crate::tensor::Tensor::new(&[part, c], sel)?);
        let qs = g.matmul(sel, q)?;
        let ks = g.matmul(sel, k)?;
        let y = lt_attention(g, qs, ks, v, eps)?;
        acc = Some(match acc {
            None => y,
            Some(a) => g.add(a, y)?,
        });
    }
    g.scale(acc.expect("partitions >= 1"), 1.0 / partitions as f64)
}
