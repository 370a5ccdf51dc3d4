//! Tape gradients of the attention cores against central differences.

use serde::Serialize;

use crate::attention::{self, graph, Pointwise, SequencedMap, DENOM_EPS};
use crate::counter::OpCounter;
use crate::error::{Error, Result};
use crate::grad::{finite_diff_jacobian, max_relative_error, Graph, Var};
use crate::init::Seeded;
use crate::tensor::Tensor;

/// Relative errors below this magnitude are measured against it instead.
pub const REL_FLOOR: f64 = 1e-6;

pub const CHANNELS: usize = 4;
pub const POSITIONS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Core {
    Sa,
    Lt,
    /// Linearized attention with two channel partitions.
    Lt2,
}

impl Core {
    pub const ALL: [Core; 3] = [Core::Sa, Core::Lt, Core::Lt2];

    pub fn name(self) -> &'static str {
        match self {
            Core::Sa => "sa",
            Core::Lt => "lt",
            Core::Lt2 => "lt2",
        }
    }

    fn build(self, g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
        match self {
            Core::Sa => graph::sa_exact(g, q, k, v),
            Core::Lt => graph::lt_attention(g, q, k, v, DENOM_EPS),
            Core::Lt2 => graph::multi_head_lt(g, q, k, v, 2, DENOM_EPS),
        }
    }

    /// Forward value on plain tensors, independent of the tape.
    pub fn forward(self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        let (q, k, v) = (
            SequencedMap::from_sequence(q.clone())?,
            SequencedMap::from_sequence(k.clone())?,
            SequencedMap::from_sequence(v.clone())?,
        );
        let mut c = OpCounter::new();
        let y = match self {
            Core::Sa => attention::sa_exact(&q, &k, &v, &mut c)?,
            Core::Lt => attention::lt_attention(&q, &k, &v, DENOM_EPS, &mut c)?,
            Core::Lt2 => attention::multi_head_lt(&q, &k, &v, 2, DENOM_EPS, &mut c)?,
        };
        Ok(y.matrix().clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradEntry {
    pub core: Core,
    pub param: &'static str,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradReport {
    pub seed: u64,
    pub h: f64,
    pub tol: f64,
    pub entries: Vec<GradEntry>,
}

impl GradReport {
    pub fn worst(&self) -> &GradEntry {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
            .expect("non-empty report")
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_error < self.tol)
    }
}

/// Seeded inputs: `x` (C × N) and the three projections.
#[derive(Debug, Clone)]
pub struct Problem {
    pub x_query: Tensor,
    pub x_queried: Tensor,
    pub w_q: Pointwise,
    pub w_k: Pointwise,
    pub w_v: Pointwise,
}

impl Problem {
    pub fn seeded(seed: u64) -> Self {
        let mut rng = Seeded::new(seed);
        let bias = |rng: &mut Seeded| rng.uniform(&[CHANNELS], 0.5);
        let pw = |rng: &mut Seeded| {
            let w = Pointwise::seeded(rng, CHANNELS, CHANNELS);
            Pointwise::new(w.weight().clone(), bias(rng)).expect("matching bias")
        };
        let w_q = pw(&mut rng);
        let w_k = pw(&mut rng);
        let w_v = pw(&mut rng);
        Problem {
            x_query: rng.uniform(&[CHANNELS, POSITIONS], 1.0),
            x_queried: rng.uniform(&[CHANNELS, POSITIONS], 1.0),
            w_q,
            w_k,
            w_v,
        }
    }

    pub fn qkv(&self) -> Result<(Tensor, Tensor, Tensor)> {
        let apply = |w: &Pointwise, x: &Tensor| -> Result<Tensor> {
            Ok(w.apply(&SequencedMap::from_sequence(x.clone())?)?.matrix().clone())
        };
        Ok((apply(&self.w_q, &self.x_query)?, apply(&self.w_k, &self.x_queried)?, apply(&self.w_v, &self.x_queried)?))
    }
}

/// Tape gradient of `sum(core(q, k, v))` with respect to `q`, `k`, `v`.
pub fn core_gradients(core: Core, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<[Tensor; 3]> {
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.leaf(q.clone()), g.leaf(k.clone()), g.leaf(v.clone()));
    let y = core.build(&mut g, qv, kv, vv)?;
    let s = g.sum(y);
    let grads = g.backward(s)?;
    Ok([grads.get(qv), grads.get(kv), grads.get(vv)])
}

/// Tape gradient of the projected block's summed output with respect to
/// the three projection weights.
pub fn projection_gradients(core: Core, p: &Problem) -> Result<[Tensor; 3]> {
    let mut g = Graph::new();
    let xq = g.leaf(p.x_query.clone());
    let xk = g.leaf(p.x_queried.clone());
    let mut leaf = |w: &Pointwise| (g.leaf(w.weight().clone()), g.leaf(w.bias().clone()));
    let (wq, bq) = leaf(&p.w_q);
    let (wk, bk) = leaf(&p.w_k);
    let (wv, bv) = leaf(&p.w_v);
    let q = g.linear(wq, bq, xq)?;
    let k = g.linear(wk, bk, xk)?;
    let v = g.linear(wv, bv, xk)?;
    let y = core.build(&mut g, q, k, v)?;
    let s = g.sum(y);
    let grads = g.backward(s)?;
    Ok([grads.get(wq), grads.get(wk), grads.get(wv)])
}

fn summed(t: Tensor) -> Tensor {
    Tensor::scalar(t.sum())
}

fn check(analytic: &Tensor, f: impl Fn(&Tensor) -> Result<Tensor>, x: &Tensor, h: f64) -> Result<f64> {
    let numeric = finite_diff_jacobian(|t| Ok(summed(f(t)?)), x, h)?;
    max_relative_error(analytic, &numeric, REL_FLOOR)
}

/// Compares tape and central-difference gradients for every core with
/// respect to Q, K, V and the three projection weights.
pub fn run_gradcheck(seed: u64, h: f64, tol: f64) -> Result<GradReport> {
    if !(h > 0.0) || !(tol > 0.0) {
        return Err(Error::invalid("gradcheck", "step and tolerance must be positive"));
    }
    let p = Problem::seeded(seed);
    let (q, k, v) = p.qkv()?;
    let mut entries = Vec::new();
    for core in Core::ALL {
        let [gq, gk, gv] = core_gradients(core, &q, &k, &v)?;
        let errs = [
            ("Q", check(&gq, |t| core.forward(t, &k, &v), &q, h)?),
            ("K", check(&gk, |t| core.forward(&q, t, &v), &k, h)?),
            ("V", check(&gv, |t| core.forward(&q, &k, t), &v, h)?),
        ];
        let [gwq, gwk, gwv] = projection_gradients(core, &p)?;
        let with = |which: usize, w: &Tensor| -> Result<Tensor> {
            let mut p2 = p.clone();
            let slot = match which {
                0 => &mut p2.w_q,
                1 => &mut p2.w_k,
                _ => &mut p2.w_v,
            };
            *slot = Pointwise::new(w.clone(), slot.bias().clone())?;
            let (q, k, v) = p2.qkv()?;
            core.forward(&q, &k, &v)
        };
        let proj_errs = [
            ("W_q", check(&gwq, |w| with(0, w), p.w_q.weight(), h)?),
            ("W_k", check(&gwk, |w| with(1, w), p.w_k.weight(), h)?),
            ("W_v", check(&gwv, |w| with(2, w), p.w_v.weight(), h)?),
        ];
        for (param, max_rel_error) in errs.into_iter().chain(proj_errs) {
            entries.push(GradEntry {
                core,
                param,
                max_rel_error,
            });
        }
    }
    Ok(GradReport { seed, h, tol, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;

    #[test]
    fn seeded_check_passes() {
        let r = run_gradcheck(0, 1e-5, 1e-4).unwrap();
        assert_eq!(r.entries.len(), 18);
        assert!(r.passed(), "worst {:?}", r.worst());
    }

    #[test]
    fn constant_values_give_column_mass() {
        let p = Problem::seeded(3);
        let (q, k, _) = p.qkv().unwrap();
        let v = Tensor::full(&[CHANNELS, POSITIONS], 0.7);
        let [gq, gk, gv] = core_gradients(Core::Sa, &q, &k, &v).unwrap();
        let w = ops::softmax_rows(&ops::matmul(&ops::transpose(&q).unwrap(), &k).unwrap()).unwrap();
        for c in 0..CHANNELS {
            for j in 0..POSITIONS {
                let mass: f64 = (0..POSITIONS).map(|i| w.at2(i, j)).sum();
                assert!((gv.at2(c, j) - mass).abs() <= 1e-12);
            }
        }
        assert!(gq.max_abs() <= 1e-12 && gk.max_abs() <= 1e-12);
    }

    #[test]
    fn zero_query_gradient_is_finite() {
        let p = Problem::seeded(4);
        let (_, k, v) = p.qkv().unwrap();
        let q = Tensor::zeros(&[CHANNELS, POSITIONS]);
        for core in [Core::Lt, Core::Lt2] {
            let [gq, _, _] = core_gradients(core, &q, &k, &v).unwrap();
            assert!(gq.data().iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let (q, k, v) = Problem::seeded(5).qkv().unwrap();
        for core in Core::ALL {
            let mut g = Graph::new();
            let (a, b, c) = (g.leaf(q.clone()), g.leaf(k.clone()), g.leaf(v.clone()));
            let y = core.build(&mut g, a, b, c).unwrap();
            let plain = core.forward(&q, &k, &v).unwrap();
            assert!(g.value(y).max_abs_diff(&plain).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn rejects_bad_settings() {
        assert!(run_gradcheck(0, 0.0, 1e-4).is_err());
        assert!(run_gradcheck(0, 1e-5, -1.0).is_err());
    }
}
