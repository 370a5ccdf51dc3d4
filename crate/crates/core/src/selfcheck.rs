//! Every invariant suite, run as one release gate, plus the golden
//! fixtures it compares against.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::attention::{
    self, attention_block_counted, cross_attention_block, AttentionConfig, AttentionKind, Pointwise, ProjectionSet,
    SequencedMap, DENOM_EPS,
};
use crate::complexity::{self, flops_formula_sa, Kind, SweepOptions};
use crate::counter::OpCounter;
use crate::error::{Error, Result};
use crate::gcem::{self, dcn_v2, gcem_forward_blocks, GcemConfig, GcemParams};
use crate::grad::{finite_diff_jacobian, max_relative_error, Graph};
use crate::gradcheck;
use crate::init::Seeded;
use crate::io::tnsr;
use crate::ops::{self, ConvSpec};
use crate::pyramid::{self, ca_fpn_forward_traced, fpn_forward, CaFpnParams, PyramidConfig};
use crate::tensor::{DType, Tensor};

/// Fixture directory shipped with this crate.
pub const DEFAULT_FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/testdata/v1");

pub const CHECKSUMS: &str = "SHA256SUMS";
pub const GOLDEN_SEED: u64 = 20_240_611;
/// Relative tolerance when comparing recomputed values against fixtures.
pub const GOLDEN_RTOL: f64 = 1e-9;

pub const GCEM_NORMS: &str = "gcem_block_norms.tnsr";
pub const LEVEL_NORMS: &str = "pyramid_level_norms.tnsr";
pub const ATTN_Q: &str = "attn_q.tnsr";
pub const ATTN_K: &str = "attn_k.tnsr";
pub const ATTN_V: &str = "attn_v.tnsr";
pub const ATTN_LT: &str = "attn_lt_expected.tnsr";
pub const ATTN_SA: &str = "attn_sa_expected.tnsr";

const FIXTURES: [&str; 7] = [GCEM_NORMS, LEVEL_NORMS, ATTN_Q, ATTN_K, ATTN_V, ATTN_LT, ATTN_SA];

// ---------------------------------------------------------------------------
// fixtures

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read_checksums(dir: &Path) -> Result<Vec<(String, String)>> {
    let path = dir.join(CHECKSUMS);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut parts = l.split_whitespace();
            match (parts.next(), parts.next()) {
                (Some(sum), Some(name)) => Ok((name.trim_start_matches('*').to_string(), sum.to_string())),
                _ => Err(Error::Fixture {
                    name: CHECKSUMS.into(),
                    msg: format!("malformed line `{l}`"),
                }),
            }
        })
        .collect()
}

/// Reads a fixture after checking it against the directory's checksums.
pub fn load_fixture(dir: &Path, name: &str) -> Result<Tensor> {
    let sums = read_checksums(dir)?;
    let fixture_err = |msg: String| Error::Fixture {
        name: name.to_string(),
        msg,
    };
    let expected = sums
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, s)| s.clone())
        .ok_or_else(|| fixture_err("not listed in SHA256SUMS".into()))?;
    let path = dir.join(name);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let actual = sha256_hex(&bytes);
    if actual != expected {
        return Err(fixture_err(format!("checksum mismatch (expected {expected}, found {actual})")));
    }
    tnsr::decode(&bytes).map_err(|e| fixture_err(e.to_string()))
}

fn golden_gcem_setup() -> Result<(Tensor, GcemConfig, GcemParams)> {
    let cfg = GcemConfig::new(512);
    let params = GcemParams::seeded(&cfg, GOLDEN_SEED)?;
    let x = Seeded::new(GOLDEN_SEED + 1).uniform(&[1, 512, 8, 8], 1.0);
    Ok((x, cfg, params))
}

/// Norm of every block output of the seeded five-block run on
/// `1 × 512 × 8 × 8`.
pub fn reference_gcem_norms() -> Result<Tensor> {
    let (x, cfg, params) = golden_gcem_setup()?;
    let outs = gcem_forward_blocks(&x, &cfg, &params)?;
    Tensor::new(&[outs.len()], outs.iter().map(Tensor::norm).collect())
}

fn golden_pyramid_setup() -> Result<(Tensor, CaFpnParams, PyramidConfig)> {
    let cfg = PyramidConfig::default();
    let params = CaFpnParams::seeded(&cfg, GOLDEN_SEED)?;
    let image = Seeded::new(GOLDEN_SEED + 2).uniform(&[1, 3, 64, 64], 1.0);
    Ok((image, params, cfg))
}

/// Norm of every augmented level P2..P6 of the seeded pyramid on a seeded
/// `1 × 3 × 64 × 64` image.
pub fn reference_level_norms() -> Result<Tensor> {
    let (image, params, cfg) = golden_pyramid_setup()?;
    let (levels, _) = ca_fpn_forward_traced(&image, &params, &cfg)?;
    Tensor::new(&[levels.len()], levels.iter().map(|m| m.tensor.norm()).collect())
}

/// Seeded `(q, k, v)` for the attention fixtures.
pub fn reference_attention_inputs() -> (Tensor, Tensor, Tensor) {
    let mut rng = Seeded::new(GOLDEN_SEED + 3);
    (rng.uniform(&[8, 12], 1.0), rng.uniform(&[8, 20], 1.0), rng.uniform(&[6, 20], 1.0))
}

fn seqs(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(SequencedMap, SequencedMap, SequencedMap)> {
    Ok((
        SequencedMap::from_sequence(q.clone())?,
        SequencedMap::from_sequence(k.clone())?,
        SequencedMap::from_sequence(v.clone())?,
    ))
}

/// Writes every fixture plus `SHA256SUMS` into `dir`.
pub fn bless(dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (q, k, v) = reference_attention_inputs();
    let (qs, ks, vs) = seqs(&q, &k, &v)?;
    let lt = attention::lt_bruteforce(&qs, &ks, &vs, DENOM_EPS)?;
    let sa = attention::sa_exact(&qs, &ks, &vs, &mut OpCounter::new())?;
    let tensors = [
        (GCEM_NORMS, reference_gcem_norms()?),
        (LEVEL_NORMS, reference_level_norms()?),
        (ATTN_Q, q),
        (ATTN_K, k),
        (ATTN_V, v),
        (ATTN_LT, lt.matrix().clone()),
        (ATTN_SA, sa.matrix().clone()),
    ];
    let mut sums = String::new();
    let mut written = Vec::new();
    for (name, t) in &tensors {
        let bytes = tnsr::encode(t);
        let path = dir.join(name);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        writeln!(sums, "{}  {name}", sha256_hex(&bytes)).expect("string write");
        written.push(path);
    }
    let path = dir.join(CHECKSUMS);
    fs::write(&path, sums).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}

// ---------------------------------------------------------------------------
// checks

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub suite: &'static str,
    pub check: &'static str,
    pub passed: bool,
    pub detail: String,
    pub millis: u64,
}

struct Outcome {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome {
        passed,
        detail: detail.into(),
    })
}

type CheckFn = fn(&Path) -> Result<Outcome>;

/// `(suite, check, function)` for every check, in run order.
const CHECKS: &[(&str, &str, CheckFn)] = &[
    ("fixtures", "checksums", fixtures_checksums),
    ("tensor-core", "tnsr_round_trip", tnsr_round_trip),
    ("tensor-core", "conv_linearity", conv_linearity),
    ("tensor-core", "softmax_extreme_rows", softmax_extreme_rows),
    ("tensor-core", "counter_composition", counter_composition),
    ("tensor-core", "differentiable_contract", differentiable_contract),
    ("attention-core", "factored_identity", factored_identity),
    ("attention-core", "attention_fixture", attention_fixture),
    ("attention-core", "key_permutation", key_permutation),
    ("attention-core", "convexity", convexity),
    ("attention-core", "taylor_order", taylor_order),
    ("attention-core", "gradient_correctness", gradient_correctness),
    ("attention-core", "counter_law", counter_law),
    ("attention-core", "softmax_shift", softmax_shift),
    ("gcem", "shape_law", gcem_shape_law),
    ("gcem", "dense_connection_arithmetic", dense_connection_arithmetic),
    ("gcem", "dcn_reduction", dcn_reduction),
    ("gcem", "sam_envelope", sam_envelope),
    ("gcem", "determinism", gcem_determinism),
    ("gcem", "golden_block_norms", gcem_golden),
    ("ca-fpn-pyramid", "shapes_and_trace", pyramid_shapes_and_trace),
    ("ca-fpn-pyramid", "degradation_law", degradation_law),
    ("ca-fpn-pyramid", "set_semantics", set_semantics),
    ("ca-fpn-pyramid", "query_locality", query_locality),
    ("ca-fpn-pyramid", "golden_level_norms", pyramid_golden),
    ("bench-cli", "formula_counter_agreement", formula_counter_agreement),
    ("bench-cli", "scaling_exponents", scaling_exponents),
    ("bench-cli", "csv_determinism", csv_determinism),
];

/// Names of every check, as `suite/check`.
pub fn check_names() -> Vec<String> {
    CHECKS.iter().map(|(s, c, _)| format!("{s}/{c}")).collect()
}

/// Runs every check; a check that errors counts as failed with the error
/// as its detail.
pub fn run_selfcheck(fixtures: &Path) -> Vec<CheckResult> {
    run_selfcheck_with(fixtures, |_| {})
}

/// As [`run_selfcheck`], handing each result to `on_result` as it finishes.
pub fn run_selfcheck_with(fixtures: &Path, mut on_result: impl FnMut(&CheckResult)) -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|&(suite, check, f)| {
            let start = Instant::now();
            let (passed, detail) = match f(fixtures) {
                Ok(o) => (o.passed, o.detail),
                Err(e) => (false, format!("error: {e}")),
            };
            let r = CheckResult {
                suite,
                check,
                passed,
                detail,
                millis: start.elapsed().as_millis() as u64,
            };
            on_result(&r);
            r
        })
        .collect()
}

fn fixtures_checksums(dir: &Path) -> Result<Outcome> {
    let mut bad = Vec::new();
    for name in FIXTURES {
        if let Err(e) = load_fixture(dir, name) {
            bad.push(e.to_string());
        }
    }
    verdict(bad.is_empty(), if bad.is_empty() { format!("{} fixtures verified", FIXTURES.len()) } else { bad.join("; ") })
}

fn tnsr_round_trip(_: &Path) -> Result<Outcome> {
    let mut rng = Seeded::new(1);
    for i in 0..40 {
        let ndim = 1 + i % 4;
        let dims: Vec<usize> = (0..ndim).map(|j| 1 + (i * 7 + j * 3) % 5).collect();
        let dtype = if i % 2 == 0 { DType::F32 } else { DType::F64 };
        let t = rng.uniform(&dims, 10.0).to_dtype(dtype);
        let bytes = tnsr::encode(&t);
        let back = tnsr::decode(&bytes)?;
        if back != t || tnsr::encode(&back) != bytes {
            return verdict(false, format!("case {i} did not round-trip"));
        }
    }
    verdict(true, "40 tensors byte-identical")
}

fn conv_linearity(_: &Path) -> Result<Outcome> {
    let mut rng = Seeded::new(2);
    let mut worst = 0.0f64;
    for i in 0..50 {
        let (c_in, c_out, k, d) = (1 + i % 3, 1 + i % 4, [1, 3, 5][i % 3], 1 + i % 2);
        let spec = ConvSpec::new(rng.uniform(&[c_out, c_in, k, k], 1.0), Tensor::zeros(&[c_out]), d)?;
        let x = rng.uniform(&[1, c_in, 6, 5], 1.0);
        let y = rng.uniform(&[1, c_in, 6, 5], 1.0);
        let (a, b) = (rng.uniform(&[1], 2.0).data()[0], rng.uniform(&[1], 2.0).data()[0]);
        let mix = ops::add(&x.map(|v| a * v), &y.map(|v| b * v))?;
        let lhs = ops::conv2d(&mix, &spec)?;
        let rhs = ops::add(&ops::conv2d(&x, &spec)?.map(|v| a * v), &ops::conv2d(&y, &spec)?.map(|v| b * v))?;
        worst = worst.max(lhs.max_abs_diff(&rhs)? / rhs.max_abs().max(1e-300));
    }
    verdict(worst <= 1e-10, format!("max relative deviation {worst:.3e} over 50 cases"))
}

fn softmax_extreme_rows(_: &Path) -> Result<Outcome> {
    let mut rng = Seeded::new(3);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let x = rng.uniform(&[4, 9], 1e4);
        let p = ops::softmax_rows(&x)?;
        for row in p.data().chunks(9) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            if row.iter().any(|&v| !(v >= 0.0)) {
                return verdict(false, "negative or non-finite weight");
            }
        }
    }
    verdict(worst <= 1e-6, format!("max |row sum − 1| = {worst:.3e}"))
}

fn counter_composition(_: &Path) -> Result<Outcome> {
    let mut rng = Seeded::new(4);
    let a = rng.uniform(&[3, 5], 1.0);
    let b = rng.uniform(&[5, 4], 1.0);
    let c = rng.uniform(&[4, 2], 1.0);
    let (mut f, mut g, mut both) = (OpCounter::new(), OpCounter::new(), OpCounter::new());
    let ab = ops::matmul_counted(&a, &b, &mut f)?;
    ops::matmul_counted(&ab, &c, &mut g)?;
    let ab2 = ops::matmul_counted(&a, &b, &mut both)?;
    ops::matmul_counted(&ab2, &c, &mut both)?;

    let x = SequencedMap::from_sequence(rng.uniform(&[4, 30], 1.0))?;
    let (mut sa, mut lt, mut chained) = (OpCounter::new(), OpCounter::new(), OpCounter::new());
    attention::sa_exact(&x, &x, &x, &mut sa)?;
    attention::lt_attention(&x, &x, &x, DENOM_EPS, &mut lt)?;
    attention::sa_exact(&x, &x, &x, &mut chained)?;
    attention::lt_attention(&x, &x, &x, DENOM_EPS, &mut chained)?;
    let ok = both == f + g && chained == sa + lt;
    verdict(ok, format!("matmul chain {} MACs, attention chain {} MACs", both.macs(), chained.macs()))
}

fn differentiable_contract(_: &Path) -> Result<Outcome> {
    let mut rng = Seeded::new(5);
    // 2-D chain: matmul → l2 normalize → softmax → mul → scale → sum
    let x = rng.uniform(&[3, 4], 1.0);
    let w = rng.uniform(&[4, 5], 1.0);
    let m = rng.uniform(&[3, 5], 1.0);
    let chain2 = |g: &mut Graph, xv| -> Result<_> {
        let wv = g.leaf(w.clone());
        let mv = g.leaf(m.clone());
        let y = g.matmul(xv, wv)?;
        let y = g.l2_normalize_rows(y, ops::L2_EPS)?;
        let y = g.softmax_rows(y)?;
        let y = g.mul(y, mv)?;
        let y = g.scale(y, 1.7)?;
        Ok(g.sum(y))
    };
    // 4-D chain: 1×1 conv → sigmoid → add → relu → sum
    let x4 = rng.uniform(&[1, 3, 2, 3], 1.0);
    let w4 = rng.uniform(&[4, 3, 1, 1], 1.0);
    let b4 = rng.uniform(&[4], 1.0);
    let s4 = rng.uniform(&[1, 4, 2, 3], 0.2);
    let chain4 = |g: &mut Graph, xv| -> Result<_> {
        let wv = g.leaf(w4.clone());
        let bv = g.leaf(b4.clone());
        let sv = g.leaf(s4.clone());
        let y = g.linear(wv, bv, xv)?;
        let y = g.sigmoid(y)?;
        let y = g.add(y, sv)?;
        let y = g.relu(y)?;
        Ok(g.sum(y))
    };
    let mut worst = 0.0f64;
    for (build, x) in [(&chain2 as &dyn Fn(&mut Graph, _) -> Result<_>, &x), (&chain4, &x4)] {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let s = build(&mut g, xv)?;
        let analytic = g.backward(s)?.get(xv);
        let numeric = finite_diff_jacobian(
            |t| {
                let mut g = Graph::new();
                let tv = g.leaf(t.clone());
                let s = build(&mut g, tv)?;
                Ok(g.value(s).clone())
            },
            x,
            1e-5,
        )?;
        worst = worst.max(max_relative_error(&analytic, &numeric, gradcheck::REL_FLOOR)?);
    }
    verdict(worst < 1e-4, format!("max relative error {worst:.3e}"))
}

fn factored_identity(_: &Path) -> Result<Outcome> {
    let mut rng = Seeded::new(6);
    let mut worst = 0.0f64;
    for i in 0..120 {
        let c = 2 + i % 15;
        let nq = 1 + (i * 17) % 64;
        let nk = 1 + (i * 29) % 64;
        let q = SequencedMap::from_sequence(rng.uniform(&[c, nq], 1.0))?;
        let k = SequencedMap::from_sequence(rng.uniform(&[c, nk], 1.0))?;
        let v = SequencedMap::from_sequence(rng.uniform(&[c, nk], 1.0))?;
        let a = attention::lt_attention(&q, &k, &v, DENOM_EPS, &mut OpCounter::new())?;
        let b = attention::lt_bruteforce(&q, &k, &v, DENOM_EPS)?;
        worst = worst.max(a.matrix().max_abs_diff(b.matrix())?);
    }
    verdict(worst <= 1e-10, format!("max |Δ| = {worst:.3e} over 120 instances"))
}

fn attention_fixture(dir: &Path) -> Result<Outcome> {
    let (q, k, v) = (load_fixture(dir, ATTN_Q)?, load_fixture(dir, ATTN_K)?, load_fixture(dir, ATTN_V)?);
    let lt_want = load_fixture(dir, ATTN_LT)?;
    let sa_want = load_fixture(dir, ATTN_SA)?;
    let (qs, ks, vs) = seqs(&q, &k, &v)?;
    let lt = attention::lt_attention(&qs, &ks, &vs, DENOM_EPS, &mut OpCounter::new())?;
    let sa = attention::sa_exact(&qs, &ks, &vs, &mut OpCounter::new())?;
    let d_lt = lt.matrix().max_abs_diff(&lt_want)?;
    let d_sa = sa.matrix().max_abs_diff(&sa_want)?;
    verdict(d_lt <= 1e-10 && d_sa <= 1e-10, format!("lt |Δ| {d_lt:.3e}, sa |Δ| {d_sa:.3e}"))
}

fn key_permutation(_: &Path) -> Result<Outcome> {
    let mut rng = Seeded::new(7);
    let mut worst = 0.0f64;
    for i in 0..20 {
        let (c, nq, nk) = (2 + i % 6, 1 + i % 7, 2 + i % 11);
        let q = SequencedMap::from_sequence(rng.uniform(&[c, nq], 1.0))?;
        let k = SequencedMap::from_sequence(rng.uniform(&[c, nk], 1.0))?;
        let v = SequencedMap::from_sequence(rng.uniform(&[c, nk], 1.0))?;
        let perm = rng.permutation(nk);
        let (kp, vp) = (k.permute_positions(&perm)?, v.permute_positions(&perm)?);
        let mut cnt = OpCounter::new();
        let d_sa = attention::sa_exact(&q, &k, &v, &mut cnt)?
            .matrix()
            .max_abs_diff(attention::sa_exact(&q, &kp, &vp, &mut cnt)?.matrix())?;
        let d_lt = attention::lt_attention(&q, &k, &v, DENOM_EPS, &mut cnt)?
            .matrix()
            .max_abs_diff(attention::lt_attention(&q, &kp, &vp, DENOM_EPS, &mut cnt)?.matrix())?;
        worst = worst.max(d_sa).max(d_lt);
    }
    verdict(worst <= 1e-10, format!("max |Δ| = {worst:.3e}"))
}

fn convexity(_: &Path) -> Result<Outcome> {
    let mut rng = Seeded::new(8);
    let mut worst = 0.0f64;
    for i in 0..30 {
        let (c, nq, nk) = (2 + i % 6, 1 + i % 9, 1 + i % 13);
        let q = SequencedMap::from_sequence(rng.uniform(&[c, nq], 3.0))?;
        let k = SequencedMap::from_sequence(rng.uniform(&[c, nk], 3.0))?;
        let v = SequencedMap::from_sequence(rng.uniform(&[c, nk], 1.0))?;
        let sa = attention::sa_exact(&q, &k, &v, &mut OpCounter::new())?;
        let lt = attention::lt_attention(&q, &k, &v, DENOM_EPS, &mut OpCounter::new())?;
        let qn = ops::l2_normalize_rows(&ops::transpose(q.matrix())?, ops::L2_EPS)?;
        let kn = ops::l2_normalize_rows(&ops::transpose(k.matrix())?, ops::L2_EPS)?;
        let sims = ops::matmul(&qn, &ops::transpose(&kn)?)?;
        for ch in 0..c {
            let row = &v.matrix().data()[ch * nk..(ch + 1) * nk];
            let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for qi in 0..nq {
                let weight_sum: f64 = (0..nk).map(|j| 1.0 + sims.at2(qi, j)).sum();
                // denom_eps shrinks the linearized output toward zero by eps/(Σw + eps)
                let shrink = lo.abs().max(hi.abs()) * DENOM_EPS / (weight_sum + DENOM_EPS);
                let out_sa = sa.matrix().at2(ch, qi);
                let out_lt = lt.matrix().at2(ch, qi);
                let excess = |y: f64, slack: f64| ((lo - slack) - y).max(y - (hi + slack)).max(0.0);
                worst = worst.max(excess(out_sa, 0.0)).max(excess(out_lt, shrink));
            }
        }
    }
    verdict(worst <= 1e-9, format!("max hull excess {worst:.3e}"))
}

/// Ratio of mixing-weight discrepancies at temperatures 0.1 and 0.01 for
/// one seeded set of unit query and keys.
pub fn taylor_ratio(seed: u64, c: usize, n: usize) -> Result<f64> {
    let mut rng = Seeded::new(seed);
    let q = ops::l2_normalize_rows(&rng.uniform(&[1, c], 1.0), ops::L2_EPS)?;
    let k = ops::l2_normalize_rows(&rng.uniform(&[n, c], 1.0), ops::L2_EPS)?;
    let sims = ops::matmul(&k, &ops::transpose(&q)?)?;
    let e1 = attention::mixing_weight_discrepancy(sims.data(), 0.1);
    let e2 = attention::mixing_weight_discrepancy(sims.data(), 0.01);
    Ok(e1 / e2)
}

fn taylor_order(_: &Path) -> Result<Outcome> {
    let ratios = (0..24).map(|s| taylor_ratio(100 + s, 8, 16)).collect::<Result<Vec<_>>>()?;
    let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    verdict(lo >= 30.0 && hi <= 300.0, format!("ratios in [{lo:.2}, {hi:.2}] over 24 trials"))
}

fn gradient_correctness(_: &Path) -> Result<Outcome> {
    let r = gradcheck::run_gradcheck(0, 1e-5, 1e-4)?;
    let w = r.worst();
    verdict(r.passed(), format!("worst {}/{} = {:.3e}", w.core.name(), w.param, w.max_rel_error))
}

fn counter_law(_: &Path) -> Result<Outcome> {
    let c = 4;
    let mut rng = Seeded::new(9);
    for n in [16, 32, 64, 128, 256] {
        let x = SequencedMap::from_sequence(rng.uniform(&[c, n], 1.0))?;
        let (mut sa, mut lt) = (OpCounter::new(), OpCounter::new());
        attention::sa_exact(&x, &x, &x, &mut sa)?;
        attention::lt_attention(&x, &x, &x, DENOM_EPS, &mut lt)?;
        let (n, c) = (n as u64, c as u64);
        if sa.macs() != 2 * n * n * c || lt.macs() != 2 * n * c * c + n * c {
            return verdict(false, format!("N={n}: sa {} MACs, lt {} MACs", sa.macs(), lt.macs()));
        }
    }
    verdict(true, "sa = 2N²C and lt = 2NC² + NC exactly for N in 16..256")
}

fn softmax_shift(_: &Path) -> Result<Outcome> {
    let mut rng = Seeded::new(10);
    let q = rng.uniform(&[4, 6], 1.0);
    let k = rng.uniform(&[4, 9], 1.0);
    let v = SequencedMap::from_sequence(rng.uniform(&[4, 9], 1.0))?;
    let base = attention::sa_exact(
        &SequencedMap::from_sequence(q.clone())?,
        &SequencedMap::from_sequence(k.clone())?,
        &v,
        &mut OpCounter::new(),
    )?;
    // An extra channel holding a constant key shifts each logit row by a
    // row-dependent constant.
    let extend = |t: &Tensor, f: &dyn Fn(usize) -> f64| -> Result<SequencedMap> {
        let n = t.dims()[1];
        let mut d = t.data().to_vec();
        d.extend((0..n).map(f));
        SequencedMap::from_sequence(Tensor::new(&[5, n], d)?)
    };
    let shifted = attention::sa_exact(
        &extend(&q, &|i| 3.0 * i as f64 - 4.0)?,
        &extend(&k, &|_| 1.5)?,
        &v,
        &mut OpCounter::new(),
    )?;
    let d = base.matrix().max_abs_diff(shifted.matrix())?;
    verdict(d <= 1e-10, format!("max |Δ| = {d:.3e}"))
}

fn small_gcem(c_in: usize) -> GcemConfig {
    GcemConfig {
        in_channels: c_in,
        compress_channels: 12,
        block_channels: 8,
        num_blocks: 5,
        dilations: vec![1, 2, 3, 4, 5],
    }
}

fn gcem_shape_law(_: &Path) -> Result<Outcome> {
    for (c_in, h, w) in [(3, 1, 1), (5, 2, 7), (4, 7, 7), (6, 9, 4)] {
        let cfg = small_gcem(c_in);
        let params = GcemParams::seeded(&cfg, 11)?;
        let x = Seeded::new(12).uniform(&[1, c_in, h, w], 1.0);
        let y = gcem::gcem_forward(&x, &cfg, &params)?;
        if y.dims() != [1, 8, h, w] {
            return verdict(false, format!("{h}×{w} input gave {:?}", y.dims()));
        }
    }
    verdict(true, "spatial size preserved, 8 channels, down to 1×1")
}

fn dense_connection_arithmetic(_: &Path) -> Result<Outcome> {
    let cfg = GcemConfig::new(512);
    let params = GcemParams::seeded(&cfg, GOLDEN_SEED)?;
    params.check(&cfg)?;
    let widths: Vec<usize> = params.blocks.iter().map(|b| b.compress.in_channels()).collect();
    let want: Vec<usize> = (1..=5).map(|i| 512 + 256 * (i - 1)).collect();
    verdict(widths == want, format!("compressor widths {widths:?}"))
}

fn dcn_reduction(_: &Path) -> Result<Outcome> {
    let cfg = GcemConfig::new(512);
    let params = GcemParams::seeded(&cfg, GOLDEN_SEED)?;
    let mut rng = Seeded::new(13);
    let mut worst = 0.0f64;
    for b in &params.blocks {
        let x = rng.uniform(&[1, 512, 6, 6], 1.0);
        let y = dcn_v2(&x, &b.dcn, &Tensor::zeros(&[1, 18, 6, 6]), &Tensor::full(&[1, 9, 6, 6], 1.0))?;
        worst = worst.max(y.max_abs_diff(&ops::conv2d(&x, &b.dcn.main)?)?);
    }
    verdict(worst <= 1e-10, format!("max |Δ| = {worst:.3e} over dilations 1..5"))
}

fn sam_envelope(_: &Path) -> Result<Outcome> {
    let mut rng = Seeded::new(14);
    for _ in 0..10 {
        let x = rng.uniform(&[2, 5, 6, 7], 3.0);
        let sam = ConvSpec::new(rng.uniform(&[1, 2, 7, 7], 1.0), rng.uniform(&[1], 1.0), 1)?;
        let y = gcem::residual_sam(&x, &sam)?;
        for (&a, &b) in x.data().iter().zip(y.data()) {
            if !(b.abs() >= a.abs() && b.abs() <= 2.0 * a.abs()) {
                return verdict(false, format!("input {a} gave {b}"));
            }
        }
    }
    let x = rng.uniform(&[1, 4, 5, 5], 1.0);
    let half = gcem::residual_sam(&x, &ConvSpec::zeros(1, 2, 7, 1)?)?;
    verdict(half == x.map(|v| 1.5 * v), "envelope holds; zero conv gives 1.5× exactly")
}

fn gcem_determinism(_: &Path) -> Result<Outcome> {
    let cfg = small_gcem(6);
    let x = Seeded::new(15).uniform(&[1, 6, 5, 5], 1.0);
    let a = gcem::gcem_forward(&x, &cfg, &GcemParams::seeded(&cfg, 16)?)?;
    let b = gcem::gcem_forward(&x, &cfg, &GcemParams::seeded(&cfg, 16)?)?;
    verdict(a == b && a.data().iter().all(|v| v.is_finite()), "bit-identical reruns")
}

fn compare_golden(dir: &Path, name: &str, got: &Tensor) -> Result<Outcome> {
    let want = load_fixture(dir, name)?;
    if want.dims() != got.dims() {
        return verdict(false, format!("{name}: dims {:?} vs {:?}", want.dims(), got.dims()));
    }
    let worst = want
        .data()
        .iter()
        .zip(got.data())
        .map(|(a, b)| (a - b).abs() / a.abs().max(1e-300))
        .fold(0.0, f64::max);
    verdict(
        worst <= GOLDEN_RTOL && got.data().iter().all(|v| v.is_finite()),
        format!("{name}: max relative deviation {worst:.3e}"),
    )
}

fn gcem_golden(dir: &Path) -> Result<Outcome> {
    compare_golden(dir, GCEM_NORMS, &reference_gcem_norms()?)
}

fn pyramid_golden(dir: &Path) -> Result<Outcome> {
    compare_golden(dir, LEVEL_NORMS, &reference_level_norms()?)
}

fn pyramid_shapes_and_trace(_: &Path) -> Result<Outcome> {
    let (image, params, cfg) = golden_pyramid_setup()?;
    let (levels, trace) = ca_fpn_forward_traced(&image, &params, &cfg)?;
    let dims: Vec<Vec<usize>> = levels.iter().map(|m| m.tensor.dims().to_vec()).collect();
    let want: Vec<Vec<usize>> = [16, 8, 4, 2, 1].iter().map(|&s| vec![1, 256, s, s]).collect();
    let ok = dims == want && trace.gcem_calls == 1 && trace.partitions == [(2, 1), (3, 1), (4, 2), (5, 2)];
    verdict(ok, format!("dims {dims:?}, gcem calls {}, partitions {:?}", trace.gcem_calls, trace.partitions))
}

fn degradation_law(_: &Path) -> Result<Outcome> {
    let (image, mut params, cfg) = golden_pyramid_setup()?;
    params.zero_value_projections();
    let (ca, _) = ca_fpn_forward_traced(&image, &params, &cfg)?;
    let plain = fpn_forward(&image, &params)?;
    verdict(ca == plain, "zeroed value projections reproduce the plain pyramid bit-exactly")
}

fn set_semantics(_: &Path) -> Result<Outcome> {
    let cfg = PyramidConfig::default();
    let params = CaFpnParams::seeded(&cfg, GOLDEN_SEED)?;
    let image = Seeded::new(GOLDEN_SEED + 2).uniform(&[1, 3, 128, 128], 1.0);
    let c = pyramid::backbone_stub(&image, &params.backbone)?;
    let p = pyramid::fpn_fuse(&c, &params.fpn)?;
    let g = gcem::gcem_forward(&c[3].tensor, &params.gcem_config, &params.gcem)?;
    let n = g.dims()[2] * g.dims()[3];
    let perm = Seeded::new(17).permutation(n);
    let gp = SequencedMap::from_map(&g, 0)?.permute_positions(&perm)?.to_map();
    let (a, _) = pyramid::augment_pyramid(&p, &g, &params.attention, &cfg)?;
    let (b, _) = pyramid::augment_pyramid(&p, &gp, &params.attention, &cfg)?;
    let mut worst = 0.0f64;
    for (x, y) in a.iter().zip(&b) {
        worst = worst.max(x.tensor.max_abs_diff(&y.tensor)?);
    }
    verdict(worst <= 1e-10, format!("max |Δ| = {worst:.3e} over {n} permuted positions"))
}

fn query_locality(_: &Path) -> Result<Outcome> {
    let mut rng = Seeded::new(18);
    let proj = ProjectionSet::seeded(&mut rng, 16, 16, 16);
    let g = rng.uniform(&[1, 16, 3, 3], 1.0);
    let base = rng.uniform(&[1, 16, 4, 5], 1.0);
    let mut worst_off = 0.0f64;
    let mut changed = true;
    for s in [1, 2] {
        let cfg = AttentionConfig::new(16, s)?;
        let a0 = cross_attention_block(&base, &g, &proj, &cfg)?;
        for pos in [0, 7, 19] {
            let mut moved = base.clone();
            for ch in 0..16 {
                let i = ch * 20 + pos;
                moved = moved.with_value(i, moved.data()[i] - 0.8);
            }
            let a1 = cross_attention_block(&moved, &g, &proj, &cfg)?;
            let mut here = 0.0f64;
            for ch in 0..16 {
                for p in 0..20 {
                    let d = (a0.data()[ch * 20 + p] - a1.data()[ch * 20 + p]).abs();
                    if p == pos {
                        here = here.max(d);
                    } else {
                        worst_off = worst_off.max(d);
                    }
                }
            }
            changed &= here > 0.0;
        }
    }
    verdict(worst_off <= 1e-12 && changed, format!("max off-position change {worst_off:.3e}"))
}

fn formula_counter_agreement(_: &Path) -> Result<Outcome> {
    let triples = [(8, 4, 4), (1, 1, 1), (2, 3, 5), (4, 2, 2), (3, 7, 1), (16, 4, 8), (5, 5, 5), (8, 8, 8), (6, 1, 9), (12, 3, 3), (7, 2, 6)];
    let mut rng = Seeded::new(19);
    for (c, h, w) in triples {
        let x = SequencedMap::from_matrix(rng.uniform(&[c, h * w], 1.0), h, w)?;
        let proj = ProjectionSet::seeded(&mut rng, c, c, c).with_output(Pointwise::seeded(&mut rng, c, c))?;
        let (_, counts) = attention_block_counted(&x, &x, &proj, AttentionKind::Exact)?;
        let t = counts.total();
        if (t.macs(), t.aux_peak()) != flops_formula_sa(c as u64, h as u64, w as u64) {
            return verdict(false, format!("(C,H,W)=({c},{h},{w}): counted {} MACs", t.macs()));
        }
    }
    verdict(true, format!("{} triples agree, including 8192 at (8, 4, 4)", triples.len()))
}

fn scaling_exponents(_: &Path) -> Result<Outcome> {
    let sizes = [256, 1024, 2048, 4096];
    let o = SweepOptions::default();
    let sa = complexity::scaling_experiment(Kind::Sa, 8, &sizes, &o, None)?;
    let lt = complexity::scaling_experiment(Kind::Lt, 8, &sizes, &o, None)?;
    let aux_ok = sa.records.iter().all(|r| r.aux_peak == (r.n * r.n) as u64) && lt.records.iter().all(|r| r.aux_peak <= 80);
    let ok = (1.9..=2.1).contains(&sa.fit.exponent)
        && (0.9..=1.1).contains(&lt.fit.exponent)
        && sa.fit.r2 > 0.99
        && lt.fit.r2 > 0.99
        && aux_ok;
    verdict(
        ok,
        format!(
            "sa exponent {:.4} (r² {:.5}), lt exponent {:.4} (r² {:.5}), aux laws {}",
            sa.fit.exponent,
            sa.fit.r2,
            lt.fit.exponent,
            lt.fit.r2,
            if aux_ok { "hold" } else { "violated" }
        ),
    )
}

fn csv_determinism(_: &Path) -> Result<Outcome> {
    let dir = std::env::temp_dir().join(format!("cafpn-selfcheck-{}", std::process::id()));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let o = SweepOptions::default();
    let mut columns = Vec::new();
    for i in 0..2 {
        let path = dir.join(format!("run{i}.csv"));
        complexity::scaling_experiment(Kind::Lt, 4, &[64, 256, 512, 1024], &o, Some(&path))?;
        let mut rdr = csv::Reader::from_path(&path)?;
        let rows: Vec<(String, String)> = rdr
            .records()
            .map(|r| r.map(|r| (r[5].to_string(), r[6].to_string())))
            .collect::<std::result::Result<_, _>>()?;
        columns.push(rows);
    }
    let _ = fs::remove_dir_all(&dir);
    verdict(columns[0] == columns[1], "macs and aux_peak columns identical across runs")
}

/// Machine-readable line for one result.
pub fn to_json_line(r: &CheckResult) -> String {
    serde_json::to_string(r).expect("serializable result")
}
