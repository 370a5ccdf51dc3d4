//! Operation-count formulas, scaling sweeps and slope fits.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;

use crate::attention::{attention_block_counted, AttentionKind, Pointwise, ProjectionSet, SequencedMap, DENOM_EPS};
use crate::error::{Error, Result};
use crate::init::Seeded;

/// `(macs, aux)` of one exact attention block with four `C × C`
/// projections over an `H × W` map: `4HWC² + 2H²W²C` and `H²W²`.
pub fn flops_formula_sa(c: u64, h: u64, w: u64) -> (u64, u64) {
    let n = h * w;
    (4 * n * c * c + 2 * n * n * c, n * n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Sa,
    Lt,
}

impl Kind {
    pub fn attention(self) -> AttentionKind {
        match self {
            Kind::Sa => AttentionKind::Exact,
            Kind::Lt => AttentionKind::Linear {
                partitions: 1,
                eps: DENOM_EPS,
            },
        }
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kind::Sa => "sa",
            Kind::Lt => "lt",
        })
    }
}

impl FromStr for Kind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sa" => Ok(Kind::Sa),
            "lt" => Ok(Kind::Lt),
            other => Err(Error::invalid("kind", format!("expected `sa` or `lt`, got `{other}`"))),
        }
    }
}

/// One row of a scaling sweep.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BenchRecord {
    pub kind: Kind,
    #[serde(rename = "C")]
    pub c: usize,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub macs: u64,
    pub aux_peak: u64,
    pub wall_ns: u64,
}

/// Least-squares slope of `ln y` against `ln x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlopeFit {
    pub exponent: f64,
    pub r2: f64,
}

impl SlopeFit {
    pub fn log_log(points: &[(f64, f64)]) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::invalid("slope_fit", "need at least two points"));
        }
        if points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
            return Err(Error::invalid("slope_fit", "log-log fit needs positive values"));
        }
        let pts: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
        if sxx == 0.0 {
            return Err(Error::invalid("slope_fit", "x values must not all coincide"));
        }
        let exponent = sxy / sxx;
        let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0) };
        Ok(SlopeFit { exponent, r2 })
    }
}

/// Most nearly square `(h, w)` with `h·w == n` and `h <= w`.
pub fn near_square(n: usize) -> (usize, usize) {
    let mut h = (n as f64).sqrt() as usize;
    while h > 1 && n % h != 0 {
        h -= 1;
    }
    let h = h.max(1);
    (h, n / h)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingReport {
    pub records: Vec<BenchRecord>,
    pub fit: SlopeFit,
}

#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub trials: usize,
    pub seed: u64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions { trials: 5, seed: 0 }
    }
}

fn check_sweep(kind: Kind, c: usize, sizes: &[usize]) -> Result<()> {
    if c == 0 {
        return Err(Error::invalid("scaling_experiment", "channels must be positive"));
    }
    if sizes.len() < 4 {
        return Err(Error::invalid("scaling_experiment", format!("need at least 4 sizes, got {}", sizes.len())));
    }
    let lo = *sizes.iter().min().expect("nonempty");
    let hi = *sizes.iter().max().expect("nonempty");
    if lo == 0 || hi < 16 * lo {
        return Err(Error::invalid("scaling_experiment", format!("sizes must span at least 16×, got {lo}..{hi}")));
    }
    if kind == Kind::Sa && lo < 16 * c {
        return Err(Error::invalid(
            "scaling_experiment",
            format!("exact attention needs N ≥ 16·C = {} for the quadratic term to dominate", 16 * c),
        ));
    }
    Ok(())
}

/// Counts and times one attention block over an `H × W` map.
pub fn measure(kind: Kind, c: usize, n: usize, options: &SweepOptions) -> Result<BenchRecord> {
    let (h, w) = near_square(n);
    let mut rng = Seeded::new(options.seed ^ (n as u64).rotate_left(17) ^ c as u64);
    let x = SequencedMap::from_matrix(rng.uniform(&[c, n], 1.0), h, w)?;
    let proj = ProjectionSet::seeded(&mut rng, c, c, c).with_output(Pointwise::seeded(&mut rng, c, c))?;
    let (_, counts) = attention_block_counted(&x, &x, &proj, kind.attention())?;
    let total = counts.total();
    let mut times = Vec::with_capacity(options.trials);
    for _ in 0..options.trials.max(1) {
        let start = Instant::now();
        let (_, again) = attention_block_counted(&x, &x, &proj, kind.attention())?;
        times.push(start.elapsed().as_nanos() as u64);
        if again != counts {
            return Err(Error::invalid("measure", "operation counts differ between runs"));
        }
    }
    times.sort_unstable();
    Ok(BenchRecord {
        kind,
        c,
        h,
        w,
        n,
        macs: total.macs(),
        aux_peak: total.aux_peak(),
        wall_ns: times[times.len() / 2],
    })
}

/// Measures every size (one warm-up plus `trials` timed runs, reporting the
/// median), fits the MAC exponent and optionally writes the CSV.
pub fn scaling_experiment(
    kind: Kind,
    c: usize,
    sizes: &[usize],
    options: &SweepOptions,
    out: Option<&Path>,
) -> Result<ScalingReport> {
    check_sweep(kind, c, sizes)?;
    if options.trials < 5 {
        return Err(Error::invalid("scaling_experiment", "at least 5 timed trials"));
    }
    let records = sizes.iter().map(|&n| measure(kind, c, n, options)).collect::<Result<Vec<_>>>()?;
    let fit = SlopeFit::log_log(&records.iter().map(|r| (r.n as f64, r.macs as f64)).collect::<Vec<_>>())?;
    if let Some(path) = out {
        write_csv(path, &records)?;
    }
    Ok(ScalingReport { records, fit })
}

pub fn write_csv(path: &Path, records: &[BenchRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Smallest `N` at which the linearized core counts fewer MACs than the
/// exact core at width `c`, found by running both counted cores.
pub fn crossover(c: usize) -> Result<usize> {
    let mut rng = Seeded::new(c as u64);
    let proj = ProjectionSet::seeded(&mut rng, c, c, c).with_output(Pointwise::seeded(&mut rng, c, c))?;
    for n in 1..=64 * c.max(1) {
        let x = SequencedMap::from_matrix(rng.uniform(&[c, n], 1.0), 1, n)?;
        let (_, sa) = attention_block_counted(&x, &x, &proj, Kind::Sa.attention())?;
        let (_, lt) = attention_block_counted(&x, &x, &proj, Kind::Lt.attention())?;
        if lt.core.macs() < sa.core.macs() {
            return Ok(n);
        }
    }
    Err(Error::invalid("crossover", "no crossover found"))
}
