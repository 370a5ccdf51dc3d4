//! `cafpn`: verification and benchmarking front end.
//!
//! Exit status: 0 success, 1 a check failed, 2 usage or I/O error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cafpn::attention::{attention_block_counted, AttentionKind, Pointwise, ProjectionSet, SequencedMap};
use cafpn::complexity::{self, flops_formula_sa, Kind, SweepOptions};
use cafpn::demo::{self, DemoInput, DemoOptions};
use cafpn::gradcheck;
use cafpn::init::Seeded;
use cafpn::selfcheck::{self, DEFAULT_FIXTURES};

#[derive(Parser)]
#[command(name = "cafpn", version, about = "Content-augmented pyramid: checks, benchmarks and activation dumps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every invariant suite and print one JSON line per check.
    Selfcheck {
        /// Directory holding the golden fixtures and SHA256SUMS.
        #[arg(long, default_value = DEFAULT_FIXTURES)]
        fixtures: PathBuf,
    },
    /// Compare tape gradients against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Count and time one attention block over a sweep of sequence lengths.
    Bench {
        #[arg(long)]
        kind: Kind,
        #[arg(long)]
        channels: usize,
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Instrumented exact-attention MACs against the closed-form count.
    Flops(FlopsArgs),
    /// Run the augmented pyramid and dump P2..P6 activations.
    Demo(DemoArgs),
}

#[derive(Args)]
struct FlopsArgs {
    /// Check the closed form over a fixed set of (C, H, W) triples.
    #[arg(long)]
    check_eq8: bool,
    #[arg(long, requires_all = ["height", "width"])]
    channels: Option<u64>,
    #[arg(long)]
    height: Option<u64>,
    #[arg(long)]
    width: Option<u64>,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["input", "random"]))]
struct DemoArgs {
    /// `1 × 3 × H × W` TNSR image.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Seeded random image of the given height and width.
    #[arg(long, num_args = 2, value_names = ["H", "W"])]
    random: Option<Vec<usize>>,
    /// Seed of the random image.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    dump_dir: PathBuf,
    /// Parameter manifest to load instead of seeded weights.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Directory to write the weights that were used.
    #[arg(long)]
    save_params: Option<PathBuf>,
    #[arg(long, default_value_t = demo::DEFAULT_PARAM_SEED)]
    param_seed: u64,
}

const FAIL: u8 = 1;
const USAGE: u8 = 2;

/// Triples checked by `flops --check-eq8`.
const FLOPS_TRIPLES: [(u64, u64, u64); 12] = [
    (8, 4, 4),
    (1, 1, 1),
    (2, 3, 5),
    (4, 2, 2),
    (3, 7, 1),
    (16, 4, 8),
    (5, 5, 5),
    (8, 8, 8),
    (6, 1, 9),
    (12, 3, 3),
    (7, 2, 6),
    (32, 2, 2),
];

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(FAIL),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(USAGE)
        }
    }
}

fn run(command: Command) -> cafpn::Result<bool> {
    match command {
        Command::Selfcheck { fixtures } => Ok(run_selfcheck(fixtures)),
        Command::Gradcheck { seed, h, tol } => {
            let report = gradcheck::run_gradcheck(seed, h, tol)?;
            for e in &report.entries {
                println!("{}", serde_json::to_string(e).expect("serializable entry"));
            }
            let w = report.worst();
            eprintln!(
                "gradcheck: worst {}/{} = {:.3e} (tol {:.1e}) {}",
                w.core.name(),
                w.param,
                w.max_rel_error,
                tol,
                if report.passed() { "PASS" } else { "FAIL" }
            );
            Ok(report.passed())
        }
        Command::Bench {
            kind,
            channels,
            sizes,
            out,
            trials,
            seed,
        } => {
            let report = complexity::scaling_experiment(kind, channels, &sizes, &SweepOptions { trials, seed }, Some(&out))?;
            for r in &report.records {
                println!(
                    "{} C={} N={} ({}×{}) macs={} aux_peak={} wall_ns={}",
                    r.kind, r.c, r.n, r.h, r.w, r.macs, r.aux_peak, r.wall_ns
                );
            }
            println!("exponent {:.4} (r² {:.5})", report.fit.exponent, report.fit.r2);
            println!("crossover at C={channels}: N={}", complexity::crossover(channels)?);
            println!("wrote {}", out.display());
            Ok(true)
        }
        Command::Flops(args) => run_flops(args),
        Command::Demo(args) => {
            let input = match (args.input, args.random) {
                (Some(p), _) => DemoInput::File(p),
                (None, Some(hw)) => DemoInput::Random {
                    height: hw[0],
                    width: hw[1],
                    seed: args.seed,
                },
                (None, None) => unreachable!("clap requires one source"),
            };
            let mut opts = DemoOptions::new(input, args.dump_dir);
            opts.params = args.params;
            opts.save_params = args.save_params;
            opts.param_seed = args.param_seed;
            let report = demo::run_demo(&opts)?;
            for s in &report.levels {
                println!("P{} {}×{} min {:.6e} mean {:.6e} max {:.6e}", s.level, s.height, s.width, s.min, s.mean, s.max);
            }
            for f in &report.files {
                println!("wrote {}", f.display());
            }
            Ok(true)
        }
    }
}

fn run_selfcheck(fixtures: PathBuf) -> bool {
    let results = selfcheck::run_selfcheck_with(&fixtures, |r| println!("{}", selfcheck::to_json_line(r)));
    let failed: Vec<_> = results.iter().filter(|r| !r.passed).collect();
    let total_ms: u64 = results.iter().map(|r| r.millis).sum();
    for r in &failed {
        eprintln!("FAIL {}/{}: {}", r.suite, r.check, r.detail);
    }
    eprintln!("selfcheck: {}/{} passed in {:.1} s", results.len() - failed.len(), results.len(), total_ms as f64 / 1e3);
    failed.is_empty()
}

/// Counted MACs and aux peak of one exact-attention block over `c × h × w`.
fn counted_sa(c: u64, h: u64, w: u64) -> cafpn::Result<(u64, u64)> {
    let (c, h, w) = (c as usize, h as usize, w as usize);
    let mut rng = Seeded::new(1);
    let x = SequencedMap::from_matrix(rng.uniform(&[c, h * w], 1.0), h, w)?;
    let proj = ProjectionSet::seeded(&mut rng, c, c, c).with_output(Pointwise::seeded(&mut rng, c, c))?;
    let (_, counts) = attention_block_counted(&x, &x, &proj, AttentionKind::Exact)?;
    let t = counts.total();
    Ok((t.macs(), t.aux_peak()))
}

fn run_flops(args: FlopsArgs) -> cafpn::Result<bool> {
    let mut triples = Vec::new();
    if let (Some(c), Some(h), Some(w)) = (args.channels, args.height, args.width) {
        triples.push((c, h, w));
    }
    if args.check_eq8 || triples.is_empty() {
        triples.extend(FLOPS_TRIPLES);
    }
    let mut ok = true;
    println!("C,H,W,formula_macs,counted_macs,formula_aux,counted_aux,match");
    for (c, h, w) in triples {
        let formula = flops_formula_sa(c, h, w);
        let counted = counted_sa(c, h, w)?;
        let agree = formula == counted;
        ok &= agree;
        println!("{c},{h},{w},{},{},{},{},{agree}", formula.0, counted.0, formula.1, counted.1);
    }
    Ok(ok)
}
