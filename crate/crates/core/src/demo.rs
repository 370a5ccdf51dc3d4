//! Activation dumps of the augmented pyramid: one channel-0 PGM per level
//! plus per-level statistics.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::init::Seeded;
use crate::io::{pgm, tnsr, ParamStore};
use crate::pyramid::{ca_fpn_forward, CaFpnParams, FeatureMap, PyramidConfig};
use crate::tensor::Tensor;

/// Seed of the pyramid weights when no parameter manifest is given.
pub const DEFAULT_PARAM_SEED: u64 = 7;

pub const STATS_FILE: &str = "stats.txt";

#[derive(Debug, Clone, PartialEq)]
pub enum DemoInput {
    /// A `1 × 3 × H × W` TNSR image.
    File(PathBuf),
    /// A seeded uniform image in `[-1, 1]`.
    Random { height: usize, width: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoOptions {
    pub input: DemoInput,
    pub dump_dir: PathBuf,
    /// Parameter manifest to load instead of seeding.
    pub params: Option<PathBuf>,
    /// Directory to write the parameters that were used.
    pub save_params: Option<PathBuf>,
    pub param_seed: u64,
}

impl DemoOptions {
    pub fn new(input: DemoInput, dump_dir: impl Into<PathBuf>) -> Self {
        DemoOptions {
            input,
            dump_dir: dump_dir.into(),
            params: None,
            save_params: None,
            param_seed: DEFAULT_PARAM_SEED,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelStats {
    pub level: usize,
    pub height: usize,
    pub width: usize,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

impl LevelStats {
    pub fn of(map: &FeatureMap) -> Self {
        let (height, width) = map.spatial();
        let d = map.tensor.data();
        LevelStats {
            level: map.level,
            height,
            width,
            min: d.iter().copied().fold(f64::INFINITY, f64::min),
            mean: map.tensor.sum() / d.len() as f64,
            max: d.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoReport {
    pub levels: Vec<LevelStats>,
    /// PGM dumps in level order, then the stats file.
    pub files: Vec<PathBuf>,
}

pub fn load_input(input: &DemoInput) -> Result<Tensor> {
    match input {
        DemoInput::File(path) => tnsr::read_tensor(path),
        DemoInput::Random { height, width, seed } => Ok(Seeded::new(*seed).uniform(&[1, 3, *height, *width], 1.0)),
    }
}

fn channel0(map: &FeatureMap) -> &[f64] {
    let (h, w) = map.spatial();
    &map.tensor.data()[..h * w]
}

/// Writes `P{level}.pgm` for every level and the stats file into `dir`.
pub fn dump_levels(levels: &[FeatureMap], dir: &Path) -> Result<DemoReport> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    let mut stats = Vec::new();
    let mut text = String::from("level height width min mean max\n");
    for m in levels {
        let (h, w) = m.spatial();
        let path = dir.join(format!("P{}.pgm", m.level));
        pgm::write_pgm(&path, channel0(m), h, w)?;
        files.push(path);
        let s = LevelStats::of(m);
        writeln!(text, "P{} {} {} {:.9e} {:.9e} {:.9e}", s.level, s.height, s.width, s.min, s.mean, s.max)
            .expect("string write");
        stats.push(s);
    }
    let path = dir.join(STATS_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    files.push(path);
    Ok(DemoReport { levels: stats, files })
}

pub fn run_demo(options: &DemoOptions) -> Result<DemoReport> {
    let config = PyramidConfig::default();
    let image = load_input(&options.input)?;
    let params = match &options.params {
        Some(manifest) => CaFpnParams::import(&ParamStore::load(manifest)?, &config)?,
        None => CaFpnParams::seeded(&config, options.param_seed)?,
    };
    if let Some(dir) = &options.save_params {
        params.export().save(dir)?;
    }
    let levels = ca_fpn_forward(&image, &params, &config)?;
    dump_levels(&levels, &options.dump_dir)
}
