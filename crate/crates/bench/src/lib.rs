//! Seeded inputs shared by the benchmarks.

use cafpn::attention::{Pointwise, ProjectionSet, SequencedMap};
use cafpn::gcem::{GcemConfig, GcemParams};
use cafpn::init::Seeded;
use cafpn::{Result, Tensor};

/// A near-square `c × n` map with four seeded projections.
pub fn attention_inputs(c: usize, n: usize, seed: u64) -> Result<(SequencedMap, ProjectionSet)> {
    let (h, w) = cafpn::complexity::near_square(n);
    let mut rng = Seeded::new(seed);
    let x = SequencedMap::from_matrix(rng.uniform(&[c, n], 1.0), h, w)?;
    let proj = ProjectionSet::seeded(&mut rng, c, c, c).with_output(Pointwise::seeded(&mut rng, c, c))?;
    Ok((x, proj))
}

/// A reduced-width extractor and a matching `1 × c_in × size × size` input.
pub fn gcem_inputs(c_in: usize, size: usize, seed: u64) -> Result<(Tensor, GcemConfig, GcemParams)> {
    let config = GcemConfig {
        in_channels: c_in,
        compress_channels: 32,
        block_channels: 32,
        num_blocks: 5,
        dilations: vec![1, 2, 3, 4, 5],
    };
    let params = GcemParams::seeded(&config, seed)?;
    let x = Seeded::new(seed + 1).uniform(&[1, c_in, size, size], 1.0);
    Ok((x, config, params))
}
