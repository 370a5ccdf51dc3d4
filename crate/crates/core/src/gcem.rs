//! Global content extraction: densely connected blocks of channel
//! compression, modulated deformable convolution and residual spatial
//! attention over the topmost backbone map.

use crate::error::{Error, Result};
use crate::init::Seeded;
use crate::io::ParamStore;
use crate::ops::{self, ConvSpec, Elementwise};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GcemConfig {
    pub in_channels: usize,
    pub compress_channels: usize,
    pub block_channels: usize,
    pub num_blocks: usize,
    pub dilations: Vec<usize>,
}

impl GcemConfig {
    /// Five blocks compressing to 512 and emitting 256, dilations 1..=5.
    pub fn new(in_channels: usize) -> Self {
        GcemConfig {
            in_channels,
            compress_channels: 512,
            block_channels: 256,
            num_blocks: 5,
            dilations: vec![1, 2, 3, 4, 5],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dilations.len() != self.num_blocks {
            return Err(Error::invalid(
                "gcem_config",
                format!("{} dilations for {} blocks", self.dilations.len(), self.num_blocks),
            ));
        }
        if self.num_blocks == 0 || self.in_channels == 0 || self.compress_channels == 0 || self.block_channels == 0 {
            return Err(Error::invalid("gcem_config", "extents must be positive"));
        }
        if self.dilations.contains(&0) {
            return Err(Error::invalid("gcem_config", "dilation must be positive"));
        }
        Ok(())
    }

    /// Width of the concatenated input seen by block `i` (1-based).
    pub fn compressor_in_width(&self, i: usize) -> usize {
        self.in_channels + self.block_channels * (i - 1)
    }
}

/// Main deformable weights plus the offset and mask predictors.
#[derive(Debug, Clone, PartialEq)]
pub struct DcnV2Params {
    pub main: ConvSpec,
    pub offset: ConvSpec,
    pub mask: ConvSpec,
}

impl DcnV2Params {
    pub fn new(main: ConvSpec, offset: ConvSpec, mask: ConvSpec) -> Result<Self> {
        let taps = main.kernel_size() * main.kernel_size();
        if offset.out_channels() != 2 * taps {
            return Err(Error::shape("dcn_v2_params", format!("{} offset channels", 2 * taps), offset.out_channels()));
        }
        if mask.out_channels() != taps {
            return Err(Error::shape("dcn_v2_params", format!("{taps} mask channels"), mask.out_channels()));
        }
        for p in [&offset, &mask] {
            if p.in_channels() != main.in_channels() {
                return Err(Error::shape("dcn_v2_params", format!("{} predictor inputs", main.in_channels()), p.in_channels()));
            }
            if p.output_extent(7) != Some(7) {
                return Err(Error::invalid("dcn_v2_params", "predictors must preserve spatial size"));
            }
        }
        Ok(DcnV2Params { main, offset, mask })
    }

    /// Seeded 3×3 main conv; zero offset and mask predictors.
    pub fn seeded(rng: &mut Seeded, out_ch: usize, in_ch: usize, dilation: usize) -> Self {
        let main = rng.conv(out_ch, in_ch, 3, dilation);
        let offset = ConvSpec::zeros(18, in_ch, 3, dilation).expect("static shape");
        let mask = ConvSpec::zeros(9, in_ch, 3, dilation).expect("static shape");
        DcnV2Params { main, offset, mask }
    }

    pub fn dilation(&self) -> usize {
        self.main.dilation()
    }
}

/// Raw offsets (channel `2k` = Δy, `2k+1` = Δx for tap `k = kh·K + kw`)
/// and sigmoid mask.
pub fn predict_offsets_mask(input: &Tensor, params: &DcnV2Params) -> Result<(Tensor, Tensor)> {
    let offsets = ops::conv2d(input, &params.offset)?;
    let logits = ops::conv2d(input, &params.mask)?;
    Ok((offsets, ops::elementwise(&logits, Elementwise::Sigmoid)?))
}

/// Modulated deformable convolution: each tap `k` at `p₀` reads the input
/// bilinearly at `p₀ + d·g_k + Δp_k(p₀)` and is scaled by `m_k(p₀)`.
pub fn dcn_v2(input: &Tensor, params: &DcnV2Params, offsets: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.nchw("dcn_v2")?;
    let main = &params.main;
    if c != main.in_channels() {
        return Err(Error::shape("dcn_v2", format!("{} input channels", main.in_channels()), c));
    }
    let k = main.kernel_size();
    let taps = k * k;
    if offsets.dims() != [n, 2 * taps, h, w] {
        return Err(Error::shape("dcn_v2", format!("offsets [{n}, {}, {h}, {w}]", 2 * taps), format!("{:?}", offsets.dims())));
    }
    if mask.dims() != [n, taps, h, w] {
        return Err(Error::shape("dcn_v2", format!("mask [{n}, {taps}, {h}, {w}]"), format!("{:?}", mask.dims())));
    }
    let d = main.dilation() as f64;
    let half = (k / 2) as f64;
    let plane = h * w;
    let c_out = main.out_channels();
    let wt = main.weights().data();
    let bias = main.bias().data();

    let mut out = vec![0.0; n * c_out * plane];
    // columns: (c·taps + k) × plane
    let mut cols = vec![0.0; c * taps * plane];
    for b in 0..n {
        let x = &input.data()[b * c * plane..][..c * plane];
        let off = &offsets.data()[b * 2 * taps * plane..][..2 * taps * plane];
        let m = &mask.data()[b * taps * plane..][..taps * plane];
        for tap in 0..taps {
            let gy = (tap / k) as f64 - half;
            let gx = (tap % k) as f64 - half;
            for p in 0..plane {
                let y = (p / w) as f64 + d * gy + off[2 * tap * plane + p];
                let xx = (p % w) as f64 + d * gx + off[(2 * tap + 1) * plane + p];
                let mk = m[tap * plane + p];
                for ci in 0..c {
                    let v = if mk == 0.0 { 0.0 } else { mk * ops::sample_plane(&x[ci * plane..][..plane], h, w, y, xx) };
                    cols[(ci * taps + tap) * plane + p] = v;
                }
            }
        }
        let dst = &mut out[b * c_out * plane..][..c_out * plane];
        for o in 0..c_out {
            let row = &mut dst[o * plane..][..plane];
            row.fill(bias[o]);
            let wrow = &wt[o * c * taps..][..c * taps];
            for (r, &wv) in wrow.iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                let col = &cols[r * plane..][..plane];
                row.iter_mut().zip(col).for_each(|(a, &v)| *a += wv * v);
            }
        }
    }
    let dtype = input.dtype().promote(main.weights().dtype());
    Ok(Tensor::from_raw(dtype, vec![n, c_out, h, w], out))
}

/// `x + x ⊙ σ(conv(channel_stats(x)))`, the gate broadcast over channels.
pub fn residual_sam(input: &Tensor, sam_conv: &ConvSpec) -> Result<Tensor> {
    if sam_conv.in_channels() != 2 || sam_conv.out_channels() != 1 {
        return Err(Error::shape(
            "residual_sam",
            "2-in/1-out conv",
            format!("{}-in/{}-out", sam_conv.in_channels(), sam_conv.out_channels()),
        ));
    }
    let (n, c, h, w) = input.nchw("residual_sam")?;
    let stats = ops::channel_stats(input)?;
    let gate = ops::elementwise(&ops::conv2d(&stats, sam_conv)?, Elementwise::Sigmoid)?;
    if gate.dims() != [n, 1, h, w] {
        return Err(Error::invalid("residual_sam", "attention conv must preserve spatial size"));
    }
    let plane = h * w;
    let x = input.data();
    let a = gate.data();
    let mut out = Vec::with_capacity(x.len());
    for b in 0..n {
        let ab = &a[b * plane..][..plane];
        for ci in 0..c {
            let xb = &x[(b * c + ci) * plane..][..plane];
            out.extend(xb.iter().zip(ab).map(|(&x, &a)| x + x * a));
        }
    }
    Ok(Tensor::from_raw(input.dtype(), input.dims().to_vec(), out))
}

/// One dense block: 1×1 compression, deformable conv, residual SAM.
#[derive(Debug, Clone, PartialEq)]
pub struct GcemBlock {
    pub compress: ConvSpec,
    pub dcn: DcnV2Params,
    pub sam: ConvSpec,
}

impl GcemBlock {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let compressed = ops::conv2d(x, &self.compress)?;
        let (offsets, mask) = predict_offsets_mask(&compressed, &self.dcn)?;
        let deformed = dcn_v2(&compressed, &self.dcn, &offsets, &mask)?;
        residual_sam(&deformed, &self.sam)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcemParams {
    pub blocks: Vec<GcemBlock>,
}

impl GcemParams {
    /// Seeded compression, main and SAM convs; zero offset/mask predictors.
    pub fn seeded(config: &GcemConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Seeded::new(seed);
        let blocks = (1..=config.num_blocks)
            .map(|i| GcemBlock {
                compress: rng.conv(config.compress_channels, config.compressor_in_width(i), 1, 1),
                dcn: DcnV2Params::seeded(&mut rng, config.block_channels, config.compress_channels, config.dilations[i - 1]),
                sam: rng.conv(1, 2, 7, 1),
            })
            .collect();
        Ok(GcemParams { blocks })
    }

    pub fn export(&self, store: &mut ParamStore, prefix: &str) {
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("{prefix}.block{}", i + 1);
            store.insert_conv(&format!("{p}.compress"), &b.compress);
            store.insert_conv(&format!("{p}.dcn.main"), &b.dcn.main);
            store.insert_conv(&format!("{p}.dcn.offset"), &b.dcn.offset);
            store.insert_conv(&format!("{p}.dcn.mask"), &b.dcn.mask);
            store.insert_conv(&format!("{p}.sam"), &b.sam);
        }
    }

    pub fn import(store: &ParamStore, prefix: &str, config: &GcemConfig) -> Result<Self> {
        config.validate()?;
        let blocks = (1..=config.num_blocks)
            .map(|i| {
                let p = format!("{prefix}.block{i}");
                Ok(GcemBlock {
                    compress: store.conv(&format!("{p}.compress"))?,
                    dcn: DcnV2Params::new(
                        store.conv(&format!("{p}.dcn.main"))?,
                        store.conv(&format!("{p}.dcn.offset"))?,
                        store.conv(&format!("{p}.dcn.mask"))?,
                    )?,
                    sam: store.conv(&format!("{p}.sam"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(GcemParams { blocks })
    }

    /// Checks every block against the dense-connection channel arithmetic.
    pub fn check(&self, config: &GcemConfig) -> Result<()> {
        config.validate()?;
        if self.blocks.len() != config.num_blocks {
            return Err(Error::shape("gcem", format!("{} blocks", config.num_blocks), self.blocks.len()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let idx = i + 1;
            let wrap = |e: Error| Error::Block { index: idx, source: Box::new(e) };
            let expect = |what: &str, want: usize, got: usize| {
                if want == got {
                    Ok(())
                } else {
                    Err(wrap(Error::shape("gcem", format!("{want} {what}"), got)))
                }
            };
            expect("compressor inputs", config.compressor_in_width(idx), b.compress.in_channels())?;
            expect("compressor outputs", config.compress_channels, b.compress.out_channels())?;
            expect("compressor kernel", 1, b.compress.kernel_size())?;
            expect("deformable inputs", config.compress_channels, b.dcn.main.in_channels())?;
            expect("deformable outputs", config.block_channels, b.dcn.main.out_channels())?;
            expect("dilation", config.dilations[i], b.dcn.dilation())?;
        }
        Ok(())
    }
}

/// Every block's output, in order; the last is the module output.
pub fn gcem_forward_blocks(topmost: &Tensor, config: &GcemConfig, params: &GcemParams) -> Result<Vec<Tensor>> {
    let (_, c, _, _) = topmost.nchw("gcem_forward")?;
    if c != config.in_channels {
        return Err(Error::shape("gcem_forward", format!("{} input channels", config.in_channels), c));
    }
    params.check(config)?;
    let mut outputs: Vec<Tensor> = Vec::with_capacity(config.num_blocks);
    for (i, block) in params.blocks.iter().enumerate() {
        let run = || {
            let mut parts = vec![topmost];
            parts.extend(outputs.iter());
            let x = ops::channel_concat(&parts)?;
            block.forward(&x)
        };
        let y = run().map_err(|e| Error::Block { index: i + 1, source: Box::new(e) })?;
        outputs.push(y);
    }
    Ok(outputs)
}

/// Output of the last block: `block_channels` channels at the input's
/// spatial size.
pub fn gcem_forward(topmost: &Tensor, config: &GcemConfig, params: &GcemParams) -> Result<Tensor> {
    Ok(gcem_forward_blocks(topmost, config, params)?.pop().expect("at least one block"))
}
