//! Toy backbone, top-down FPN fusion and the content-augmented pyramid.

use std::cell::Cell;
use std::collections::BTreeMap;

use crate::attention::{cross_attention_block, AttentionConfig, Pointwise, ProjectionSet};
use crate::error::{Error, Result};
use crate::gcem::{gcem_forward, GcemConfig, GcemParams};
use crate::init::Seeded;
use crate::io::ParamStore;
use crate::ops::{self, ConvSpec, GroupNorm, Rescale};
use crate::tensor::Tensor;

/// A pyramid map at `level`, i.e. stride `2^level`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub tensor: Tensor,
    pub level: usize,
}

impl FeatureMap {
    pub fn new(tensor: Tensor, level: usize) -> Result<Self> {
        if !(2..=6).contains(&level) {
            return Err(Error::invalid("feature_map", format!("level {level} outside 2..=6")));
        }
        tensor.nchw("feature_map")?;
        Ok(FeatureMap { tensor, level })
    }

    pub fn stride(&self) -> usize {
        1 << self.level
    }

    pub fn channels(&self) -> usize {
        self.tensor.dims()[1]
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.tensor.dims()[2], self.tensor.dims()[3])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidConfig {
    pub fpn_channels: usize,
    pub lt_levels: Vec<usize>,
    pub high_partition_levels: Vec<usize>,
    pub groups: usize,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        PyramidConfig {
            fpn_channels: 256,
            lt_levels: vec![2, 3, 4, 5],
            high_partition_levels: vec![4, 5],
            groups: 32,
        }
    }
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lt_levels.iter().any(|l| !(2..=5).contains(l)) {
            return Err(Error::invalid("pyramid_config", "attention levels must lie in 2..=5"));
        }
        if self.high_partition_levels.iter().any(|l| !self.lt_levels.contains(l)) {
            return Err(Error::invalid("pyramid_config", "S = 2 levels must also receive attention"));
        }
        if self.groups == 0 || self.fpn_channels % self.groups != 0 {
            return Err(Error::invalid(
                "pyramid_config",
                format!("{} channels not divisible into {} groups", self.fpn_channels, self.groups),
            ));
        }
        if !self.high_partition_levels.is_empty() && self.fpn_channels % 2 != 0 {
            return Err(Error::invalid("pyramid_config", "channels must be divisible by 2 partitions"));
        }
        Ok(())
    }

    /// Partition count for `level`, `None` when the level passes through.
    pub fn partitions(&self, level: usize) -> Option<usize> {
        if !self.lt_levels.contains(&level) {
            None
        } else if self.high_partition_levels.contains(&level) {
            Some(2)
        } else {
            Some(1)
        }
    }
}

/// Stem conv 3→64 and three channel-doubling stage convs, all 3×3.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub stem: ConvSpec,
    pub stages: Vec<ConvSpec>,
}

impl BackboneParams {
    pub fn seeded(seed: u64) -> Self {
        let mut rng = Seeded::new(seed);
        BackboneParams {
            stem: rng.conv(64, 3, 3, 1),
            stages: vec![rng.conv(128, 64, 3, 1), rng.conv(256, 128, 3, 1), rng.conv(512, 256, 3, 1)],
        }
    }
}

/// C2..C5 from a `1 × 3 × H × W` image with `H`, `W` divisible by 32.
pub fn backbone_stub(image: &Tensor, params: &BackboneParams) -> Result<Vec<FeatureMap>> {
    let (_, c, h, w) = image.nchw("backbone_stub")?;
    if c != 3 {
        return Err(Error::shape("backbone_stub", "3 image channels", c));
    }
    if h % 32 != 0 || w % 32 != 0 {
        return Err(Error::invalid("backbone_stub", format!("{h}×{w} image not divisible by 32")));
    }
    let mut x = ops::relu(&ops::conv2d(image, &params.stem)?);
    x = ops::rescale(&x, Rescale::MaxPoolDown2x)?;
    x = ops::rescale(&x, Rescale::MaxPoolDown2x)?;
    let mut maps = vec![FeatureMap::new(x.clone(), 2)?];
    for (i, stage) in params.stages.iter().enumerate() {
        x = ops::relu(&ops::conv2d(&x, stage)?);
        x = ops::rescale(&x, Rescale::MaxPoolDown2x)?;
        maps.push(FeatureMap::new(x.clone(), i + 3)?);
    }
    Ok(maps)
}

/// Lateral 1×1 conv, output 3×3 conv and its group norm for one level.
#[derive(Debug, Clone, PartialEq)]
pub struct FpnLevel {
    pub inner: ConvSpec,
    pub layer: ConvSpec,
    pub norm: GroupNorm,
}

/// Per-level fusion weights, P2 first.
#[derive(Debug, Clone, PartialEq)]
pub struct FpnParams {
    pub levels: Vec<FpnLevel>,
}

impl FpnParams {
    pub fn seeded(rng: &mut Seeded, lateral_channels: &[usize], out: usize, groups: usize) -> Self {
        FpnParams {
            levels: lateral_channels
                .iter()
                .map(|&c| FpnLevel {
                    inner: rng.conv(out, c, 1, 1),
                    layer: rng.conv(out, out, 3, 1),
                    norm: GroupNorm::identity(out, groups),
                })
                .collect(),
        }
    }
}

/// Top-down fusion: `P'_i = inner(C_i) + up(P'_{i+1})`,
/// `P_i = groupnorm(layer(P'_i))`.
pub fn fpn_fuse(laterals: &[FeatureMap], params: &FpnParams) -> Result<Vec<FeatureMap>> {
    if laterals.len() != params.levels.len() || laterals.is_empty() {
        return Err(Error::shape("fpn_fuse", format!("{} laterals", params.levels.len()), laterals.len()));
    }
    for pair in laterals.windows(2) {
        let (h, w) = pair[0].spatial();
        let (h2, w2) = pair[1].spatial();
        if h != 2 * h2 || w != 2 * w2 || pair[1].level != pair[0].level + 1 {
            return Err(Error::shape(
                "fpn_fuse",
                format!("level {} at {}×{}", pair[0].level + 1, h / 2, w / 2),
                format!("level {} at {h2}×{w2}", pair[1].level),
            ));
        }
    }
    let mut out = vec![None; laterals.len()];
    let mut top: Option<Tensor> = None;
    for i in (0..laterals.len()).rev() {
        let lvl = &params.levels[i];
        let mut merged = ops::conv2d(&laterals[i].tensor, &lvl.inner)?;
        if let Some(t) = &top {
            merged = ops::add(&merged, &ops::rescale(t, Rescale::NearestUp2x)?)?;
        }
        let p = ops::group_norm(&ops::conv2d(&merged, &lvl.layer)?, &lvl.norm)?;
        out[i] = Some(FeatureMap::new(p, laterals[i].level)?);
        top = Some(merged);
    }
    Ok(out.into_iter().map(|m| m.expect("filled")).collect())
}

/// Stride-2 max-pool of P5; a 1×1 map passes through.
pub fn make_p6(p5: &FeatureMap) -> Result<FeatureMap> {
    let tensor = if p5.spatial() == (1, 1) {
        p5.tensor.clone()
    } else {
        ops::rescale(&p5.tensor, Rescale::MaxPoolDown2x)?
    };
    FeatureMap::new(tensor, p5.level + 1)
}

/// Every weight of the content-augmented pyramid.
#[derive(Debug, Clone, PartialEq)]
pub struct CaFpnParams {
    pub backbone: BackboneParams,
    pub fpn: FpnParams,
    pub gcem_config: GcemConfig,
    pub gcem: GcemParams,
    /// Cross-attention projections keyed by pyramid level.
    pub attention: BTreeMap<usize, ProjectionSet>,
}

const LATERALS: [usize; 4] = [64, 128, 256, 512];

impl CaFpnParams {
    pub fn seeded(config: &PyramidConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Seeded::new(seed);
        let backbone = BackboneParams::seeded(rng.next_u64());
        let fpn = FpnParams::seeded(&mut rng, &LATERALS, config.fpn_channels, config.groups);
        let mut gcem_config = GcemConfig::new(LATERALS[3]);
        gcem_config.block_channels = config.fpn_channels;
        let gcem = GcemParams::seeded(&gcem_config, rng.next_u64())?;
        let c = config.fpn_channels;
        let attention = config
            .lt_levels
            .iter()
            .map(|&l| (l, ProjectionSet::seeded(&mut rng, c, c, c)))
            .collect();
        Ok(CaFpnParams {
            backbone,
            fpn,
            gcem_config,
            gcem,
            attention,
        })
    }

    /// Zeroes every value projection, which makes each attention output
    /// identically zero.
    pub fn zero_value_projections(&mut self) {
        for p in self.attention.values_mut() {
            p.w_v = Pointwise::zeros(p.w_v.out_channels(), p.w_v.in_channels());
        }
    }

    /// Copy with every conv bias, projection bias and group-norm shift set
    /// to zero.
    pub fn zero_biases(&self, config: &PyramidConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let src = self.export();
        for name in src.names() {
            let t = src.get(name)?;
            let t = if name.ends_with(".bias") || name.ends_with(".beta") { Tensor::zeros(t.dims()) } else { t.clone() };
            store.insert(name, t);
        }
        Self::import(&store, config)
    }

    pub fn export(&self) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert_conv("backbone.stem", &self.backbone.stem);
        for (i, st) in self.backbone.stages.iter().enumerate() {
            s.insert_conv(&format!("backbone.stage{}", i + 3), st);
        }
        for (i, l) in self.fpn.levels.iter().enumerate() {
            let p = format!("fpn.P{}", i + 2);
            s.insert_conv(&format!("{p}.inner"), &l.inner);
            s.insert_conv(&format!("{p}.layer"), &l.layer);
            s.insert(format!("{p}.norm.gamma"), l.norm.gamma.clone());
            s.insert(format!("{p}.norm.beta"), l.norm.beta.clone());
        }
        self.gcem.export(&mut s, "gcem");
        for (level, proj) in &self.attention {
            for (name, pw) in [("q", &proj.w_q), ("k", &proj.w_k), ("v", &proj.w_v)] {
                s.insert(format!("attn.P{level}.{name}.weight"), pw.weight().clone());
                s.insert(format!("attn.P{level}.{name}.bias"), pw.bias().clone());
            }
        }
        s
    }

    pub fn import(store: &ParamStore, config: &PyramidConfig) -> Result<Self> {
        config.validate()?;
        let backbone = BackboneParams {
            stem: store.conv("backbone.stem")?,
            stages: (3..=5).map(|i| store.conv(&format!("backbone.stage{i}"))).collect::<Result<_>>()?,
        };
        let fpn = FpnParams {
            levels: (2..=5)
                .map(|i| {
                    let p = format!("fpn.P{i}");
                    Ok(FpnLevel {
                        inner: store.conv(&format!("{p}.inner"))?,
                        layer: store.conv(&format!("{p}.layer"))?,
                        norm: GroupNorm {
                            groups: config.groups,
                            gamma: store.get(&format!("{p}.norm.gamma"))?.clone(),
                            beta: store.get(&format!("{p}.norm.beta"))?.clone(),
                            eps: ops::GROUP_NORM_EPS,
                        },
                    })
                })
                .collect::<Result<_>>()?,
        };
        let mut gcem_config = GcemConfig::new(backbone.stages[2].out_channels());
        gcem_config.block_channels = config.fpn_channels;
        gcem_config.compress_channels = store.conv("gcem.block1.compress")?.out_channels();
        let gcem = GcemParams::import(store, "gcem", &gcem_config)?;
        let c = config.fpn_channels;
        let pw = |level: usize, name: &str| {
            let p = Pointwise::new(
                store.get(&format!("attn.P{level}.{name}.weight"))?.clone(),
                store.get(&format!("attn.P{level}.{name}.bias"))?.clone(),
            )?;
            if (p.out_channels(), p.in_channels()) != (c, c) {
                return Err(Error::shape(
                    "param_store",
                    format!("attn.P{level}.{name} {c}×{c}"),
                    format!("{}×{}", p.out_channels(), p.in_channels()),
                ));
            }
            Ok(p)
        };
        let attention = config
            .lt_levels
            .iter()
            .map(|&l| Ok((l, ProjectionSet::new(pw(l, "q")?, pw(l, "k")?, pw(l, "v")?)?)))
            .collect::<Result<_>>()?;
        Ok(CaFpnParams {
            backbone,
            fpn,
            gcem_config,
            gcem,
            attention,
        })
    }
}

/// What one forward pass did, for structural assertions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForwardTrace {
    pub gcem_calls: usize,
    /// `(level, S)` for every level that received attention.
    pub partitions: Vec<(usize, usize)>,
}

/// Adds `cross_attention_block(P_L, G)` to every attention level; other
/// levels pass through.
pub fn augment_pyramid(
    levels: &[FeatureMap],
    g: &Tensor,
    attention: &BTreeMap<usize, ProjectionSet>,
    config: &PyramidConfig,
) -> Result<(Vec<FeatureMap>, Vec<(usize, usize)>)> {
    config.validate()?;
    let mut used = Vec::new();
    let mut out = Vec::with_capacity(levels.len());
    for map in levels {
        let Some(s) = config.partitions(map.level) else {
            out.push(map.clone());
            continue;
        };
        let proj = attention
            .get(&map.level)
            .ok_or_else(|| Error::MissingParam(format!("attn.P{}", map.level)))?;
        let cfg = AttentionConfig::new(config.fpn_channels, s)?;
        let a = cross_attention_block(&map.tensor, g, proj, &cfg)?;
        out.push(FeatureMap::new(ops::add(&map.tensor, &a)?, map.level)?);
        used.push((map.level, s));
    }
    Ok((out, used))
}

/// Backbone, fusion and P6 without content augmentation.
pub fn fpn_forward(image: &Tensor, params: &CaFpnParams) -> Result<Vec<FeatureMap>> {
    let c = backbone_stub(image, &params.backbone).map_err(|e| e.in_stage("backbone"))?;
    let mut p = fpn_fuse(&c, &params.fpn).map_err(|e| e.in_stage("fpn"))?;
    let p6 = make_p6(p.last().expect("four levels")).map_err(|e| e.in_stage("p6"))?;
    p.push(p6);
    Ok(p)
}

/// P2..P6 of the content-augmented pyramid.
pub fn ca_fpn_forward(image: &Tensor, params: &CaFpnParams, config: &PyramidConfig) -> Result<Vec<FeatureMap>> {
    Ok(ca_fpn_forward_traced(image, params, config)?.0)
}

pub fn ca_fpn_forward_traced(
    image: &Tensor,
    params: &CaFpnParams,
    config: &PyramidConfig,
) -> Result<(Vec<FeatureMap>, ForwardTrace)> {
    config.validate()?;
    let calls = Cell::new(0);
    let c = backbone_stub(image, &params.backbone).map_err(|e| e.in_stage("backbone"))?;
    let p = fpn_fuse(&c, &params.fpn).map_err(|e| e.in_stage("fpn"))?;
    let g = {
        calls.set(calls.get() + 1);
        gcem_forward(&c[3].tensor, &params.gcem_config, &params.gcem).map_err(|e| e.in_stage("gcem"))?
    };
    let (mut levels, partitions) =
        augment_pyramid(&p, &g, &params.attention, config).map_err(|e| e.in_stage("attention"))?;
    let p6 = make_p6(levels.last().expect("four levels")).map_err(|e| e.in_stage("p6"))?;
    levels.push(p6);
    let trace = ForwardTrace {
        gcem_calls: calls.get(),
        partitions,
    };
    Ok((levels, trace))
}
