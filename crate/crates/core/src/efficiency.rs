//! Static cost accounting: BOPs, FLOPs, combined OPs and storage.
//!
//! Accounting policy:
//! - a conv or linear layer with `b_a = b_w = 32` counts its MACs as FLOPs;
//!   any lower-bit layer counts `MACs·b_a·b_w` as BOPs;
//! - `OPs = BOPs/64 + FLOPs`;
//! - norms, activations, pooling and elementwise adds cost 1 FLOP per element;
//! - storage is `b_w` bits per weight, 32 bits per bias, scale (`σ`, `α`, `k`)
//!   and other FP parameter; `MB` means 2²⁰ bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binarize::ActMode;
use crate::diffusion::{BlockId, QuantMode, UNetSpec};
use crate::error::{Error, Result};

const FP_BITS: u32 = 32;
const BYTES_PER_MB: f64 = 1024.0 * 1024.0;

/// `out_h·out_w·n·m·k²·b_a·b_w`.
pub fn conv_bops(n: u64, m: u64, k: u64, out_h: u64, out_w: u64, b_a: u32, b_w: u32) -> u64 {
    out_h * out_w * n * m * k * k * u64::from(b_a) * u64::from(b_w)
}

fn default_bits() -> u32 {
    FP_BITS
}

fn one() -> u64 {
    1
}

/// One entry of an architecture file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerDef {
    Conv {
        name: String,
        /// Input channels.
        n: u64,
        /// Output channels.
        m: u64,
        k: u64,
        out_h: u64,
        out_w: u64,
        #[serde(default = "default_bits")]
        b_w: u32,
        #[serde(default = "default_bits")]
        b_a: u32,
        #[serde(default)]
        bias: bool,
        /// 32-bit scale entries stored with the layer.
        #[serde(default)]
        scales: u64,
        /// FP work outside the MACs (activation scaling etc.).
        #[serde(default)]
        extra_flops: u64,
    },
    Linear {
        name: String,
        inputs: u64,
        outputs: u64,
        #[serde(default = "one")]
        tokens: u64,
        #[serde(default = "default_bits")]
        b_w: u32,
        #[serde(default = "default_bits")]
        b_a: u32,
        #[serde(default)]
        bias: bool,
    },
    /// Normalization: `elements` FLOPs, `params` FP parameters.
    Norm {
        name: String,
        elements: u64,
        #[serde(default)]
        params: u64,
    },
    /// Activations, pooling, adds: `elements` FLOPs.
    Other {
        name: String,
        elements: u64,
        #[serde(default)]
        params: u64,
    },
    /// Pre-summed totals for a whole model or subgraph.
    Aggregate {
        name: String,
        #[serde(default)]
        bops: f64,
        #[serde(default)]
        flops: f64,
        #[serde(default)]
        size_mb: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Linear,
    Norm,
    Other,
    Aggregate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: LayerKind,
    pub macs: u64,
    pub b_w: u32,
    pub b_a: u32,
    pub params: u64,
    pub bops: f64,
    pub flops: f64,
    pub size_bits: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    #[serde(default)]
    pub name: String,
    #[serde(default, rename = "layer")]
    pub layers: Vec<LayerDef>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub bops: f64,
    pub flops: f64,
    pub ops: f64,
    pub size_mb: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Savings {
    /// Baseline OPs over model OPs.
    pub ops: f64,
    /// Baseline size over model size.
    pub size: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub name: String,
    pub per_layer: Vec<LayerCost>,
    pub totals: Totals,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<Totals>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub savings: Option<Savings>,
}

impl ArchSpec {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Arch(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Arch(e.to_string()))
    }
}

fn check_bits(name: &str, b_w: u32, b_a: u32) -> Result<()> {
    for b in [b_w, b_a] {
        if b != 1 && b != FP_BITS {
            return Err(Error::Arch(format!("{name}: bit-width {b} is not 1 or 32")));
        }
    }
    Ok(())
}

fn check_shaped(name: &str, dims: &[u64]) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::Arch(format!("{name}: unshaped layer (zero dimension)")));
    }
    Ok(())
}

/// Split MACs into BOPs or FLOPs depending on bit-widths.
fn mac_cost(macs: u64, b_w: u32, b_a: u32) -> (f64, f64) {
    if b_w == FP_BITS && b_a == FP_BITS {
        (0.0, macs as f64)
    } else {
        ((macs * u64::from(b_w) * u64::from(b_a)) as f64, 0.0)
    }
}

pub fn layer_cost(def: &LayerDef) -> Result<LayerCost> {
    let fp = f64::from(FP_BITS);
    Ok(match def {
        LayerDef::Conv { name, n, m, k, out_h, out_w, b_w, b_a, bias, scales, extra_flops } => {
            check_shaped(name, &[*n, *m, *k, *out_h, *out_w])?;
            check_bits(name, *b_w, *b_a)?;
            let macs = conv_bops(*n, *m, *k, *out_h, *out_w, 1, 1);
            let (bops, flops) = mac_cost(macs, *b_w, *b_a);
            let weights = n * m * k * k;
            let fp_params = if *bias { *m } else { 0 } + scales;
            LayerCost {
                name: name.clone(),
                kind: LayerKind::Conv,
                macs,
                b_w: *b_w,
                b_a: *b_a,
                params: weights + fp_params,
                bops,
                flops: flops + *extra_flops as f64,
                size_bits: weights as f64 * f64::from(*b_w) + fp_params as f64 * fp,
            }
        }
        LayerDef::Linear { name, inputs, outputs, tokens, b_w, b_a, bias } => {
            check_shaped(name, &[*inputs, *outputs, *tokens])?;
            check_bits(name, *b_w, *b_a)?;
            let macs = inputs * outputs * tokens;
            let (bops, flops) = mac_cost(macs, *b_w, *b_a);
            let weights = inputs * outputs;
            let b = if *bias { *outputs } else { 0 };
            LayerCost {
                name: name.clone(),
                kind: LayerKind::Linear,
                macs,
                b_w: *b_w,
                b_a: *b_a,
                params: weights + b,
                bops,
                flops: flops + if *bias { (outputs * tokens) as f64 } else { 0.0 },
                size_bits: weights as f64 * f64::from(*b_w) + b as f64 * fp,
            }
        }
        LayerDef::Norm { name, elements, params } | LayerDef::Other { name, elements, params } => LayerCost {
            name: name.clone(),
            kind: if matches!(def, LayerDef::Norm { .. }) { LayerKind::Norm } else { LayerKind::Other },
            macs: 0,
            b_w: FP_BITS,
            b_a: FP_BITS,
            params: *params,
            bops: 0.0,
            flops: *elements as f64,
            size_bits: *params as f64 * fp,
        },
        LayerDef::Aggregate { name, bops, flops, size_mb } => {
            if [*bops, *flops, *size_mb].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::Arch(format!("{name}: aggregate values must be finite and >= 0")));
            }
            LayerCost {
                name: name.clone(),
                kind: LayerKind::Aggregate,
                macs: 0,
                b_w: FP_BITS,
                b_a: FP_BITS,
                params: 0,
                bops: *bops,
                flops: *flops,
                size_bits: size_mb * BYTES_PER_MB * 8.0,
            }
        }
    })
}

pub fn totals(costs: &[LayerCost]) -> Totals {
    let bops: f64 = costs.iter().map(|c| c.bops).sum();
    let flops: f64 = costs.iter().map(|c| c.flops).sum();
    let bits: f64 = costs.iter().map(|c| c.size_bits).sum();
    Totals { bops, flops, ops: bops / 64.0 + flops, size_mb: bits / 8.0 / BYTES_PER_MB }
}

pub fn model_ops(arch: &ArchSpec) -> Result<Totals> {
    let costs = arch.layers.iter().map(layer_cost).collect::<Result<Vec<_>>>()?;
    Ok(totals(&costs))
}

/// Per-layer costs and totals for `arch`, with savings relative to `baseline` if given.
pub fn report(arch: &ArchSpec, baseline: Option<&ArchSpec>) -> Result<Report> {
    let per_layer = arch.layers.iter().map(layer_cost).collect::<Result<Vec<_>>>()?;
    let t = totals(&per_layer);
    let base = baseline.map(model_ops).transpose()?;
    let savings = base.map(|b| Savings { ops: b.ops / t.ops, size: b.size_mb / t.size_mb });
    Ok(Report { name: arch.name.clone(), per_layer, totals: t, baseline: base, savings })
}

/// Layer list of a U-Net for a single `image_size²` input.
pub fn unet_arch(spec: &UNetSpec) -> Result<ArchSpec> {
    spec.validate()?;
    let binary = spec.quant == QuantMode::Binary;
    let e = spec.temb_dim as u64;
    let s = spec.image_size as u64;
    let c0 = spec.channels[0] as u64;
    let cin0 = spec.in_channels as u64;
    let mut layers = Vec::new();
    let fp_conv = |name: &str, n: u64, m: u64, res: u64| LayerDef::Conv {
        name: name.into(),
        n,
        m,
        k: 3,
        out_h: res,
        out_w: res,
        b_w: FP_BITS,
        b_a: FP_BITS,
        bias: true,
        scales: 0,
        extra_flops: 0,
    };
    let block_conv = |name: String, n: u64, m: u64, res: u64| {
        if !binary {
            return fp_conv(&name, n, m, res);
        }
        let plane = res * res;
        let (scales, extra) = match spec.act_mode {
            ActMode::Naive => (1, m * plane),
            ActMode::ConstantK => (1 + n, m * plane),
            // channel sum, k' conv, pointwise product, α
            ActMode::XnorDynamic | ActMode::LearnableK => (m + 9, n * plane + 9 * plane + 2 * m * plane),
        };
        LayerDef::Conv {
            name,
            n,
            m,
            k: 3,
            out_h: res,
            out_w: res,
            b_w: 1,
            b_a: 1,
            bias: true,
            scales,
            extra_flops: extra,
        }
    };

    layers.push(fp_conv("conv_in", cin0, c0, s));
    layers.push(LayerDef::Linear { name: "temb.l1".into(), inputs: e, outputs: e, tokens: 1, b_w: FP_BITS, b_a: FP_BITS, bias: true });
    layers.push(LayerDef::Other { name: "temb.silu".into(), elements: e, params: 0 });
    for b in spec.blocks() {
        let n = b.id.name();
        let (cin, cout, res) = (b.cin as u64, b.cout as u64, b.res as u64);
        let plane = res * res;
        match b.id {
            BlockId::Down(i) if i > 1 => layers.push(LayerDef::Other { name: format!("{n}.pool"), elements: cin * plane * 4, params: 0 }),
            BlockId::Mid => layers.push(LayerDef::Other { name: format!("{n}.pool"), elements: cin * plane * 4, params: 0 }),
            BlockId::Up(m) if spec.tbs_blocks.contains(&(m + 1)) => {
                let below = cin - cout;
                layers.push(LayerDef::Other { name: format!("{n}.tbs_blend"), elements: 3 * below * plane, params: 1 });
            }
            _ => {}
        }
        layers.push(LayerDef::Norm { name: format!("{n}.norm1"), elements: cin * plane, params: 2 * cin });
        layers.push(LayerDef::Other { name: format!("{n}.silu1"), elements: cin * plane, params: 0 });
        layers.push(block_conv(format!("{n}.conv1"), cin, cout, res));
        layers.push(LayerDef::Linear { name: format!("{n}.temb"), inputs: e, outputs: cout, tokens: 1, b_w: FP_BITS, b_a: FP_BITS, bias: true });
        let adds = if spec.shortcut { 3 } else { 1 };
        layers.push(LayerDef::Other { name: format!("{n}.adds"), elements: adds * cout * plane, params: 0 });
        layers.push(LayerDef::Norm { name: format!("{n}.norm2"), elements: cout * plane, params: 2 * cout });
        layers.push(LayerDef::Other { name: format!("{n}.silu2"), elements: cout * plane, params: 0 });
        layers.push(block_conv(format!("{n}.conv2"), cout, cout, res));
    }
    layers.push(LayerDef::Norm { name: "out.norm".into(), elements: c0 * s * s, params: 2 * c0 });
    layers.push(LayerDef::Other { name: "out.silu".into(), elements: c0 * s * s, params: 0 });
    layers.push(fp_conv("conv_out", c0, cin0, s));
    let name = match spec.quant {
        QuantMode::Fp => "unet-fp".to_string(),
        QuantMode::Binary => format!("unet-w1a1-{}", serde_json::to_value(spec.act_mode).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()),
    };
    Ok(ArchSpec { name, layers })
}
