//! A small pre-activation U-Net with timestep embeddings.
//!
//! Layout for depth `d` (channel widths `ch[0..d]`):
//! `conv_in → D_1 … D_d` (avg-pool after each) `→ M →` `U_d … U_1` (each
//! upsamples its predecessor and concatenates the matching `D_m` first)
//! `→ norm → SiLU → conv_out`. Every block is
//! `conv1(SiLU(GN(x))) + temb`, then `conv2(SiLU(GN(h)))`, with an optional
//! identity shortcut around each conv. In binary mode both block convs are
//! quantized; `conv_in`, `conv_out`, norms and the embedding MLP stay FP.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{concat, Tape, Var};
use crate::binarize::{k_filter_init, quantized_conv, sigma_init, ActMode, ActScaleParams};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tbs::{tbs_fuse, Blend};
use crate::tensor::Tensor;

const GN_EPS: f64 = 1e-5;
const KSIZE: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    Fp,
    Binary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetSpec {
    pub in_channels: usize,
    pub image_size: usize,
    /// One width per level; the depth `d` is its length.
    pub channels: Vec<usize>,
    pub temb_dim: usize,
    pub quant: QuantMode,
    /// Activation scheme of quantized convs (ignored in FP mode).
    pub act_mode: ActMode,
    /// Identity shortcut around every block conv.
    pub shortcut: bool,
    /// Upper bound on GroupNorm groups; the largest divisor of the channel count not above it is used.
    pub max_groups: usize,
    /// Up-path indices `j ∈ 2..=d+1` whose features feed the cross-timestep blend
    /// (`d+1` is the middle block).
    pub tbs_blocks: Vec<usize>,
    pub tbs_alpha_init: f64,
}

impl UNetSpec {
    /// Defaults for a `in_channels × size × size` input.
    pub fn small(in_channels: usize, image_size: usize) -> Self {
        Self {
            in_channels,
            image_size,
            channels: vec![8, 16],
            temb_dim: 32,
            quant: QuantMode::Fp,
            act_mode: ActMode::LearnableK,
            shortcut: true,
            max_groups: 8,
            tbs_blocks: Vec::new(),
            tbs_alpha_init: 0.3,
        }
    }

    pub fn depth(&self) -> usize {
        self.channels.len()
    }

    /// `2d + 1`: down blocks, middle, up blocks.
    pub fn num_features(&self) -> usize {
        2 * self.depth() + 1
    }

    /// The `n` connectable up-path indices closest to the output (`2, 3, …`).
    pub fn last_up_blocks(&self, n: usize) -> Vec<usize> {
        (2..=self.depth() + 1).take(n).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.depth();
        let fail = |msg: String| Err(Error::Arch(msg));
        if d == 0 {
            return fail("at least one level is required".into());
        }
        if self.in_channels == 0 || self.temb_dim == 0 || self.temb_dim % 2 != 0 {
            return fail(format!("in_channels {} / temb_dim {} (must be even)", self.in_channels, self.temb_dim));
        }
        if self.channels.contains(&0) || self.max_groups == 0 {
            return fail("zero channel width or group count".into());
        }
        if self.image_size == 0 || self.image_size % (1 << d) != 0 {
            return fail(format!("image size {} not divisible by 2^{d}", self.image_size));
        }
        for &j in &self.tbs_blocks {
            if !(2..=d + 1).contains(&j) {
                return fail(format!("tbs block {j} outside 2..={}", d + 1));
            }
        }
        if !(0.0..=1.0).contains(&self.tbs_alpha_init) {
            return fail(format!("tbs_alpha_init {} outside [0, 1]", self.tbs_alpha_init));
        }
        if self.shortcut {
            for b in self.blocks() {
                let (cin, cout) = (b.cin, b.cout);
                if cin > cout && cin % cout != 0 {
                    return fail(format!("{}: shortcut from {cin} to {cout} channels", b.id.name()));
                }
            }
        }
        Ok(())
    }

    /// Blocks in forward order.
    pub fn blocks(&self) -> Vec<BlockInfo> {
        let d = self.depth();
        let ch = &self.channels;
        let mut out = Vec::with_capacity(2 * d + 1);
        for i in 1..=d {
            let cin = if i == 1 { ch[0] } else { ch[i - 2] };
            out.push(BlockInfo { id: BlockId::Down(i), cin, cout: ch[i - 1], res: self.image_size >> (i - 1) });
        }
        out.push(BlockInfo { id: BlockId::Mid, cin: ch[d - 1], cout: ch[d - 1], res: self.image_size >> d });
        for m in (1..=d).rev() {
            let below = if m == d { ch[d - 1] } else { ch[m] };
            out.push(BlockInfo { id: BlockId::Up(m), cin: ch[m - 1] + below, cout: ch[m - 1], res: self.image_size >> (m - 1) });
        }
        out
    }

    pub fn groups_for(&self, c: usize) -> usize {
        (1..=self.max_groups.min(c)).rev().find(|g| c % g == 0).unwrap_or(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BlockId {
    Down(usize),
    Mid,
    Up(usize),
}

impl BlockId {
    pub fn name(self) -> String {
        match self {
            BlockId::Down(i) => format!("down.{i}"),
            BlockId::Mid => "mid".into(),
            BlockId::Up(i) => format!("up.{i}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockInfo {
    pub id: BlockId,
    pub cin: usize,
    pub cout: usize,
    /// Spatial side length the block runs at.
    pub res: usize,
}

pub struct UNetOutput<'t> {
    pub eps: Var<'t>,
    /// `D_1..D_d, M, U_d..U_1`.
    pub features: Vec<Var<'t>>,
    /// Up-path features by index `j ∈ 2..=d+1` (the middle block is `d+1`).
    pub up: BTreeMap<usize, Var<'t>>,
}

/// `[b, dim]` sinusoidal encoding: `sin(t·f_i)` then `cos(t·f_i)`,
/// `f_i = 10000^(−i/(dim/2))`.
pub fn sinusoidal_embedding(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp() * t as f64);
        let args: Vec<f64> = freqs.collect();
        data.extend(args.iter().map(|a| a.sin()));
        data.extend(args.iter().map(|a| a.cos()));
    }
    Tensor::new([ts.len(), dim], data).expect("embedding shape")
}

#[derive(Clone, Debug)]
pub struct UNet {
    pub spec: UNetSpec,
    pub params: ParamStore,
}

fn normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

impl UNet {
    pub fn init<R: Rng + ?Sized>(spec: UNetSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut p = ParamStore::new();
        let binary = spec.quant == QuantMode::Binary;
        let conv = |p: &mut ParamStore, name: &str, cin: usize, cout: usize, quantized: bool, rng: &mut R| {
            let w = normal(&[cout, cin, KSIZE, KSIZE], (1.0 / (cin * KSIZE * KSIZE) as f64).sqrt(), rng);
            if quantized && binary {
                match spec.act_mode {
                    ActMode::Naive => {}
                    ActMode::ConstantK => p.insert(format!("{name}.kconst"), Tensor::ones([cin])),
                    ActMode::XnorDynamic => {}
                    ActMode::LearnableK => p.insert(format!("{name}.k"), k_filter_init(KSIZE, KSIZE)),
                }
                if spec.act_mode.uses_sigma() {
                    p.insert(format!("{name}.sigma"), Tensor::scalar(sigma_init(&w).expect("non-empty")));
                }
            }
            p.insert(format!("{name}.weight"), w);
            p.insert(format!("{name}.bias"), Tensor::zeros([cout]));
        };
        let norm = |p: &mut ParamStore, name: &str, c: usize| {
            p.insert(format!("{name}.gamma"), Tensor::ones([c]));
            p.insert(format!("{name}.beta"), Tensor::zeros([c]));
        };
        let e = spec.temb_dim;
        conv(&mut p, "conv_in", spec.in_channels, spec.channels[0], false, rng);
        p.insert("temb.l1.weight", normal(&[e, e], (1.0 / e as f64).sqrt(), rng));
        p.insert("temb.l1.bias", Tensor::zeros([e]));
        for b in spec.blocks() {
            let n = b.id.name();
            norm(&mut p, &format!("{n}.norm1"), b.cin);
            conv(&mut p, &format!("{n}.conv1"), b.cin, b.cout, true, rng);
            p.insert(format!("{n}.temb.weight"), normal(&[e, b.cout], (1.0 / e as f64).sqrt(), rng));
            p.insert(format!("{n}.temb.bias"), Tensor::zeros([b.cout]));
            norm(&mut p, &format!("{n}.norm2"), b.cout);
            conv(&mut p, &format!("{n}.conv2"), b.cout, b.cout, true, rng);
        }
        norm(&mut p, "out.norm", spec.channels[0]);
        conv(&mut p, "conv_out", spec.channels[0], spec.in_channels, false, rng);
        for &j in &spec.tbs_blocks {
            p.insert(Self::alpha_name(j), Tensor::scalar(spec.tbs_alpha_init));
        }
        Ok(Self { spec, params: p })
    }

    /// Rebuild from stored tensors, checking that every parameter the spec needs is present.
    pub fn from_parts(spec: UNetSpec, params: ParamStore) -> Result<Self> {
        let reference = Self::init(spec.clone(), &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        for (name, t) in reference.params.iter() {
            let got = params.require(name)?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: stored shape {:?}, spec needs {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(Self { spec, params })
    }

    pub fn alpha_name(j: usize) -> String {
        format!("tbs.alpha.{j}")
    }

    pub fn is_alpha(name: &str) -> bool {
        name.starts_with("tbs.alpha.")
    }

    /// Bind all parameters as trainable.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        self.params.bind(tape, |_| true)
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        x: Var<'t>,
        ts: &[usize],
        blend: Option<&Blend<'t>>,
    ) -> Result<UNetOutput<'t>> {
        let spec = &self.spec;
        let xs = x.shape();
        if xs.len() != 4 || xs[1] != spec.in_channels || xs[2] != spec.image_size || xs[3] != spec.image_size {
            return Err(Error::Arch(format!(
                "input {xs:?} does not match [b, {}, {}, {}]",
                spec.in_channels, spec.image_size, spec.image_size
            )));
        }
        if ts.len() != xs[0] {
            return Err(Error::InvalidArgument(format!("{} timesteps for batch {}", ts.len(), xs[0])));
        }
        let d = spec.depth();
        let emb = tape.constant(sinusoidal_embedding(ts, spec.temb_dim));
        let temb = emb
            .matmul(p.get("temb.l1.weight")?)?
            .add(p.get("temb.l1.bias")?)?
            .silu();

        let blocks = spec.blocks();
        let mut features = Vec::with_capacity(2 * d + 1);
        let mut h = self.conv(tape, p, "conv_in", x, false)?;
        for (i, b) in blocks[..d].iter().enumerate() {
            if i > 0 {
                h = h.avg_pool2()?;
            }
            h = self.block(tape, p, b, h, temb)?;
            features.push(h);
        }
        h = self.block(tape, p, &blocks[d], h.avg_pool2()?, temb)?;
        features.push(h);

        let mut up = BTreeMap::new();
        up.insert(d + 1, h);
        for (b, m) in blocks[d + 1..].iter().zip((1..=d).rev()) {
            let skip = features[m - 1];
            let u = h.upsample2()?;
            let joined = match blend.and_then(|bl| bl.for_block(m + 1)) {
                Some((prev, alpha)) => tbs_fuse(skip, u, Some(prev.upsample2()?), alpha)?,
                None => concat(&[skip, u], 1)?,
            };
            h = self.block(tape, p, b, joined, temb)?;
            features.push(h);
            if m >= 2 {
                up.insert(m, h);
            }
        }

        let out = self.norm(p, "out.norm", h)?.silu();
        let eps = self.conv(tape, p, "conv_out", out, false)?;
        Ok(UNetOutput { eps, features, up })
    }

    /// Noise prediction without gradient tracking.
    pub fn predict(&self, x: &Tensor, ts: &[usize], blend_prev: Option<&BTreeMap<usize, Tensor>>) -> Result<(Tensor, BTreeMap<usize, Tensor>)> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, |_| false);
        let xv = tape.constant(x.clone());
        let blend = match blend_prev {
            Some(prev) => Some(Blend::from_params(&tape, &p, &self.spec.tbs_blocks, prev)?),
            None => None,
        };
        let out = self.forward(&tape, &p, xv, ts, blend.as_ref())?;
        let up = out.up.iter().map(|(&j, v)| (j, (*v.value()).clone())).collect();
        Ok(((*out.eps.value()).clone(), up))
    }

    fn norm<'t>(&self, p: &Bound<'t>, name: &str, x: Var<'t>) -> Result<Var<'t>> {
        let c = x.shape()[1];
        let shape = [1, c, 1, 1];
        x.group_norm(self.spec.groups_for(c), GN_EPS)?
            .mul(p.get(&format!("{name}.gamma"))?.reshape(&shape)?)?
            .add(p.get(&format!("{name}.beta"))?.reshape(&shape)?)
    }

    fn conv<'t>(&self, tape: &'t Tape, p: &Bound<'t>, name: &str, x: Var<'t>, quantized: bool) -> Result<Var<'t>> {
        let w = p.get(&format!("{name}.weight"))?;
        let y = if quantized && self.spec.quant == QuantMode::Binary {
            let params = match self.spec.act_mode {
                ActMode::Naive => ActScaleParams::naive(),
                ActMode::ConstantK => ActScaleParams::constant_k(p.get(&format!("{name}.kconst"))?),
                ActMode::XnorDynamic => ActScaleParams::xnor_dynamic(tape, KSIZE, KSIZE),
                ActMode::LearnableK => ActScaleParams::learnable_k(p.get(&format!("{name}.k"))?),
            };
            let sigma = p.try_get(&format!("{name}.sigma"));
            quantized_conv(x, w, sigma, &params, 1, KSIZE / 2)?
        } else {
            x.conv2d(w, 1, KSIZE / 2)?
        };
        let cout = w.shape()[0];
        y.add(p.get(&format!("{name}.bias"))?.reshape(&[1, cout, 1, 1])?)
    }

    /// Channel-adapted identity: zero-pad when widening, average channel groups when narrowing.
    fn shortcut<'t>(&self, tape: &'t Tape, x: Var<'t>, cout: usize) -> Result<Var<'t>> {
        let s = x.shape();
        let (b, cin, h, w) = (s[0], s[1], s[2], s[3]);
        if cin == cout {
            Ok(x)
        } else if cin < cout {
            let zeros = tape.constant(Tensor::zeros([b, cout - cin, h, w]));
            concat(&[x, zeros], 1)
        } else {
            x.reshape(&[b, cin / cout, cout * h * w])?
                .mean_axis(1)?
                .reshape(&[b, cout, h, w])
        }
    }

    fn block<'t>(&self, tape: &'t Tape, p: &Bound<'t>, info: &BlockInfo, x: Var<'t>, temb: Var<'t>) -> Result<Var<'t>> {
        let n = info.id.name();
        let b = x.shape()[0];
        let a = self.norm(p, &format!("{n}.norm1"), x)?.silu();
        let mut h = self.conv(tape, p, &format!("{n}.conv1"), a, true)?;
        if self.spec.shortcut {
            h = h.add(self.shortcut(tape, x, info.cout)?)?;
        }
        let t = temb
            .matmul(p.get(&format!("{n}.temb.weight"))?)?
            .add(p.get(&format!("{n}.temb.bias"))?)?
            .reshape(&[b, info.cout, 1, 1])?;
        h = h.add(t)?;
        let a = self.norm(p, &format!("{n}.norm2"), h)?.silu();
        let mut out = self.conv(tape, p, &format!("{n}.conv2"), a, true)?;
        if self.spec.shortcut {
            out = out.add(h)?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn feature_shapes_for_depth_two() {
        let net = UNet::init(UNetSpec::small(1, 16), &mut rng()).unwrap();
        let tape = Tape::new();
        let p = net.bind(&tape);
        let x = tape.constant(Tensor::randn([2, 1, 16, 16], &mut rng()));
        let out = net.forward(&tape, &p, x, &[3, 900], None).unwrap();
        let shapes: Vec<Vec<usize>> = out.features.iter().map(|f| f.shape()).collect();
        assert_eq!(
            shapes,
            vec![
                vec![2, 8, 16, 16],
                vec![2, 16, 8, 8],
                vec![2, 16, 4, 4],
                vec![2, 16, 8, 8],
                vec![2, 8, 16, 16],
            ]
        );
        assert_eq!(out.eps.shape(), vec![2, 1, 16, 16]);
        assert_eq!(out.up.keys().copied().collect::<Vec<_>>(), vec![2, 3]);
    }

    #[test]
    fn zeroed_weights_give_bias() {
        let mut net = UNet::init(UNetSpec::small(1, 8), &mut rng()).unwrap();
        for (name, t) in net.params.iter_mut() {
            if name != "conv_out.bias" {
                *t = Tensor::zeros(t.shape().to_vec());
            }
        }
        *net.params.get_mut("conv_out.bias").unwrap() = Tensor::scalar(0.25).reshape([1]).unwrap();
        let (eps, _) = net.predict(&Tensor::randn([1, 1, 8, 8], &mut rng()), &[10], None).unwrap();
        assert!(eps.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn rejects_indivisible_size() {
        assert!(UNet::init(UNetSpec::small(1, 6), &mut rng()).is_err());
        let net = UNet::init(UNetSpec::small(1, 8), &mut rng()).unwrap();
        assert!(net.predict(&Tensor::zeros([1, 1, 6, 6]), &[0], None).is_err());
    }

    #[test]
    fn binary_params_per_mode() {
        let mut spec = UNetSpec::small(1, 8);
        spec.quant = QuantMode::Binary;
        spec.act_mode = ActMode::Naive;
        let net = UNet::init(spec.clone(), &mut rng()).unwrap();
        assert!(net.params.contains("down.1.conv1.sigma"));
        assert!(!net.params.contains("conv_in.sigma"));
        spec.act_mode = ActMode::LearnableK;
        let net = UNet::init(spec, &mut rng()).unwrap();
        assert!(net.params.contains("up.2.conv2.k"));
        assert!(!net.params.contains("up.2.conv2.sigma"));
    }

    #[test]
    fn groups_divide_channels() {
        let s = UNetSpec::small(1, 16);
        assert_eq!(s.groups_for(24), 8);
        assert_eq!(s.groups_for(12), 6);
        assert_eq!(s.groups_for(3), 3);
    }
}
