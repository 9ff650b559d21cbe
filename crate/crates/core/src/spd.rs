//! Patch-wise attention distillation between teacher and student features.
//!
//! Each `[b,c,h,w]` feature is cut into `p×p` tiles. Per tile the spatial
//! Gram matrix `M Mᵀ` (`M`: positions × channels) is normalized by its
//! Frobenius norm, and the student is penalized by the norm of its difference
//! to the teacher's, averaged over tiles and samples.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::diffusion::dm_loss;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Floor on Gram norms so all-zero attention maps stay finite.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub lambda: f64,
    pub p: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { lambda: 4.0, p: 4 }
    }
}

fn dims4(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [b, c, h, w] => Ok((b, c, h, w)),
        ref s => Err(shape_err(op, format!("expected [b,c,h,w], got {s:?}"))),
    }
}

fn check_p(h: usize, w: usize, p: usize, op: &'static str) -> Result<()> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(shape_err(op, format!("p = {p} does not tile {h}x{w}")));
    }
    Ok(())
}

/// `p²` tiles of `[b,c,h/p,w/p]` in row-major tile order.
pub fn partition_patches(f: &Tensor, p: usize) -> Result<Vec<Tensor>> {
    let (b, c, h, w) = dims4(f.shape(), "partition_patches")?;
    check_p(h, w, p, "partition_patches")?;
    let (ph, pw) = (h / p, w / p);
    let mut out = Vec::with_capacity(p * p);
    for i in 0..p {
        for j in 0..p {
            let mut data = Vec::with_capacity(b * c * ph * pw);
            for plane in f.data().chunks(h * w) {
                for y in 0..ph {
                    let row = (i * ph + y) * w + j * pw;
                    data.extend_from_slice(&plane[row..row + pw]);
                }
            }
            out.push(Tensor::new([b, c, ph, pw], data)?);
        }
    }
    Ok(out)
}

/// Inverse of [`partition_patches`].
pub fn reassemble_patches(patches: &[Tensor], p: usize) -> Result<Tensor> {
    if p == 0 || patches.len() != p * p {
        return Err(shape_err("reassemble_patches", format!("{} patches for p = {p}", patches.len())));
    }
    let (b, c, ph, pw) = dims4(patches[0].shape(), "reassemble_patches")?;
    if patches.iter().any(|t| t.shape() != patches[0].shape()) {
        return Err(shape_err("reassemble_patches", "patches differ in shape"));
    }
    let (h, w) = (ph * p, pw * p);
    let mut data = vec![0.0; b * c * h * w];
    for (idx, patch) in patches.iter().enumerate() {
        let (i, j) = (idx / p, idx % p);
        for (plane, src) in patch.data().chunks(ph * pw).enumerate() {
            for y in 0..ph {
                let dst = plane * h * w + (i * ph + y) * w + j * pw;
                data[dst..dst + pw].copy_from_slice(&src[y * pw..(y + 1) * pw]);
            }
        }
    }
    Tensor::new([b, c, h, w], data)
}

/// Spatial Gram matrix `[b, s, s]`, `s = ph·pw`, of a `[b,c,ph,pw]` patch.
pub fn patch_attention(patch: Var<'_>) -> Result<Var<'_>> {
    let (b, c, ph, pw) = dims4(&patch.shape(), "patch_attention")?;
    let s = ph * pw;
    let m = patch.reshape(&[b, c, s])?;
    m.permute(&[0, 2, 1])?.matmul(m)
}

/// Frobenius-normalized Gram of every tile: `[b·p², s·s]`.
fn normalized_tile_grams(f: Var<'_>, p: usize) -> Result<Var<'_>> {
    let (b, c, h, w) = dims4(&f.shape(), "spd_loss")?;
    check_p(h, w, p, "spd_loss")?;
    let (ph, pw) = (h / p, w / p);
    let s = ph * pw;
    let tiles = f
        .reshape(&[b, c, p, ph, p, pw])?
        .permute(&[0, 2, 4, 1, 3, 5])?
        .reshape(&[b * p * p, c, s])?;
    let gram = tiles.permute(&[0, 2, 1])?.matmul(tiles)?.reshape(&[b * p * p, s * s])?;
    let norm = gram.square().sum_axis(1)?.sqrt().clamp(NORM_FLOOR, f64::INFINITY);
    gram.div(norm)
}

/// `(1/p²) Σ_tiles ‖𝒜_fp/‖𝒜_fp‖ − 𝒜_bi/‖𝒜_bi‖‖`, averaged over the batch.
pub fn spd_loss<'t>(f_fp: Var<'t>, f_bi: Var<'t>, p: usize) -> Result<Var<'t>> {
    if f_fp.shape() != f_bi.shape() {
        return Err(shape_err("spd_loss", format!("{:?} vs {:?}", f_fp.shape(), f_bi.shape())));
    }
    let diff = normalized_tile_grams(f_fp, p)?.sub(normalized_tile_grams(f_bi, p)?)?;
    Ok(diff.square().sum_axis(1)?.sqrt().mean())
}

pub struct LossParts<'t> {
    pub total: Var<'t>,
    pub dm: Var<'t>,
    /// `Σ_m spd_loss` over the tapped blocks, before the `λ/(2d+1)` weight.
    pub spd: Option<Var<'t>>,
}

/// `dm_loss + λ/(2d+1) · Σ_m spd_loss(F_fp_m, F_bi_m)`. Teacher features are
/// detached here; with `λ = 0` the total is the DM loss node itself.
pub fn total_loss<'t>(
    eps_true: Var<'t>,
    eps_pred: Var<'t>,
    features_fp: &[Var<'t>],
    features_bi: &[Var<'t>],
    cfg: &DistillConfig,
) -> Result<LossParts<'t>> {
    if features_fp.len() != features_bi.len() {
        return Err(Error::InvalidArgument(format!(
            "{} teacher features vs {} student features",
            features_fp.len(),
            features_bi.len()
        )));
    }
    if !(cfg.lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {}", cfg.lambda)));
    }
    let dm = dm_loss(eps_true, eps_pred)?;
    if cfg.lambda == 0.0 || features_bi.is_empty() {
        return Ok(LossParts { total: dm, dm, spd: None });
    }
    let mut sum: Option<Var<'t>> = None;
    for (t, s) in features_fp.iter().zip(features_bi) {
        let l = spd_loss(t.detach(), *s, cfg.p)?;
        sum = Some(match sum {
            Some(acc) => acc.add(l)?,
            None => l,
        });
    }
    let spd = sum.expect("non-empty");
    let total = dm.add(spd.scale(cfg.lambda / features_bi.len() as f64))?;
    Ok(LossParts { total, dm, spd: Some(spd) })
}
