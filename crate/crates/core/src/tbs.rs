//! Cross-timestep feature blending for the up path.
//!
//! An up block normally consumes `Concat(D_m, U_{m+1})`. With a connection on
//! block `m+1` it consumes `Concat(D_m, (1−α)·U_{m+1} + α·U'_{m+1})`, where
//! `U'` is the same block's output from the previous denoising step and `α`
//! a learnable scalar clamped to `[0, 1]`.

use std::collections::BTreeMap;

use crate::autograd::{concat, Tape, Var};
use crate::diffusion::{dm_loss, q_sample_batch, NoiseSchedule, UNet};
use crate::error::{shape_err, Error, Result};
use crate::params::Bound;
use crate::tensor::Tensor;

/// `Concat(d_skip, (1−α)·u_curr + α·u_prev)` along channels, or the plain
/// concat when `u_prev` is absent. `alpha` is a scalar or `[b,1,1,1]`, clamped to `[0,1]`.
pub fn tbs_fuse<'t>(d_skip: Var<'t>, u_curr: Var<'t>, u_prev: Option<Var<'t>>, alpha: Var<'t>) -> Result<Var<'t>> {
    let Some(prev) = u_prev else {
        return concat(&[d_skip, u_curr], 1);
    };
    if prev.shape() != u_curr.shape() {
        return Err(shape_err("tbs_fuse", format!("u_prev {:?} vs u_curr {:?}", prev.shape(), u_curr.shape())));
    }
    let a = alpha.clamp(0.0, 1.0);
    let keep = a.affine(-1.0, 1.0);
    let blended = u_curr.mul(keep)?.add(prev.mul(a)?)?;
    concat(&[d_skip, blended], 1)
}

/// Up-path features of the most recent denoising step.
#[derive(Clone, Debug, Default)]
pub struct TimestepCache {
    entries: BTreeMap<usize, Tensor>,
    step_tag: Option<usize>,
}

impl TimestepCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn step_tag(&self) -> Option<usize> {
        self.step_tag
    }

    pub fn get(&self, block: usize) -> Option<&Tensor> {
        self.entries.get(&block)
    }

    pub fn entries(&self) -> &BTreeMap<usize, Tensor> {
        &self.entries
    }

    /// Record `feature` for `block` at `step`. Storing under a new step drops
    /// every entry from the old one.
    pub fn store(&mut self, block: usize, feature: Tensor, step: usize) {
        if self.step_tag != Some(step) {
            self.entries.clear();
            self.step_tag = Some(step);
        }
        self.entries.insert(block, feature);
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        self.step_tag = None;
    }
}

pub fn cache_store(cache: &mut TimestepCache, block: usize, feature: Tensor, step: usize) {
    cache.store(block, feature, step);
}

/// Previous-step features and their blend weights, bound to one tape.
pub struct Blend<'t> {
    pub prev: BTreeMap<usize, Var<'t>>,
    pub alpha: BTreeMap<usize, Var<'t>>,
    /// Optional `[b,1,1,1]` 0/1 mask disabling the blend per sample.
    pub mask: Option<Var<'t>>,
}

impl<'t> Blend<'t> {
    /// Connect every block in `blocks` that has a cached feature, using the
    /// bound `tbs.alpha.<j>` parameters.
    pub fn from_params(
        tape: &'t Tape,
        p: &Bound<'t>,
        blocks: &[usize],
        prev: &BTreeMap<usize, Tensor>,
    ) -> Result<Self> {
        let mut out = Self { prev: BTreeMap::new(), alpha: BTreeMap::new(), mask: None };
        for &j in blocks {
            if let Some(f) = prev.get(&j) {
                out.prev.insert(j, tape.constant(f.clone()));
                out.alpha.insert(j, p.get(&UNet::alpha_name(j))?);
            }
        }
        Ok(out)
    }

    pub fn with_mask(mut self, mask: Var<'t>) -> Self {
        self.mask = Some(mask);
        self
    }

    /// Previous feature and effective `α` for block `j`, if connected.
    pub fn for_block(&self, j: usize) -> Option<(Var<'t>, Var<'t>)> {
        let prev = *self.prev.get(&j)?;
        let alpha = *self.alpha.get(&j)?;
        match self.mask {
            Some(m) => Some((prev, alpha.clamp(0.0, 1.0).mul(m).ok()?)),
            None => Some((prev, alpha)),
        }
    }
}

pub struct DoublePass<'t> {
    pub loss: Var<'t>,
    pub eps_pred: Var<'t>,
    pub features: Vec<Var<'t>>,
}

/// Training step with the cross-timestep connection: a gradient-free pass at
/// `t+1` fills the cache, then the pass at `t` blends against it. Both passes
/// share `eps`. Samples with `t = T−1` have no `t+1` and skip the blend.
#[allow(clippy::too_many_arguments)]
pub fn training_double_pass<'t>(
    model: &UNet,
    tape: &'t Tape,
    p: &Bound<'t>,
    x0: &Tensor,
    ts: &[usize],
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<DoublePass<'t>> {
    let last = sched.len() - 1;
    if let Some(&t) = ts.iter().find(|&&t| t > last) {
        return Err(Error::InvalidArgument(format!("timestep {t} out of range 0..{}", sched.len())));
    }
    let blocks = &model.spec.tbs_blocks;
    let x_t = tape.constant(q_sample_batch(x0, ts, eps, sched)?);
    let blend = if blocks.is_empty() {
        None
    } else {
        let ts_next: Vec<usize> = ts.iter().map(|&t| (t + 1).min(last)).collect();
        let x_next = q_sample_batch(x0, &ts_next, eps, sched)?;
        let (_, up) = model.predict(&x_next, &ts_next, None)?;
        let blend = Blend::from_params(tape, p, blocks, &up)?;
        if ts.iter().any(|&t| t == last) {
            let mask = ts.iter().map(|&t| if t == last { 0.0 } else { 1.0 }).collect();
            Some(blend.with_mask(tape.constant(Tensor::new([ts.len(), 1, 1, 1], mask)?)))
        } else {
            Some(blend)
        }
    };
    let out = model.forward(tape, p, x_t, ts, blend.as_ref())?;
    let loss = dm_loss(tape.constant(eps.clone()), out.eps)?;
    Ok(DoublePass { loss, eps_pred: out.eps, features: out.features })
}
