//! Forward noising, DDIM sampling, the ε-prediction loss and the U-Net.

mod checkpoint;
mod schedule;
mod unet;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use schedule::{ddim_timesteps, make_schedule, NoiseSchedule, ScheduleKind};
pub use unet::{sinusoidal_embedding, BlockId, QuantMode, UNet, UNetOutput, UNetSpec};

use crate::autograd::Var;
use crate::error::{shape_err, Error, Result};
use crate::tbs::{cache_store, TimestepCache};
use crate::tensor::Tensor;

/// `√ᾱ_t · x0 + √(1−ᾱ_t) · ε`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    if eps.shape() != x0.shape() {
        return Err(shape_err("q_sample", format!("eps {:?} vs x0 {:?}", eps.shape(), x0.shape())));
    }
    let ab = sched.alpha_bar(t)?;
    x0.axpby(ab.sqrt(), eps, (1.0 - ab).sqrt())
}

/// [`q_sample`] with one timestep per leading-axis sample.
pub fn q_sample_batch(x0: &Tensor, ts: &[usize], eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    if eps.shape() != x0.shape() || x0.rank() == 0 || x0.dim(0) != ts.len() {
        return Err(shape_err(
            "q_sample_batch",
            format!("x0 {:?}, eps {:?}, {} timesteps", x0.shape(), eps.shape(), ts.len()),
        ));
    }
    let per = x0.numel() / ts.len();
    let mut out = Vec::with_capacity(x0.numel());
    for (i, &t) in ts.iter().enumerate() {
        let ab = sched.alpha_bar(t)?;
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let xs = &x0.data()[i * per..(i + 1) * per];
        let es = &eps.data()[i * per..(i + 1) * per];
        out.extend(xs.iter().zip(es).map(|(x, e)| a * x + b * e));
    }
    Tensor::new(x0.shape().to_vec(), out)
}

/// Standard deviation of the DDIM transition `t → t_prev` for a given `η`.
/// With `t_prev = t − 1` and `η = 1` its square is `β̃_t`.
pub fn ddim_sigma(sched: &NoiseSchedule, t: usize, t_prev: Option<usize>, eta: f64) -> Result<f64> {
    let ab_t = sched.alpha_bar(t)?;
    let ab_prev = sched.alpha_bar_prev(t_prev)?;
    let var = (1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev);
    Ok(eta * var.max(0.0).sqrt())
}

/// One DDIM update from `x_t` to `x_{t_prev}` (`None` = the clean sample).
/// `noise` is required when `eta > 0`.
pub fn ddim_step(
    x_t: &Tensor,
    eps_pred: &Tensor,
    t: usize,
    t_prev: Option<usize>,
    sched: &NoiseSchedule,
    eta: f64,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    if let Some(tp) = t_prev {
        if tp >= t {
            return Err(Error::InvalidArgument(format!("t_prev {tp} must be below t {t}")));
        }
    }
    if x_t.shape() != eps_pred.shape() {
        return Err(shape_err("ddim_step", format!("{:?} vs {:?}", x_t.shape(), eps_pred.shape())));
    }
    let ab_t = sched.alpha_bar(t)?;
    let ab_prev = sched.alpha_bar_prev(t_prev)?;
    let sigma = ddim_sigma(sched, t, t_prev, eta)?;
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let (sa, sb) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let mut out = x_t.zip_map(eps_pred, |x, e| {
        let x0 = (x - sb * e) / sa;
        ab_prev.sqrt() * x0 + dir * e
    })?;
    if sigma > 0.0 {
        let z = noise.ok_or_else(|| Error::InvalidArgument("eta > 0 requires noise".into()))?;
        out = out.axpby(1.0, z, sigma)?;
    }
    Ok(out)
}

/// Run DDIM over `timesteps` (descending) from `x_t`. With `use_cache`, each
/// step blends against the up-path features of the step executed just before
/// it; the first step has nothing cached and runs unblended. `noise` supplies
/// fresh Gaussian tensors of the requested shape when `eta > 0`.
pub fn ddim_sample(
    model: &UNet,
    x_t: Tensor,
    timesteps: &[usize],
    sched: &NoiseSchedule,
    eta: f64,
    use_cache: bool,
    mut noise: impl FnMut(&[usize]) -> Tensor,
) -> Result<Tensor> {
    if timesteps.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidArgument("timesteps must be strictly decreasing".into()));
    }
    let use_cache = use_cache && !model.spec.tbs_blocks.is_empty();
    let b = x_t.dim(0);
    let mut x = x_t;
    let mut cache = TimestepCache::new();
    for (i, &t) in timesteps.iter().enumerate() {
        let t_prev = timesteps.get(i + 1).copied();
        let prev = (use_cache && !cache.is_empty()).then(|| cache.entries());
        let (eps, up) = model.predict(&x, &vec![t; b], prev)?;
        if use_cache {
            for &j in &model.spec.tbs_blocks {
                if let Some(f) = up.get(&j) {
                    cache_store(&mut cache, j, f.clone(), t);
                }
            }
        }
        let z = (eta > 0.0).then(|| noise(x.shape()));
        x = ddim_step(&x, &eps, t, t_prev, sched, eta, z.as_ref())?;
    }
    Ok(x)
}

/// Mean squared error between true and predicted noise.
pub fn dm_loss<'t>(eps_true: Var<'t>, eps_pred: Var<'t>) -> Result<Var<'t>> {
    if eps_true.shape() != eps_pred.shape() {
        return Err(shape_err(
            "dm_loss",
            format!("{:?} vs {:?}", eps_true.shape(), eps_pred.shape()),
        ));
    }
    Ok(eps_pred.sub(eps_true)?.square().mean())
}
