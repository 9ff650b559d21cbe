//! DDIM sampling from a trained checkpoint.

use serde::Serialize;

use bitdiff_core::diffusion::{ddim_sample, ddim_timesteps, NoiseSchedule, UNet};
use bitdiff_core::Tensor;

use crate::error::{CliError, Result};
use crate::train::stream_rng;

/// Sampling draws from streams `SAMPLE_STREAM + batch index`, disjoint from training.
const SAMPLE_STREAM: u64 = 1 << 48;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BatchStats {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleSummary {
    pub n: usize,
    pub steps: usize,
    pub eta: f64,
    pub shape: Vec<usize>,
    pub timestep_cache: bool,
    pub mean: f64,
    pub std: f64,
    pub batches: Vec<BatchStats>,
}

fn stats(t: &Tensor) -> (f64, f64) {
    let m = t.mean();
    let v = t.data().iter().map(|x| (x - m) * (x - m)).sum::<f64>() / t.numel() as f64;
    (m, v.sqrt())
}

#[derive(Clone, Copy, Debug)]
pub struct SampleOptions {
    pub n: usize,
    pub steps: usize,
    pub eta: f64,
    pub batch: usize,
    pub seed: u64,
}

/// `n` samples in batches of `opts.batch`; each batch has its own noise stream,
/// so results do not depend on how batches are scheduled.
pub fn sample(model: &UNet, sched: &NoiseSchedule, opts: SampleOptions) -> Result<(Tensor, SampleSummary)> {
    if opts.n == 0 || opts.batch == 0 {
        return Err(CliError::Usage("sample count and batch size must be positive".into()));
    }
    let timesteps = ddim_timesteps(sched.len(), opts.steps)?;
    let spec = &model.spec;
    let use_cache = !spec.tbs_blocks.is_empty();
    let mut parts = Vec::new();
    let mut batches = Vec::new();
    let mut done = 0;
    for bi in 0.. {
        if done >= opts.n {
            break;
        }
        let b = opts.batch.min(opts.n - done);
        let mut rng = stream_rng(opts.seed, SAMPLE_STREAM + bi as u64);
        let x_t = Tensor::randn([b, spec.in_channels, spec.image_size, spec.image_size], &mut rng);
        let x = ddim_sample(model, x_t, &timesteps, sched, opts.eta, use_cache, |shape| {
            Tensor::randn(shape.to_vec(), &mut rng)
        })?;
        let (mean, std) = stats(&x);
        batches.push(BatchStats { n: b, mean, std });
        parts.push(x);
        done += b;
    }
    let all = Tensor::cat_first(&parts)?;
    let (mean, std) = stats(&all);
    let summary = SampleSummary {
        n: opts.n,
        steps: opts.steps,
        eta: opts.eta,
        shape: all.shape()[1..].to_vec(),
        timestep_cache: use_cache,
        mean,
        std,
        batches,
    };
    Ok((all, summary))
}
