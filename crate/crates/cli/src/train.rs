//! Quantization-aware training loop with optional cross-timestep blending and
//! patch distillation, JSON-lines metrics, and resumable checkpoints.
//!
//! Randomness is keyed by `(seed, stream)`: stream 0 initializes the model,
//! stream 1 draws the validation set, and iteration `i` draws its batch from
//! stream `2 + i`, so a resumed run replays the same batches.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use bitdiff_core::binarize::{sigma_init, SIGMA_FLOOR};
use bitdiff_core::diffusion::{
    dm_loss, make_schedule, q_sample_batch, read_checkpoint, write_checkpoint, Checkpoint, NoiseSchedule, QuantMode,
    UNet,
};
use bitdiff_core::optim::Adam;
use bitdiff_core::params::{Bound, ParamStore};
use bitdiff_core::spd::{total_loss, DistillConfig};
use bitdiff_core::tbs::training_double_pass;
use bitdiff_core::{Error, Tape, Tensor, Var};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.bidm";
pub const ITER_KEY: &str = "train.iter";

const STREAM_INIT: u64 = 0;
const STREAM_VAL: u64 = 1;
const STREAM_TRAIN: u64 = 2;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn checkpoint_name(iter: usize) -> String {
    format!("ckpt-{iter:07}.bidm")
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainRecord {
    pub iter: usize,
    pub dm_loss: f64,
    pub spd_loss: Option<f64>,
    pub total_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_s: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValRecord {
    pub iter: usize,
    pub val_dm_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainOutcome {
    pub iters: usize,
    pub resumed_from: Option<usize>,
    pub val_dm_loss: f64,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// Model parameters only, dropping optimizer and loop state.
pub fn model_tensors(store: &ParamStore) -> ParamStore {
    let mut out = ParamStore::new();
    for (k, v) in store.iter() {
        if !Adam::is_state_key(k) && k != ITER_KEY {
            out.insert(k.clone(), v.clone());
        }
    }
    out
}

/// Load a checkpoint as a model, ignoring any training state it carries.
pub fn load_model(path: &Path) -> Result<UNet> {
    let ckpt = read_checkpoint(path)?;
    Ok(UNet::from_parts(ckpt.spec, model_tensors(&ckpt.tensors))?)
}

fn load_teacher(cfg: &RunConfig, student: &UNet) -> Result<Option<UNet>> {
    if student.spec.quant != QuantMode::Binary || cfg.spd.lambda == 0.0 {
        return Ok(None);
    }
    let path = cfg
        .spd
        .teacher
        .as_ref()
        .ok_or_else(|| CliError::config("spd.teacher", "required when spd.lambda > 0"))?;
    let teacher = load_model(path)?;
    let (t, s) = (&teacher.spec, &student.spec);
    if t.quant != QuantMode::Fp {
        return Err(CliError::config("spd.teacher", "teacher must be a full-precision model"));
    }
    if (t.in_channels, t.image_size, &t.channels) != (s.in_channels, s.image_size, &s.channels) {
        return Err(CliError::config("spd.teacher", "teacher features do not match the student architecture"));
    }
    Ok(Some(teacher))
}

/// Fresh model, optionally overwritten with same-named tensors of a stored
/// full-precision model. `σ` of static binarizers is re-derived from the copied weights.
fn init_model(cfg: &RunConfig) -> Result<UNet> {
    let spec = cfg.unet_spec();
    let mut model = UNet::init(spec, &mut stream_rng(cfg.seed, STREAM_INIT))?;
    let Some(path) = &cfg.model.init else {
        return Ok(model);
    };
    let src = model_tensors(&read_checkpoint(path)?.tensors);
    let names: Vec<String> = model.params.names().cloned().collect();
    for name in &names {
        if UNet::is_alpha(name) || name.ends_with(".sigma") || name.ends_with(".k") || name.ends_with(".kconst") {
            continue;
        }
        let t = src
            .get(name)
            .ok_or_else(|| CliError::config("model.init", format!("source has no tensor `{name}`")))?;
        let dst = model.params.get_mut(name).expect("listed");
        if dst.shape() != t.shape() {
            return Err(CliError::config("model.init", format!("`{name}` has shape {:?}, need {:?}", t.shape(), dst.shape())));
        }
        *dst = t.clone();
    }
    for name in names.iter().filter(|n| n.ends_with(".sigma")) {
        let w = model.params.require(&name.replace(".sigma", ".weight"))?.clone();
        *model.params.get_mut(name).expect("listed") = Tensor::scalar(sigma_init(&w)?);
    }
    Ok(model)
}

/// Noisy-batch draws shared by training and validation.
struct Batch {
    x0: Tensor,
    ts: Vec<usize>,
    eps: Tensor,
}

fn draw_batch(cfg: &RunConfig, n: usize, rng: &mut ChaCha8Rng) -> Batch {
    let x0 = cfg.dataset.batch(n, rng);
    let ts = (0..n).map(|_| rng.random_range(0..cfg.schedule.timesteps)).collect();
    let eps = Tensor::randn(x0.shape().to_vec(), rng);
    Batch { x0, ts, eps }
}

struct StepLosses<'t> {
    dm: Var<'t>,
    spd: Option<Var<'t>>,
    total: Var<'t>,
}

/// Forward pass of one batch: the double pass when the model has connections,
/// plus the teacher's features on the same noisy input when distilling.
fn forward_losses<'t>(
    model: &UNet,
    teacher: Option<&UNet>,
    tape: &'t Tape,
    p: &Bound<'t>,
    batch: &Batch,
    sched: &NoiseSchedule,
    distill: &DistillConfig,
) -> Result<StepLosses<'t>> {
    let (eps_pred, features) = if model.spec.tbs_blocks.is_empty() {
        let x_t = tape.constant(q_sample_batch(&batch.x0, &batch.ts, &batch.eps, sched)?);
        let out = model.forward(tape, p, x_t, &batch.ts, None)?;
        (out.eps, out.features)
    } else {
        let dp = training_double_pass(model, tape, p, &batch.x0, &batch.ts, &batch.eps, sched)?;
        (dp.eps_pred, dp.features)
    };
    let eps_true = tape.constant(batch.eps.clone());
    let Some(teacher) = teacher else {
        let dm = dm_loss(eps_true, eps_pred)?;
        return Ok(StepLosses { dm, spd: None, total: dm });
    };
    let tp = teacher.params.bind(tape, |_| false);
    let x_t = tape.constant(q_sample_batch(&batch.x0, &batch.ts, &batch.eps, sched)?);
    let t_out = teacher.forward(tape, &tp, x_t, &batch.ts, None)?;
    let parts = total_loss(eps_true, eps_pred, &t_out.features, &features, distill)?;
    Ok(StepLosses { dm: parts.dm, spd: parts.spd, total: parts.total })
}

/// Mean DM loss over the fixed validation set, evaluated in training-batch chunks.
pub fn validation_loss(model: &UNet, cfg: &RunConfig, sched: &NoiseSchedule) -> Result<f64> {
    let n = cfg.train.val_size;
    let mut rng = stream_rng(cfg.seed, STREAM_VAL);
    let full = draw_batch(cfg, n, &mut rng);
    let mut acc = 0.0;
    let mut start = 0;
    while start < n {
        let len = cfg.train.batch.min(n - start);
        let chunk = Batch {
            x0: full.x0.narrow_first(start, len)?,
            ts: full.ts[start..start + len].to_vec(),
            eps: full.eps.narrow_first(start, len)?,
        };
        let tape = Tape::new();
        let p = model.params.bind(&tape, |_| false);
        let l = forward_losses(model, None, &tape, &p, &chunk, sched, &DistillConfig::default())?;
        acc += l.dm.value().item() * len as f64;
        start += len;
    }
    Ok(acc / n as f64)
}

fn clamp_sigmas(params: &mut ParamStore) {
    for (name, t) in params.iter_mut() {
        if name.ends_with(".sigma") {
            t.data_mut().iter_mut().for_each(|s| *s = s.max(SIGMA_FLOOR));
        }
    }
}

fn save(dir: &Path, name: &str, model: &UNet, adam: &Adam, iter: usize) -> Result<PathBuf> {
    let mut tensors = model.params.clone();
    for (k, v) in adam.state().iter() {
        tensors.insert(k.clone(), v.clone());
    }
    tensors.insert(ITER_KEY, Tensor::scalar(iter as f64));
    let path = dir.join(name);
    write_checkpoint(&path, &Checkpoint { spec: model.spec.clone(), tensors })?;
    Ok(path)
}

/// Keep only training records up to `iter` from an existing metrics file.
fn truncate_metrics(path: &Path, iter: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut kept = String::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        let v: serde_json::Value = serde_json::from_str(&line)?;
        let is_train = v.get("val_dm_loss").is_none();
        if is_train && v["iter"].as_u64().is_some_and(|i| i as usize <= iter) {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| CliError::io(path, e))
}

struct Meter {
    dm: f64,
    spd: f64,
    total: f64,
    count: usize,
}

/// Train per `cfg`, optionally continuing from a checkpoint written by an earlier run.
pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    if cfg.train.ckpt_every % cfg.train.log_every != 0 {
        return Err(CliError::config("train.ckpt_every", "must be a multiple of train.log_every"));
    }
    let start_time = Instant::now();
    let sched = make_schedule(cfg.schedule.timesteps, cfg.schedule.kind, cfg.schedule.beta_start, cfg.schedule.beta_end)?;
    let dir = &cfg.out_dir;
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;

    let mut adam = Adam::new(cfg.train.lr);
    let (mut model, start) = match resume {
        None => (init_model(cfg)?, 0),
        Some(path) => {
            let ckpt = read_checkpoint(path)?;
            if ckpt.spec != cfg.unet_spec() {
                return Err(CliError::Core(Error::Checkpoint(format!(
                    "{} was written for a different architecture",
                    path.display()
                ))));
            }
            let iter = ckpt.tensors.require(ITER_KEY)?.item() as usize;
            adam.load_state(&ckpt.tensors)?;
            (UNet::from_parts(ckpt.spec, model_tensors(&ckpt.tensors))?, iter)
        }
    };
    if start > cfg.train.iters {
        return Err(CliError::config("train.iters", format!("checkpoint is already at iteration {start}")));
    }
    let teacher = load_teacher(cfg, &model)?;
    let distill = DistillConfig { lambda: cfg.spd.lambda, p: cfg.spd.p };

    let metrics_path = dir.join(METRICS_FILE);
    if start == 0 {
        File::create(&metrics_path).map_err(|e| CliError::io(&metrics_path, e))?;
    } else {
        truncate_metrics(&metrics_path, start)?;
    }
    let mut metrics = OpenOptions::new()
        .append(true)
        .create(true)
        .open(&metrics_path)
        .map_err(|e| CliError::io(&metrics_path, e))?;
    let mut emit = |line: String| -> Result<()> {
        writeln!(metrics, "{line}").map_err(|e| CliError::io(&metrics_path, e))
    };
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)
        .map_err(|e| CliError::io(dir.join("config.json"), e))?;

    let mut meter = Meter { dm: 0.0, spd: 0.0, total: 0.0, count: 0 };
    for iter in start..cfg.train.iters {
        let mut rng = stream_rng(cfg.seed, STREAM_TRAIN + iter as u64);
        let batch = draw_batch(cfg, cfg.train.batch, &mut rng);
        let tape = Tape::new();
        let p = model.params.bind(&tape, |_| true);
        let losses = forward_losses(&model, teacher.as_ref(), &tape, &p, &batch, &sched, &distill)?;
        tape.backward(losses.total)?;
        let grads = p.grads();
        meter.dm += losses.dm.value().item();
        meter.spd += losses.spd.map_or(0.0, |s| s.value().item());
        meter.total += losses.total.value().item();
        meter.count += 1;
        drop(p);
        drop(tape);
        adam.step(&mut model.params, &grads)?;
        clamp_sigmas(&mut model.params);

        let done = iter + 1;
        if done % cfg.train.log_every == 0 || done == cfg.train.iters {
            let k = meter.count as f64;
            let rec = TrainRecord {
                iter: done,
                dm_loss: meter.dm / k,
                spd_loss: teacher.is_some().then(|| meter.spd / k),
                total_loss: meter.total / k,
                wall_s: cfg.wall_clock.then(|| start_time.elapsed().as_secs_f64()),
            };
            emit(serde_json::to_string(&rec)?)?;
            meter = Meter { dm: 0.0, spd: 0.0, total: 0.0, count: 0 };
        }
        if done % cfg.train.ckpt_every == 0 {
            save(dir, &checkpoint_name(done), &model, &adam, done)?;
        }
    }
    let iters = cfg.train.iters;
    let val = validation_loss(&model, cfg, &sched)?;
    emit(serde_json::to_string(&ValRecord { iter: iters, val_dm_loss: val })?)?;
    let checkpoint = save(dir, FINAL_CHECKPOINT, &model, &adam, iters)?;
    Ok(TrainOutcome {
        iters,
        resumed_from: (start > 0).then_some(start),
        val_dm_loss: val,
        checkpoint,
        metrics: metrics_path,
    })
}
