//! Acceptance criteria, one test each. Every test prints a single
//! `criterion N: PASS|FAIL ...` line to stderr (uncaptured) and then fails
//! normally if the criterion does not hold. Tests take a shared lock so the
//! timing criterion never competes with a training run for the CPU.

use std::io::Write;
use std::panic::{catch_unwind, resume_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bitdiff::analyze::analyze_file;
use bitdiff::data::Dataset;
use bitdiff::eval::evaluate;
use bitdiff::sample::{sample, SampleOptions};
use bitdiff::train::{load_model, stream_rng, train};
use bitdiff::RunConfig;
use bitdiff_core::binarize::{k_filter_init, quantized_conv, xnor_conv, ActScaleParams};
use bitdiff_core::bitkernel::{
    bench_conv, binary_inference_conv, pack_signs, xnor_popcount_conv, BenchShape, InferenceConvUnit,
};
use bitdiff_core::conv::conv2d;
use bitdiff_core::diffusion::{dm_loss, make_schedule, QuantMode, ScheduleKind, UNet, UNetSpec};
use bitdiff_core::spd::{spd_loss, total_loss, DistillConfig};
use bitdiff_core::tbs::{tbs_fuse, training_double_pass};
use bitdiff_core::{concat, Tape, Tensor, Var};

static LOCK: Mutex<()> = Mutex::new(());

/// Run `body` under the lock; print the verdict line; re-raise a failure.
fn criterion(n: u32, what: &str, limit: Duration, body: impl FnOnce() -> String) {
    let _guard = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(body));
    let took = start.elapsed();
    let mut err = std::io::stderr().lock();
    match result {
        Ok(detail) if took <= limit => {
            let _ = writeln!(err, "criterion {n}: PASS {what} [{detail}; {:.1}s]", took.as_secs_f64());
        }
        Ok(detail) => {
            let _ = writeln!(err, "criterion {n}: FAIL {what} [{detail}; {:.1}s exceeds {:?}]", took.as_secs_f64(), limit);
            drop(err);
            panic!("criterion {n} exceeded its time limit");
        }
        Err(cause) => {
            let msg = cause
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| cause.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            let _ = writeln!(err, "criterion {n}: FAIL {what} [{msg}]");
            drop(err);
            resume_unwind(cause);
        }
    }
}

fn signs(t: &Tensor) -> Tensor {
    t.map(|v| if v >= 0.0 { 1.0 } else { -1.0 })
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn c1_packed_kernel_equals_dense_sign_conv() {
    criterion(1, "packed xnor/popcount conv equals dense float conv on ±1 tensors", Duration::from_secs(60), || {
        let mut g = ChaCha8Rng::seed_from_u64(1);
        let required = [1usize, 63, 64, 65, 448];
        let mut tested = 0;
        for i in 0..80 {
            let c = if i < 2 * required.len() { required[i % required.len()] } else { g.random_range(1..200) };
            let (h, w) = (g.random_range(1..10), g.random_range(1..10));
            let k = [1, 2, 3, 5][g.random_range(0..4)];
            let pad = g.random_range(0..3);
            if k > h + 2 * pad || k > w + 2 * pad {
                continue;
            }
            let stride = g.random_range(1..3);
            let b = g.random_range(1..3);
            let m = g.random_range(1..9);
            let x = signs(&Tensor::randn([b, c, h, w], &mut g));
            let wt = signs(&Tensor::randn([m, c, k, k], &mut g));
            let dense = conv2d(&x, &wt, stride, pad).unwrap();
            let packed = xnor_popcount_conv(&pack_signs(&x).unwrap(), &pack_signs(&wt).unwrap(), stride, pad).unwrap();
            assert_eq!(packed.shape, dense.shape(), "shape {i}");
            for (p, d) in packed.data.iter().zip(dense.data()) {
                assert_eq!(*p as f64, *d, "c={c} h={h} w={w} k={k} stride={stride} pad={pad}");
            }
            tested += 1;
        }
        assert!(tested >= 50, "only {tested} shapes");
        format!("{tested} random shapes incl. c ∈ {required:?}")
    });
}

#[test]
fn c2_published_efficiency_totals() {
    criterion(2, "analyzer reproduces 1.82e9 OPs, 52.7x OPs and 28.0x storage savings", Duration::from_secs(5), || {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/table5.arch");
        let r = analyze_file(&path).unwrap();
        let s = r.savings.unwrap();
        assert!((r.totals.ops - 1.82e9).abs() <= 0.01e9, "ops {}", r.totals.ops);
        assert!((s.ops - 52.7).abs() <= 0.1, "ops saving {}", s.ops);
        assert!((s.size - 28.0).abs() <= 0.1, "size saving {}", s.size);
        format!("ops {:.4e}, {:.2}x, {:.2}x", r.totals.ops, s.ops, s.size)
    });
}

/// Largest relative deviation of `grad` from central differences of `f`.
fn fd_error(x: &Tensor, grad: &Tensor, f: impl Fn(&Tensor) -> f64) -> f64 {
    assert!(grad.data().iter().any(|g| g.abs() > 1e-10), "gradient vanishes");
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let h = 1e-6 * x.data()[i].abs().max(1.0);
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp.data_mut()[i] += h;
        xm.data_mut()[i] -= h;
        let fd = (f(&xp) - f(&xm)) / (2.0 * h);
        let ad = grad.data()[i];
        let scale = fd.abs().max(ad.abs());
        if scale > 1e-10 {
            worst = worst.max((fd - ad).abs() / scale);
        }
    }
    worst
}

fn grad_check(x: &Tensor, build: impl for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>) -> f64 {
    let tape = Tape::new();
    let v = tape.param(x.clone());
    tape.backward(build(&tape, v)).unwrap();
    fd_error(x, &v.grad().unwrap(), |y| {
        let tape = Tape::new();
        build(&tape, tape.constant(y.clone())).value().item()
    })
}

fn leaf<'t>(tape: &'t Tape, t: &Tensor) -> Var<'t> {
    tape.constant(t.clone())
}

fn readout<'t>(y: Var<'t>, r: &Tensor) -> Var<'t> {
    y.silu().mul(y.tape().constant(r.clone())).unwrap().sum()
}

#[test]
fn c3_gradients_match_finite_differences() {
    criterion(3, "conv, σ, k, α and distillation gradients within 1e-3 of finite differences", Duration::from_secs(300), || {
        let mut g = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn([1, 4, 8, 8], &mut g);
        let w = Tensor::randn([4, 4, 3, 3], &mut g);
        let r = Tensor::randn([1, 4, 8, 8], &mut g);
        let mut errs = Vec::new();

        errs.push(("conv", grad_check(&w.scale(0.3), |tape, wv| readout(leaf(tape, &x).conv2d(wv, 1, 1).unwrap(), &r))));
        errs.push((
            "sigma",
            grad_check(&Tensor::scalar(0.07), |tape, s| {
                let y = quantized_conv(leaf(tape, &x), leaf(tape, &w), Some(s), &ActScaleParams::naive(), 1, 1).unwrap();
                readout(y, &r)
            }),
        ));
        let k = k_filter_init(3, 3).add(&Tensor::randn([1, 1, 3, 3], &mut g).scale(0.05)).unwrap();
        errs.push((
            "k",
            grad_check(&k, |tape, kv| {
                readout(xnor_conv(leaf(tape, &x), leaf(tape, &w), &ActScaleParams::learnable_k(kv), 1, 1).unwrap(), &r)
            }),
        ));
        let (d, u, prev) = (Tensor::randn([1, 2, 8, 8], &mut g), Tensor::randn([1, 2, 8, 8], &mut g), Tensor::randn([1, 2, 8, 8], &mut g));
        errs.push((
            "alpha",
            grad_check(&Tensor::scalar(0.3), |tape, a| {
                readout(tbs_fuse(leaf(tape, &d), leaf(tape, &u), Some(leaf(tape, &prev)), a).unwrap(), &r)
            }),
        ));

        let mut spec = UNetSpec::small(1, 8);
        spec.channels = vec![4, 4];
        spec.quant = QuantMode::Fp;
        spec.tbs_blocks = vec![2, 3];
        let model = UNet::init(spec, &mut g).unwrap();
        let sched = make_schedule(100, ScheduleKind::Linear, 1e-4, 0.02).unwrap();
        let (x0, eps) = (Tensor::randn([1, 1, 8, 8], &mut g), Tensor::randn([1, 1, 8, 8], &mut g));
        let name = UNet::alpha_name(2);
        let tape = Tape::new();
        let p = model.params.bind(&tape, |n| n == name);
        let out = training_double_pass(&model, &tape, &p, &x0, &[30], &eps, &sched).unwrap();
        tape.backward(out.loss).unwrap();
        let grad = p.grads().remove(&name).unwrap();
        let double_pass = fd_error(model.params.get(&name).unwrap(), &grad, |a| {
            let mut m = model.clone();
            *m.params.get_mut(&name).unwrap() = a.clone();
            let tape = Tape::new();
            let p = m.params.bind(&tape, |_| false);
            training_double_pass(&m, &tape, &p, &x0, &[30], &eps, &sched).unwrap().loss.value().item()
        });
        errs.push(("alpha double pass", double_pass));

        let shapes = [[1, 4, 8, 8], [1, 4, 4, 4], [1, 4, 8, 8]];
        let teacher: Vec<Tensor> = shapes.iter().map(|s| Tensor::randn(s.to_vec(), &mut g)).collect();
        let student: Vec<Tensor> = shapes.iter().map(|s| Tensor::randn(s.to_vec(), &mut g)).collect();
        let (e_true, e_pred) = (Tensor::randn([1, 1, 8, 8], &mut g), Tensor::randn([1, 1, 8, 8], &mut g));
        let cfg = DistillConfig { lambda: 2.0, p: 2 };
        for i in 0..shapes.len() {
            let err = grad_check(&student[i], |tape, v| {
                let feats: Vec<Var> = (0..shapes.len()).map(|k| if k == i { v } else { leaf(tape, &student[k]) }).collect();
                let tf: Vec<Var> = teacher.iter().map(|t| leaf(tape, t)).collect();
                total_loss(leaf(tape, &e_true), leaf(tape, &e_pred), &tf, &feats, &cfg).unwrap().total
            });
            errs.push(("distillation", err));
        }
        for (what, e) in &errs {
            assert!(*e <= 1e-3, "{what}: relative error {e}");
        }
        let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
        format!("worst relative error {worst:.2e}")
    });
}

#[test]
fn c4_degenerate_settings_reduce_exactly() {
    criterion(4, "α=0, λ=0 and frozen-k degeneracies are bitwise; distillation loss invariances", Duration::from_secs(300), || {
        let mut g = ChaCha8Rng::seed_from_u64(4);
        let instances = 1000;
        for _ in 0..instances {
            let (b, h) = (g.random_range(1..3), 2 * g.random_range(1..5));
            let cd = g.random_range(1..5);
            let cu = g.random_range(1..5);
            let p = [1, 2][g.random_range(0..2)];
            let a = g.random_range(0.01..100.0);
            let tape = Tape::new();
            let mut v = |s: [usize; 4]| tape.constant(Tensor::randn(s, &mut g));
            let (d, u, prev) = (v([b, cd, h, h]), v([b, cu, h, h]), v([b, cu, h, h]));
            let fused = tbs_fuse(d, u, Some(prev), tape.constant(Tensor::scalar(0.0))).unwrap();
            assert_eq!(*fused.value(), *concat(&[d, u], 1).unwrap().value());

            let (et, ep) = (v([b, 1, h, h]), v([b, 1, h, h]));
            let (ft, fs) = (vec![v([b, cd, h, h])], vec![v([b, cd, h, h])]);
            let parts = total_loss(et, ep, &ft, &fs, &DistillConfig { lambda: 0.0, p: 2 }).unwrap();
            assert_eq!(parts.total.value().item().to_bits(), dm_loss(et, ep).unwrap().value().item().to_bits());

            let (f1, f2) = (v([b, cd, h, h]), v([b, cd, h, h]));
            let base = spd_loss(f1, f2, p).unwrap().value().item();
            assert!(spd_loss(f1, f1, p).unwrap().value().item().abs() < 1e-15);
            let scaled = spd_loss(f1.scale(a), f2, p).unwrap().value().item();
            assert!((scaled - base).abs() <= 1e-9 * base, "scale {a}: {scaled} vs {base}");
        }

        for _ in 0..100 {
            let c = g.random_range(1..8);
            let (kh, m) = ([1, 3][g.random_range(0..2)], g.random_range(1..5));
            let x = Tensor::randn([1, c, 6, 6], &mut g);
            let w = Tensor::randn([m, c, kh, kh], &mut g);
            let tape = Tape::new();
            let frozen = ActScaleParams::learnable_k(tape.constant(k_filter_init(kh, kh)));
            let dynamic = ActScaleParams::xnor_dynamic(&tape, kh, kh);
            let a = xnor_conv(tape.constant(x.clone()), tape.constant(w.clone()), &frozen, 1, kh / 2).unwrap();
            let b = xnor_conv(tape.constant(x.clone()), tape.constant(w.clone()), &dynamic, 1, kh / 2).unwrap();
            assert_eq!(*a.value(), *b.value());
        }

        let mut spec = UNetSpec::small(1, 8);
        spec.channels = vec![4, 8];
        spec.tbs_blocks = vec![2, 3];
        let mut model = UNet::init(spec, &mut g).unwrap();
        for j in [2, 3] {
            *model.params.get_mut(&UNet::alpha_name(j)).unwrap() = Tensor::scalar(0.0);
        }
        let x = Tensor::randn([2, 1, 8, 8], &mut g);
        let (plain, up) = model.predict(&x, &[10, 20], None).unwrap();
        let noisy: std::collections::BTreeMap<usize, Tensor> =
            up.iter().map(|(j, t)| (*j, t.add(&Tensor::randn(t.shape().to_vec(), &mut g)).unwrap())).collect();
        let (blended, _) = model.predict(&x, &[10, 20], Some(&noisy)).unwrap();
        assert_eq!(plain, blended);
        format!("{instances} random instances")
    });
}

#[test]
fn c5_inference_pipeline_matches_training_forward() {
    criterion(5, "six-step inference conv within 1e-4 of the training forward", Duration::from_secs(300), || {
        let mut g = ChaCha8Rng::seed_from_u64(5);
        let mut shapes: Vec<(usize, usize, usize, usize, usize, usize, usize)> = vec![(448, 32, 32, 448, 3, 1, 1)];
        for _ in 0..30 {
            let k = [1, 3, 5][g.random_range(0..3)];
            let h = g.random_range(k..12);
            shapes.push((g.random_range(1..130), h, g.random_range(k..12), g.random_range(1..9), k, g.random_range(1..3), g.random_range(0..k)));
        }
        let mut worst: f64 = 0.0;
        for &(c, h, w, m, k, stride, pad) in &shapes {
            let x = Tensor::randn([1, c, h, w], &mut g);
            let wt = Tensor::randn([m, c, k, k], &mut g);
            let kf = k_filter_init(k, k).add(&Tensor::randn([1, 1, k, k], &mut g).scale(0.02)).unwrap();
            let tape = Tape::new();
            let params = ActScaleParams::learnable_k(tape.constant(kf.clone()));
            let train = xnor_conv(tape.constant(x.clone()), tape.constant(wt.clone()), &params, stride, pad).unwrap();
            let unit = InferenceConvUnit::from_trained(&wt, &kf, stride, pad).unwrap();
            let infer = binary_inference_conv(&x, &unit).unwrap();
            let dev = max_abs_diff(&train.value(), &infer);
            assert!(dev <= 1e-4, "shape {:?}: deviation {dev}", (c, h, w, m, k, stride, pad));
            worst = worst.max(dev);
        }
        format!("{} shapes incl. (448,32,32)x(448,448,3,3), worst {worst:.2e}", shapes.len())
    });
}

fn desk(dir: &Path, extra: &[String]) -> RunConfig {
    let mut sets = vec![format!("out.dir={:?}", dir.display().to_string()), "log.wall_clock=false".to_string()];
    sets.extend(extra.iter().cloned());
    RunConfig::load(None, &sets, None).unwrap()
}

#[test]
fn c6_desk_ablation_ordering() {
    criterion(6, "desk ablation: vanilla ≥ {+TBS, +SPD} ≥ both in val loss, MMD(both) < MMD(vanilla)", Duration::from_secs(7200), || {
        let root = tempfile::tempdir().unwrap();
        let teacher = train(&desk(&root.path().join("teacher"), &["model.quant=\"fp\"".into()]), None).unwrap();
        let t = format!("{:?}", teacher.checkpoint.display().to_string());
        let shared = [format!("model.init={t}"), format!("spd.teacher={t}")];
        let runs: [(&str, [&str; 3]); 4] = [
            ("vanilla", ["model.act_mode=\"xnor_dynamic\"", "tbs.connections=0", "spd.lambda=0"]),
            ("tbs", ["model.act_mode=\"learnable_k\"", "tbs.connections=2", "spd.lambda=0"]),
            ("spd", ["model.act_mode=\"xnor_dynamic\"", "tbs.connections=0", "spd.lambda=3e-2"]),
            ("both", ["model.act_mode=\"learnable_k\"", "tbs.connections=2", "spd.lambda=3e-2"]),
        ];
        let mut val = Vec::new();
        let mut mmd = Vec::new();
        for (name, sets) in runs {
            let mut extra = shared.to_vec();
            extra.extend(sets.iter().map(|s| s.to_string()));
            let cfg = desk(&root.path().join(name), &extra);
            let out = train(&cfg, None).unwrap();
            let model = load_model(&out.checkpoint).unwrap();
            let s = &cfg.schedule;
            let sched = make_schedule(s.timesteps, s.kind, s.beta_start, s.beta_end).unwrap();
            let opts = SampleOptions { n: 512, steps: cfg.sample.steps, eta: 0.0, batch: 64, seed: cfg.seed };
            let (x, _) = sample(&model, &sched, opts).unwrap();
            let reference = Dataset::Sprites16.batch(512, &mut stream_rng(0, 1 << 50));
            val.push(out.val_dm_loss);
            mmd.push(evaluate(&x, &reference).unwrap().mmd);
        }
        let detail = format!("val {val:.4?}, mmd {mmd:.4?} (vanilla, tbs, spd, both)");
        assert!(val[0] >= val[1] && val[0] >= val[2], "single techniques do not beat vanilla: {detail}");
        assert!(val[1] >= val[3] && val[2] >= val[3], "both does not beat single techniques: {detail}");
        assert!(mmd[3] < mmd[0], "MMD ordering: {detail}");
        detail
    });
}

#[test]
fn c7_packed_pipeline_speedup() {
    criterion(7, "six-step pipeline ≥ 2x faster than dense conv at (448,32,32)x(448,448,3,3)", Duration::from_secs(300), || {
        let r = bench_conv(BenchShape::default(), 7, 7).unwrap();
        assert!(r.speedup >= 2.0, "speedup {:.2}", r.speedup);
        format!("dense {:.1} ms, packed {:.1} ms, {:.2}x", r.fp_ns / 1e6, r.packed_ns / 1e6, r.speedup)
    });
}

#[test]
fn c8_training_is_deterministic() {
    criterion(8, "identical config and seed give identical metrics and checkpoints", Duration::from_secs(600), || {
        let root = tempfile::tempdir().unwrap();
        let short = ["train.iters=40".to_string(), "train.log_every=10".into(), "train.ckpt_every=20".into(), "train.val_size=64".into()];
        let mut fp = short.to_vec();
        fp.push("model.quant=\"fp\"".into());
        let teacher = train(&desk(&root.path().join("t"), &fp), None).unwrap();
        let mut extra = short.to_vec();
        extra.push(format!("spd.teacher={:?}", teacher.checkpoint.display().to_string()));
        let run = |name: &str| {
            let dir = root.path().join(name);
            train(&desk(&dir, &extra), None).unwrap();
            let mut files: Vec<_> = std::fs::read_dir(&dir).unwrap().map(|e| e.unwrap().path()).collect();
            files.sort();
            files.into_iter().map(|p| (p.file_name().unwrap().to_owned(), std::fs::read(&p).unwrap())).collect::<Vec<_>>()
        };
        let (a, b) = (run("a"), run("b"));
        let names: Vec<_> = a.iter().map(|f| f.0.to_string_lossy().into_owned()).collect();
        assert_eq!(a.len(), b.len());
        for ((na, da), (nb, db)) in a.iter().zip(&b) {
            assert_eq!(na, nb);
            if na != "config.json" {
                assert!(da == db, "{} differs", na.to_string_lossy());
            }
        }
        format!("byte-identical {names:?}")
    });
}
