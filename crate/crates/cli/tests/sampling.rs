mod common;

use common::tiny;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use bitdiff::archive;
use bitdiff::data::Dataset;
use bitdiff::eval::{evaluate, median_bandwidth, mmd_rbf};
use bitdiff::sample::{sample, SampleOptions};
use bitdiff::train::{load_model, stream_rng, train};
use bitdiff_core::diffusion::{make_schedule, ScheduleKind, UNet};
use bitdiff_core::Tensor;

fn opts(n: usize, seed: u64) -> SampleOptions {
    SampleOptions { n, steps: 5, eta: 0.0, batch: 3, seed }
}

#[test]
fn sampling_is_deterministic_per_seed() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny(root.path(), &[]);
    let model = load_model(&train(&cfg, None).unwrap().checkpoint).unwrap();
    let sched = make_schedule(50, ScheduleKind::Linear, 1e-4, 0.02).unwrap();
    let (a, summary) = sample(&model, &sched, opts(7, 3)).unwrap();
    let (b, _) = sample(&model, &sched, opts(7, 3)).unwrap();
    let (c, _) = sample(&model, &sched, opts(7, 4)).unwrap();
    assert_eq!(archive::encode(&a).unwrap(), archive::encode(&b).unwrap());
    assert_ne!(a, c);
    assert_eq!(a.shape(), [7, 2, 4, 4]);
    assert!(summary.timestep_cache);
    assert_eq!(summary.batches.iter().map(|b| b.n).collect::<Vec<_>>(), [3, 3, 1]);
    assert!(a.data().iter().all(|v| v.is_finite()));
}

#[test]
fn stochastic_sampling_differs_from_deterministic() {
    let root = tempfile::tempdir().unwrap();
    let model = load_model(&train(&tiny(root.path(), &[]), None).unwrap().checkpoint).unwrap();
    let sched = make_schedule(50, ScheduleKind::Linear, 1e-4, 0.02).unwrap();
    let (a, _) = sample(&model, &sched, opts(2, 0)).unwrap();
    let (b, _) = sample(&model, &sched, SampleOptions { eta: 1.0, ..opts(2, 0) }).unwrap();
    assert_ne!(a, b);
}

#[test]
fn zero_alpha_connections_sample_like_no_connections() {
    let cfg = tiny(std::path::Path::new("unused"), &[]);
    let spec = cfg.unet_spec();
    assert_eq!(spec.tbs_blocks.len(), 2);
    let mut model = UNet::init(spec.clone(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    for &j in &spec.tbs_blocks {
        *model.params.get_mut(&UNet::alpha_name(j)).unwrap() = Tensor::scalar(0.0);
    }
    let mut plain_spec = spec;
    plain_spec.tbs_blocks.clear();
    let plain = UNet::from_parts(plain_spec, model.params.clone()).unwrap();
    let sched = make_schedule(50, ScheduleKind::Linear, 1e-4, 0.02).unwrap();
    let (a, sa) = sample(&model, &sched, opts(4, 1)).unwrap();
    let (b, sb) = sample(&plain, &sched, opts(4, 1)).unwrap();
    assert!(sa.timestep_cache && !sb.timestep_cache);
    assert_eq!(archive::encode(&a).unwrap(), archive::encode(&b).unwrap());
}

#[test]
fn same_distribution_scores_near_zero_and_zeros_score_far() {
    let ds = Dataset::Sprites16;
    let x = ds.batch(1000, &mut stream_rng(0, 7));
    let reference = ds.batch(1000, &mut stream_rng(1, 7));
    let same = evaluate(&x, &reference).unwrap();
    assert!(same.mmd.abs() < 0.01, "same-distribution MMD {}", same.mmd);
    let zeros = Tensor::zeros(x.shape().to_vec());
    let far = evaluate(&zeros, &reference).unwrap();
    assert!(far.mmd >= 10.0 * same.mmd.abs().max(1e-4), "zeros {} vs baseline {}", far.mmd, same.mmd);
    assert!(far.mean_gap > same.mean_gap);
}

#[test]
fn identical_sets_score_exactly_zero() {
    let x = Dataset::Points2d.batch(50, &mut stream_rng(2, 0));
    let bw = median_bandwidth(&x).unwrap();
    assert_eq!(mmd_rbf(&x, &x, bw).unwrap(), 0.0);
    assert_eq!(evaluate(&x, &x).unwrap().mmd, 0.0);
}

#[test]
fn mismatched_sets_are_rejected() {
    let a = Dataset::Sprites16.batch(10, &mut stream_rng(0, 0));
    let b = Dataset::Sprites16.batch(11, &mut stream_rng(0, 1));
    assert!(evaluate(&a, &b).is_err());
    let c = Dataset::Points2d.batch(10, &mut stream_rng(0, 1));
    assert!(evaluate(&a, &c).is_err());
}
