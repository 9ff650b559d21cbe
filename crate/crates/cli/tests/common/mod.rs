#![allow(dead_code)]

use std::path::Path;

use bitdiff::RunConfig;

/// A points2d model small enough to train in well under a second.
pub fn tiny(dir: &Path, extra: &[&str]) -> RunConfig {
    let mut sets: Vec<String> = [
        "data.dataset=points2d",
        "model.channels=[4, 8]",
        "model.temb_dim=8",
        "model.max_groups=4",
        "schedule.timesteps=50",
        "train.batch=4",
        "train.iters=10",
        "train.log_every=5",
        "train.ckpt_every=5",
        "train.val_size=8",
        "sample.steps=5",
        "sample.batch=4",
        "log.wall_clock=false",
        "spd.lambda=0",
        "spd.p=1",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    sets.push(format!("out.dir={:?}", dir.display().to_string()));
    sets.extend(extra.iter().map(|s| s.to_string()));
    RunConfig::load(None, &sets, None).unwrap()
}

pub fn read(path: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(path).unwrap()
}
