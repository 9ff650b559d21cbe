//! Procedural toy datasets.
//!
//! `sprites16`: one axis-aligned rectangle or circle on a 16×16 canvas, `+1`
//! inside and `−1` outside. `points2d`: a ring of eight Gaussian clusters in
//! the plane, each point broadcast to a constant 2-channel 4×4 map so it can go
//! through the same U-Net.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use bitdiff_core::Tensor;

pub const SPRITE_SIZE: usize = 16;
pub const POINT_MAP: usize = 4;
const RING_MODES: usize = 8;
const RING_RADIUS: f64 = 0.8;
const RING_STD: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Dataset {
    Sprites16,
    Points2d,
}

impl Dataset {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sprites16" => Some(Self::Sprites16),
            "points2d" => Some(Self::Points2d),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Sprites16 => "sprites16",
            Self::Points2d => "points2d",
        }
    }

    /// `(channels, side)` of one sample.
    pub fn sample_dims(self) -> (usize, usize) {
        match self {
            Self::Sprites16 => (1, SPRITE_SIZE),
            Self::Points2d => (2, POINT_MAP),
        }
    }

    pub fn sample_shape(self) -> [usize; 3] {
        let (c, s) = self.sample_dims();
        [c, s, s]
    }

    /// Dataset whose samples have this `[c, h, w]` shape.
    pub fn from_shape(shape: &[usize]) -> Option<Self> {
        [Self::Sprites16, Self::Points2d].into_iter().find(|d| d.sample_shape() == shape)
    }

    /// `[n, c, s, s]` batch.
    pub fn batch<R: Rng + ?Sized>(self, n: usize, rng: &mut R) -> Tensor {
        let (c, s) = self.sample_dims();
        let mut data = Vec::with_capacity(n * c * s * s);
        for _ in 0..n {
            match self {
                Self::Sprites16 => data.extend(sprite(rng)),
                Self::Points2d => {
                    let (x, y) = ring_point(rng);
                    data.extend(std::iter::repeat_n(x, s * s));
                    data.extend(std::iter::repeat_n(y, s * s));
                }
            }
        }
        Tensor::new([n, c, s, s], data).expect("batch shape")
    }
}

fn sprite<R: Rng + ?Sized>(rng: &mut R) -> Vec<f64> {
    let s = SPRITE_SIZE;
    let mut img = vec![-1.0; s * s];
    if rng.random_bool(0.5) {
        let w = rng.random_range(3..=10);
        let h = rng.random_range(3..=10);
        let x0 = rng.random_range(0..=s - w);
        let y0 = rng.random_range(0..=s - h);
        for y in y0..y0 + h {
            img[y * s + x0..y * s + x0 + w].fill(1.0);
        }
    } else {
        let r: f64 = rng.random_range(2.0..5.5);
        let margin = r.ceil() as usize;
        let cx = rng.random_range(margin..=s - margin) as f64 - 0.5;
        let cy = rng.random_range(margin..=s - margin) as f64 - 0.5;
        for y in 0..s {
            for x in 0..s {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                if dx * dx + dy * dy <= r * r {
                    img[y * s + x] = 1.0;
                }
            }
        }
    }
    img
}

fn ring_point<R: Rng + ?Sized>(rng: &mut R) -> (f64, f64) {
    let mode = rng.random_range(0..RING_MODES);
    let theta = std::f64::consts::TAU * mode as f64 / RING_MODES as f64;
    let nx: f64 = StandardNormal.sample(rng);
    let ny: f64 = StandardNormal.sample(rng);
    (RING_RADIUS * theta.cos() + RING_STD * nx, RING_RADIUS * theta.sin() + RING_STD * ny)
}
