//! Bit-packed sign tensors and the XNOR/popcount inference convolution.
//!
//! Signs are packed 64 per `u64` along the channel axis, so every kernel tap
//! of a convolution reduces to a short run of word-wise XOR + popcount. Pad
//! bits beyond the last channel are set to 1 in every packed tensor; they
//! always agree and never count as a mismatch.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

const WORD_BITS: usize = 64;

/// Sign bits (bit = 1 ⇔ value ≥ 0) of a `[n, c, s1, s2]` or `[c, s1, s2]`
/// tensor, stored position-major as `[n][s1][s2][word]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedBitTensor {
    logical_shape: Vec<usize>,
    lead: usize,
    channels: usize,
    rows: usize,
    cols: usize,
    words_per_col: usize,
    words: Vec<u64>,
}

/// Integer-valued conv output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntTensor {
    pub shape: Vec<usize>,
    pub data: Vec<i32>,
}

impl IntTensor {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| f64::from(v)).collect())
            .expect("IntTensor shape")
    }
}

fn pad_mask(channels: usize, words_per_col: usize) -> u64 {
    let used = channels - (words_per_col - 1) * WORD_BITS;
    if used == WORD_BITS {
        0
    } else {
        !0u64 << used
    }
}

impl PackedBitTensor {
    pub fn logical_shape(&self) -> &[usize] {
        &self.logical_shape
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn words_per_col(&self) -> usize {
        self.words_per_col
    }

    /// Padding bits per packed column.
    pub fn pad_bits(&self) -> usize {
        self.words_per_col * WORD_BITS - self.channels
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// Unpack to a `±1` tensor with the original shape.
    pub fn unpack(&self) -> Tensor {
        let plane = self.rows * self.cols;
        let mut data = vec![0.0; self.lead * self.channels * plane];
        for n in 0..self.lead {
            for pos in 0..plane {
                let col = &self.words[(n * plane + pos) * self.words_per_col..][..self.words_per_col];
                for c in 0..self.channels {
                    let bit = (col[c / WORD_BITS] >> (c % WORD_BITS)) & 1;
                    data[(n * self.channels + c) * plane + pos] = if bit == 1 { 1.0 } else { -1.0 };
                }
            }
        }
        Tensor::new(self.logical_shape.clone(), data).expect("unpack shape")
    }
}

/// Pack the signs of `x` (`[c,h,w]` or `[n,c,h,w]`) along the channel axis.
pub fn pack_signs(x: &Tensor) -> Result<PackedBitTensor> {
    let (lead, channels, rows, cols) = match *x.shape() {
        [c, h, w] => (1, c, h, w),
        [n, c, h, w] => (n, c, h, w),
        ref s => return Err(shape_err("pack_signs", format!("expected 3D or 4D, got {s:?}"))),
    };
    if channels == 0 {
        return Err(shape_err("pack_signs", "zero channels"));
    }
    let words_per_col = channels.div_ceil(WORD_BITS);
    let mask = pad_mask(channels, words_per_col);
    let plane = rows * cols;
    let mut words = vec![0u64; lead * plane * words_per_col];
    let xd = x.data();
    for n in 0..lead {
        for c in 0..channels {
            let (wi, bit) = (c / WORD_BITS, c % WORD_BITS);
            let src = &xd[(n * channels + c) * plane..][..plane];
            for (pos, &v) in src.iter().enumerate() {
                if v >= 0.0 {
                    words[(n * plane + pos) * words_per_col + wi] |= 1u64 << bit;
                }
            }
        }
        for pos in 0..plane {
            words[(n * plane + pos) * words_per_col + words_per_col - 1] |= mask;
        }
    }
    Ok(PackedBitTensor {
        logical_shape: x.shape().to_vec(),
        lead,
        channels,
        rows,
        cols,
        words_per_col,
        words,
    })
}

/// `Σ sign(I)·sign(W)` over each receptive field, computed as
/// `taps·c − 2·popcount(I xor W)` over a `+1`-bordered input, minus the exact
/// contribution of the border taps (zero padding in the dense equivalent).
pub fn xnor_popcount_conv(
    input: &PackedBitTensor,
    weight: &PackedBitTensor,
    stride: usize,
    padding: usize,
) -> Result<IntTensor> {
    if weight.logical_shape.len() != 4 {
        return Err(shape_err("xnor_popcount_conv", "weight must be [m,c,kh,kw]"));
    }
    if input.channels != weight.channels {
        return Err(shape_err(
            "xnor_popcount_conv",
            format!("input has {} channels, weight {}", input.channels, weight.channels),
        ));
    }
    let wpc = input.words_per_col;
    let (m, kh, kw) = (weight.lead, weight.rows, weight.cols);
    let (b, h, w) = (input.lead, input.rows, input.cols);
    let (ph, pw) = (h + 2 * padding, w + 2 * padding);
    if stride == 0 || kh > ph || kw > pw {
        return Err(shape_err("xnor_popcount_conv", format!("kernel {kh}x{kw} vs padded {ph}x{pw}")));
    }
    let (oh, ow) = ((ph - kh) / stride + 1, (pw - kw) / stride + 1);
    let c = input.channels as i32;
    let taps = kh * kw;
    let patch_words = taps * wpc;

    // +1 border (all bits set, pad bits included).
    let mut bordered = vec![!0u64; b * ph * pw * wpc];
    for n in 0..b {
        for y in 0..h {
            let src = &input.words[(n * h + y) * w * wpc..][..w * wpc];
            let dst = (n * ph + y + padding) * pw + padding;
            bordered[dst * wpc..(dst + w) * wpc].copy_from_slice(src);
        }
    }

    // Per (m, tap) weight sign sums, for the border correction.
    let wsum: Vec<i32> = if padding > 0 {
        weight
            .words
            .chunks(wpc)
            .map(|col| {
                let ones: u32 = col.iter().map(|x| x.count_ones()).sum();
                let real_ones = ones as i32 - weight.pad_bits() as i32;
                2 * real_ones - c
            })
            .collect()
    } else {
        Vec::new()
    };

    let mut out = vec![0i32; b * m * oh * ow];
    let mut patch = vec![0u64; patch_words];
    for n in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let (y0, x0) = (oy * stride, ox * stride);
                for i in 0..kh {
                    let src = ((n * ph + y0 + i) * pw + x0) * wpc;
                    patch[i * kw * wpc..(i + 1) * kw * wpc].copy_from_slice(&bordered[src..src + kw * wpc]);
                }
                let border = padding > 0
                    && (y0 < padding || x0 < padding || y0 + kh > padding + h || x0 + kw > padding + w);
                for mi in 0..m {
                    let wrow = &weight.words[mi * patch_words..(mi + 1) * patch_words];
                    let mism: u32 = patch.iter().zip(wrow).map(|(a, b)| (a ^ b).count_ones()).sum();
                    let mut dot = taps as i32 * c - 2 * mism as i32;
                    if border {
                        for i in 0..kh {
                            let y = y0 + i;
                            let row_out = y < padding || y >= padding + h;
                            for j in 0..kw {
                                let x = x0 + j;
                                if row_out || x < padding || x >= padding + w {
                                    dot -= wsum[mi * taps + i * kw + j];
                                }
                            }
                        }
                    }
                    out[((n * m + mi) * oh + oy) * ow + ox] = dot;
                }
            }
        }
    }
    Ok(IntTensor { shape: vec![b, m, oh, ow], data: out })
}

/// A binary convolution prepared for inference: packed weight signs, the
/// per-output-channel `α`, and the scale filter pre-divided by the channel count.
#[derive(Clone, Debug)]
pub struct InferenceConvUnit {
    pub packed_weights: PackedBitTensor,
    pub alpha: Vec<f64>,
    /// `[1,1,kh,kw]` filter equal to `k / c`.
    pub k_prime: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl InferenceConvUnit {
    /// Freeze a trained layer: latent weights `[m,c,kh,kw]` and filter `k [1,1,kh,kw]`.
    pub fn from_trained(weight: &Tensor, k_filter: &Tensor, stride: usize, padding: usize) -> Result<Self> {
        let &[m, c, kh, kw] = weight.shape() else {
            return Err(shape_err("InferenceConvUnit", format!("weight {:?}", weight.shape())));
        };
        if k_filter.shape() != [1, 1, kh, kw] {
            return Err(shape_err("InferenceConvUnit", format!("k_filter {:?}", k_filter.shape())));
        }
        let n = c * kh * kw;
        let alpha = weight
            .data()
            .chunks(n)
            .map(|row| row.iter().map(|x| x.abs()).sum::<f64>() / n as f64)
            .collect::<Vec<_>>();
        debug_assert_eq!(alpha.len(), m);
        Ok(Self {
            packed_weights: pack_signs(weight)?,
            alpha,
            k_prime: k_filter.scale(1.0 / c as f64),
            stride,
            padding,
        })
    }
}

/// Six-step binary inference convolution:
/// (1) pack `sign(I)`; (2) XNOR/popcount conv with the packed weights;
/// (3) sum `|I|` across channels; (4) convolve that map with `k' = k/c`;
/// (5) multiply (2) by (4) pointwise; (6) scale each output channel by `α`.
pub fn binary_inference_conv(input: &Tensor, unit: &InferenceConvUnit) -> Result<Tensor> {
    let &[b, c, h, w] = input.shape() else {
        return Err(shape_err("binary_inference_conv", format!("input {:?}", input.shape())));
    };
    if c != unit.packed_weights.channels() {
        return Err(shape_err(
            "binary_inference_conv",
            format!("input has {c} channels, unit expects {}", unit.packed_weights.channels()),
        ));
    }
    let packed = pack_signs(input)?;
    let signs = xnor_popcount_conv(&packed, &unit.packed_weights, unit.stride, unit.padding)?;

    let plane = h * w;
    let mut abs_sum = vec![0.0; b * plane];
    for n in 0..b {
        let dst = &mut abs_sum[n * plane..(n + 1) * plane];
        for ch in 0..c {
            let src = &input.data()[(n * c + ch) * plane..][..plane];
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s.abs());
        }
    }
    let abs_sum = Tensor::new([b, 1, h, w], abs_sum)?;
    let scale = conv::conv2d(&abs_sum, &unit.k_prime, unit.stride, unit.padding)?;

    let m = signs.shape[1];
    let oplane = signs.shape[2] * signs.shape[3];
    let mut out = vec![0.0; signs.data.len()];
    for n in 0..b {
        let s = &scale.data()[n * oplane..(n + 1) * oplane];
        for (mi, &alpha) in unit.alpha.iter().enumerate() {
            let base = (n * m + mi) * oplane;
            for p in 0..oplane {
                out[base + p] = f64::from(signs.data[base + p]) * s[p] * alpha;
            }
        }
    }
    Tensor::new(signs.shape.clone(), out)
}

/// Convolution shape for benchmarking: input `[1,c,h,w]`, weight `[m,c,k,k]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchShape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub m: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Default for BenchShape {
    fn default() -> Self {
        Self { c: 448, h: 32, w: 32, m: 448, k: 3, stride: 1, padding: 1 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchReport {
    pub shape: BenchShape,
    pub repetitions: usize,
    pub warmup: usize,
    /// Median ns per dense float conv.
    pub fp_ns: f64,
    /// Median ns per six-step binary pipeline.
    pub packed_ns: f64,
    pub speedup: f64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn time_ns<T>(warmup: usize, reps: usize, mut f: impl FnMut() -> T) -> f64 {
    for _ in 0..warmup {
        std::hint::black_box(f());
    }
    let samples = (0..reps)
        .map(|_| {
            let start = Instant::now();
            std::hint::black_box(f());
            start.elapsed().as_nanos() as f64
        })
        .collect();
    median(samples)
}

/// Median wall time of the dense conv vs. the six-step binary pipeline.
/// Warm-up runs (20% of `repetitions`, at least one) are excluded.
pub fn bench_conv(shape: BenchShape, repetitions: usize, seed: u64) -> Result<BenchReport> {
    if repetitions < 3 {
        return Err(Error::InvalidArgument(format!("repetitions must be >= 3, got {repetitions}")));
    }
    let warmup = repetitions.div_ceil(5).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = Tensor::randn([1, shape.c, shape.h, shape.w], &mut rng);
    let weight = Tensor::randn([shape.m, shape.c, shape.k, shape.k], &mut rng);
    let k = crate::binarize::k_filter_init(shape.k, shape.k);
    let unit = InferenceConvUnit::from_trained(&weight, &k, shape.stride, shape.padding)?;
    // validate once outside the timed region
    conv::conv2d(&input, &weight, shape.stride, shape.padding)?;
    binary_inference_conv(&input, &unit)?;

    let fp_ns = time_ns(warmup, repetitions, || {
        conv::conv2d(&input, &weight, shape.stride, shape.padding).expect("validated")
    });
    let packed_ns = time_ns(warmup, repetitions, || {
        binary_inference_conv(&input, &unit).expect("validated")
    });
    Ok(BenchReport {
        shape,
        repetitions,
        warmup,
        fp_ns,
        packed_ns,
        speedup: fp_ns / packed_ns,
    })
}
