//! Binarizers for weights and activations.
//!
//! Weights are binarized to `±σ` with a learnable per-tensor `σ`. Activations
//! use one of four scale schemes, see [`ActMode`]. The two dynamic schemes
//! rescale `sign(I) ⊗ sign(W)` by `(A * k) · α`, where `A` is the channel mean
//! of `|I|`, `k` a single-channel spatial filter and `α` the per-output-channel
//! mean magnitude of the latent weights.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{sign, Tensor};

/// Straight-through clip bound: gradients pass where `|x| <= STE_CLIP`.
pub const STE_CLIP: f64 = 1.0;

/// Lower bound keeping `σ` positive for all-zero weight tensors.
pub const SIGMA_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActMode {
    /// `sign(a)`.
    Naive,
    /// `K · sign(a)` with a trainable per-channel `K`, fixed across timesteps.
    ConstantK,
    /// Dynamic mean scale with the averaging filter `k = 1/(kh·kw)`, frozen.
    XnorDynamic,
    /// Dynamic mean scale with a learnable filter `k`.
    LearnableK,
}

impl ActMode {
    pub fn is_dynamic(self) -> bool {
        matches!(self, ActMode::XnorDynamic | ActMode::LearnableK)
    }

    /// Whether weights carry a learnable `σ` (static modes) rather than the
    /// recomputed per-channel `α` (dynamic modes).
    pub fn uses_sigma(self) -> bool {
        !self.is_dynamic()
    }
}

/// Activation-scale parameters bound to a tape for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ActScaleParams<'t> {
    pub mode: ActMode,
    /// Per-input-channel scale for [`ActMode::ConstantK`].
    pub k_const: Option<Var<'t>>,
    /// `[1,1,kh,kw]` filter for the dynamic modes.
    pub k_filter: Option<Var<'t>>,
}

impl<'t> ActScaleParams<'t> {
    pub fn naive() -> Self {
        Self { mode: ActMode::Naive, k_const: None, k_filter: None }
    }

    pub fn constant_k(k: Var<'t>) -> Self {
        Self { mode: ActMode::ConstantK, k_const: Some(k), k_filter: None }
    }

    /// Frozen averaging filter.
    pub fn xnor_dynamic(tape: &'t Tape, kh: usize, kw: usize) -> Self {
        Self {
            mode: ActMode::XnorDynamic,
            k_const: None,
            k_filter: Some(tape.constant(k_filter_init(kh, kw))),
        }
    }

    /// Learnable filter, usually initialised with [`k_filter_init`].
    pub fn learnable_k(k_filter: Var<'t>) -> Self {
        Self { mode: ActMode::LearnableK, k_const: None, k_filter: Some(k_filter) }
    }
}

/// `[1,1,kh,kw]` filter with every tap `1/(kh·kw)`.
pub fn k_filter_init(kh: usize, kw: usize) -> Tensor {
    Tensor::full([1, 1, kh, kw], 1.0 / (kh * kw) as f64)
}

/// `‖w‖₁ / n`, floored at [`SIGMA_FLOOR`].
pub fn sigma_init(w: &Tensor) -> Result<f64> {
    if w.numel() == 0 {
        return Err(Error::InvalidArgument("sigma_init of an empty tensor".into()));
    }
    Ok((w.abs_sum() / w.numel() as f64).max(SIGMA_FLOOR))
}

/// `σ · sign(w)`; `σ` receives its exact gradient, `w` the straight-through one.
pub fn binarize_weights<'t>(w: Var<'t>, sigma: Var<'t>) -> Result<Var<'t>> {
    if sigma.value().numel() != 1 {
        return Err(shape_err("binarize_weights", format!("σ must be a scalar, got {:?}", sigma.shape())));
    }
    if sigma.value().item() <= 0.0 {
        return Err(Error::InvalidArgument(format!("σ must be positive, got {}", sigma.value().item())));
    }
    w.sign_ste(STE_CLIP).mul(sigma)
}

/// Activation binarizer for the static modes.
pub fn act_binarize<'t>(a: Var<'t>, params: &ActScaleParams<'t>) -> Result<Var<'t>> {
    match params.mode {
        ActMode::Naive => Ok(a.sign_ste(STE_CLIP)),
        ActMode::ConstantK => {
            let k = params
                .k_const
                .ok_or_else(|| Error::InvalidArgument("constant_K mode requires K".into()))?;
            let signs = a.sign_ste(STE_CLIP);
            let shape = a.shape();
            let kv = k.value();
            if kv.numel() == 1 {
                return signs.mul(k.reshape(&[])?);
            }
            if shape.len() < 2 || kv.numel() != shape[1] {
                return Err(shape_err(
                    "act_binarize",
                    format!("K has {} entries for activation {:?}", kv.numel(), shape),
                ));
            }
            let mut bshape = vec![1; shape.len()];
            bshape[1] = shape[1];
            signs.mul(k.reshape(&bshape)?)
        }
        mode => Err(Error::InvalidArgument(format!("act_binarize does not handle {mode:?}"))),
    }
}

/// Per-output-channel `α = ‖W_m‖₁ / n`, shaped `[1,m,1,1]` for broadcasting.
pub fn weight_alpha<'t>(w: Var<'t>) -> Result<Var<'t>> {
    let shape = w.shape();
    let m = shape[0];
    let n: usize = shape[1..].iter().product();
    w.abs().reshape(&[m, n])?.mean_axis(1)?.reshape(&[1, m, 1, 1])
}

/// `(sign(I) ⊗ sign(W)) ⊙ (A * k) ⊙ α`, differentiable in `I`, `W` and `k`.
pub fn xnor_conv<'t>(
    input: Var<'t>,
    weight: Var<'t>,
    params: &ActScaleParams<'t>,
    stride: usize,
    padding: usize,
) -> Result<Var<'t>> {
    if !params.mode.is_dynamic() {
        return Err(Error::InvalidArgument(format!("xnor_conv does not handle {:?}", params.mode)));
    }
    let k = params
        .k_filter
        .ok_or_else(|| Error::InvalidArgument("dynamic mode requires k_filter".into()))?;
    let (ishape, wshape) = (input.shape(), weight.shape());
    if ishape.len() != 4 || wshape.len() != 4 || ishape[1] != wshape[1] {
        return Err(shape_err(
            "xnor_conv",
            format!("input {ishape:?} incompatible with weight {wshape:?}"),
        ));
    }
    let kshape = k.shape();
    if kshape != [1, 1, wshape[2], wshape[3]] {
        return Err(shape_err("xnor_conv", format!("k_filter {kshape:?} for weight {wshape:?}")));
    }
    let signs = input
        .sign_ste(STE_CLIP)
        .conv2d(weight.sign_ste(STE_CLIP), stride, padding)?;
    let a = input.abs().mean_axis(1)?;
    let scale = a.conv2d(k, stride, padding)?;
    signs.mul(scale)?.mul(weight_alpha(weight)?)
}

/// Binary convolution for any mode: static modes pair [`act_binarize`] with
/// `σ`-binarized weights; dynamic modes use [`xnor_conv`].
pub fn quantized_conv<'t>(
    input: Var<'t>,
    weight: Var<'t>,
    sigma: Option<Var<'t>>,
    params: &ActScaleParams<'t>,
    stride: usize,
    padding: usize,
) -> Result<Var<'t>> {
    if params.mode.is_dynamic() {
        return xnor_conv(input, weight, params, stride, padding);
    }
    let sigma = sigma.ok_or_else(|| Error::InvalidArgument("static binary modes require σ".into()))?;
    let a = act_binarize(input, params)?;
    a.conv2d(binarize_weights(weight, sigma)?, stride, padding)
}

/// The weights a quantized layer actually multiplies with: `σ·sign(W)` in the
/// static modes, `α_m·sign(W_m)` in the dynamic ones.
pub fn effective_weights(w: &Tensor, mode: ActMode, sigma: Option<f64>) -> Result<Tensor> {
    if mode.uses_sigma() {
        let s = sigma.ok_or_else(|| Error::InvalidArgument("σ required".into()))?;
        return Ok(w.map(|x| s * sign(x)));
    }
    let m = w.dim(0);
    let n = w.numel() / m;
    let mut data = Vec::with_capacity(w.numel());
    for row in w.data().chunks(n) {
        let alpha = row.iter().map(|x| x.abs()).sum::<f64>() / n as f64;
        data.extend(row.iter().map(|&x| alpha * sign(x)));
    }
    Tensor::new(w.shape().to_vec(), data)
}
