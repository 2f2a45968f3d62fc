//! Cross-attention of visual adjustments over depth adjustments, and the
//! scaled residual that writes the fused result back into the visual stream.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::normal;
use crate::tensor::{
    matmul, matmul_nt, matmul_tn, softmax_rows, softmax_rows_backward, Dual, Tensor,
};

#[derive(Clone, Debug, PartialEq)]
pub struct FusionBlock {
    pub mlp_weight: Dual,
    pub mlp_bias: Dual,
    /// Residual scale, shared by every token of the layer. Stored as a
    /// one-element tensor.
    pub alpha: Dual,
}

impl FusionBlock {
    pub fn new(mlp_weight: Tensor, mlp_bias: Tensor, alpha: f64) -> Result<Self> {
        let d = mlp_weight.shape()[0];
        if mlp_weight.shape() != [d, d] || mlp_bias.shape() != [d] {
            return Err(Error::dim("FusionBlock::new", mlp_weight.shape(), mlp_bias.shape()));
        }
        Ok(Self {
            mlp_weight: Dual::new(mlp_weight),
            mlp_bias: Dual::new(mlp_bias),
            alpha: Dual::new(Tensor::vector(vec![alpha])),
        })
    }

    /// Weight `N(0, 1/d)`, bias zero, `α = 0`.
    pub fn init(d: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let std = (1.0 / d as f64).sqrt();
        let w = Tensor::matrix(d, d, (0..d * d).map(|_| std * normal(rng)).collect())?;
        Self::new(w, Tensor::zeros(&[d]), 0.0)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.value.data()[0]
    }

    pub fn d(&self) -> usize {
        self.mlp_weight.value.shape()[0]
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.rank() != 2 || a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// Attention weights `softmax(dv · ddᵀ / √d)`.
pub fn attention_weights(dv: &Tensor, dd: &Tensor) -> Result<Tensor> {
    same_shape(dv, dd, "cross_attend")?;
    let scale = (dv.cols() as f64).sqrt();
    softmax_rows(&matmul_nt(dv, dd)?.scale(1.0 / scale))
}

/// Visual adjustments query the whole depth adjustment map, which supplies
/// both keys and values.
pub fn cross_attend(dv: &Tensor, dd: &Tensor) -> Result<Tensor> {
    let weights = attention_weights(dv, dd)?;
    matmul(&weights, dd)
}

/// Backward of [`cross_attend`]; returns `(∂dv, ∂dd)`.
pub fn cross_attend_backward(
    dv: &Tensor,
    dd: &Tensor,
    weights: &Tensor,
    cot: &Tensor,
) -> Result<(Tensor, Tensor)> {
    same_shape(dv, cot, "cross_attend_backward")?;
    let scale = (dv.cols() as f64).sqrt();
    let d_weights = matmul_nt(cot, dd)?;
    let mut g_dd = matmul_tn(weights, cot)?;
    let d_scores = softmax_rows_backward(weights, &d_weights)?.scale(1.0 / scale);
    let g_dv = matmul(&d_scores, dd)?;
    g_dd.axpy(1.0, &matmul_tn(&d_scores, dv)?)?;
    Ok((g_dv, g_dd))
}

/// Elementwise sum, the attention-free fusion baseline.
pub fn additive_fuse(dv: &Tensor, dd: &Tensor) -> Result<Tensor> {
    same_shape(dv, dd, "additive_fuse")?;
    dv.add(dd)
}

/// `fv + α · ((delta + fv) · W + b)`.
pub fn integrate(fv: &Tensor, delta: &Tensor, block: &FusionBlock) -> Result<Tensor> {
    Ok(integrate_traced(fv, delta, block)?.0)
}

/// [`integrate`] that also returns the pre-scaling MLP output needed by the
/// backward pass.
pub(crate) fn integrate_traced(
    fv: &Tensor,
    delta: &Tensor,
    block: &FusionBlock,
) -> Result<(Tensor, Tensor)> {
    same_shape(fv, delta, "integrate")?;
    if fv.cols() != block.d() {
        return Err(Error::dim("integrate", fv.shape(), block.mlp_weight.value.shape()));
    }
    let mixed = delta.add(fv)?;
    let mlp = matmul(&mixed, &block.mlp_weight.value)?.add_row_broadcast(&block.mlp_bias.value)?;
    let mut out = fv.clone();
    out.axpy(block.alpha(), &mlp)?;
    Ok((out, mlp))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionGrads {
    pub mlp_weight: Tensor,
    pub mlp_bias: Tensor,
    pub alpha: Tensor,
}

impl FusionGrads {
    pub fn zeros_like(block: &FusionBlock) -> Self {
        Self {
            mlp_weight: Tensor::zeros(block.mlp_weight.value.shape()),
            mlp_bias: Tensor::zeros(block.mlp_bias.value.shape()),
            alpha: Tensor::zeros(&[1]),
        }
    }
}

/// Backward of [`integrate`]; returns `(∂fv, ∂delta)` and adds parameter
/// gradients into `grads`.
pub fn integrate_backward(
    fv: &Tensor,
    delta: &Tensor,
    block: &FusionBlock,
    mlp: &Tensor,
    cot: &Tensor,
    grads: &mut FusionGrads,
) -> Result<(Tensor, Tensor)> {
    same_shape(fv, cot, "integrate_backward")?;
    let alpha = block.alpha();
    let d_alpha: f64 = mlp.data().iter().zip(cot.data()).fold(0.0, |a, (m, g)| a + m * g);
    grads.alpha.data_mut()[0] += d_alpha;
    let d_mlp = cot.scale(alpha);
    let mixed = delta.add(fv)?;
    grads.mlp_weight.axpy(1.0, &matmul_tn(&mixed, &d_mlp)?)?;
    grads.mlp_bias.axpy(1.0, &d_mlp.col_sums())?;
    let d_mixed = matmul_nt(&d_mlp, &block.mlp_weight.value)?;
    let d_fv = cot.add(&d_mixed)?;
    Ok((d_fv, d_mixed))
}
