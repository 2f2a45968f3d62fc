//! A small frozen two-stream feature extractor.
//!
//! Each stream embeds non-overlapping `P × P` patches with a fixed random
//! projection, then applies `L` residual blocks `f ← f + tanh(f · M_l)`. All
//! weights are a pure function of the seed and are never trained.

use crate::error::{Error, Result};
use crate::rng::{child_seed, normal, rng_from};
use crate::tensor::{matmul, matmul_nt, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct FrozenBackbone {
    pub seed: u64,
    pub patch: usize,
    pub channels: usize,
    pub d: usize,
    /// `(C·P²) × d`.
    pub visual_embed: Tensor,
    /// `P² × d`.
    pub structural_embed: Tensor,
    pub visual_blocks: Vec<Tensor>,
    pub structural_blocks: Vec<Tensor>,
}

fn gaussian(rows: usize, cols: usize, std: f64, seed: u64) -> Tensor {
    let mut rng = rng_from(seed);
    let data = (0..rows * cols).map(|_| std * normal(&mut rng)).collect();
    Tensor::matrix(rows, cols, data).expect("sized by construction")
}

impl FrozenBackbone {
    pub fn generate(seed: u64, channels: usize, patch: usize, d: usize, layers: usize) -> Self {
        let pp = patch * patch;
        let vin = channels * pp;
        let block = |stream: &str, l: usize| {
            gaussian(d, d, (1.0 / d as f64).sqrt(), child_seed(seed, &format!("{stream}_block{l}")))
        };
        Self {
            seed,
            patch,
            channels,
            d,
            visual_embed: gaussian(vin, d, (2.0 / vin as f64).sqrt(), child_seed(seed, "visual_embed")),
            structural_embed: gaussian(pp, d, (2.0 / pp as f64).sqrt(), child_seed(seed, "structural_embed")),
            visual_blocks: (0..layers).map(|l| block("visual", l)).collect(),
            structural_blocks: (0..layers).map(|l| block("structural", l)).collect(),
        }
    }

    pub fn layers(&self) -> usize {
        self.visual_blocks.len()
    }

    /// Token count for an `h × w` input.
    pub fn tokens_for(&self, h: usize, w: usize) -> Result<usize> {
        if !h.is_multiple_of(self.patch) || !w.is_multiple_of(self.patch) || h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "spatial size {h}×{w} is not divisible by patch {}",
                self.patch
            )));
        }
        Ok((h / self.patch) * (w / self.patch))
    }

    pub fn embed_visual(&self, image: &Tensor) -> Result<Tensor> {
        if image.rank() != 3 || image.shape()[0] != self.channels {
            return Err(Error::dim("embed_visual", image.shape(), &[self.channels, 0, 0]));
        }
        Ok(standardize_rows(&matmul(&patchify(image, self.patch)?, &self.visual_embed)?))
    }

    pub fn embed_structural(&self, structural: &Tensor) -> Result<Tensor> {
        if structural.rank() != 3 || structural.shape()[0] != 1 {
            return Err(Error::dim("embed_structural", structural.shape(), &[1, 0, 0]));
        }
        Ok(standardize_rows(&matmul(&patchify(structural, self.patch)?, &self.structural_embed)?))
    }
}

/// Flattens a `C × H × W` map into `(H/P · W/P) × (C·P²)` patch rows,
/// patches in row-major grid order, features ordered (channel, y, x).
/// Zero mean and unit variance per token, as in a frozen layer norm without
/// affine terms. Constant rows map to zero.
pub fn standardize_rows(x: &Tensor) -> Tensor {
    let cols = x.shape()[1];
    let mut out = Vec::with_capacity(x.len());
    for r in 0..x.shape()[0] {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + 1e-6).sqrt();
        out.extend(row.iter().map(|v| (v - mean) * inv));
    }
    Tensor::matrix(x.shape()[0], cols, out).expect("same shape")
}

pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!(
            "spatial size {h}×{w} is not divisible by patch {patch}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let feat = c * patch * patch;
    let src = image.data();
    let mut out = Vec::with_capacity(gh * gw * feat);
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..c {
                for y in 0..patch {
                    let row = (ch * h + py * patch + y) * w + px * patch;
                    out.extend_from_slice(&src[row..row + patch]);
                }
            }
        }
    }
    Tensor::matrix(gh * gw, feat, out)
}

/// `f + tanh(f · M)`.
pub fn residual_block(f: &Tensor, mix: &Tensor) -> Result<Tensor> {
    let z = matmul(f, mix)?;
    Ok(Tensor::new(
        f.shape().to_vec(),
        f.data().iter().zip(z.data()).map(|(a, b)| a + b.tanh()).collect(),
    )
    .expect("same shape"))
}

/// Cotangent of the block input given the cotangent of its output.
pub fn residual_block_backward(f: &Tensor, mix: &Tensor, cot: &Tensor) -> Result<Tensor> {
    let z = matmul(f, mix)?;
    let inner = Tensor::new(
        cot.shape().to_vec(),
        cot.data()
            .iter()
            .zip(z.data())
            .map(|(g, v)| {
                let t = v.tanh();
                g * (1.0 - t * t)
            })
            .collect(),
    )?;
    cot.add(&matmul_nt(&inner, mix)?)
}
