//! Per-layer adapter plugins stacked on the frozen backbone.
//!
//! One layer routes visual and depth tokens through their gates, builds each
//! modality's adjustment map from its expert bank, fuses the two maps and
//! writes the result back into the visual stream through a scaled residual.
//! The layer follows every backbone block; a linear head reads the final
//! visual tokens.

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::backbone::{residual_block, residual_block_backward, FrozenBackbone};
use crate::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::experts::{aggregate_tokens, aggregate_tokens_backward, BankGrads, BankTrace, ExpertBank};
use crate::fusion::{
    additive_fuse, attention_weights, cross_attend_backward, integrate_backward, integrate_traced,
    FusionBlock, FusionGrads,
};
use crate::gating::{route_backward, route_pair, DualGate, GateGrads, GateOutput, GateParams};
use crate::losses::{importance, load_balance_loss, load_loss_gate_grad, task_loss_with_grad};
use crate::manifest::Manifest;
use crate::rng::{child_seed, normal, rng_from, NoiseSource};
use crate::smtx::{self, Precision};
use crate::tensor::{matmul, matmul_nt, matmul_tn, Dual, Norm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    CrossAttention,
    Additive,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterLayer {
    pub gate: DualGate,
    pub visual_bank: ExpertBank,
    pub depth_bank: ExpertBank,
    pub fusion: FusionBlock,
    pub fusion_mode: FusionMode,
}

impl AdapterLayer {
    /// Fresh layer for a (variant-resolved) config. The layer is an exact
    /// identity map on the visual stream until `α` and `B_e` move off zero.
    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let visual = GateParams::init(cfg.d, cfg.n_experts, cfg.norm, rng)?;
        let depth = if cfg.variant == Variant::SharedGate {
            None
        } else {
            Some(GateParams::init(cfg.d, cfg.n_experts, cfg.norm, rng)?)
        };
        let fusion_mode = if cfg.variant == Variant::AdditiveFusion {
            FusionMode::Additive
        } else {
            FusionMode::CrossAttention
        };
        Ok(Self {
            gate: DualGate::new(visual, depth, cfg.k, true)?,
            visual_bank: ExpertBank::init(cfg.n_experts, cfg.m, cfg.r, cfg.d, rng)?,
            depth_bank: ExpertBank::init(cfg.n_experts, cfg.m, cfg.r, cfg.d, rng)?,
            fusion: FusionBlock::init(cfg.d, rng)?,
            fusion_mode,
        })
    }

    pub fn d(&self) -> usize {
        self.fusion.d()
    }

    pub fn n_experts(&self) -> usize {
        self.visual_bank.n_experts()
    }

    fn params(&self) -> Vec<(String, &Dual)> {
        let mut out: Vec<(String, &Dual)> = vec![
            ("gate_visual.w_gate".into(), &self.gate.visual.w_gate),
            ("gate_visual.w_noise".into(), &self.gate.visual.w_noise),
        ];
        if let Some(depth) = &self.gate.depth {
            out.push(("gate_depth.w_gate".into(), &depth.w_gate));
            out.push(("gate_depth.w_noise".into(), &depth.w_noise));
        }
        for (name, bank) in [("bank_visual", &self.visual_bank), ("bank_depth", &self.depth_bank)] {
            for (e, a) in bank.a.iter().enumerate() {
                out.push((format!("{name}.A{e}"), a));
            }
            for (e, b) in bank.b.iter().enumerate() {
                out.push((format!("{name}.B{e}"), b));
            }
            out.push((format!("{name}.W_T"), &bank.w_t));
            out.push((format!("{name}.b_T"), &bank.b_t));
        }
        out.push(("fusion.mlp_weight".into(), &self.fusion.mlp_weight));
        out.push(("fusion.mlp_bias".into(), &self.fusion.mlp_bias));
        out.push(("fusion.alpha".into(), &self.fusion.alpha));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Dual> {
        let mut out: Vec<&mut Dual> = vec![&mut self.gate.visual.w_gate, &mut self.gate.visual.w_noise];
        if let Some(depth) = &mut self.gate.depth {
            out.push(&mut depth.w_gate);
            out.push(&mut depth.w_noise);
        }
        for bank in [&mut self.visual_bank, &mut self.depth_bank] {
            out.extend(bank.a.iter_mut());
            out.extend(bank.b.iter_mut());
            out.push(&mut bank.w_t);
            out.push(&mut bank.b_t);
        }
        out.push(&mut self.fusion.mlp_weight);
        out.push(&mut self.fusion.mlp_bias);
        out.push(&mut self.fusion.alpha);
        out
    }

    pub fn save(&self, dir: &Path, prefix: &str) -> Result<()> {
        self.gate.visual.save(dir, &format!("{prefix}_visual"), self.gate.k)?;
        if let Some(depth) = &self.gate.depth {
            depth.save(dir, &format!("{prefix}_depth"), self.gate.k)?;
        }
        self.visual_bank.save(dir, &format!("{prefix}_bank_visual"))?;
        self.depth_bank.save(dir, &format!("{prefix}_bank_depth"))?;
        smtx::write(&dir.join(format!("{prefix}_fusion_weight.smtx")), &self.fusion.mlp_weight.value, Precision::F64)?;
        smtx::write(&dir.join(format!("{prefix}_fusion_bias.smtx")), &self.fusion.mlp_bias.value, Precision::F64)?;
        smtx::write(&dir.join(format!("{prefix}_fusion_alpha.smtx")), &self.fusion.alpha.value, Precision::F64)
    }

    pub fn load(dir: &Path, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let (visual, k) = GateParams::load(dir, &format!("{prefix}_visual"))?;
        let depth = if cfg.variant == Variant::SharedGate {
            None
        } else {
            Some(GateParams::load(dir, &format!("{prefix}_depth"))?.0)
        };
        let alpha = smtx::read(&dir.join(format!("{prefix}_fusion_alpha.smtx")))?;
        if alpha.len() != 1 {
            return Err(Error::format(dir, "fusion alpha must hold one value"));
        }
        let fusion = FusionBlock::new(
            smtx::read(&dir.join(format!("{prefix}_fusion_weight.smtx")))?,
            smtx::read(&dir.join(format!("{prefix}_fusion_bias.smtx")))?,
            alpha.data()[0],
        )?;
        let layer = Self {
            gate: DualGate::new(visual, depth, k, true)?,
            visual_bank: ExpertBank::load(dir, &format!("{prefix}_bank_visual"))?,
            depth_bank: ExpertBank::load(dir, &format!("{prefix}_bank_depth"))?,
            fusion,
            fusion_mode: if cfg.variant == Variant::AdditiveFusion {
                FusionMode::Additive
            } else {
                FusionMode::CrossAttention
            },
        };
        Ok(layer)
    }
}

/// Everything [`backward_layer`] needs from one [`forward_layer`] call.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    fv: Tensor,
    fd: Tensor,
    pub visual: GateOutput,
    pub depth: GateOutput,
    bank_visual: BankTrace,
    bank_depth: BankTrace,
    /// Aggregated visual adjustment map.
    pub dv: Tensor,
    /// Aggregated depth adjustment map.
    pub dd: Tensor,
    attention: Option<Tensor>,
    delta: Tensor,
    mlp: Tensor,
}

/// One adapter layer. Noise is drawn only when `noise` is given and the
/// layer's gate has noise enabled.
pub fn forward_layer(
    layer: &AdapterLayer,
    fv: &Tensor,
    fd: &Tensor,
    noise: Option<&NoiseSource>,
) -> Result<(Tensor, LayerTrace)> {
    if fv.shape() != fd.shape() || fv.rank() != 2 || fv.cols() != layer.d() {
        return Err(Error::dim("forward_layer", fv.shape(), fd.shape()));
    }
    let noise = noise.filter(|_| layer.gate.noise_enabled);
    let (visual, depth) = route_pair(&layer.gate, fv, fd, noise)?;
    let (dv, bank_visual) = aggregate_tokens(fv, &layer.visual_bank, &visual)?;
    let (dd, bank_depth) = aggregate_tokens(fd, &layer.depth_bank, &depth)?;
    let (delta, attention) = match layer.fusion_mode {
        FusionMode::CrossAttention => {
            let w = attention_weights(&dv, &dd)?;
            (matmul(&w, &dd)?, Some(w))
        }
        FusionMode::Additive => (additive_fuse(&dv, &dd)?, None),
    };
    let (out, mlp) = integrate_traced(fv, &delta, &layer.fusion)?;
    Ok((
        out,
        LayerTrace {
            fv: fv.clone(),
            fd: fd.clone(),
            visual,
            depth,
            bank_visual,
            bank_depth,
            dv,
            dd,
            attention,
            delta,
            mlp,
        },
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub gate_visual: GateGrads,
    pub gate_depth: Option<GateGrads>,
    pub bank_visual: BankGrads,
    pub bank_depth: BankGrads,
    pub fusion: FusionGrads,
}

impl LayerGrads {
    pub fn zeros_like(layer: &AdapterLayer) -> Self {
        Self {
            gate_visual: GateGrads::zeros_like(&layer.gate.visual),
            gate_depth: layer.gate.depth.as_ref().map(GateGrads::zeros_like),
            bank_visual: BankGrads::zeros_like(&layer.visual_bank),
            bank_depth: BankGrads::zeros_like(&layer.depth_bank),
            fusion: FusionGrads::zeros_like(&layer.fusion),
        }
    }

    /// Same order as the layer's parameter listing.
    fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.gate_visual.w_gate, &self.gate_visual.w_noise];
        if let Some(g) = &self.gate_depth {
            out.push(&g.w_gate);
            out.push(&g.w_noise);
        }
        for bank in [&self.bank_visual, &self.bank_depth] {
            out.extend(bank.a.iter());
            out.extend(bank.b.iter());
            out.push(&bank.w_t);
            out.push(&bank.b_t);
        }
        out.push(&self.fusion.mlp_weight);
        out.push(&self.fusion.mlp_bias);
        out.push(&self.fusion.alpha);
        out
    }
}

/// Backward of [`forward_layer`]. `load_scale` is the weight of this layer's
/// combined load loss in the objective; its gate cotangent is folded in here.
/// Returns the cotangent of the visual input tokens.
pub fn backward_layer(
    layer: &AdapterLayer,
    trace: &LayerTrace,
    d_out: &Tensor,
    load_scale: f64,
    grads: &mut LayerGrads,
) -> Result<Tensor> {
    let (mut d_fv, d_delta) = integrate_backward(
        &trace.fv,
        &trace.delta,
        &layer.fusion,
        &trace.mlp,
        d_out,
        &mut grads.fusion,
    )?;
    let (d_dv, d_dd) = match (&layer.fusion_mode, &trace.attention) {
        (FusionMode::CrossAttention, Some(w)) => cross_attend_backward(&trace.dv, &trace.dd, w, &d_delta)?,
        (FusionMode::Additive, _) => (d_delta.clone(), d_delta),
        _ => return Err(Error::Invariant("attention weights missing from trace".into())),
    };
    let (d_fv_bank, mut d_gates_v) = aggregate_tokens_backward(
        &trace.fv,
        &layer.visual_bank,
        &trace.visual,
        &trace.bank_visual,
        &d_dv,
        &mut grads.bank_visual,
    )?;
    let (_, mut d_gates_d) = aggregate_tokens_backward(
        &trace.fd,
        &layer.depth_bank,
        &trace.depth,
        &trace.bank_depth,
        &d_dd,
        &mut grads.bank_depth,
    )?;
    if load_scale != 0.0 {
        d_gates_v.axpy(1.0, &load_loss_gate_grad(&trace.visual.gates, 0.5 * load_scale)?)?;
        d_gates_d.axpy(1.0, &load_loss_gate_grad(&trace.depth.gates, 0.5 * load_scale)?)?;
    }
    let d_fv_gate = route_backward(
        &layer.gate.visual,
        &trace.fv,
        &trace.visual,
        &d_gates_v,
        &mut grads.gate_visual,
    )?;
    let depth_grads = match grads.gate_depth.as_mut() {
        Some(g) => g,
        None => &mut grads.gate_visual,
    };
    route_backward(layer.gate.depth_params(), &trace.fd, &trace.depth, &d_gates_d, depth_grads)?;
    d_fv.axpy(1.0, &d_fv_bank)?;
    d_fv.axpy(1.0, &d_fv_gate)?;
    Ok(d_fv)
}

/// Per-layer combined load loss of a traced forward pass.
pub fn layer_load_loss(trace: &LayerTrace) -> Result<f64> {
    let v = load_balance_loss(&importance(&trace.visual.gates)?)?;
    let d = load_balance_loss(&importance(&trace.depth.gates)?)?;
    Ok(0.5 * (v + d))
}

/// All trainable state: one adapter per backbone block plus the head.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterStack {
    pub config: ModelConfig,
    pub layers: Vec<AdapterLayer>,
    /// `d × K`.
    pub head_weight: Dual,
    /// Length `K`.
    pub head_bias: Dual,
}

impl AdapterStack {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let cfg = config.resolved();
        let mut rng = rng_from(child_seed(seed, "init"));
        let layers = (0..cfg.layers)
            .map(|_| AdapterLayer::init(&cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let std = (1.0 / cfg.d as f64).sqrt();
        let head = Tensor::matrix(
            cfg.d,
            cfg.classes,
            (0..cfg.d * cfg.classes).map(|_| std * normal(&mut rng)).collect(),
        )?;
        Ok(Self {
            config: cfg.clone(),
            layers,
            head_weight: Dual::new(head),
            head_bias: Dual::new(Tensor::zeros(&[cfg.classes])),
        })
    }

    /// Named parameters in canonical order.
    pub fn params(&self) -> Vec<(String, &Dual)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(layer.params().into_iter().map(|(n, p)| (format!("layer{l}.{n}"), p)));
        }
        out.push(("head.weight".into(), &self.head_weight));
        out.push(("head.bias".into(), &self.head_bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Dual> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            out.extend(layer.params_mut());
        }
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Adds a flat gradient list (canonical order) into the `grad` slots.
    pub fn accumulate(&mut self, grads: &[Tensor]) -> Result<()> {
        let params = self.params_mut();
        if params.len() != grads.len() {
            return Err(Error::Invariant(format!(
                "gradient list has {} tensors for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (p, g) in params.into_iter().zip(grads) {
            p.accumulate(g)?;
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path, backbone_seed: u64) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (l, layer) in self.layers.iter().enumerate() {
            layer.save(dir, &format!("layer{l}"))?;
        }
        smtx::write(&dir.join("head_weight.smtx"), &self.head_weight.value, Precision::F64)?;
        smtx::write(&dir.join("head_bias.smtx"), &self.head_bias.value, Precision::F64)?;
        let c = &self.config;
        let mut m = Manifest::new();
        m.set("d", c.d)
            .set("L", c.layers)
            .set("N_e", c.n_experts)
            .set("k", c.k)
            .set("m", c.m)
            .set("r", c.r)
            .set("p", c.norm.order())
            .set("patch", c.patch)
            .set("C", c.channels)
            .set("K", c.classes)
            .set("variant", c.variant)
            .set("backbone_seed", backbone_seed);
        m.write(&dir.join("checkpoint.manifest"))
    }

    /// Loads a checkpoint, returning the stack and its backbone seed.
    pub fn load(dir: &Path) -> Result<(Self, u64)> {
        let m = Manifest::read(&dir.join("checkpoint.manifest"))?;
        let config = ModelConfig {
            d: m.parse_key("d")?,
            layers: m.parse_key("L")?,
            n_experts: m.parse_key("N_e")?,
            k: m.parse_key("k")?,
            m: m.parse_key("m")?,
            r: m.parse_key("r")?,
            norm: Norm::from_order(m.parse_key("p")?)?,
            patch: m.parse_key("patch")?,
            channels: m.parse_key("C")?,
            classes: m.parse_key("K")?,
            variant: m.require("variant")?.parse()?,
        };
        let layers = (0..config.layers)
            .map(|l| AdapterLayer::load(dir, &format!("layer{l}"), &config))
            .collect::<Result<Vec<_>>>()?;
        let stack = Self {
            config,
            layers,
            head_weight: Dual::new(smtx::read(&dir.join("head_weight.smtx"))?),
            head_bias: Dual::new(smtx::read(&dir.join("head_bias.smtx"))?),
        };
        Ok((stack, m.parse_key("backbone_seed")?))
    }
}

/// Trainable-parameter totals for a configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub per_layer: usize,
    pub layers_total: usize,
    pub head: usize,
    pub total: usize,
}

/// Closed-form parameter count. Per layer: `4·d·N_e` gate weights (two per
/// modality; half of that with a shared gate), `2·N_e·(m·r + r·d)` expert
/// factors, `2·(d² + d)` bank projections, `d² + d` fusion affine and one `α`.
pub fn count_parameters(config: &ModelConfig) -> Result<ParamCount> {
    config.validate()?;
    let c = config.resolved();
    let gate_sets = if c.variant == Variant::SharedGate { 1 } else { 2 };
    let gates = gate_sets * 2 * c.d * c.n_experts;
    let factors = 2 * c.n_experts * (c.m * c.r + c.r * c.d);
    let affine = c.d * c.d + c.d;
    let per_layer = gates + factors + 2 * affine + affine + 1;
    let head = c.d * c.classes + c.classes;
    let layers_total = c.layers * per_layer;
    Ok(ParamCount {
        per_layer,
        layers_total,
        head,
        total: layers_total + head,
    })
}

/// Backbone outputs that do not depend on trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedInput {
    /// Visual tokens straight out of the patch embedding.
    pub visual: Tensor,
    /// Depth tokens after each backbone block.
    pub depth: Vec<Tensor>,
}

impl PreparedInput {
    pub fn new(backbone: &FrozenBackbone, image: &Tensor, structural: &Tensor) -> Result<Self> {
        if image.rank() != 3 || structural.rank() != 3 {
            return Err(Error::dim("forward_full", image.shape(), structural.shape()));
        }
        let (h, w) = (image.shape()[1], image.shape()[2]);
        backbone.tokens_for(h, w)?;
        if structural.shape()[1..] != image.shape()[1..] {
            return Err(Error::dim("forward_full", image.shape(), structural.shape()));
        }
        let visual = backbone.embed_visual(image)?;
        let mut fd = backbone.embed_structural(structural)?;
        let mut depth = Vec::with_capacity(backbone.layers());
        for block in &backbone.structural_blocks {
            fd = residual_block(&fd, block)?;
            depth.push(fd.clone());
        }
        Ok(Self { visual, depth })
    }
}

/// Forward state of a full pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    block_inputs: Vec<Tensor>,
    pub layers: Vec<LayerTrace>,
    pub features: Tensor,
    pub logits: Tensor,
}

impl ForwardTrace {
    pub fn gate_outputs(&self) -> Vec<(&GateOutput, &GateOutput)> {
        self.layers.iter().map(|t| (&t.visual, &t.depth)).collect()
    }
}

/// Applies the head to a token map: `features · W + b`.
pub fn apply_head(stack: &AdapterStack, features: &Tensor) -> Result<Tensor> {
    matmul(features, &stack.head_weight.value)?.add_row_broadcast(&stack.head_bias.value)
}

pub fn forward_prepared(
    stack: &AdapterStack,
    backbone: &FrozenBackbone,
    input: &PreparedInput,
    noise: Option<&NoiseSource>,
) -> Result<ForwardTrace> {
    if stack.layers.len() != backbone.layers() || input.depth.len() != stack.layers.len() {
        return Err(Error::Config(format!(
            "adapter depth {} does not match backbone depth {}",
            stack.layers.len(),
            backbone.layers()
        )));
    }
    let mut fv = input.visual.clone();
    let mut block_inputs = Vec::with_capacity(stack.layers.len());
    let mut layers = Vec::with_capacity(stack.layers.len());
    for (l, layer) in stack.layers.iter().enumerate() {
        block_inputs.push(fv.clone());
        fv = residual_block(&fv, &backbone.visual_blocks[l])?;
        let layer_noise = noise.map(|n| n.child(&format!("layer{l}")));
        let (out, trace) = forward_layer(layer, &fv, &input.depth[l], layer_noise.as_ref())?;
        fv = out;
        layers.push(trace);
    }
    let logits = apply_head(stack, &fv)?;
    Ok(ForwardTrace {
        block_inputs,
        layers,
        features: fv,
        logits,
    })
}

/// Full pass from raw inputs to per-token class logits. The structural map
/// is replaced by zeros for the no-structural variant.
pub fn forward_full(
    stack: &AdapterStack,
    backbone: &FrozenBackbone,
    image: &Tensor,
    structural: &Tensor,
    noise: Option<&NoiseSource>,
) -> Result<ForwardTrace> {
    let input = if stack.config.variant == Variant::NoStructural {
        PreparedInput::new(backbone, image, &Tensor::zeros(structural.shape()))?
    } else {
        PreparedInput::new(backbone, image, structural)?
    };
    forward_prepared(stack, backbone, &input, noise)
}

/// Logits of the backbone alone followed by the head.
pub fn frozen_logits(
    stack: &AdapterStack,
    backbone: &FrozenBackbone,
    image: &Tensor,
) -> Result<Tensor> {
    let mut fv = backbone.embed_visual(image)?;
    for block in &backbone.visual_blocks {
        fv = residual_block(&fv, block)?;
    }
    apply_head(stack, &fv)
}

/// Gradients of every trainable tensor, canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub layers: Vec<LayerGrads>,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

impl ModelGrads {
    pub fn zeros_like(stack: &AdapterStack) -> Self {
        Self {
            layers: stack.layers.iter().map(LayerGrads::zeros_like).collect(),
            head_weight: Tensor::zeros(stack.head_weight.value.shape()),
            head_bias: Tensor::zeros(stack.head_bias.value.shape()),
        }
    }

    pub fn flatten(&self) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = Vec::new();
        for layer in &self.layers {
            out.extend(layer.tensors().into_iter().cloned());
        }
        out.push(self.head_weight.clone());
        out.push(self.head_bias.clone());
        out
    }
}

/// Backward of [`forward_prepared`] for the cotangent `d_logits`, with the
/// load loss of layer `l` weighted by `load_scale` in the objective.
pub fn backward_full(
    stack: &AdapterStack,
    backbone: &FrozenBackbone,
    trace: &ForwardTrace,
    d_logits: &Tensor,
    load_scale: f64,
) -> Result<ModelGrads> {
    let mut grads = ModelGrads::zeros_like(stack);
    let (gw, gb) = (
        matmul_tn(&trace.features, d_logits)?,
        d_logits.col_sums(),
    );
    grads.head_weight = gw;
    grads.head_bias = gb;
    let mut d_fv = matmul_nt(d_logits, &stack.head_weight.value)?;
    for l in (0..stack.layers.len()).rev() {
        d_fv = backward_layer(
            &stack.layers[l],
            &trace.layers[l],
            &d_fv,
            load_scale,
            &mut grads.layers[l],
        )?;
        d_fv = residual_block_backward(&trace.block_inputs[l], &backbone.visual_blocks[l], &d_fv)?;
    }
    Ok(grads)
}

/// Objective terms of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleObjective {
    pub task: f64,
    /// Layer-averaged combined load loss.
    pub load: f64,
    /// Layer-averaged importance per modality.
    pub importance_visual: Vec<f64>,
    pub importance_depth: Vec<f64>,
}

/// Forward plus backward of `task + λ · load` for one sample.
pub fn sample_objective(
    stack: &AdapterStack,
    backbone: &FrozenBackbone,
    input: &PreparedInput,
    labels: &[usize],
    ignore_id: usize,
    lambda: f64,
    noise: Option<&NoiseSource>,
) -> Result<(SampleObjective, ModelGrads)> {
    let trace = forward_prepared(stack, backbone, input, noise)?;
    let (task, d_logits) = task_loss_with_grad(&trace.logits, labels, ignore_id)?;
    let n_layers = trace.layers.len() as f64;
    let n = stack.config.n_experts;
    let mut load = 0.0;
    let mut imp_v = vec![0.0; n];
    let mut imp_d = vec![0.0; n];
    for t in &trace.layers {
        load += layer_load_loss(t)?;
        for (acc, v) in imp_v.iter_mut().zip(importance(&t.visual.gates)?.data()) {
            *acc += v / n_layers;
        }
        for (acc, v) in imp_d.iter_mut().zip(importance(&t.depth.gates)?.data()) {
            *acc += v / n_layers;
        }
    }
    load /= n_layers;
    let grads = backward_full(stack, backbone, &trace, &d_logits, lambda / n_layers)?;
    Ok((
        SampleObjective {
            task,
            load,
            importance_visual: imp_v,
            importance_depth: imp_d,
        },
        grads,
    ))
}
