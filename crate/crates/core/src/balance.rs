//! Load balancing in isolation: gate parameters trained on the combined
//! load loss alone, over a fixed token set, with routing noise off.

use serde::Serialize;

use crate::error::Result;
use crate::gating::{route, route_backward, GateGrads, GateParams};
use crate::losses::{combined_load_loss, importance, load_loss_gate_grad};
use crate::optim::AdamW;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BalanceStep {
    pub step: usize,
    pub load: f64,
    pub importance_visual: Vec<f64>,
    pub importance_depth: Vec<f64>,
}

impl BalanceStep {
    /// Largest max/min importance ratio over both modalities; infinite when
    /// some expert receives nothing.
    pub fn max_min_ratio(&self) -> f64 {
        [&self.importance_visual, &self.importance_depth]
            .iter()
            .map(|imp| {
                let max = imp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let min = imp.iter().cloned().fold(f64::INFINITY, f64::min);
                if min > 0.0 { max / min } else { f64::INFINITY }
            })
            .fold(0.0, f64::max)
    }
}

fn measure(step: usize, visual: &GateParams, depth: &GateParams, fv: &Tensor, fd: &Tensor, k: usize) -> Result<BalanceStep> {
    let gv = route(visual, fv, k, None)?;
    let gd = route(depth, fd, k, None)?;
    Ok(BalanceStep {
        step,
        load: combined_load_loss(&gv.gates, &gd.gates)?,
        importance_visual: importance(&gv.gates)?.data().to_vec(),
        importance_depth: importance(&gd.gates)?.data().to_vec(),
    })
}

/// Runs `steps` AdamW updates of both gates on the combined load loss and
/// returns the state before the first and after every update.
pub fn balance_gates(
    visual: &mut GateParams,
    depth: &mut GateParams,
    fv: &Tensor,
    fd: &Tensor,
    k: usize,
    steps: usize,
    lr: f64,
) -> Result<Vec<BalanceStep>> {
    let mut opt = AdamW::new(lr, 0.0);
    let mut history = vec![measure(0, visual, depth, fv, fd, k)?];
    for step in 1..=steps {
        for (params, tokens) in [(&mut *visual, fv), (&mut *depth, fd)] {
            params.w_gate.zero_grad();
            params.w_noise.zero_grad();
            let out = route(params, tokens, k, None)?;
            let cot = load_loss_gate_grad(&out.gates, 0.5)?;
            let mut grads = GateGrads::zeros_like(params);
            route_backward(params, tokens, &out, &cot, &mut grads)?;
            params.w_gate.accumulate(&grads.w_gate)?;
            params.w_noise.accumulate(&grads.w_noise)?;
        }
        opt.step(&mut [&mut visual.w_gate, &mut visual.w_noise, &mut depth.w_gate, &mut depth.w_noise])?;
        history.push(measure(step, visual, depth, fv, fd, k)?);
    }
    Ok(history)
}
