//! Central finite differences against the analytic gradient of the full
//! training objective, reported per parameter group.

use serde::Serialize;

use crate::adapter::{forward_prepared, layer_load_loss, sample_objective, AdapterStack, PreparedInput};
use crate::backbone::FrozenBackbone;
use crate::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::losses::task_loss;
use crate::rng::{child_seed, normal, rng_from};
use crate::synthbench::IGNORE_LABEL;
use crate::tensor::{Norm, Tensor};

/// Largest model the checker accepts.
pub const MAX_PARAMS: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckOptions {
    pub model: ModelConfig,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub lambda: f64,
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates whose routing changes under a perturbation of this size
    /// are skipped.
    pub boundary: f64,
    /// Test hook: multiplies the analytic gradient of one group.
    pub corrupt: Option<(String, f64)>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            model: tiny_model(),
            height: 4,
            width: 4,
            seed: 0,
            lambda: 0.1,
            step: 1e-5,
            tolerance: 1e-5,
            boundary: 1e-3,
            corrupt: None,
        }
    }
}

/// `d=8, L=1, N_e=3, k=2`, four tokens from a `4×4` input with patch 2.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        d: 8,
        layers: 1,
        n_experts: 3,
        k: 2,
        m: 4,
        r: 4,
        norm: Norm::L1,
        patch: 2,
        channels: 3,
        classes: 3,
        variant: Variant::Full,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoordFailure {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupReport {
    pub group: String,
    pub checked: usize,
    pub excluded: usize,
    pub max_rel_error: f64,
    pub max_abs_diff: f64,
    pub passed: bool,
    pub failures: Vec<CoordFailure>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub param_count: usize,
    pub tolerance: f64,
    pub groups: Vec<GroupReport>,
    pub passed: bool,
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Parameter name with the per-expert index dropped, so all `A_e` of a
/// bank form one group.
pub fn group_of(name: &str) -> String {
    match name.rsplit_once('.') {
        Some((head, last))
            if last.len() > 1
                && (last.starts_with('A') || last.starts_with('B'))
                && last[1..].bytes().all(|b| b.is_ascii_digit()) =>
        {
            format!("{head}.{}", &last[..1])
        }
        _ => name.to_string(),
    }
}

/// Moves every trainable tensor off its cold-start value so that no
/// gradient path is trivially zero. The visual factors stay smaller than the
/// depth factors: the visual map only enters through attention queries, and
/// saturated attention would leave its gradients at the roundoff floor.
pub fn randomize(stack: &mut AdapterStack, seed: u64) {
    let mut rng = rng_from(seed);
    let groups: Vec<String> = stack.params().into_iter().map(|(n, _)| group_of(&n)).collect();
    for (group, p) in groups.iter().zip(stack.params_mut()) {
        let scale = if group.ends_with("bank_visual.B") {
            0.5
        } else if group.ends_with("bank_depth.B") {
            1.0
        } else {
            0.4
        };
        for v in p.value.data_mut() {
            *v += scale * normal(&mut rng);
        }
    }
    for layer in &mut stack.layers {
        layer.fusion.alpha.value.data_mut()[0] = 1.0;
    }
}

fn objective(
    stack: &AdapterStack,
    backbone: &FrozenBackbone,
    input: &PreparedInput,
    labels: &[usize],
    lambda: f64,
) -> Result<(f64, Vec<Vec<usize>>)> {
    let trace = forward_prepared(stack, backbone, input, None)?;
    let task = task_loss(&trace.logits, labels, IGNORE_LABEL)?;
    let mut load = 0.0;
    let mut selection = Vec::new();
    for t in &trace.layers {
        load += layer_load_loss(t)?;
        selection.extend(t.visual.selected.iter().cloned());
        selection.extend(t.depth.selected.iter().cloned());
    }
    Ok((task + lambda * load / trace.layers.len() as f64, selection))
}

pub fn gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let model = opts.model.resolved();
    let count = crate::adapter::count_parameters(&model)?.total;
    if count >= MAX_PARAMS {
        return Err(Error::Config(format!(
            "gradient check needs fewer than {MAX_PARAMS} parameters, model has {count}"
        )));
    }
    let backbone = FrozenBackbone::generate(child_seed(opts.seed, "backbone"), model.channels, model.patch, model.d, model.layers);
    let tokens = backbone.tokens_for(opts.height, opts.width)?;
    let mut stack = AdapterStack::init(&model, opts.seed)?;
    randomize(&mut stack, child_seed(opts.seed, "perturb"));

    let mut rng = rng_from(child_seed(opts.seed, "input"));
    let (c, h, w) = (model.channels, opts.height, opts.width);
    let image = Tensor::new(vec![c, h, w], (0..c * h * w).map(|_| normal(&mut rng)).collect())?;
    let structural = Tensor::new(vec![1, h, w], (0..h * w).map(|_| normal(&mut rng)).collect())?;
    let labels: Vec<usize> = (0..tokens).map(|t| t % model.classes).collect();
    let input = if model.variant == Variant::NoStructural {
        PreparedInput::new(&backbone, &image, &Tensor::zeros(structural.shape()))?
    } else {
        PreparedInput::new(&backbone, &image, &structural)?
    };

    let (_, grads) = sample_objective(&stack, &backbone, &input, &labels, IGNORE_LABEL, opts.lambda, None)?;
    let analytic = grads.flatten();
    let (_, base_selection) = objective(&stack, &backbone, &input, &labels, opts.lambda)?;
    let names: Vec<String> = stack.params().into_iter().map(|(n, _)| n).collect();
    if let Some((g, _)) = &opts.corrupt {
        if !names.iter().any(|n| group_of(n) == *g) {
            return Err(Error::Config(format!("no parameter group named `{g}`")));
        }
    }

    let mut groups: Vec<GroupReport> = Vec::new();
    for (pi, name) in names.iter().enumerate() {
        let group = group_of(name);
        let scale = match &opts.corrupt {
            Some((g, f)) if *g == group => *f,
            _ => 1.0,
        };
        let gi = match groups.iter().position(|g| g.group == group) {
            Some(i) => i,
            None => {
                groups.push(GroupReport {
                    group: group.clone(),
                    checked: 0,
                    excluded: 0,
                    max_rel_error: 0.0,
                    max_abs_diff: 0.0,
                    passed: true,
                    failures: Vec::new(),
                });
                groups.len() - 1
            }
        };
        for idx in 0..analytic[pi].len() {
            let mut eval_at = |delta: f64| -> Result<(f64, Vec<Vec<usize>>)> {
                let original = stack.params_mut()[pi].value.data()[idx];
                stack.params_mut()[pi].value.data_mut()[idx] = original + delta;
                let out = objective(&stack, &backbone, &input, &labels, opts.lambda);
                stack.params_mut()[pi].value.data_mut()[idx] = original;
                out
            };
            let near_boundary = eval_at(opts.boundary)?.1 != base_selection
                || eval_at(-opts.boundary)?.1 != base_selection;
            if near_boundary {
                groups[gi].excluded += 1;
                continue;
            }
            let (up, _) = eval_at(opts.step)?;
            let (dn, _) = eval_at(-opts.step)?;
            let numeric = (up - dn) / (2.0 * opts.step);
            let a = scale * analytic[pi].data()[idx];
            let rel = relative_error(a, numeric);
            let g = &mut groups[gi];
            g.checked += 1;
            g.max_rel_error = g.max_rel_error.max(rel);
            g.max_abs_diff = g.max_abs_diff.max((a - numeric).abs());
            if !(rel < opts.tolerance) {
                g.passed = false;
                g.failures.push(CoordFailure {
                    param: name.clone(),
                    index: idx,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    let passed = groups.iter().all(|g| g.passed);
    Ok(GradcheckReport {
        param_count: count,
        tolerance: opts.tolerance,
        groups,
        passed,
    })
}
