//! Distance-based noisy top-k routing, one gate per modality.
//!
//! For token `f` and expert `e` the routing logit is
//!
//! ```text
//! h_e = -‖f − w_gate[:, e]‖_p + ε_e · softplus(fᵀ w_noise[:, e])
//! ```
//!
//! The `k` largest logits are kept and renormalized with a softmax; every
//! other gate is exactly zero.

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::manifest::Manifest;
use crate::rng::{normal, NoiseSource};
use crate::smtx::{self, Precision};
use crate::tensor::{
    dot, lp_distance_grad, lp_distance_unchecked, softmax, softmax_vjp, softplus, softplus_grad,
    topk_indices, Dual, Norm, Tensor,
};

#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    /// Expert prototypes, `d × N_e`, one column per expert.
    pub w_gate: Dual,
    /// Noise-scale weights, `d × N_e`.
    pub w_noise: Dual,
    pub norm: Norm,
}

impl GateParams {
    pub fn new(w_gate: Tensor, w_noise: Tensor, norm: Norm) -> Result<Self> {
        if w_gate.rank() != 2 || w_gate.shape() != w_noise.shape() {
            return Err(Error::dim("GateParams::new", w_gate.shape(), w_noise.shape()));
        }
        if w_gate.rows() == 0 || w_gate.cols() == 0 {
            return Err(Error::Config("gate needs d >= 1 and N_e >= 1".into()));
        }
        Ok(Self {
            w_gate: Dual::new(w_gate),
            w_noise: Dual::new(w_noise),
            norm,
        })
    }

    /// Prototypes drawn from `N(0, 1/d)`, noise weights zero.
    pub fn init(d: usize, n_experts: usize, norm: Norm, rng: &mut ChaCha8Rng) -> Result<Self> {
        let std = (1.0 / d as f64).sqrt();
        let data = (0..d * n_experts).map(|_| std * normal(rng)).collect();
        Self::new(
            Tensor::matrix(d, n_experts, data)?,
            Tensor::zeros(&[d, n_experts]),
            norm,
        )
    }

    pub fn dim(&self) -> usize {
        self.w_gate.value.rows()
    }

    pub fn n_experts(&self) -> usize {
        self.w_gate.value.cols()
    }

    pub fn save(&self, dir: &Path, modality: &str, k: usize) -> Result<()> {
        smtx::write(
            &dir.join(format!("gate_{modality}_w_gate.smtx")),
            &self.w_gate.value,
            Precision::F64,
        )?;
        smtx::write(
            &dir.join(format!("gate_{modality}_w_noise.smtx")),
            &self.w_noise.value,
            Precision::F64,
        )?;
        let mut m = Manifest::new();
        m.set("modality", modality)
            .set("d", self.dim())
            .set("N_e", self.n_experts())
            .set("p", self.norm.order())
            .set("k", k);
        m.write(&dir.join(format!("gate_{modality}.manifest")))
    }

    /// Loads a gate written by [`GateParams::save`], returning it with its `k`.
    pub fn load(dir: &Path, modality: &str) -> Result<(Self, usize)> {
        let m = Manifest::read(&dir.join(format!("gate_{modality}.manifest")))?;
        let norm = Norm::from_order(m.parse_key("p")?)?;
        let k: usize = m.parse_key("k")?;
        let w_gate = smtx::read(&dir.join(format!("gate_{modality}_w_gate.smtx")))?;
        let w_noise = smtx::read(&dir.join(format!("gate_{modality}_w_noise.smtx")))?;
        let params = Self::new(w_gate, w_noise, norm)?;
        if params.dim() != m.parse_key::<usize>("d")? || params.n_experts() != m.parse_key::<usize>("N_e")? {
            return Err(Error::Config(format!(
                "gate `{modality}` tensors disagree with their manifest"
            )));
        }
        Ok((params, k))
    }
}

/// Routing result for one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct GateOutput {
    /// `T × N_e` gate values.
    pub gates: Tensor,
    /// Selected experts per token, ascending.
    pub selected: Vec<Vec<usize>>,
    /// `T × N_e` routing logits.
    pub logits: Tensor,
    /// Noise realization (`T × N_e`) when noise was active.
    pub noise: Option<Tensor>,
}

impl GateOutput {
    /// Checks the simplex/sparsity contract for every row.
    pub fn validate(&self, k: usize) -> Result<()> {
        let n = self.gates.cols();
        let want = k.min(n);
        for (i, sel) in self.selected.iter().enumerate() {
            let row = self.gates.row(i);
            let nonzero: Vec<usize> = (0..n).filter(|&e| row[e] != 0.0).collect();
            if nonzero.len() != want || &nonzero != sel {
                return Err(Error::Invariant(format!(
                    "token {i}: nonzero gates {nonzero:?} do not match selection {sel:?}"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&g| g < 0.0) {
                return Err(Error::Invariant(format!(
                    "token {i}: gate row {row:?} is not on the simplex"
                )));
            }
        }
        Ok(())
    }
}

/// Top-k selection plus softmax over the selected logits.
pub fn gates_from_logits(logits: &Tensor, k: usize) -> Result<(Tensor, Vec<Vec<usize>>)> {
    let mut gates = Tensor::zeros(logits.shape());
    let mut selected = Vec::with_capacity(logits.rows());
    for i in 0..logits.rows() {
        let h = logits.row(i);
        let sel = topk_indices(h, k)?;
        let probs = softmax(&sel.iter().map(|&e| h[e]).collect::<Vec<_>>());
        let row = gates.row_mut(i);
        for (&e, p) in sel.iter().zip(probs) {
            row[e] = p;
        }
        selected.push(sel);
    }
    Ok((gates, selected))
}

pub fn route(
    params: &GateParams,
    tokens: &Tensor,
    k: usize,
    noise: Option<&NoiseSource>,
) -> Result<GateOutput> {
    let d = params.dim();
    let n = params.n_experts();
    if tokens.rank() != 2 || tokens.cols() != d {
        return Err(Error::dim("route", tokens.shape(), params.w_gate.value.shape()));
    }
    if k == 0 || k > n {
        return Err(Error::Config(format!("k={k} must satisfy 1 <= k <= N_e={n}")));
    }
    let protos = params.w_gate.value.transpose();
    let noise_w = params.w_noise.value.transpose();
    let t = tokens.rows();
    let mut logits = Tensor::zeros(&[t, n]);
    let mut eps = noise.map(|_| Tensor::zeros(&[t, n]));
    for i in 0..t {
        let f = tokens.row(i);
        let draws = noise.map(|src| src.token_draws(i, n));
        for e in 0..n {
            let mut h = -lp_distance_unchecked(f, protos.row(e), params.norm);
            if let (Some(draws), Some(eps)) = (&draws, eps.as_mut()) {
                let z = dot(f, noise_w.row(e));
                h += draws[e] * softplus(z);
                eps.set(i, e, draws[e]);
            }
            logits.set(i, e, h);
        }
    }
    let (gates, selected) = gates_from_logits(&logits, k)?;
    Ok(GateOutput {
        gates,
        selected,
        logits,
        noise: eps,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateGrads {
    pub w_gate: Tensor,
    pub w_noise: Tensor,
}

impl GateGrads {
    pub fn zeros_like(params: &GateParams) -> Self {
        Self {
            w_gate: Tensor::zeros(params.w_gate.value.shape()),
            w_noise: Tensor::zeros(params.w_noise.value.shape()),
        }
    }
}

/// Backward of [`route`] with the selection held fixed. Gradients are added
/// into `grads`; the returned tensor is the cotangent of `tokens`.
pub fn route_backward(
    params: &GateParams,
    tokens: &Tensor,
    out: &GateOutput,
    d_gates: &Tensor,
    grads: &mut GateGrads,
) -> Result<Tensor> {
    if d_gates.shape() != out.gates.shape() {
        return Err(Error::dim("route_backward", d_gates.shape(), out.gates.shape()));
    }
    let d = params.dim();
    let n = params.n_experts();
    let protos = params.w_gate.value.transpose();
    let noise_w = params.w_noise.value.transpose();
    let mut d_tokens = Tensor::zeros(tokens.shape());
    let mut g_gate = grads.w_gate.transpose();
    let mut g_noise = grads.w_noise.transpose();
    for (i, sel) in out.selected.iter().enumerate() {
        let f = tokens.row(i);
        let g_sel: Vec<f64> = sel.iter().map(|&e| out.gates.at(i, e)).collect();
        let dg_sel: Vec<f64> = sel.iter().map(|&e| d_gates.at(i, e)).collect();
        let dh = softmax_vjp(&g_sel, &dg_sel);
        let mut df = vec![0.0; d];
        for (&e, &dh_e) in sel.iter().zip(&dh) {
            let gd = lp_distance_grad(f, protos.row(e), params.norm);
            let gw = g_gate.row_mut(e);
            for c in 0..d {
                gw[c] += dh_e * gd[c];
                df[c] -= dh_e * gd[c];
            }
            if let Some(eps) = &out.noise {
                let z = dot(f, noise_w.row(e));
                let s = dh_e * eps.at(i, e) * softplus_grad(z);
                let gn = g_noise.row_mut(e);
                let wn = noise_w.row(e);
                for c in 0..d {
                    gn[c] += s * f[c];
                    df[c] += s * wn[c];
                }
            }
        }
        d_tokens.row_mut(i).copy_from_slice(&df);
    }
    debug_assert_eq!(g_gate.rows(), n);
    grads.w_gate = g_gate.transpose();
    grads.w_noise = g_noise.transpose();
    Ok(d_tokens)
}

/// Visual and depth gates. `depth == None` routes both modalities through the
/// visual parameters (the shared-gate ablation).
#[derive(Clone, Debug, PartialEq)]
pub struct DualGate {
    pub visual: GateParams,
    pub depth: Option<GateParams>,
    pub k: usize,
    pub noise_enabled: bool,
}

impl DualGate {
    pub fn new(visual: GateParams, depth: Option<GateParams>, k: usize, noise_enabled: bool) -> Result<Self> {
        if let Some(depth) = &depth {
            if depth.w_gate.value.shape() != visual.w_gate.value.shape() {
                return Err(Error::dim(
                    "DualGate::new",
                    visual.w_gate.value.shape(),
                    depth.w_gate.value.shape(),
                ));
            }
        }
        if k == 0 || k > visual.n_experts() {
            return Err(Error::Config(format!(
                "k={k} must satisfy 1 <= k <= N_e={}",
                visual.n_experts()
            )));
        }
        Ok(Self {
            visual,
            depth,
            k,
            noise_enabled,
        })
    }

    pub fn depth_params(&self) -> &GateParams {
        self.depth.as_ref().unwrap_or(&self.visual)
    }

    pub fn is_shared(&self) -> bool {
        self.depth.is_none()
    }
}

/// Routes each modality through its own gate. Noise is drawn only when the
/// gate has noise enabled, and then a source is mandatory.
pub fn route_dual(
    gate: &DualGate,
    visual_tokens: &Tensor,
    depth_tokens: &Tensor,
    noise: Option<&NoiseSource>,
) -> Result<(GateOutput, GateOutput)> {
    if visual_tokens.shape() != depth_tokens.shape() {
        return Err(Error::dim("route_dual", visual_tokens.shape(), depth_tokens.shape()));
    }
    let noise = if gate.noise_enabled {
        Some(noise.ok_or_else(|| {
            Error::Config("noise is enabled but no noise source was supplied".into())
        })?)
    } else {
        None
    };
    route_pair(gate, visual_tokens, depth_tokens, noise)
}

/// Routes both modalities, drawing noise exactly when `noise` is given.
pub(crate) fn route_pair(
    gate: &DualGate,
    visual_tokens: &Tensor,
    depth_tokens: &Tensor,
    noise: Option<&NoiseSource>,
) -> Result<(GateOutput, GateOutput)> {
    if visual_tokens.shape() != depth_tokens.shape() {
        return Err(Error::dim("route_dual", visual_tokens.shape(), depth_tokens.shape()));
    }
    let nv = noise.map(|src| src.child("visual"));
    let nd = noise.map(|src| src.child("depth"));
    let v = route(&gate.visual, visual_tokens, gate.k, nv.as_ref())?;
    let d = route(gate.depth_params(), depth_tokens, gate.k, nd.as_ref())?;
    Ok((v, d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use proptest::prelude::*;

    fn hand_params() -> GateParams {
        // Prototypes [1,0], [0,1], [0,0] as columns of a 2×3 matrix.
        let w = Tensor::from_rows(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]).unwrap();
        GateParams::new(w, Tensor::zeros(&[2, 3]), Norm::L1).unwrap()
    }

    // Plain softmax written out independently of the kernel.
    fn oracle_softmax(x: &[f64]) -> Vec<f64> {
        let s: f64 = x.iter().map(|v| v.exp()).sum();
        x.iter().map(|v| v.exp() / s).collect()
    }

    #[test]
    fn hand_example_logits_and_gates() {
        let tokens = Tensor::from_rows(&[&[0.8, 0.1]]).unwrap();
        let out = route(&hand_params(), &tokens, 2, None).unwrap();
        let expected = [-0.3, -1.7, -0.9];
        for (h, e) in out.logits.row(0).iter().zip(expected) {
            assert!((h - e).abs() < 1e-12, "{h} vs {e}");
        }
        assert_eq!(out.selected, vec![vec![0, 2]]);
        let o = oracle_softmax(&[-0.3, -0.9]);
        assert!((o[0] - 0.6457).abs() < 1e-4);
        let g = out.gates.row(0);
        assert!((g[0] - 0.6457).abs() < 1e-4);
        assert_eq!(g[1], 0.0);
        assert!((g[2] - 0.3543).abs() < 1e-4);
        assert!((g[0] - o[0]).abs() < 1e-15);
    }

    #[test]
    fn token_on_prototype_has_zero_logit() {
        let tokens = Tensor::from_rows(&[&[0.0, 1.0]]).unwrap();
        let out = route(&hand_params(), &tokens, 2, None).unwrap();
        assert_eq!(out.logits.at(0, 1), 0.0);
    }

    #[test]
    fn k_one_gives_unit_gate() {
        let tokens = Tensor::from_rows(&[&[0.8, 0.1], &[-3.0, 2.0]]).unwrap();
        let out = route(&hand_params(), &tokens, 1, None).unwrap();
        for (i, sel) in out.selected.iter().enumerate() {
            assert_eq!(out.gates.at(i, sel[0]), 1.0);
        }
    }

    #[test]
    fn rejects_bad_shapes_and_k() {
        let p = hand_params();
        assert!(matches!(
            route(&p, &Tensor::zeros(&[1, 3]), 2, None),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(route(&p, &Tensor::zeros(&[1, 2]), 0, None), Err(Error::Config(_))));
        assert!(matches!(route(&p, &Tensor::zeros(&[1, 2]), 4, None), Err(Error::Config(_))));
        assert!(GateParams::new(Tensor::zeros(&[2, 3]), Tensor::zeros(&[3, 2]), Norm::L1).is_err());
    }

    #[test]
    fn noise_requires_source() {
        let mut rng = rng_from(1);
        let v = GateParams::init(4, 3, Norm::L1, &mut rng).unwrap();
        let gate = DualGate::new(v.clone(), Some(v), 2, true).unwrap();
        let t = Tensor::zeros(&[2, 4]);
        assert!(matches!(route_dual(&gate, &t, &t, None), Err(Error::Config(_))));
    }

    #[test]
    fn dual_routing_determinism_and_independence() {
        let mut rng = rng_from(3);
        let v = GateParams::init(4, 5, Norm::L1, &mut rng).unwrap();
        let tokens = Tensor::matrix(6, 4, (0..24).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let gate = DualGate::new(v.clone(), Some(v.clone()), 2, false).unwrap();
        let (a, b) = route_dual(&gate, &tokens, &tokens, None).unwrap();
        assert_eq!(a, b);

        // Permute depth prototypes: depth selection is the permuted visual selection.
        let perm = [3usize, 0, 4, 1, 2];
        let mut pg = Tensor::zeros(&[4, 5]);
        for (new, &old) in perm.iter().enumerate() {
            for r in 0..4 {
                pg.set(r, new, v.w_gate.value.at(r, old));
            }
        }
        let depth = GateParams::new(pg, Tensor::zeros(&[4, 5]), Norm::L1).unwrap();
        let gate = DualGate::new(v.clone(), Some(depth), 2, false).unwrap();
        let (vo, dout) = route_dual(&gate, &tokens, &tokens, None).unwrap();
        for i in 0..6 {
            for (new, &old) in perm.iter().enumerate() {
                assert_eq!(dout.gates.at(i, new), vo.gates.at(i, old));
            }
        }

        // Mutating depth parameters never changes the visual output.
        let mut gate2 = gate.clone();
        gate2.depth.as_mut().unwrap().w_gate.value.data_mut()[0] += 10.0;
        let (vo2, _) = route_dual(&gate2, &tokens, &tokens, None).unwrap();
        assert_eq!(vo, vo2);
    }

    #[test]
    fn seeded_noise_is_reproducible() {
        let mut rng = rng_from(9);
        let v = GateParams::init(4, 6, Norm::L2, &mut rng).unwrap();
        let d = GateParams::init(4, 6, Norm::L2, &mut rng).unwrap();
        let gate = DualGate::new(v, Some(d), 2, true).unwrap();
        let tokens = Tensor::matrix(5, 4, (0..20).map(|i| (i as f64).cos()).collect()).unwrap();
        let src = NoiseSource::new(42);
        let a = route_dual(&gate, &tokens, &tokens, Some(&src)).unwrap();
        let b = route_dual(&gate, &tokens, &tokens, Some(&src)).unwrap();
        assert_eq!(a, b);
        assert!(a.0.noise.is_some());
        let c = route_dual(&gate, &tokens, &tokens, Some(&NoiseSource::new(43))).unwrap();
        assert_ne!(a.0.logits, c.0.logits);
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = rng_from(5);
        let p = GateParams::init(3, 4, Norm::L2, &mut rng).unwrap();
        p.save(dir.path(), "visual", 2).unwrap();
        let (back, k) = GateParams::load(dir.path(), "visual").unwrap();
        assert_eq!(k, 2);
        assert_eq!(back, p);
        let m = Manifest::read(&dir.path().join("gate_visual.manifest")).unwrap();
        assert_eq!(m.get("modality"), Some("visual"));
        assert_eq!(m.get("p"), Some("2"));
    }

    fn finite_tokens(t: usize, d: usize) -> impl Strategy<Value = Tensor> {
        proptest::collection::vec(-2.0f64..2.0, t * d)
            .prop_map(move |data| Tensor::matrix(t, d, data).unwrap())
    }

    proptest! {
        #[test]
        fn gate_rows_live_on_the_simplex(
            tokens in finite_tokens(8, 5),
            seed in any::<u64>(),
            k in 1usize..=4,
            p in 1u32..=2,
            noisy in any::<bool>(),
        ) {
            let mut rng = rng_from(seed);
            let params = GateParams::init(5, 4, Norm::from_order(p).unwrap(), &mut rng).unwrap();
            let src = NoiseSource::new(seed);
            let out = route(&params, &tokens, k, noisy.then_some(&src)).unwrap();
            prop_assert!(out.validate(k).is_ok());
        }

        #[test]
        fn softmax_shift_invariance(
            tokens in finite_tokens(4, 3),
            shift in -50.0f64..50.0,
            seed in any::<u64>(),
        ) {
            let mut rng = rng_from(seed);
            let params = GateParams::init(3, 5, Norm::L1, &mut rng).unwrap();
            let out = route(&params, &tokens, 3, None).unwrap();
            let shifted = out.logits.map(|h| h + shift);
            let (g2, s2) = gates_from_logits(&shifted, 3).unwrap();
            prop_assert_eq!(&s2, &out.selected);
            for (a, b) in g2.data().iter().zip(out.gates.data()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
