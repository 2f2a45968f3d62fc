//! Low-rank expert token banks.
//!
//! Expert `e` owns adaptive tokens `T_e = A_e · B_e` (`m × d`, rank ≤ r). A
//! token `f` reads an expert through its perceptual map
//! `softmax(f · T_eᵀ / √d)`, which mixes the rows of the shared projection
//! `T_e · W_T + b_T` into an adjustment vector. Adjustments of the selected
//! experts are blended with the gate weights.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gating::GateOutput;
use crate::manifest::Manifest;
use crate::rng::normal;
use crate::smtx::{self, Precision};
use crate::tensor::{dot, matmul, matmul_nt, matmul_tn, softmax, softmax_vjp, Dual, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertBank {
    /// `A_e`, each `m × r`.
    pub a: Vec<Dual>,
    /// `B_e`, each `r × d`.
    pub b: Vec<Dual>,
    /// Shared projection `W_T`, `d × d`.
    pub w_t: Dual,
    /// Shared bias `b_T`, length `d`.
    pub b_t: Dual,
}

impl ExpertBank {
    pub fn new(a: Vec<Tensor>, b: Vec<Tensor>, w_t: Tensor, b_t: Tensor) -> Result<Self> {
        if a.is_empty() || a.len() != b.len() {
            return Err(Error::Config(format!(
                "expert bank needs matching non-empty factor lists, got {} and {}",
                a.len(),
                b.len()
            )));
        }
        let (m, r) = (a[0].shape()[0], a[0].shape()[1]);
        let d = w_t.shape()[0];
        for (ae, be) in a.iter().zip(&b) {
            if ae.shape() != [m, r] {
                return Err(Error::dim("ExpertBank A_e", ae.shape(), &[m, r]));
            }
            if be.shape() != [r, d] {
                return Err(Error::dim("ExpertBank B_e", be.shape(), &[r, d]));
            }
        }
        if w_t.shape() != [d, d] || b_t.shape() != [d] {
            return Err(Error::dim("ExpertBank W_T/b_T", w_t.shape(), b_t.shape()));
        }
        if r == 0 || r > m.min(d) {
            return Err(Error::Config(format!(
                "rank r={r} must satisfy 1 <= r <= min(m={m}, d={d})"
            )));
        }
        Ok(Self {
            a: a.into_iter().map(Dual::new).collect(),
            b: b.into_iter().map(Dual::new).collect(),
            w_t: Dual::new(w_t),
            b_t: Dual::new(b_t),
        })
    }

    /// `A_e ~ N(0, 1/r)`, `B_e = 0`, `W_T = I`, `b_T = 0`: every expert emits
    /// zero tokens until `B_e` is trained.
    pub fn init(
        n_experts: usize,
        m: usize,
        r: usize,
        d: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if r >= d {
            return Err(Error::Config(format!("low-rank experts need r < d, got r={r}, d={d}")));
        }
        let std = (1.0 / r as f64).sqrt();
        let a = (0..n_experts)
            .map(|_| Tensor::matrix(m, r, (0..m * r).map(|_| std * normal(rng)).collect()))
            .collect::<Result<Vec<_>>>()?;
        let b = (0..n_experts).map(|_| Tensor::zeros(&[r, d])).collect();
        Self::new(a, b, Tensor::identity(d), Tensor::zeros(&[d]))
    }

    pub fn n_experts(&self) -> usize {
        self.a.len()
    }

    pub fn m(&self) -> usize {
        self.a[0].value.shape()[0]
    }

    pub fn r(&self) -> usize {
        self.a[0].value.shape()[1]
    }

    pub fn d(&self) -> usize {
        self.w_t.value.shape()[0]
    }

    fn check_index(&self, e: usize) -> Result<()> {
        if e >= self.n_experts() {
            return Err(Error::Config(format!(
                "expert index {e} out of range for N_e={}",
                self.n_experts()
            )));
        }
        Ok(())
    }

    /// `T_e = A_e · B_e`.
    pub fn expert_tokens(&self, e: usize) -> Result<Tensor> {
        self.check_index(e)?;
        matmul(&self.a[e].value, &self.b[e].value)
    }

    /// `T_e · W_T + b_T`, the rows an expert mixes into its adjustment.
    pub fn projected_tokens(&self, tokens: &Tensor) -> Result<Tensor> {
        matmul(tokens, &self.w_t.value)?.add_row_broadcast(&self.b_t.value)
    }

    pub fn save(&self, dir: &Path, prefix: &str) -> Result<()> {
        for e in 0..self.n_experts() {
            smtx::write(&dir.join(format!("{prefix}_A{e}.smtx")), &self.a[e].value, Precision::F64)?;
            smtx::write(&dir.join(format!("{prefix}_B{e}.smtx")), &self.b[e].value, Precision::F64)?;
        }
        smtx::write(&dir.join(format!("{prefix}_W_T.smtx")), &self.w_t.value, Precision::F64)?;
        smtx::write(&dir.join(format!("{prefix}_b_T.smtx")), &self.b_t.value, Precision::F64)?;
        let mut m = Manifest::new();
        m.set("N_e", self.n_experts())
            .set("m", self.m())
            .set("r", self.r())
            .set("d", self.d());
        m.write(&dir.join(format!("{prefix}.manifest")))
    }

    pub fn load(dir: &Path, prefix: &str) -> Result<Self> {
        let m = Manifest::read(&dir.join(format!("{prefix}.manifest")))?;
        let n: usize = m.parse_key("N_e")?;
        let mut a = Vec::with_capacity(n);
        let mut b = Vec::with_capacity(n);
        for e in 0..n {
            a.push(smtx::read(&dir.join(format!("{prefix}_A{e}.smtx")))?);
            b.push(smtx::read(&dir.join(format!("{prefix}_B{e}.smtx")))?);
        }
        let bank = Self::new(
            a,
            b,
            smtx::read(&dir.join(format!("{prefix}_W_T.smtx")))?,
            smtx::read(&dir.join(format!("{prefix}_b_T.smtx")))?,
        )?;
        if bank.m() != m.parse_key::<usize>("m")?
            || bank.r() != m.parse_key::<usize>("r")?
            || bank.d() != m.parse_key::<usize>("d")?
        {
            return Err(Error::Config(format!("bank `{prefix}` disagrees with its manifest")));
        }
        Ok(bank)
    }
}

/// `softmax(token · T_eᵀ / √d)`.
pub fn perceptual_map(token: &[f64], t_e: &Tensor) -> Result<Vec<f64>> {
    if t_e.rank() != 2 || t_e.cols() != token.len() {
        return Err(Error::dim("perceptual_map", &[token.len()], t_e.shape()));
    }
    let scale = (token.len() as f64).sqrt();
    let scores: Vec<f64> = (0..t_e.rows()).map(|j| dot(token, t_e.row(j)) / scale).collect();
    Ok(softmax(&scores))
}

fn mix_rows(weights: &[f64], rows: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; rows.cols()];
    for (j, &w) in weights.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(rows.row(j)) {
            *o += w * v;
        }
    }
    out
}

/// Adjustment produced by expert `e` for one token.
pub fn expert_adjustment(token: &[f64], bank: &ExpertBank, e: usize) -> Result<Vec<f64>> {
    if token.len() != bank.d() {
        return Err(Error::dim("expert_adjustment", &[token.len()], &[bank.d()]));
    }
    let t_e = bank.expert_tokens(e)?;
    let attn = perceptual_map(token, &t_e)?;
    let proj = bank.projected_tokens(&t_e)?;
    Ok(mix_rows(&attn, &proj))
}

fn check_sparsity(gate_row: &[f64], selected: &[usize], n: usize) -> Result<()> {
    if gate_row.len() != n {
        return Err(Error::dim("aggregate", &[gate_row.len()], &[n]));
    }
    if selected.is_empty() {
        return Err(Error::Invariant("aggregate called with an empty expert selection".into()));
    }
    for (e, &g) in gate_row.iter().enumerate() {
        if g != 0.0 && !selected.contains(&e) {
            return Err(Error::Invariant(format!(
                "gate for unselected expert {e} is {g}, expected 0"
            )));
        }
    }
    if let Some(&e) = selected.iter().find(|&&e| e >= n) {
        return Err(Error::Invariant(format!("selected expert {e} out of range")));
    }
    Ok(())
}

/// Gate-weighted sum of the selected experts' adjustments. Experts outside
/// `selected` are never evaluated.
pub fn aggregate(
    token: &[f64],
    bank: &ExpertBank,
    gate_row: &[f64],
    selected: &[usize],
) -> Result<Vec<f64>> {
    check_sparsity(gate_row, selected, bank.n_experts())?;
    let mut out = vec![0.0; bank.d()];
    for &e in selected {
        let dz = expert_adjustment(token, bank, e)?;
        for (o, v) in out.iter_mut().zip(dz) {
            *o += gate_row[e] * v;
        }
    }
    Ok(out)
}

/// Per-expert tensors reused across tokens of one forward pass.
#[derive(Clone, Debug)]
struct ExpertCache {
    tokens: Tensor,
    projected: Tensor,
}

/// Forward state of [`aggregate_tokens`], consumed by its backward.
#[derive(Clone, Debug)]
pub struct BankTrace {
    experts: BTreeMap<usize, ExpertCache>,
    /// Per token, per selected expert (in selection order): perceptual map
    /// and adjustment.
    per_token: Vec<Vec<(Vec<f64>, Vec<f64>)>>,
}

impl BankTrace {
    /// Experts that were evaluated for at least one token.
    pub fn evaluated_experts(&self) -> Vec<usize> {
        self.experts.keys().copied().collect()
    }
}

/// Row-wise [`aggregate`] for a `T × d` token map.
pub fn aggregate_tokens(
    tokens: &Tensor,
    bank: &ExpertBank,
    routing: &GateOutput,
) -> Result<(Tensor, BankTrace)> {
    let d = bank.d();
    if tokens.rank() != 2 || tokens.cols() != d || tokens.rows() != routing.selected.len() {
        return Err(Error::dim("aggregate_tokens", tokens.shape(), routing.gates.shape()));
    }
    let mut experts = BTreeMap::new();
    for sel in &routing.selected {
        for &e in sel {
            if let std::collections::btree_map::Entry::Vacant(slot) = experts.entry(e) {
                let t_e = bank.expert_tokens(e)?;
                let projected = bank.projected_tokens(&t_e)?;
                slot.insert(ExpertCache { tokens: t_e, projected });
            }
        }
    }
    let mut out = Tensor::zeros(tokens.shape());
    let mut per_token = Vec::with_capacity(tokens.rows());
    for i in 0..tokens.rows() {
        let f = tokens.row(i);
        let sel = &routing.selected[i];
        let gate_row = routing.gates.row(i);
        check_sparsity(gate_row, sel, bank.n_experts())?;
        let mut entries = Vec::with_capacity(sel.len());
        let mut acc = vec![0.0; d];
        for &e in sel {
            let cache = &experts[&e];
            let attn = perceptual_map(f, &cache.tokens)?;
            let dz = mix_rows(&attn, &cache.projected);
            for (o, v) in acc.iter_mut().zip(&dz) {
                *o += gate_row[e] * v;
            }
            entries.push((attn, dz));
        }
        out.row_mut(i).copy_from_slice(&acc);
        per_token.push(entries);
    }
    Ok((out, BankTrace { experts, per_token }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BankGrads {
    pub a: Vec<Tensor>,
    pub b: Vec<Tensor>,
    pub w_t: Tensor,
    pub b_t: Tensor,
}

impl BankGrads {
    pub fn zeros_like(bank: &ExpertBank) -> Self {
        Self {
            a: bank.a.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            b: bank.b.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            w_t: Tensor::zeros(bank.w_t.value.shape()),
            b_t: Tensor::zeros(bank.b_t.value.shape()),
        }
    }
}

/// Backward of [`aggregate_tokens`]. Adds parameter gradients into `grads`
/// and returns the cotangents of the tokens and of the gate matrix.
pub fn aggregate_tokens_backward(
    tokens: &Tensor,
    bank: &ExpertBank,
    routing: &GateOutput,
    trace: &BankTrace,
    d_out: &Tensor,
    grads: &mut BankGrads,
) -> Result<(Tensor, Tensor)> {
    if d_out.shape() != tokens.shape() {
        return Err(Error::dim("aggregate_tokens_backward", d_out.shape(), tokens.shape()));
    }
    let d = bank.d();
    let scale = (d as f64).sqrt();
    let mut d_tokens = Tensor::zeros(tokens.shape());
    let mut d_gates = Tensor::zeros(routing.gates.shape());
    let mut d_t: BTreeMap<usize, Tensor> = BTreeMap::new();
    let mut d_proj: BTreeMap<usize, Tensor> = BTreeMap::new();
    for (i, entries) in trace.per_token.iter().enumerate() {
        let f = tokens.row(i);
        let g_out = d_out.row(i);
        let mut df = vec![0.0; d];
        for (&e, (attn, dz)) in routing.selected[i].iter().zip(entries) {
            let cache = &trace.experts[&e];
            let gate = routing.gates.at(i, e);
            d_gates.set(i, e, dot(g_out, dz));
            // dz = attnᵀ · projected
            let dproj = d_proj
                .entry(e)
                .or_insert_with(|| Tensor::zeros(cache.projected.shape()));
            let mut d_attn = vec![0.0; attn.len()];
            for (j, &w) in attn.iter().enumerate() {
                let prow = cache.projected.row(j);
                let drow = dproj.row_mut(j);
                let mut acc = 0.0;
                for c in 0..d {
                    let gc = gate * g_out[c];
                    drow[c] += w * gc;
                    acc += prow[c] * gc;
                }
                d_attn[j] = acc;
            }
            let d_scores = softmax_vjp(attn, &d_attn);
            let dte = d_t.entry(e).or_insert_with(|| Tensor::zeros(cache.tokens.shape()));
            for (j, &ds) in d_scores.iter().enumerate() {
                let s = ds / scale;
                let trow = cache.tokens.row(j);
                let drow = dte.row_mut(j);
                for c in 0..d {
                    drow[c] += s * f[c];
                    df[c] += s * trow[c];
                }
            }
        }
        d_tokens.row_mut(i).copy_from_slice(&df);
    }
    for (&e, dproj) in &d_proj {
        let cache = &trace.experts[&e];
        let dte = d_t.get_mut(&e).expect("every projected expert has a token cotangent");
        dte.axpy(1.0, &matmul_nt(dproj, &bank.w_t.value)?)?;
        grads.w_t.axpy(1.0, &matmul_tn(&cache.tokens, dproj)?)?;
        grads.b_t.axpy(1.0, &dproj.col_sums())?;
    }
    for (&e, dte) in &d_t {
        grads.a[e].axpy(1.0, &matmul_nt(dte, &bank.b[e].value)?)?;
        grads.b[e].axpy(1.0, &matmul_tn(&bank.a[e].value, dte)?)?;
    }
    Ok((d_tokens, d_gates))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use crate::tensor::Tensor;

    fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| normal(rng)).collect()).unwrap()
    }

    fn random_bank(n: usize, m: usize, r: usize, d: usize, seed: u64) -> ExpertBank {
        let mut rng = rng_from(seed);
        let a = (0..n).map(|_| random_matrix(m, r, &mut rng)).collect();
        let b = (0..n).map(|_| random_matrix(r, d, &mut rng)).collect();
        let w = random_matrix(d, d, &mut rng);
        let bias = Tensor::vector((0..d).map(|_| normal(&mut rng)).collect());
        ExpertBank::new(a, b, w, bias).unwrap()
    }

    #[test]
    fn expert_tokens_examples() {
        let bank = ExpertBank::new(
            vec![Tensor::zeros(&[3, 2])],
            vec![Tensor::full(&[2, 4], 1.5)],
            Tensor::identity(4),
            Tensor::zeros(&[4]),
        )
        .unwrap();
        assert_eq!(bank.expert_tokens(0).unwrap(), Tensor::zeros(&[3, 4]));

        let x = Tensor::from_rows(&[&[1.0, 2.0], &[-3.0, 0.5]]).unwrap();
        let bank = ExpertBank::new(
            vec![Tensor::identity(2)],
            vec![x.clone()],
            Tensor::identity(2),
            Tensor::zeros(&[2]),
        )
        .unwrap();
        assert_eq!(bank.expert_tokens(0).unwrap(), x);
        assert!(matches!(bank.expert_tokens(1), Err(Error::Config(_))));
    }

    #[test]
    fn init_is_zero_tokens_and_enforces_low_rank() {
        let mut rng = rng_from(1);
        let bank = ExpertBank::init(3, 4, 2, 8, &mut rng).unwrap();
        for e in 0..3 {
            assert_eq!(bank.expert_tokens(e).unwrap(), Tensor::zeros(&[4, 8]));
        }
        assert!(ExpertBank::init(3, 4, 8, 8, &mut rng).is_err());
        assert!(ExpertBank::new(
            vec![Tensor::zeros(&[2, 3])],
            vec![Tensor::zeros(&[3, 4])],
            Tensor::identity(4),
            Tensor::zeros(&[4])
        )
        .is_err());
    }

    #[test]
    fn perceptual_map_examples() {
        let one = Tensor::from_rows(&[&[5.0, -7.0]]).unwrap();
        assert_eq!(perceptual_map(&[0.3, 0.9], &one).unwrap(), vec![1.0]);

        let t = Tensor::from_rows(&[&[0.0, 2.0], &[0.0, -1.0], &[0.0, 4.0]]).unwrap();
        for v in perceptual_map(&[1.0, 0.0], &t).unwrap() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let t = Tensor::from_rows(&[&[2.0, 0.0], &[0.0, 2.0]]).unwrap();
        let p = perceptual_map(&[1.0, 0.0], &t).unwrap();
        assert!((p[0] - 0.8044).abs() < 1e-4 && (p[1] - 0.1956).abs() < 1e-4);
        assert!(perceptual_map(&[1.0, 0.0, 0.0], &t).is_err());
    }

    #[test]
    fn adjustment_collapses() {
        // m = 1, W_T = I, b_T = 0: the adjustment is the single token row.
        let bank = ExpertBank::new(
            vec![Tensor::full(&[1, 1], 2.0)],
            vec![Tensor::from_rows(&[&[0.5, -1.0, 3.0]]).unwrap()],
            Tensor::identity(3),
            Tensor::zeros(&[3]),
        )
        .unwrap();
        assert_eq!(expert_adjustment(&[9.0, 1.0, -4.0], &bank, 0).unwrap(), vec![1.0, -2.0, 6.0]);

        // W_T = 0, b_T = v: every token maps to v.
        let mut bank = random_bank(2, 3, 2, 3, 7);
        bank.w_t.value = Tensor::zeros(&[3, 3]);
        bank.b_t.value = Tensor::vector(vec![0.25, -0.5, 1.0]);
        for token in [[1.0, 2.0, 3.0], [-4.0, 0.0, 0.5]] {
            let dz = expert_adjustment(&token, &bank, 1).unwrap();
            for (a, b) in dz.iter().zip([0.25, -0.5, 1.0]) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn two_by_two_adjustment_matches_direct_formula() {
        let bank = ExpertBank::new(
            vec![Tensor::from_rows(&[&[1.0, 0.5], &[-0.3, 2.0]]).unwrap()],
            vec![Tensor::from_rows(&[&[0.2, -1.0], &[0.7, 0.4]]).unwrap()],
            Tensor::from_rows(&[&[0.9, 0.1], &[-0.2, 1.1]]).unwrap(),
            Tensor::vector(vec![0.05, -0.15]),
        )
        .unwrap();
        let f = [0.6, -0.8];
        // Written out by hand: T = A·B, scores, softmax, (T·W + b), mix.
        let t = [
            [1.0 * 0.2 + 0.5 * 0.7, 1.0 * -1.0 + 0.5 * 0.4],
            [-0.3 * 0.2 + 2.0 * 0.7, -0.3 * -1.0 + 2.0 * 0.4],
        ];
        let s0 = (f[0] * t[0][0] + f[1] * t[0][1]) / 2f64.sqrt();
        let s1 = (f[0] * t[1][0] + f[1] * t[1][1]) / 2f64.sqrt();
        let z = s0.exp() + s1.exp();
        let (a0, a1) = (s0.exp() / z, s1.exp() / z);
        let p = |row: [f64; 2]| {
            [
                row[0] * 0.9 + row[1] * -0.2 + 0.05,
                row[0] * 0.1 + row[1] * 1.1 - 0.15,
            ]
        };
        let (p0, p1) = (p(t[0]), p(t[1]));
        let expected = [a0 * p0[0] + a1 * p1[0], a0 * p0[1] + a1 * p1[1]];
        let got = expert_adjustment(&f, &bank, 0).unwrap();
        for (g, e) in got.iter().zip(expected) {
            assert!((g - e).abs() < 1e-10, "{g} vs {e}");
        }
    }

    #[test]
    fn aggregate_examples_and_guards() {
        let bank = random_bank(3, 4, 2, 2, 11);
        let f = [0.8, 0.1];
        let single = aggregate(&f, &bank, &[0.0, 1.0, 0.0], &[1]).unwrap();
        assert_eq!(single, expert_adjustment(&f, &bank, 1).unwrap());

        let mixed = aggregate(&f, &bank, &[0.6457, 0.0, 0.3543], &[0, 2]).unwrap();
        let z0 = expert_adjustment(&f, &bank, 0).unwrap();
        let z2 = expert_adjustment(&f, &bank, 2).unwrap();
        for c in 0..2 {
            assert!((mixed[c] - (0.6457 * z0[c] + 0.3543 * z2[c])).abs() < 1e-10);
        }

        assert!(matches!(
            aggregate(&f, &bank, &[0.0, 0.0, 0.0], &[]),
            Err(Error::Invariant(_))
        ));
        assert!(matches!(
            aggregate(&f, &bank, &[0.5, 0.5, 0.0], &[0]),
            Err(Error::Invariant(_))
        ));
    }

    #[test]
    fn aggregation_is_linear_in_gates() {
        let bank = random_bank(4, 3, 2, 5, 13);
        let f = [0.3, -0.2, 0.9, 1.1, -0.4];
        let g = [0.0, 0.7, 0.0, 0.3];
        let g2: Vec<f64> = g.iter().map(|v| 2.0 * v).collect();
        let a = aggregate(&f, &bank, &g, &[1, 3]).unwrap();
        let b = aggregate(&f, &bank, &g2, &[1, 3]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(2.0 * x, *y);
        }
    }

    #[test]
    fn output_norm_bounded_by_projected_rows() {
        for seed in 0..20 {
            let bank = random_bank(3, 4, 2, 6, seed);
            let mut rng = rng_from(seed + 100);
            let f: Vec<f64> = (0..6).map(|_| normal(&mut rng)).collect();
            let out = aggregate(&f, &bank, &[0.25, 0.0, 0.75], &[0, 2]).unwrap();
            let mut bound: f64 = 0.0;
            for e in [0, 2] {
                let proj = bank.projected_tokens(&bank.expert_tokens(e).unwrap()).unwrap();
                for j in 0..proj.rows() {
                    bound = bound.max(dot(proj.row(j), proj.row(j)).sqrt());
                }
            }
            assert!(dot(&out, &out).sqrt() <= bound + 1e-12);
        }
    }

    /// One-sided Jacobi SVD, used only to read off the numerical rank.
    fn singular_values(t: &Tensor) -> Vec<f64> {
        let mut u = t.clone();
        let (rows, cols) = (u.rows(), u.cols());
        for _ in 0..60 {
            for p in 0..cols {
                for q in p + 1..cols {
                    let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                    for i in 0..rows {
                        alpha += u.at(i, p) * u.at(i, p);
                        beta += u.at(i, q) * u.at(i, q);
                        gamma += u.at(i, p) * u.at(i, q);
                    }
                    if gamma.abs() < 1e-300 {
                        continue;
                    }
                    let zeta = (beta - alpha) / (2.0 * gamma);
                    let tan = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                    let tan = if zeta == 0.0 { 1.0 } else { tan };
                    let c = 1.0 / (1.0 + tan * tan).sqrt();
                    let s = c * tan;
                    for i in 0..rows {
                        let (x, y) = (u.at(i, p), u.at(i, q));
                        u.set(i, p, c * x - s * y);
                        u.set(i, q, s * x + c * y);
                    }
                }
            }
        }
        let mut sv: Vec<f64> = (0..cols)
            .map(|j| (0..rows).map(|i| u.at(i, j) * u.at(i, j)).sum::<f64>().sqrt())
            .collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        sv
    }

    #[test]
    fn expert_tokens_have_rank_at_most_r() {
        for seed in 0..5 {
            let bank = random_bank(1, 6, 2, 7, seed);
            let t = bank.expert_tokens(0).unwrap();
            let sv = singular_values(&t);
            assert!(sv[1] > 1e-6);
            for s in &sv[2..] {
                assert!(*s < 1e-9, "seed {seed}: {sv:?}");
            }
        }
    }

    #[test]
    fn batched_path_matches_per_token_aggregate() {
        let bank = random_bank(4, 3, 2, 5, 21);
        let mut rng = rng_from(22);
        let tokens = random_matrix(6, 5, &mut rng);
        let gate = crate::gating::GateParams::init(5, 4, crate::tensor::Norm::L1, &mut rng).unwrap();
        let routing = crate::gating::route(&gate, &tokens, 2, None).unwrap();
        let (out, trace) = aggregate_tokens(&tokens, &bank, &routing).unwrap();
        for i in 0..6 {
            let direct =
                aggregate(tokens.row(i), &bank, routing.gates.row(i), &routing.selected[i]).unwrap();
            assert_eq!(out.row(i), direct.as_slice());
        }
        let used: std::collections::BTreeSet<usize> =
            routing.selected.iter().flatten().copied().collect();
        assert_eq!(trace.evaluated_experts(), used.into_iter().collect::<Vec<_>>());
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let bank = random_bank(3, 4, 2, 5, 30);
        bank.save(dir.path(), "bank_visual").unwrap();
        assert_eq!(ExpertBank::load(dir.path(), "bank_visual").unwrap(), bank);
    }
}
