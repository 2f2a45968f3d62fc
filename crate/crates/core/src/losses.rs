//! Load balancing, the per-token surrogate task loss, and their combination.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-expert importance: the column sums of a `T × N_e` gate matrix.
pub fn importance(gates: &Tensor) -> Result<Tensor> {
    if gates.rank() != 2 {
        return Err(Error::dim("importance", gates.shape(), &[0, 0]));
    }
    if let Some(g) = gates.data().iter().find(|&&g| g < 0.0 || !g.is_finite()) {
        return Err(Error::Invariant(format!("gate value {g} is not a valid weight")));
    }
    Ok(gates.col_sums())
}

fn moments(imp: &[f64]) -> Result<(f64, f64)> {
    if imp.is_empty() {
        return Err(Error::Degenerate("importance vector is empty".into()));
    }
    let n = imp.len() as f64;
    let mean = imp.iter().sum::<f64>() / n;
    if mean <= 0.0 {
        return Err(Error::Degenerate(
            "all expert importances are zero; coefficient of variation undefined".into(),
        ));
    }
    let var = imp.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok((mean, var))
}

/// Squared coefficient of variation `(std / mean)²`, population std.
pub fn load_balance_loss(importance: &Tensor) -> Result<f64> {
    let (mean, var) = moments(importance.data())?;
    if importance.len() == 1 {
        return Ok(0.0);
    }
    Ok(var / (mean * mean))
}

/// Gradient of [`load_balance_loss`] with respect to each importance.
pub fn load_balance_grad(importance: &Tensor) -> Result<Vec<f64>> {
    let imp = importance.data();
    let (mean, var) = moments(imp)?;
    if imp.len() == 1 {
        return Ok(vec![0.0]);
    }
    let n = imp.len() as f64;
    let mean2 = mean * mean;
    let mean3 = mean2 * mean;
    Ok(imp
        .iter()
        .map(|v| 2.0 * (v - mean) / (n * mean2) - 2.0 * var / (n * mean3))
        .collect())
}

/// Mean of the visual and depth load losses.
pub fn combined_load_loss(visual_gates: &Tensor, depth_gates: &Tensor) -> Result<f64> {
    let v = load_balance_loss(&importance(visual_gates)?)?;
    let d = load_balance_loss(&importance(depth_gates)?)?;
    Ok(0.5 * (v + d))
}

/// Cotangent of one modality's gate matrix under `scale · load_balance_loss`.
pub fn load_loss_gate_grad(gates: &Tensor, scale: f64) -> Result<Tensor> {
    let g = load_balance_grad(&importance(gates)?)?;
    let mut out = Tensor::zeros(gates.shape());
    for i in 0..gates.rows() {
        for (o, v) in out.row_mut(i).iter_mut().zip(&g) {
            *o = scale * v;
        }
    }
    Ok(out)
}

/// Mean cross-entropy over non-ignored tokens, with its logit cotangent.
pub fn task_loss_with_grad(
    logits: &Tensor,
    labels: &[usize],
    ignore_id: usize,
) -> Result<(f64, Tensor)> {
    if logits.rank() != 2 || logits.rows() != labels.len() {
        return Err(Error::dim("task_loss", logits.shape(), &[labels.len()]));
    }
    let k = logits.cols();
    let counted = labels.iter().filter(|&&l| l != ignore_id).count();
    if counted == 0 {
        return Err(Error::Degenerate("every token carries the ignore label".into()));
    }
    let inv = 1.0 / counted as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(logits.shape());
    for (i, &label) in labels.iter().enumerate() {
        if label == ignore_id {
            continue;
        }
        if label >= k {
            return Err(Error::Config(format!("label {label} outside [0, {k})")));
        }
        let row = logits.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[label];
        let g = grad.row_mut(i);
        for (c, gv) in g.iter_mut().enumerate() {
            *gv = inv * (row[c] - lse).exp();
        }
        g[label] -= inv;
    }
    Ok((loss * inv, grad))
}

pub fn task_loss(logits: &Tensor, labels: &[usize], ignore_id: usize) -> Result<f64> {
    Ok(task_loss_with_grad(logits, labels, ignore_id)?.0)
}

/// One objective evaluation, as written to the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub task_loss: f64,
    pub load_loss: f64,
    pub total: f64,
    pub lambda: f64,
    pub importance_visual: Vec<f64>,
    pub importance_depth: Vec<f64>,
}

/// `task + λ · load`.
pub fn total_loss(task: f64, load: f64, lambda: f64) -> LossReport {
    LossReport {
        task_loss: task,
        load_loss: load,
        total: task + lambda * load,
        lambda,
        importance_visual: Vec::new(),
        importance_depth: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn importance_examples() {
        let uniform = Tensor::full(&[6, 3], 1.0 / 3.0);
        for v in importance(&uniform).unwrap().data() {
            assert!((v - 2.0).abs() < 1e-12);
        }
        let collapsed = Tensor::from_rows(&[&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(importance(&collapsed).unwrap().data(), &[2.0, 0.0, 0.0]);
        let g = Tensor::from_rows(&[&[0.6457, 0.0, 0.3543], &[0.0, 1.0, 0.0]]).unwrap();
        assert_eq!(importance(&g).unwrap().data(), &[0.6457, 1.0, 0.3543]);
        let neg = Tensor::from_rows(&[&[1.5, -0.5]]).unwrap();
        assert!(matches!(importance(&neg), Err(Error::Invariant(_))));
    }

    #[test]
    fn load_balance_examples() {
        assert_eq!(load_balance_loss(&Tensor::vector(vec![2.0; 4])).unwrap(), 0.0);
        assert!((load_balance_loss(&Tensor::vector(vec![3.0, 1.0])).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(load_balance_loss(&Tensor::vector(vec![7.0])).unwrap(), 0.0);
        assert!(matches!(
            load_balance_loss(&Tensor::vector(vec![0.0, 0.0])),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn combined_examples() {
        let uniform = Tensor::full(&[4, 2], 0.5);
        assert_eq!(combined_load_loss(&uniform, &uniform).unwrap(), 0.0);
        // importance [3, 1] for visual, uniform depth.
        let v = Tensor::from_rows(&[&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let c = combined_load_loss(&v, &uniform).unwrap();
        assert!((c - 0.125).abs() < 1e-15);
        assert_eq!(c, combined_load_loss(&uniform, &v).unwrap());
    }

    #[test]
    fn task_loss_examples() {
        let mut saturated = Tensor::zeros(&[2, 4]);
        saturated.set(0, 1, 1000.0);
        saturated.set(1, 3, 1000.0);
        assert!(task_loss(&saturated, &[1, 3], usize::MAX).unwrap() < 1e-6);

        let uniform = Tensor::zeros(&[3, 5]);
        assert!((task_loss(&uniform, &[0, 2, 4], usize::MAX).unwrap() - 5f64.ln()).abs() < 1e-12);

        let logits = Tensor::from_rows(&[&[1.0, -0.5, 2.0], &[0.3, 0.3, -1.0], &[-2.0, 4.0, 0.5]]).unwrap();
        let labels = [2, 0, 1];
        let mut expected = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let row = logits.row(i);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            expected -= (row[l].exp() / z).ln();
        }
        expected /= 3.0;
        assert!((task_loss(&logits, &labels, 255).unwrap() - expected).abs() < 1e-10);

        // Ignored tokens drop out of the mean.
        let with_ignore = task_loss(&logits, &[2, 255, 255], 255).unwrap();
        let row = logits.row(0);
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        assert!((with_ignore + (row[2].exp() / z).ln()).abs() < 1e-12);
        assert!(matches!(task_loss(&logits, &[255; 3], 255), Err(Error::Degenerate(_))));
        assert!(task_loss(&logits, &[9, 0, 0], 255).is_err());
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(1.3, 0.7, 0.0).total, 1.3);
        assert!((total_loss(1.0, 0.25, 0.01).total - 1.0025).abs() < 1e-15);
        let a = total_loss(1.0, 0.4, 0.05);
        let b = total_loss(1.0, 0.4, 0.1);
        assert!(((b.total - 1.0) - 2.0 * (a.total - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn load_grad_matches_central_differences() {
        let imp = vec![3.0, 1.0, 0.5, 2.5];
        let g = load_balance_grad(&Tensor::vector(imp.clone())).unwrap();
        let h = 1e-6;
        for m in 0..imp.len() {
            let mut up = imp.clone();
            up[m] += h;
            let mut dn = imp.clone();
            dn[m] -= h;
            let fd = (load_balance_loss(&Tensor::vector(up)).unwrap()
                - load_balance_loss(&Tensor::vector(dn)).unwrap())
                / (2.0 * h);
            assert!((fd - g[m]).abs() < 1e-8, "{m}: {fd} vs {}", g[m]);
        }
    }

    #[test]
    fn task_grad_matches_central_differences() {
        let logits = Tensor::from_rows(&[&[1.0, -0.5, 2.0], &[0.3, 0.3, -1.0]]).unwrap();
        let (_, g) = task_loss_with_grad(&logits, &[2, 1], 99).unwrap();
        let h = 1e-6;
        for idx in 0..logits.len() {
            let mut up = logits.clone();
            up.data_mut()[idx] += h;
            let mut dn = logits.clone();
            dn.data_mut()[idx] -= h;
            let fd = (task_loss(&up, &[2, 1], 99).unwrap() - task_loss(&dn, &[2, 1], 99).unwrap())
                / (2.0 * h);
            assert!((fd - g.data()[idx]).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn cv_is_scale_invariant(
            imp in proptest::collection::vec(0.01f64..10.0, 1..8),
            c in 0.01f64..100.0,
        ) {
            let a = load_balance_loss(&Tensor::vector(imp.clone())).unwrap();
            let b = load_balance_loss(&Tensor::vector(imp.iter().map(|v| c * v).collect())).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
        }

        #[test]
        fn cv_nonnegative_and_zero_iff_equal(
            imp in proptest::collection::vec(0.0f64..5.0, 2..8),
            level in 0.1f64..5.0,
        ) {
            let t = Tensor::vector(imp.clone());
            if imp.iter().any(|&v| v > 0.0) {
                let l = load_balance_loss(&t).unwrap();
                prop_assert!(l >= 0.0);
                let all_equal = imp.iter().all(|&v| v == imp[0]);
                if all_equal {
                    prop_assert!(l <= 1e-12);
                } else {
                    prop_assert!(l > 1e-12 || imp.iter().all(|&v| (v - imp[0]).abs() < 1e-6));
                }
            }
            let flat = Tensor::vector(vec![level; imp.len()]);
            prop_assert!(load_balance_loss(&flat).unwrap().abs() <= 1e-12);
        }
    }
}
