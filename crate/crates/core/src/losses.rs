//! Scalar training objectives.
//!
//! Two task losses (softmax cross-entropy and multi-label binary
//! cross-entropy), the hinge-based undoing-bias objective, and the
//! bias-regularized cross-entropy objective. All of them are built on the
//! tape so every gradient in the update rules comes out of the same reverse
//! pass.

use crate::error::{Error, Result};
use crate::heads::{bias_logits, vw_logits, BankOnTape};
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Trade-off scalars of the training objectives.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossWeights {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    /// Penalty on `||delta_i||^2`.
    pub lambda: f64,
    /// Penalty on `||alpha_i - 1||^2`.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { c1: 1.0, c2: 1.0, c3: 1.0, lambda: 0.1, gamma: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("c1", self.c1),
            ("c2", self.c2),
            ("c3", self.c3),
            ("lambda", self.lambda),
            ("gamma", self.gamma),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("loss weight {name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Task-loss flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskMode {
    /// Single-label: one-hot (or soft, e.g. mixed) targets, row-wise softmax.
    SoftmaxCe,
    /// Multi-label: {0,1} targets, per-label sigmoid, sum over labels.
    MultilabelBce,
}

/// How per-domain loss terms are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DomainWeighting {
    /// Average of per-domain means; every domain counts the same.
    #[default]
    Equal,
    /// Per-domain means weighted by sample share; equals the pooled mean.
    Proportional,
}

fn validate_labels(y: &Tensor, logits_shape: &[usize], mode: TaskMode) -> Result<()> {
    if y.shape() != logits_shape {
        return Err(Error::ShapeMismatch {
            op: "task-loss",
            detail: format!("labels {:?} vs logits {:?}", y.shape(), logits_shape),
        });
    }
    match mode {
        TaskMode::SoftmaxCe => {
            for i in 0..y.rows() {
                let row = y.row(i);
                let mut s = 0.0;
                for &v in row {
                    if !(0.0..=1.0).contains(&v) {
                        return Err(Error::InvalidLabel(format!("softmax-ce label {v} outside [0, 1]")));
                    }
                    s += v;
                }
                if (s - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidLabel(format!("softmax-ce label row sums to {s}, expected 1")));
                }
            }
        }
        TaskMode::MultilabelBce => {
            for &v in y.data() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::InvalidLabel(format!("bce label {v} outside [0, 1]")));
                }
            }
        }
    }
    Ok(())
}

/// Mean-over-batch task loss.
///
/// Softmax mode: `-mean_i sum_k y_ik log p_ik`. BCE mode: per-sample loss is
/// the sum over labels, then the mean over the batch is taken.
pub fn task_loss(tape: &mut Tape, logits: ValueId, y: &Tensor, mode: TaskMode) -> Result<ValueId> {
    let shape = tape.value(logits).shape().to_vec();
    validate_labels(y, &shape, mode)?;
    let n = shape[0];
    if n == 0 {
        return Err(Error::ShapeMismatch { op: "task-loss", detail: "empty batch".into() });
    }
    match mode {
        TaskMode::SoftmaxCe => {
            let p = tape.softmax_rows(logits)?;
            let lp = tape.log(p)?;
            let yl = tape.leaf(y.clone())?;
            let prod = tape.mul(yl, lp)?;
            let s = tape.sum(prod)?;
            tape.scale(s, -1.0 / n as f64)
        }
        TaskMode::MultilabelBce => {
            let s = tape.sigmoid(logits)?;
            let ls = tape.log(s)?;
            let one = tape.leaf(Tensor::scalar(1.0))?;
            let oms = tape.sub(one, s)?;
            let loms = tape.log(oms)?;
            let yl = tape.leaf(y.clone())?;
            let mut ym = Tensor::ones(y.shape().to_vec());
            for (o, &v) in ym.data_mut().iter_mut().zip(y.data().iter()) {
                *o = 1.0 - v;
            }
            let yc = tape.leaf(ym)?;
            let t1 = tape.mul(yl, ls)?;
            let t2 = tape.mul(yc, loms)?;
            let t = tape.add(t1, t2)?;
            let s_all = tape.sum(t)?;
            tape.scale(s_all, -1.0 / n as f64)
        }
    }
}

/// Per-domain batch for the bias objectives: the domain's index in the bank,
/// its embedding rows, and their labels. Domains absent from a batch are
/// simply not listed; their norm penalties still apply.
pub struct DomainTerm<'a> {
    pub domain: usize,
    pub z: ValueId,
    pub y: &'a Tensor,
}

fn domain_weights(sizes: &[usize], weighting: DomainWeighting) -> Vec<f64> {
    match weighting {
        DomainWeighting::Equal => vec![1.0 / sizes.len() as f64; sizes.len()],
        DomainWeighting::Proportional => {
            let total: usize = sizes.iter().sum();
            sizes.iter().map(|&s| s as f64 / total as f64).collect()
        }
    }
}

/// Components of the undoing-bias objective, each a scalar tape node.
pub struct SvmParts {
    pub total: ValueId,
    /// Sum over samples of the visual-world hinge terms (unscaled by C1).
    pub l_vw: ValueId,
    /// Sum over samples of the bias-head hinge terms (unscaled by C2).
    pub l_bias: ValueId,
    /// `1/2 ||w_vw||^2`.
    pub r_wvw: ValueId,
    /// `lambda/2 sum_i ||delta_i||^2` over all bank domains.
    pub r_delta: ValueId,
}

/// The soft-constrained undoing-bias objective (additive bias only, hinge
/// loss, labels in {-1, +1}):
///
/// `1/2 ||w_vw||^2 + lambda/2 sum_i ||delta_i||^2
///  + C1 sum_ij max(1 - y w_vw z, 0) + C2 sum_ij max(1 - y w_i z, 0)`
///
/// Sums run over raw samples, matching the printed form. The caller keeps
/// alpha frozen at 1 so `w_i = w_vw + delta_i`.
pub fn svm_objective(
    tape: &mut Tape,
    bank: &BankOnTape,
    domains: &[DomainTerm],
    weights: &LossWeights,
) -> Result<SvmParts> {
    if domains.is_empty() {
        return Err(Error::Config("svm objective needs at least one domain".into()));
    }
    for d in domains {
        if d.domain >= bank.n_domains() {
            return Err(Error::OutOfRange { what: "domain", index: d.domain, len: bank.n_domains() });
        }
        for &v in d.y.data() {
            if v != 1.0 && v != -1.0 {
                return Err(Error::InvalidLabel(format!("svm label {v} not in {{-1, +1}}")));
            }
        }
    }
    let wnorm = tape.sum_sq(bank.w_vw)?;
    let r_wvw = tape.scale(wnorm, 0.5)?;
    let mut dnorms: Option<ValueId> = None;
    for i in 0..bank.n_domains() {
        let dn = tape.sum_sq(bank.deltas[i])?;
        dnorms = Some(match dnorms {
            None => dn,
            Some(acc) => tape.add(acc, dn)?,
        });
    }
    let r_delta = tape.scale(dnorms.unwrap(), weights.lambda / 2.0)?;

    let mut l_vw: Option<ValueId> = None;
    let mut l_bias: Option<ValueId> = None;
    for d in domains {
        let yl = tape.leaf(d.y.clone())?;
        let lv = vw_logits(tape, bank, d.z)?;
        let mv = tape.mul(yl, lv)?;
        let hv = tape.hinge(mv)?;
        let sv = tape.sum(hv)?;
        l_vw = Some(match l_vw {
            None => sv,
            Some(acc) => tape.add(acc, sv)?,
        });

        let lb = bias_logits(tape, bank, d.domain, d.z)?;
        let mb = tape.mul(yl, lb)?;
        let hb = tape.hinge(mb)?;
        let sb = tape.sum(hb)?;
        l_bias = Some(match l_bias {
            None => sb,
            Some(acc) => tape.add(acc, sb)?,
        });
    }
    let l_vw = l_vw.unwrap();
    let l_bias = l_bias.unwrap();
    let c1term = tape.scale(l_vw, weights.c1)?;
    let c2term = tape.scale(l_bias, weights.c2)?;
    let mut total = tape.add(r_wvw, r_delta)?;
    total = tape.add(total, c1term)?;
    total = tape.add(total, c2term)?;
    Ok(SvmParts { total, l_vw, l_bias, r_wvw, r_delta })
}

/// Components of the bias-regularized objective, each a scalar tape node.
pub struct BiasRegParts {
    /// Combined scalar objective.
    pub total: ValueId,
    /// Domain-weighted visual-world CE (unscaled by C1).
    pub l_vw: ValueId,
    /// Domain-weighted bias-head CE (unscaled by C2).
    pub l_bias: ValueId,
    /// `||w_vw||^2`.
    pub r_wvw: ValueId,
    /// `lambda * sum_i ||delta_i||^2`.
    pub r_delta: ValueId,
    /// `gamma * sum_i ||alpha_i - 1||^2`.
    pub r_alpha: ValueId,
}

/// The bias-regularized cross-entropy objective:
///
/// `||w_vw||^2 + sum_i (lambda ||delta_i||^2 + gamma ||alpha_i - 1||^2)
///  + C1 L_y(w_vw z, y) + C2 L_y(w_i z, y)`
///
/// with the label terms averaged within each domain batch and domains
/// combined per `weighting` (the raw printed double sums would let the
/// largest dataset dominate).
pub fn bias_reg_objective(
    tape: &mut Tape,
    bank: &BankOnTape,
    domains: &[DomainTerm],
    weights: &LossWeights,
    mode: TaskMode,
    weighting: DomainWeighting,
) -> Result<BiasRegParts> {
    if domains.is_empty() {
        return Err(Error::Config("bias objective needs at least one domain".into()));
    }
    for d in domains {
        if d.domain >= bank.n_domains() {
            return Err(Error::OutOfRange { what: "domain", index: d.domain, len: bank.n_domains() });
        }
    }
    let sizes: Vec<usize> = domains.iter().map(|d| d.y.rows()).collect();
    if sizes.iter().any(|&s| s == 0) {
        return Err(Error::Config("empty per-domain batch".into()));
    }
    let dw = domain_weights(&sizes, weighting);

    let r_wvw = tape.sum_sq(bank.w_vw)?;
    let mut r_delta: Option<ValueId> = None;
    let mut r_alpha: Option<ValueId> = None;
    let one = tape.leaf(Tensor::scalar(1.0))?;
    for i in 0..bank.n_domains() {
        let dn = tape.sum_sq(bank.deltas[i])?;
        r_delta = Some(match r_delta {
            None => dn,
            Some(acc) => tape.add(acc, dn)?,
        });
        let am1 = tape.sub(bank.alphas[i], one)?;
        let an = tape.sum_sq(am1)?;
        r_alpha = Some(match r_alpha {
            None => an,
            Some(acc) => tape.add(acc, an)?,
        });
    }
    let r_delta = tape.scale(r_delta.unwrap(), weights.lambda)?;
    let r_alpha = tape.scale(r_alpha.unwrap(), weights.gamma)?;

    let mut l_vw: Option<ValueId> = None;
    let mut l_bias: Option<ValueId> = None;
    for (i, d) in domains.iter().enumerate() {
        let lv_logits = vw_logits(tape, bank, d.z)?;
        let lv = task_loss(tape, lv_logits, d.y, mode)?;
        let lv_w = tape.scale(lv, dw[i])?;
        l_vw = Some(match l_vw {
            None => lv_w,
            Some(acc) => tape.add(acc, lv_w)?,
        });

        let lb_logits = bias_logits(tape, bank, d.domain, d.z)?;
        let lb = task_loss(tape, lb_logits, d.y, mode)?;
        let lb_w = tape.scale(lb, dw[i])?;
        l_bias = Some(match l_bias {
            None => lb_w,
            Some(acc) => tape.add(acc, lb_w)?,
        });
    }
    let l_vw = l_vw.unwrap();
    let l_bias = l_bias.unwrap();

    let c1term = tape.scale(l_vw, weights.c1)?;
    let c2term = tape.scale(l_bias, weights.c2)?;
    let mut total = tape.add(r_wvw, r_delta)?;
    total = tape.add(total, r_alpha)?;
    total = tape.add(total, c1term)?;
    total = tape.add(total, c2term)?;

    Ok(BiasRegParts { total, l_vw, l_bias, r_wvw, r_delta, r_alpha })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::BiasHeadBank;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn uniform_softmax_ce_is_ln2() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(vec![4, 2])).unwrap();
        let y = Tensor::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
        ])
        .unwrap();
        let l = task_loss(&mut tape, logits, &y, TaskMode::SoftmaxCe).unwrap();
        assert!((tape.value(l).item() - LN2).abs() < 1e-12);
    }

    #[test]
    fn bce_five_labels_uniform() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(vec![3, 5])).unwrap();
        let y = Tensor::new(vec![3, 5], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let l = task_loss(&mut tape, logits, &y, TaskMode::MultilabelBce).unwrap();
        // sigmoid(0) = 0.5 -> each label contributes ln 2; 5 labels per sample
        assert!((tape.value(l).item() - 5.0 * LN2).abs() < 1e-12);
    }

    #[test]
    fn label_outside_domain_rejected() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(vec![1, 2])).unwrap();
        let y = Tensor::from_rows(&[vec![2.0, -1.0]]).unwrap();
        assert!(matches!(
            task_loss(&mut tape, logits, &y, TaskMode::SoftmaxCe),
            Err(Error::InvalidLabel(_))
        ));
        let y2 = Tensor::from_rows(&[vec![1.5, 0.0]]).unwrap();
        assert!(matches!(
            task_loss(&mut tape, logits, &y2, TaskMode::MultilabelBce),
            Err(Error::InvalidLabel(_))
        ));
    }

    fn zero_bank(n_domains: usize) -> BiasHeadBank {
        BiasHeadBank {
            w_vw: Tensor::zeros(vec![3, 1]),
            alphas: vec![Tensor::ones(vec![3, 1]); n_domains],
            deltas: vec![Tensor::zeros(vec![3, 1]); n_domains],
            alpha_scales_intercept: true,
        }
    }

    #[test]
    fn svm_all_zero_weights() {
        // all weights zero -> every hinge term is exactly 1
        let bank = zero_bank(2);
        let mut tape = Tape::new();
        let reg = bank.register(&mut tape).unwrap();
        let z1 = tape.leaf(Tensor::from_rows(&[vec![0.5, 1.0], vec![-1.0, 2.0]]).unwrap()).unwrap();
        let z2 = tape.leaf(Tensor::from_rows(&[vec![0.0, 0.3]]).unwrap()).unwrap();
        let y1 = Tensor::from_rows(&[vec![1.0], vec![-1.0]]).unwrap();
        let y2 = Tensor::from_rows(&[vec![-1.0]]).unwrap();
        let w = LossWeights { c1: 2.0, c2: 3.0, c3: 0.0, lambda: 0.7, gamma: 0.0 };
        let obj = svm_objective(
            &mut tape,
            &reg,
            &[DomainTerm { domain: 0, z: z1, y: &y1 }, DomainTerm { domain: 1, z: z2, y: &y2 }],
            &w,
        )
        .unwrap();
        // (C1 + C2) * 3 samples
        assert!((tape.value(obj.total).item() - 15.0).abs() < 1e-12);
        assert_eq!(tape.value(obj.l_vw).item(), 3.0);
        assert_eq!(tape.value(obj.l_bias).item(), 3.0);
    }

    #[test]
    fn svm_margin_satisfied_term_zero() {
        // y = 1 and w_vw z = 2 -> that hinge term is 0
        let mut bank = zero_bank(1);
        bank.w_vw = Tensor::from_rows(&[vec![2.0], vec![0.0], vec![0.0]]).unwrap();
        let mut tape = Tape::new();
        let reg = bank.register(&mut tape).unwrap();
        let z = tape.leaf(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap()).unwrap();
        let y = Tensor::from_rows(&[vec![1.0]]).unwrap();
        let w = LossWeights { c1: 1.0, c2: 0.0, c3: 0.0, lambda: 0.0, gamma: 0.0 };
        let obj = svm_objective(&mut tape, &reg, &[DomainTerm { domain: 0, z, y: &y }], &w).unwrap();
        // only the 1/2||w_vw||^2 = 2 term remains
        assert!((tape.value(obj.total).item() - 2.0).abs() < 1e-12);
        assert_eq!(tape.value(obj.l_vw).item(), 0.0);
    }

    #[test]
    fn svm_rejects_bad_labels() {
        let bank = zero_bank(1);
        let mut tape = Tape::new();
        let reg = bank.register(&mut tape).unwrap();
        let z = tape.leaf(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap()).unwrap();
        let y = Tensor::from_rows(&[vec![0.0]]).unwrap();
        let w = LossWeights::default();
        assert!(matches!(
            svm_objective(&mut tape, &reg, &[DomainTerm { domain: 0, z, y: &y }], &w),
            Err(Error::InvalidLabel(_))
        ));
    }

    #[test]
    fn bias_reg_uniform_prediction() {
        // all parameters zero, gamma = 0: regularizers vanish and the CE
        // terms are (C1 + C2) * ln 2 under equal domain weighting
        let mut bank = zero_bank(2);
        bank.alphas = vec![Tensor::zeros(vec![3, 1]); 2]; // alpha 0 + wvw 0 -> logits 0
        let mut tape = Tape::new();
        let reg = bank.register(&mut tape).unwrap();
        let z1 = tape.leaf(Tensor::from_rows(&[vec![0.5, 1.0], vec![-1.0, 2.0]]).unwrap()).unwrap();
        let z2 = tape.leaf(Tensor::from_rows(&[vec![0.0, 0.3]]).unwrap()).unwrap();
        // single-label binary via bce on one logit column would not be ln 2;
        // use multilabel with 1 label: -log sigmoid(0) = ln 2 per sample.
        let y1 = Tensor::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        let y2 = Tensor::from_rows(&[vec![1.0]]).unwrap();
        let w = LossWeights { c1: 2.0, c2: 3.0, c3: 0.0, lambda: 0.5, gamma: 0.0 };
        let parts = bias_reg_objective(
            &mut tape,
            &reg,
            &[DomainTerm { domain: 0, z: z1, y: &y1 }, DomainTerm { domain: 1, z: z2, y: &y2 }],
            &w,
            TaskMode::MultilabelBce,
            DomainWeighting::Equal,
        )
        .unwrap();
        assert!((tape.value(parts.total).item() - 5.0 * LN2).abs() < 1e-12);
        assert!((tape.value(parts.l_vw).item() - LN2).abs() < 1e-12);
        assert!(tape.value(parts.r_wvw).item() == 0.0);
    }

    #[test]
    fn bias_reg_reduces_to_regularized_erm() {
        // alpha = 1, delta = 0, lambda = gamma = 0, C2 = 0 ->
        // ||w_vw||^2 + C1 * plain task loss (proportional weighting pools
        // the domain means back into the overall mean)
        let mut bank = zero_bank(2);
        bank.w_vw = Tensor::from_rows(&[vec![0.3], vec![-0.2], vec![0.1]]).unwrap();
        let z1v = Tensor::from_rows(&[vec![0.5, 1.0], vec![-1.0, 2.0]]).unwrap();
        let z2v = Tensor::from_rows(&[vec![0.0, 0.3]]).unwrap();
        let y1 = Tensor::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        let y2 = Tensor::from_rows(&[vec![1.0]]).unwrap();
        let w = LossWeights { c1: 1.7, c2: 0.0, c3: 0.0, lambda: 0.0, gamma: 0.0 };

        let mut tape = Tape::new();
        let reg = bank.register(&mut tape).unwrap();
        let z1 = tape.leaf(z1v.clone()).unwrap();
        let z2 = tape.leaf(z2v.clone()).unwrap();
        let parts = bias_reg_objective(
            &mut tape,
            &reg,
            &[DomainTerm { domain: 0, z: z1, y: &y1 }, DomainTerm { domain: 1, z: z2, y: &y2 }],
            &w,
            TaskMode::MultilabelBce,
            DomainWeighting::Proportional,
        )
        .unwrap();

        // independent recomputation: pooled task loss
        let mut tape2 = Tape::new();
        let reg2 = bank.register(&mut tape2).unwrap();
        let zall = tape2
            .leaf(Tensor::from_rows(&[vec![0.5, 1.0], vec![-1.0, 2.0], vec![0.0, 0.3]]).unwrap())
            .unwrap();
        let yall = Tensor::from_rows(&[vec![1.0], vec![0.0], vec![1.0]]).unwrap();
        let logits = vw_logits(&mut tape2, &reg2, zall).unwrap();
        let plain = task_loss(&mut tape2, logits, &yall, TaskMode::MultilabelBce).unwrap();
        let wnorm: f64 = bank.w_vw.data().iter().map(|v| v * v).sum();
        let expected = wnorm + 1.7 * tape2.value(plain).item();
        assert!((tape.value(parts.total).item() - expected).abs() < 1e-10);
    }

    #[test]
    fn delta_gradient_includes_penalty_term() {
        // gradient of the objective wrt delta_i carries 2*lambda*delta_i
        let mut bank = zero_bank(1);
        bank.deltas[0] = Tensor::from_rows(&[vec![0.5], vec![-1.5], vec![2.0]]).unwrap();
        let lambda = 0.8;
        let w = LossWeights { c1: 0.0, c2: 0.0, c3: 0.0, lambda, gamma: 0.0 };
        let mut tape = Tape::new();
        let reg = bank.register(&mut tape).unwrap();
        let z = tape.leaf(Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap()).unwrap();
        let y = Tensor::from_rows(&[vec![1.0]]).unwrap();
        let parts = bias_reg_objective(
            &mut tape,
            &reg,
            &[DomainTerm { domain: 0, z, y: &y }],
            &w,
            TaskMode::MultilabelBce,
            DomainWeighting::Equal,
        )
        .unwrap();
        let g = tape.backward(parts.total).unwrap();
        let gd = g.wrt(reg.deltas[0]).unwrap();
        for (gv, dv) in gd.iter().zip(bank.deltas[0].data().iter()) {
            assert!((gv - 2.0 * lambda * dv).abs() < 1e-12);
        }
    }
}
