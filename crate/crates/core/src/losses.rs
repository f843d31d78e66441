//! Loss terms and their composition.
//!
//! Every per-sample loss is reduced by the batch mean, and every loss that
//! reads student probabilities returns its derivative with respect to the
//! student's logits so it can be fed straight into
//! [`NetworkArch::backward`](crate::nn::NetworkArch::backward).

use alloc::format;

use crate::buffer::entropy_unchecked;
use crate::math::Matrix;
use crate::{safe_ln, Error, Result};

/// A batch-mean loss value and `dL/dlogits`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub logits: Matrix,
}

impl LossGrad {
    pub fn zero(rows: usize, classes: usize) -> Self {
        Self {
            value: 0.0,
            logits: Matrix::zeros(rows, classes),
        }
    }
}

const SUM_TOLERANCE: f64 = 1e-6;

pub(crate) fn check_prob_rows(m: &Matrix, what: &str) -> Result<()> {
    for (i, row) in m.iter_rows().enumerate() {
        if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::Input(format!(
                "{what} row {i} has a negative or non-finite entry"
            )));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::Input(format!("{what} row {i} sums to {s}")));
        }
    }
    Ok(())
}

/// Symmetric cross-entropy between teacher `q` (constant) and student `p`:
/// `-sum q ln p - sum p ln q`, averaged over rows.
pub fn self_training_loss(teacher: &Matrix, student: &Matrix) -> Result<LossGrad> {
    if teacher.rows() != student.rows() || teacher.cols() != student.cols() {
        return Err(Error::dim(
            "self_training_loss",
            teacher.rows() * teacher.cols(),
            student.rows() * student.cols(),
        ));
    }
    check_prob_rows(teacher, "teacher probabilities")?;
    check_prob_rows(student, "student probabilities")?;
    let n = student.rows();
    if n == 0 {
        return Ok(LossGrad::zero(0, student.cols()));
    }
    let inv_n = 1.0 / n as f64;
    let mut grad = Matrix::zeros(n, student.cols());
    let mut total = 0.0;
    for i in 0..n {
        let q = teacher.row(i);
        let p = student.row(i);
        let mut forward = 0.0;
        let mut reverse = 0.0;
        for (&qc, &pc) in q.iter().zip(p) {
            forward -= qc * safe_ln(pc);
            reverse -= pc * safe_ln(qc);
        }
        total += forward + reverse;
        // d(-sum q ln p)/dz = p - q
        // d(-sum p ln q)/dz_j = p_j (a_j - sum_c p_c a_c), a = -ln q
        let g = grad.row_mut(i);
        for (j, gj) in g.iter_mut().enumerate() {
            let a_j = -safe_ln(q[j]);
            *gj = (p[j] - q[j] + p[j] * (a_j - reverse)) * inv_n;
        }
    }
    Ok(LossGrad {
        value: total * inv_n,
        logits: grad,
    })
}

/// Cross-entropy of student probabilities against hard pseudo-labels,
/// averaged over rows.
pub fn replay_loss(labels: &[usize], student: &Matrix) -> Result<LossGrad> {
    if labels.len() != student.rows() {
        return Err(Error::dim("replay_loss", labels.len(), student.rows()));
    }
    check_prob_rows(student, "student probabilities")?;
    let classes = student.cols();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Input(format!(
            "pseudo-label {bad} out of range for {classes} classes"
        )));
    }
    let n = labels.len();
    if n == 0 {
        return Ok(LossGrad::zero(0, classes));
    }
    let inv_n = 1.0 / n as f64;
    let mut grad = Matrix::zeros(n, classes);
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let p = student.row(i);
        total -= safe_ln(p[y]);
        let g = grad.row_mut(i);
        for (j, gj) in g.iter_mut().enumerate() {
            let onehot = if j == y { 1.0 } else { 0.0 };
            *gj = (p[j] - onehot) * inv_n;
        }
    }
    Ok(LossGrad {
        value: total * inv_n,
        logits: grad,
    })
}

/// Mean prediction entropy of the student; the objective of the
/// entropy-minimisation baseline.
pub fn entropy_min_loss(student: &Matrix) -> Result<LossGrad> {
    check_prob_rows(student, "student probabilities")?;
    let n = student.rows();
    if n == 0 {
        return Ok(LossGrad::zero(0, student.cols()));
    }
    let inv_n = 1.0 / n as f64;
    let mut grad = Matrix::zeros(n, student.cols());
    let mut total = 0.0;
    for i in 0..n {
        let p = student.row(i);
        let h = entropy_unchecked(p);
        total += h;
        // dH/dz_j = -p_j (ln p_j + H)
        for (gj, &pj) in grad.row_mut(i).iter_mut().zip(p) {
            *gj = -pj * (safe_ln(pj) + h) * inv_n;
        }
    }
    Ok(LossGrad {
        value: total * inv_n,
        logits: grad,
    })
}

/// The components of the total objective, kept for metrics.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub self_training: f64,
    pub replay: f64,
    pub relation: f64,
    pub lambda_relation: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.self_training.is_finite() && self.replay.is_finite() && self.relation.is_finite() && self.total.is_finite()
    }
}

/// `L_T = L_ST + L_PCE + lambda * L_CRP`. Callers pass `replay = 0` when the
/// buffer produced no replay batch and `relation = 0` when no target graph
/// could be estimated.
pub fn total_loss(self_training: f64, replay: f64, relation: f64, lambda_relation: f64) -> LossBreakdown {
    LossBreakdown {
        self_training,
        replay,
        relation,
        lambda_relation,
        total: self_training + replay + lambda_relation * relation,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::softmax;
    use alloc::vec::Vec;

    fn rows(data: &[&[f64]]) -> Matrix {
        Matrix::from_rows(data[0].len(), data.iter().copied()).unwrap()
    }

    #[test]
    fn self_training_worked_values() {
        let u = rows(&[&[0.5, 0.5]]);
        let l = self_training_loss(&u, &u).unwrap();
        assert!((l.value - 2.0 * core::f64::consts::LN_2).abs() < 1e-12);

        let q = rows(&[&[0.9, 0.1]]);
        let p = rows(&[&[0.6, 0.4]]);
        // -(0.9 ln .6 + .1 ln .4) - (.6 ln .9 + .4 ln .1)
        let l = self_training_loss(&q, &p).unwrap();
        assert!((l.value - 1.535_622_481_169_121).abs() < 1e-12, "{}", l.value);
    }

    #[test]
    fn self_training_near_one_hot_is_small() {
        let e = 1e-12;
        let a = rows(&[&[1.0 - e, e]]);
        let l = self_training_loss(&a, &a).unwrap();
        assert!(l.value < 1e-9, "{}", l.value);
    }

    #[test]
    fn self_training_value_is_symmetric() {
        let q = rows(&[&[0.7, 0.2, 0.1], &[0.1, 0.1, 0.8]]);
        let p = rows(&[&[0.3, 0.3, 0.4], &[0.5, 0.25, 0.25]]);
        let a = self_training_loss(&q, &p).unwrap().value;
        let b = self_training_loss(&p, &q).unwrap().value;
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn self_training_rejects_non_probability() {
        let q = rows(&[&[0.7, 0.7]]);
        assert!(matches!(self_training_loss(&q, &q), Err(Error::Input(_))));
        let neg = rows(&[&[1.5, -0.5]]);
        assert!(self_training_loss(&neg, &neg).is_err());
    }

    #[test]
    fn replay_worked_values() {
        let p = rows(&[&[0.2, 0.5, 0.3]]);
        let l = replay_loss(&[1], &p).unwrap();
        assert!((l.value - 0.693_147).abs() < 1e-6);

        let uniform = rows(&[&[0.1; 10]]);
        let l = replay_loss(&[7], &uniform).unwrap();
        assert!((l.value - libm::log(10.0)).abs() < 1e-12);

        let e = 1e-9;
        let sure = rows(&[&[e, 1.0 - 2.0 * e, e]]);
        assert!(replay_loss(&[1], &sure).unwrap().value < 1e-8);
    }

    #[test]
    fn replay_gradient_is_softmax_minus_onehot() {
        let logits: [&[f64]; 2] = [&[0.3, -1.0, 2.0], &[1.0, 1.0, -0.5]];
        let probs: Vec<Vec<f64>> = logits.iter().map(|z| softmax(z)).collect();
        let p = Matrix::from_rows(3, probs.iter().map(|r| r.as_slice())).unwrap();
        let l = replay_loss(&[2, 0], &p).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                let y = [2, 0][i];
                let expected = (p.get(i, j) - if j == y { 1.0 } else { 0.0 }) / 2.0;
                assert_eq!(l.logits.get(i, j), expected);
            }
        }
    }

    #[test]
    fn replay_rejects_bad_label() {
        let p = rows(&[&[0.5, 0.5]]);
        assert!(replay_loss(&[2], &p).is_err());
    }

    #[test]
    fn entropy_min_values() {
        let u = rows(&[&[0.2; 5], &[0.2; 5]]);
        assert!((entropy_min_loss(&u).unwrap().value - libm::log(5.0)).abs() < 1e-12);
        let sure = rows(&[&[1.0, 0.0, 0.0]]);
        assert!(entropy_min_loss(&sure).unwrap().value.abs() < 1e-9);
    }

    #[test]
    fn total_loss_composition() {
        let b = total_loss(0.5, 0.3, -0.9, 200.0);
        assert!((b.total + 179.2).abs() < 1e-10);
        let b = total_loss(0.5, 0.3, -0.9, 0.0);
        assert_eq!(b.total, 0.8);
        let b = total_loss(0.42, 0.0, 0.0, 200.0);
        assert_eq!(b.total, 0.42);
    }

    #[test]
    fn concatenated_batch_is_weighted_mean() {
        let q = rows(&[&[0.7, 0.2, 0.1], &[0.1, 0.1, 0.8], &[0.3, 0.3, 0.4]]);
        let p = rows(&[&[0.3, 0.3, 0.4], &[0.5, 0.25, 0.25], &[0.6, 0.2, 0.2]]);
        let all = self_training_loss(&q, &p).unwrap().value;
        let q1 = rows(&[q.row(0)]);
        let p1 = rows(&[p.row(0)]);
        let q2 = rows(&[q.row(1), q.row(2)]);
        let p2 = rows(&[p.row(1), p.row(2)]);
        let a = self_training_loss(&q1, &p1).unwrap().value;
        let b = self_training_loss(&q2, &p2).unwrap().value;
        assert!((all - (a + 2.0 * b) / 3.0).abs() < 1e-14);
    }
}
