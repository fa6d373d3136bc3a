//! Training losses for the translator, the discriminator and the task learner.
//!
//! Tape versions build differentiable graphs; the `*_scores` helpers evaluate
//! the adversarial losses directly on probabilities.

use serde::{Deserialize, Serialize};

use crate::dataio::TaskType;
use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};
use crate::tensor::{Mat, Segments, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the knowledge-aware contrastive term.
    pub lambda_know: f64,
    /// Weight of the task-feedback term.
    pub lambda_feed: f64,
    pub temperature: f64,
    /// 1-based GNN layer whose states are matched by the feedback term.
    pub feed_layer: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_know: 1.0,
            lambda_feed: 0.1,
            temperature: 0.5,
            feed_layer: 3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self, depth: usize) -> Result<()> {
        if !(self.lambda_know >= 0.0 && self.lambda_feed >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.feed_layer == 0 || self.feed_layer > depth {
            return Err(Error::Config(format!(
                "feedback layer {} not in 1..={depth}",
                self.feed_layer
            )));
        }
        Ok(())
    }
}

/// Mean next-token cross-entropy over non-padding targets.
pub fn loss_trans<T: Scalar>(tape: &mut Tape<T>, logits: Var, targets: &[usize], pad: usize) -> Var {
    tape.softmax_cross_entropy(logits, targets, Some(pad))
}

/// Supervised-contrastive loss over L2-normalized rows of `z`.
///
/// `positives[i]` lists batch positions (other than `i`) that are positives of
/// row `i`; rows without positives are skipped.
pub fn loss_know<T: Scalar>(
    tape: &mut Tape<T>,
    z: Var,
    positives: Vec<Vec<usize>>,
    temperature: f64,
) -> Result<Var> {
    let zn = tape.row_normalize(z);
    let zt = tape.transpose(zn);
    let sim = tape.matmul(zn, zt);
    let sim = tape.scale(sim, c(1.0 / temperature));
    tape.supcon(sim, positives)
}

/// Mean over graphs of `1 - cos(mean-pooled encoder states, mean-pooled task states)`.
/// The task states enter as constants.
pub fn loss_feed<T: Scalar>(
    tape: &mut Tape<T>,
    enc_states: Var,
    task_pooled: &Mat<T>,
    segments: &Segments,
) -> Result<Var> {
    let width = tape.shape(enc_states).1;
    if width != task_pooled.ncols() {
        return Err(Error::WidthMismatch {
            left: width,
            right: task_pooled.ncols(),
        });
    }
    let g_enc = tape.segment_mean(enc_states, segments);
    feed_from_pooled(tape, g_enc, task_pooled)
}

/// Cosine-distance part of [`loss_feed`] on already pooled encoder rows.
pub fn feed_from_pooled<T: Scalar>(tape: &mut Tape<T>, g_enc: Var, task_pooled: &Mat<T>) -> Result<Var> {
    let (rows, width) = tape.shape(g_enc);
    if width != task_pooled.ncols() || rows != task_pooled.nrows() {
        return Err(Error::WidthMismatch {
            left: width,
            right: task_pooled.ncols(),
        });
    }
    let a = tape.row_normalize(g_enc);
    let b = tape.constant(task_pooled.clone());
    let b = tape.row_normalize(b);
    let prod = tape.mul(a, b);
    let cos = tape.row_sum(prod);
    let mean_cos = tape.mean_all(cos);
    Ok(tape.affine(mean_cos, -T::one(), T::one()))
}

/// `-mean log D(labeled) - mean log(1 - D(unlabeled))`, on discriminator logits.
pub fn loss_disc<T: Scalar>(tape: &mut Tape<T>, logits_labeled: Var, logits_unlabeled: Var) -> Var {
    let a = tape.log_sigmoid(logits_labeled);
    let a = tape.mean_all(a);
    let neg = tape.scale(logits_unlabeled, -T::one());
    let b = tape.log_sigmoid(neg);
    let b = tape.mean_all(b);
    let s = tape.add(a, b);
    tape.scale(s, -T::one())
}

/// `-mean log D(labeled) - mean log D(unlabeled)`, on discriminator logits.
pub fn loss_adv<T: Scalar>(tape: &mut Tape<T>, logits_labeled: Var, logits_unlabeled: Var) -> Var {
    let a = tape.log_sigmoid(logits_labeled);
    let a = tape.mean_all(a);
    let b = tape.log_sigmoid(logits_unlabeled);
    let b = tape.mean_all(b);
    let s = tape.add(a, b);
    tape.scale(s, -T::one())
}

fn mean_ln(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x.ln()).sum::<f64>() / xs.len() as f64
}

/// Discriminator loss on scores in `(0, 1)`.
pub fn loss_disc_scores(labeled: &[f64], unlabeled: &[f64]) -> f64 {
    let inv: Vec<f64> = unlabeled.iter().map(|s| 1.0 - s).collect();
    -mean_ln(labeled) - mean_ln(&inv)
}

/// Adversarial translator loss on scores in `(0, 1)`.
pub fn loss_adv_scores(labeled: &[f64], unlabeled: &[f64]) -> f64 {
    -mean_ln(labeled) - mean_ln(unlabeled)
}

/// Components of the translator objective; absent optional terms count as zero.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub trans: Var,
    pub adv: Option<Var>,
    pub know: Option<Var>,
    pub feed: Option<Var>,
}

/// `trans + adv + lambda_know * know + lambda_feed * feed`.
pub fn loss_full<T: Scalar>(tape: &mut Tape<T>, parts: LossParts, weights: &LossWeights) -> Result<Var> {
    let named = [
        ("translation", Some(parts.trans)),
        ("adversarial", parts.adv),
        ("knowledge", parts.know),
        ("feedback", parts.feed),
    ];
    for (name, part) in named {
        if let Some(v) = part {
            let value = tape.scalar(v).to_f64_lossy();
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    value,
                    context: format!("{name} loss"),
                });
            }
        }
    }
    let mut total = parts.trans;
    if let Some(adv) = parts.adv {
        total = tape.add(total, adv);
    }
    for (part, w) in [
        (parts.know, weights.lambda_know),
        (parts.feed, weights.lambda_feed),
    ] {
        if let Some(p) = part {
            if w != 0.0 {
                let scaled = tape.scale(p, c(w));
                total = tape.add(total, scaled);
            }
        }
    }
    Ok(total)
}

/// Per-label binary cross-entropy on logits (classification) or MSE (regression).
pub fn task_loss<T: Scalar>(tape: &mut Tape<T>, predictions: Var, labels: Mat<T>, task: TaskType) -> Var {
    if task.is_classification() {
        tape.bce_with_logits(predictions, labels)
    } else {
        tape.mse(predictions, labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn trans_closed_forms() {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Mat::zeros((3, 7)));
        let loss = loss_trans(&mut tape, l, &[4, 5, 6], 0);
        assert!((tape.scalar(loss) - 7f64.ln()).abs() < 1e-12);
        let mut peaked = Mat::from_elem((2, 5), -1e3);
        peaked[[0, 2]] = 0.0;
        peaked[[1, 4]] = 0.0;
        let l = tape.constant(peaked);
        let loss = loss_trans(&mut tape, l, &[2, 4], 0);
        assert!(tape.scalar(loss).abs() < 1e-12);
        // padding rows are ignored
        let l = tape.constant(Mat::zeros((2, 5)));
        let loss = loss_trans(&mut tape, l, &[3, 0], 0);
        assert!((tape.scalar(loss) - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn trans_matches_per_position_oracle() {
        let logits = array![[0.3, -1.2, 2.0, 0.1], [1.5, 0.2, -0.7, 0.0], [0.0, 0.9, 0.4, -2.0]];
        let targets = [2, 0, 3];
        let mut want = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let z: f64 = logits.row(r).iter().map(|x: &f64| x.exp()).sum();
            want += -(logits[[r, t]].exp() / z).ln();
        }
        want /= 3.0;
        let mut tape = Tape::new();
        let l = tape.constant(logits);
        let loss = loss_trans(&mut tape, l, &targets, 99);
        assert!((tape.scalar(loss) - want).abs() < 1e-12);
    }

    #[test]
    fn know_closed_forms() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(array![[1.0, 0.0], [2.0, 0.0]]);
        let loss = loss_know(&mut tape, z, vec![vec![1], vec![0]], 0.5).unwrap();
        assert!(tape.scalar(loss).abs() < 1e-12);
        // anchor, identical positive, orthogonal negative; only the anchor row counts
        let z = tape.constant(array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        let loss = loss_know(&mut tape, z, vec![vec![1], vec![], vec![]], 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((tape.scalar(loss) + (e / (e + 1.0)).ln()).abs() < 1e-12);
        let z = tape.constant(array![[1.0, 0.0], [0.0, 1.0]]);
        assert!(matches!(
            loss_know(&mut tape, z, vec![vec![], vec![]], 1.0),
            Err(Error::DegenerateBatch)
        ));
    }

    #[test]
    fn know_step_pulls_positives_together() {
        let z0 = array![[1.0, 0.2], [0.1, 1.0], [-0.8, 0.3]];
        let cos01 = |z: &Mat<f64>| {
            let a = z.row(0);
            let b = z.row(1);
            a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt())
        };
        let mut tape = Tape::new();
        let z = tape.input(z0.clone());
        let loss = loss_know(&mut tape, z, vec![vec![1], vec![0], vec![]], 0.5).unwrap();
        let g = tape.backward(loss).wrt(z).unwrap().clone();
        let z1 = &z0 - &(g * 0.1);
        assert!(cos01(&z1) > cos01(&z0));
    }

    #[test]
    fn know_is_rotation_invariant() {
        let z = array![[1.0, 0.2, 0.0], [0.1, 1.0, -0.4], [-0.8, 0.3, 0.5], [0.2, 0.2, 0.9]];
        let (s, co) = (0.6f64.sin(), 0.6f64.cos());
        let rot = array![[co, -s, 0.0], [s, co, 0.0], [0.0, 0.0, 1.0]];
        let pos = vec![vec![1], vec![0, 3], vec![], vec![1]];
        let mut tape = Tape::new();
        let a = tape.constant(z.clone());
        let la = loss_know(&mut tape, a, pos.clone(), 0.5).unwrap();
        let b = tape.constant(z.dot(&rot));
        let lb = loss_know(&mut tape, b, pos, 0.5).unwrap();
        assert!((tape.scalar(la) - tape.scalar(lb)).abs() < 1e-12);
    }

    #[test]
    fn feed_cosine_cases() {
        let segs = Segments::from_lengths([1]);
        for (task, want) in [
            (array![[2.0, 0.0]], 0.0),
            (array![[0.0, 3.0]], 1.0),
            (array![[-1.0, 0.0]], 2.0),
        ] {
            let mut tape = Tape::<f64>::new();
            let enc = tape.constant(array![[1.0, 0.0]]);
            let l = loss_feed(&mut tape, enc, &task, &segs).unwrap();
            assert!((tape.scalar(l) - want).abs() < 1e-9);
        }
        let mut tape = Tape::<f64>::new();
        let enc = tape.constant(array![[1.0, 0.0]]);
        assert!(matches!(
            loss_feed(&mut tape, enc, &array![[1.0, 0.0, 0.0]], &segs),
            Err(Error::WidthMismatch { .. })
        ));
    }

    #[test]
    fn adversarial_closed_forms() {
        assert!((loss_disc_scores(&[0.5; 4], &[0.5; 3]) - 2.0 * LN2).abs() < 1e-12);
        assert!((loss_adv_scores(&[0.5; 4], &[0.5; 3]) - 2.0 * LN2).abs() < 1e-12);
        let near = loss_disc_scores(&[1.0 - 1e-12], &[1e-12]);
        assert!(near < 1e-10);
        assert!(loss_disc_scores(&[1e-12], &[1.0 - 1e-12]) > near);
        assert!(loss_adv_scores(&[1.0 - 1e-12], &[1.0 - 1e-12]) < 1e-10);
        let mut prev = f64::INFINITY;
        for s in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let v = loss_adv_scores(&[0.4], &[s]);
            assert!(v < prev);
            prev = v;
        }
        // tape versions agree with the score versions
        let ll = array![[0.3], [-1.0]];
        let lu = array![[2.0], [0.1], [-0.5]];
        let sig = |m: &Mat<f64>| m.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect::<Vec<_>>();
        let mut tape = Tape::new();
        let a = tape.constant(ll.clone());
        let b = tape.constant(lu.clone());
        let d = loss_disc(&mut tape, a, b);
        let v = loss_adv(&mut tape, a, b);
        assert!((tape.scalar(d) - loss_disc_scores(&sig(&ll), &sig(&lu))).abs() < 1e-12);
        assert!((tape.scalar(v) - loss_adv_scores(&sig(&ll), &sig(&lu))).abs() < 1e-12);
    }

    #[test]
    fn full_is_weighted_sum() {
        let w = LossWeights {
            lambda_know: 0.5,
            lambda_feed: 0.25,
            ..Default::default()
        };
        let mut tape = Tape::<f64>::new();
        let one = || Mat::from_elem((1, 1), 1.0);
        let parts = LossParts {
            trans: tape.constant(one()),
            adv: Some(tape.constant(one())),
            know: Some(tape.constant(one())),
            feed: Some(tape.constant(one())),
        };
        let l = loss_full(&mut tape, parts, &w).unwrap();
        assert_eq!(tape.scalar(l), 2.75);
        let zero = LossWeights {
            lambda_know: 0.0,
            lambda_feed: 0.0,
            ..w
        };
        let l = loss_full(&mut tape, parts, &zero).unwrap();
        assert_eq!(tape.scalar(l), 2.0);
        let bad = LossParts {
            know: Some(tape.constant(Mat::from_elem((1, 1), f64::NAN))),
            ..parts
        };
        assert!(matches!(loss_full(&mut tape, bad, &w), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn task_loss_cases() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(array![[1.0, 2.0], [3.0, -1.0]]);
        let l = task_loss(&mut tape, p, array![[1.0, 2.0], [3.0, -1.0]], TaskType::Regression);
        assert_eq!(tape.scalar(l), 0.0);
        let p = tape.constant(Mat::zeros((3, 4)));
        let labels = array![[0.0, 1.0, 1.0, 0.0], [1.0, 1.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0]];
        let l = task_loss(&mut tape, p, labels, TaskType::MultiLabelClassification);
        assert!((tape.scalar(l) - LN2).abs() < 1e-12);
        // straight-line BCE
        let logits: Mat<f64> = array![[0.3, -2.0], [1.1, 0.4]];
        let y = array![[1.0, 0.0], [0.0, 1.0]];
        let mut want = 0.0;
        for (x, t) in logits.iter().zip(&y) {
            let p: f64 = 1.0 / (1.0 + (-x).exp());
            want += -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
        }
        want /= 4.0;
        let p = tape.constant(logits);
        let l = task_loss(&mut tape, p, y, TaskType::MultiLabelClassification);
        assert!((tape.scalar(l) - want).abs() < 1e-12);
    }
}
