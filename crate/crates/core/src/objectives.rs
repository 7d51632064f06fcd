//! Loss terms of the joint objective: answer classification, question
//! generation, and the two smooth-L1 duality penalties.
//!
//! The plain functions here are the reference values. Training builds the
//! same quantities on a [`Tape`] with [`tape_sequence_loss`] and
//! [`tape_total`], and the two are compared in tests.

use serde::{Deserialize, Serialize};

use crate::autodiff::{log_sum_exp, smooth_l1_scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::Vector;

/// Mean over coordinates of `0.5 x²` for `|x| < 1`, else `|x| − 0.5`.
pub fn smooth_l1(x: &Vector) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|&v| smooth_l1_scalar(v)).sum::<f64>() / x.len() as f64
}

/// `−log softmax(scores)[target]`.
pub fn vqa_classification_loss(scores: &Vector, target: usize) -> Result<f64> {
    if target >= scores.len() {
        return Err(Error::InvalidArgument(format!(
            "target answer {target} out of range for {} classes",
            scores.len()
        )));
    }
    Ok(log_sum_exp(scores.as_slice()) - scores[target])
}

/// Mean per-token negative log-likelihood. `step_scores[i]` predicts
/// `targets[i]`; the targets end with `<end>`.
pub fn vqg_sequence_loss(step_scores: &[Vector], targets: &[usize]) -> Result<f64> {
    check_sequence(step_scores.len(), targets.len())?;
    let mut total = 0.0;
    for (s, &t) in step_scores.iter().zip(targets) {
        total += vqa_classification_loss(s, t)?;
    }
    Ok(total / targets.len() as f64)
}

fn check_sequence(steps: usize, targets: usize) -> Result<()> {
    if steps != targets {
        return Err(Error::shape(
            "vqg_sequence_loss",
            format!("{steps} step score vectors for {targets} targets"),
        ));
    }
    if targets == 0 {
        return Err(Error::InvalidArgument("empty target sequence".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub vqa: f64,
    pub vqg: f64,
    pub q_duality: f64,
    pub a_duality: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            vqa: 1.0,
            vqg: 1.0,
            q_duality: 1.0,
            a_duality: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.vqa, self.vqg, self.q_duality, self.a_duality];
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative: {self:?}")));
        }
        Ok(())
    }

    fn as_array(&self) -> [f64; 4] {
        [self.vqa, self.vqg, self.q_duality, self.a_duality]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub vqa_loss: f64,
    pub vqg_loss: f64,
    pub q_duality: f64,
    pub a_duality: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    pub fn from_terms(terms: [f64; 4], weights: LossWeights) -> Self {
        let total = terms.iter().zip(weights.as_array()).map(|(t, w)| t * w).sum();
        Self {
            vqa_loss: terms[0],
            vqg_loss: terms[1],
            q_duality: terms[2],
            a_duality: terms[3],
            total,
            weights,
        }
    }

    pub fn terms(&self) -> [f64; 4] {
        [self.vqa_loss, self.vqg_loss, self.q_duality, self.a_duality]
    }

    /// Elementwise mean of several breakdowns sharing the same weights.
    pub fn mean(items: &[LossBreakdown]) -> Option<LossBreakdown> {
        let first = items.first()?;
        let mut acc = [0.0; 4];
        for b in items {
            for (a, t) in acc.iter_mut().zip(b.terms()) {
                *a += t;
            }
        }
        let n = items.len() as f64;
        Some(LossBreakdown::from_terms(acc.map(|a| a / n), first.weights))
    }
}

/// Everything the joint objective needs from one example.
#[derive(Debug, Clone)]
pub struct ExampleOutputs {
    pub answer_scores: Vector,
    pub answer: usize,
    pub question_step_scores: Vec<Vector>,
    /// `w_1 … w_n <end>`.
    pub question_targets: Vec<usize>,
    /// Encoder-side question feature and its dual-fusion prediction.
    pub q_feature: Vector,
    pub q_predicted: Vector,
    /// Answer embedding feature and its fusion prediction.
    pub a_feature: Vector,
    pub a_predicted: Vector,
}

pub fn total_loss(out: &ExampleOutputs, weights: LossWeights) -> Result<LossBreakdown> {
    let vqa = vqa_classification_loss(&out.answer_scores, out.answer)?;
    let vqg = vqg_sequence_loss(&out.question_step_scores, &out.question_targets)?;
    let q = smooth_l1(&out.q_predicted.sub(&out.q_feature)?);
    let a = smooth_l1(&out.a_predicted.sub(&out.a_feature)?);
    Ok(LossBreakdown::from_terms([vqa, vqg, q, a], weights))
}

/// Mean cross-entropy of `logits[i]` against `targets[i]` on tape.
pub(crate) fn tape_sequence_loss(tape: &mut Tape, logits: &[Var], targets: &[usize]) -> Result<Var> {
    check_sequence(logits.len(), targets.len())?;
    let mut acc: Option<Var> = None;
    for (&l, &t) in logits.iter().zip(targets) {
        let ce = tape.cross_entropy(l, t)?;
        acc = Some(match acc {
            None => ce,
            Some(a) => tape.add(a, ce)?,
        });
    }
    let sum = acc.expect("nonempty");
    Ok(tape.scale(sum, 1.0 / targets.len() as f64))
}

/// `Σ w_i · term_i` on tape. Terms with zero weight stay out of the graph.
pub(crate) fn tape_total(tape: &mut Tape, terms: [Option<Var>; 4], weights: LossWeights) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (term, w) in terms.into_iter().zip(weights.as_array()) {
        let Some(term) = term else { continue };
        if w == 0.0 {
            continue;
        }
        let scaled = tape.scale(term, w);
        acc = Some(match acc {
            None => scaled,
            Some(a) => tape.add(a, scaled)?,
        });
    }
    acc.ok_or_else(|| Error::Config("every loss term has zero weight".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_vec(xs.to_vec())
    }

    #[test]
    fn smooth_l1_fixtures() {
        assert_eq!(smooth_l1(&v(&[0.0, 0.0])), 0.0);
        assert_eq!(smooth_l1(&v(&[0.5])), 0.125);
        assert_eq!(smooth_l1(&v(&[2.0])), 1.5);
        assert_eq!(smooth_l1(&v(&[-2.0])), 1.5);
        assert_eq!(smooth_l1(&v(&[1.0])), 0.5);
        assert_eq!(smooth_l1(&v(&[1.0 - 1e-15])), 0.5 * (1.0f64 - 1e-15).powi(2));
        // mean, not sum
        assert_eq!(smooth_l1(&v(&[0.5, 2.0])), (0.125 + 1.5) / 2.0);
    }

    #[test]
    fn smooth_l1_slope_is_continuous_at_the_knot() {
        let f = |x: f64| smooth_l1(&v(&[x]));
        let h = 1e-7;
        for knot in [1.0, -1.0] {
            let left = (f(knot) - f(knot - h)) / h;
            let right = (f(knot + h) - f(knot)) / h;
            assert!((left - right).abs() < 1e-6, "{left} vs {right}");
        }
    }

    #[test]
    fn classification_loss_fixtures() {
        let l = vqa_classification_loss(&v(&[0.3; 4]), 2).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let l = vqa_classification_loss(&v(&[0.0, 60.0, 0.0]), 1).unwrap();
        assert!(l < 1e-25);
        assert!(vqa_classification_loss(&v(&[0.0; 3]), 3).is_err());

        let s = v(&[0.4, -1.2, 2.5, 0.0]);
        let lse = s.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((vqa_classification_loss(&s, 0).unwrap() - (lse - 0.4)).abs() < 1e-12);
    }

    #[test]
    fn sequence_loss_fixtures() {
        let one = vqg_sequence_loss(&[v(&[1.0; 8])], &[5]).unwrap();
        assert!((one - 8f64.ln()).abs() < 1e-12);

        let perfect = vqg_sequence_loss(&[v(&[50.0, 0.0]), v(&[0.0, 50.0])], &[0, 1]).unwrap();
        assert!(perfect < 1e-20);

        // step 1: p(target=0) = e^1/(e^1+e^0); step 2: p(target=2) = 1/3 (uniform)
        let got = vqg_sequence_loss(&[v(&[1.0, 0.0, 0.0]), v(&[0.0, 0.0, 0.0])], &[0, 2]).unwrap();
        let e = std::f64::consts::E;
        let want = (-(e / (e + 2.0)).ln() + 3f64.ln()) / 2.0;
        assert!((got - want).abs() < 1e-12);

        assert!(vqg_sequence_loss(&[v(&[0.0])], &[0, 0]).is_err());
        assert!(vqg_sequence_loss(&[], &[]).is_err());
    }

    fn random_outputs(seed: u64, zero_residuals: bool) -> ExampleOutputs {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let q = Vector::uniform(4, 1.5, &mut r);
        let a = Vector::uniform(4, 1.5, &mut r);
        let (qp, ap) = if zero_residuals {
            (q.clone(), a.clone())
        } else {
            (Vector::uniform(4, 2.0, &mut r), Vector::uniform(4, 2.0, &mut r))
        };
        ExampleOutputs {
            answer_scores: Vector::uniform(5, 3.0, &mut r),
            answer: 3,
            question_step_scores: (0..3).map(|_| Vector::uniform(6, 3.0, &mut r)).collect(),
            question_targets: vec![4, 5, 2],
            q_feature: q,
            q_predicted: qp,
            a_feature: a,
            a_predicted: ap,
        }
    }

    #[test]
    fn total_with_zero_residuals_is_the_task_sum() {
        let out = random_outputs(1, true);
        let b = total_loss(&out, LossWeights::default()).unwrap();
        assert_eq!(b.q_duality, 0.0);
        assert_eq!(b.a_duality, 0.0);
        assert!((b.total - (b.vqa_loss + b.vqg_loss)).abs() < 1e-12);
    }

    #[test]
    fn zero_duality_weights_drop_the_regularizer() {
        let out = random_outputs(2, false);
        let w = LossWeights {
            q_duality: 0.0,
            a_duality: 0.0,
            ..LossWeights::default()
        };
        let b = total_loss(&out, w).unwrap();
        assert!(b.q_duality > 0.0 && b.a_duality > 0.0);
        assert!((b.total - (b.vqa_loss + b.vqg_loss)).abs() < 1e-12);
    }

    #[test]
    fn total_matches_independent_recomputation() {
        for seed in 0..20 {
            let out = random_outputs(seed + 10, false);
            let w = LossWeights {
                vqa: 0.7,
                vqg: 1.3,
                q_duality: 0.2,
                a_duality: 2.0,
            };
            let b = total_loss(&out, w).unwrap();
            let lse = |s: &Vector| s.iter().map(|x| x.exp()).sum::<f64>().ln();
            let vqa = lse(&out.answer_scores) - out.answer_scores[out.answer];
            let vqg = out
                .question_step_scores
                .iter()
                .zip(&out.question_targets)
                .map(|(s, &t)| lse(s) - s[t])
                .sum::<f64>()
                / 3.0;
            let sl1 = |a: &Vector, b: &Vector| {
                a.iter()
                    .zip(b.iter())
                    .map(|(x, y)| {
                        let d = (x - y).abs();
                        if d < 1.0 { 0.5 * d * d } else { d - 0.5 }
                    })
                    .sum::<f64>()
                    / a.len() as f64
            };
            let want = 0.7 * vqa
                + 1.3 * vqg
                + 0.2 * sl1(&out.q_predicted, &out.q_feature)
                + 2.0 * sl1(&out.a_predicted, &out.a_feature);
            assert!((b.total - want).abs() < 1e-12);
            assert!(b.terms().iter().all(|&t| t >= 0.0));
        }
    }

    #[test]
    fn tape_losses_match_reference() {
        let out = random_outputs(40, false);
        let w = LossWeights {
            vqa: 0.5,
            ..LossWeights::default()
        };
        let want = total_loss(&out, w).unwrap();
        let mut tape = Tape::new();
        let s = tape.constant(out.answer_scores.clone());
        let vqa = tape.cross_entropy(s, out.answer).unwrap();
        let steps: Vec<Var> = out.question_step_scores.iter().map(|x| tape.constant(x.clone())).collect();
        let vqg = tape_sequence_loss(&mut tape, &steps, &out.question_targets).unwrap();
        let qp = tape.constant(out.q_predicted.clone());
        let qf = tape.constant(out.q_feature.clone());
        let dq = tape.sub(qp, qf).unwrap();
        let q = tape.smooth_l1_mean(dq);
        let ap = tape.constant(out.a_predicted.clone());
        let af = tape.constant(out.a_feature.clone());
        let da = tape.sub(ap, af).unwrap();
        let a = tape.smooth_l1_mean(da);
        let total = tape_total(&mut tape, [Some(vqa), Some(vqg), Some(q), Some(a)], w).unwrap();
        assert!((tape.scalar(total) - want.total).abs() < 1e-12);
        assert!((tape.scalar(vqg) - want.vqg_loss).abs() < 1e-12);
    }

    #[test]
    fn breakdown_mean_and_weight_checks() {
        let w = LossWeights::default();
        let a = LossBreakdown::from_terms([1.0, 2.0, 3.0, 4.0], w);
        let b = LossBreakdown::from_terms([3.0, 2.0, 1.0, 0.0], w);
        let m = LossBreakdown::mean(&[a, b]).unwrap();
        assert_eq!(m.terms(), [2.0, 2.0, 2.0, 2.0]);
        assert_eq!(m.total, 8.0);
        assert!(LossBreakdown::mean(&[]).is_none());
        assert!(LossWeights { vqa: -1.0, ..w }.validate().is_err());
        assert!(LossWeights { vqg: f64::NAN, ..w }.validate().is_err());
    }

    proptest! {
        #[test]
        fn smooth_l1_is_nonnegative_and_zero_only_at_zero(xs in prop::collection::vec(-5.0f64..5.0, 1..8)) {
            let x = Vector::from_vec(xs.clone());
            let s = smooth_l1(&x);
            prop_assert!(s >= 0.0);
            prop_assert_eq!(s == 0.0, xs.iter().all(|&v| v == 0.0));
        }

        #[test]
        fn raising_the_target_score_lowers_the_loss(
            xs in prop::collection::vec(-5.0f64..5.0, 2..8),
            bump in 0.01f64..3.0,
        ) {
            let before = vqa_classification_loss(&Vector::from_vec(xs.clone()), 0).unwrap();
            let mut ys = xs;
            ys[0] += bump;
            let after = vqa_classification_loss(&Vector::from_vec(ys), 0).unwrap();
            prop_assert!(after < before);
        }
    }
}
