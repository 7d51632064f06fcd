//! Top-k answer accuracy and smoothed sentence BLEU.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Vector;

/// Method-4 smoothing constant.
pub const BLEU_SMOOTHING_K: f64 = 5.0;
pub const BLEU_MAX_N: usize = 4;

/// Answer ids ordered by descending score; equal scores keep the lower id
/// first.
pub fn ranked_answers(scores: &Vector) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    ids
}

/// 1 if `truth` is among the `k` best-scoring answers, else 0.
pub fn acc_at_k(scores: &Vector, truth: usize, k: usize) -> Result<f64> {
    if k == 0 || k > scores.len() {
        return Err(Error::InvalidArgument(format!(
            "k must be in 1..={}, got {k}",
            scores.len()
        )));
    }
    if truth >= scores.len() {
        return Err(Error::InvalidArgument(format!(
            "truth id {truth} out of range for {} answers",
            scores.len()
        )));
    }
    // rank of truth = number of answers strictly ahead of it
    let t = scores[truth];
    let ahead = (0..scores.len())
        .filter(|&i| scores[i] > t || (scores[i] == t && i < truth))
        .count();
    Ok(if ahead < k { 1.0 } else { 0.0 })
}

fn ngram_counts(tokens: &[&str], n: usize) -> HashMap<Vec<String>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(|s| s.to_string()).collect()).or_insert(0) += 1;
        }
    }
    out
}

/// Sentence BLEU with uniform weights over `1..=4`-grams, one reference,
/// and method-4 smoothing of zero-match orders.
///
/// Returns 0 when no unigram matches, or when a zero-match order cannot be
/// smoothed because the hypothesis has a single token.
pub fn sentence_bleu(hypothesis: &[&str], reference: &[&str]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::InvalidArgument("BLEU needs a nonempty reference".into()));
    }
    let hyp_len = hypothesis.len();
    if hyp_len == 0 {
        return Ok(0.0);
    }

    let mut numerators = [0.0; BLEU_MAX_N];
    let mut denominators = [0.0; BLEU_MAX_N];
    for n in 1..=BLEU_MAX_N {
        let hyp = ngram_counts(hypothesis, n);
        let refc = ngram_counts(reference, n);
        let clipped: usize = hyp
            .iter()
            .map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0)))
            .sum();
        let total: usize = hyp.values().sum();
        numerators[n - 1] = clipped as f64;
        denominators[n - 1] = total.max(1) as f64;
    }
    if numerators[0] == 0.0 {
        return Ok(0.0);
    }

    let mut precisions = [0.0; BLEU_MAX_N];
    let mut zero_seen = 0;
    for i in 0..BLEU_MAX_N {
        precisions[i] = if numerators[i] > 0.0 {
            numerators[i] / denominators[i]
        } else if hyp_len > 1 {
            zero_seen += 1;
            let num = 1.0 / (2f64.powi(zero_seen) * BLEU_SMOOTHING_K / (hyp_len as f64).ln());
            num / denominators[i]
        } else {
            return Ok(0.0);
        };
    }

    let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / BLEU_MAX_N as f64;
    let r = reference.len() as f64;
    let c = hyp_len as f64;
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    Ok((bp * log_mean.exp()).clamp(0.0, 1.0))
}

/// Whitespace-tokenizing convenience wrapper.
pub fn sentence_bleu_str(hypothesis: &str, reference: &str) -> Result<f64> {
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    sentence_bleu(&h, &r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc_at_1: f64,
    pub acc_at_5: f64,
    pub bleu: f64,
    pub n_examples: usize,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |x: f64| (0.0..=1.0).contains(&x);
        if self.n_examples == 0 || !in_unit(self.acc_at_1) || !in_unit(self.acc_at_5) || !in_unit(self.bleu) {
            return Err(Error::Contract(format!("malformed eval report: {self:?}")));
        }
        Ok(())
    }

    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "acc_at_1={:.6}", self.acc_at_1);
        let _ = writeln!(s, "acc_at_5={:.6}", self.acc_at_5);
        let _ = writeln!(s, "bleu={:.6}", self.bleu);
        let _ = writeln!(s, "n_examples={}", self.n_examples);
        s
    }
}

/// Running sums for an [`EvalReport`].
#[derive(Debug, Clone, Copy, Default)]
pub struct EvalAccumulator {
    hits1: f64,
    hits5: f64,
    bleu: f64,
    n_answers: usize,
    n_questions: usize,
}

impl EvalAccumulator {
    pub fn add_answer(&mut self, scores: &Vector, truth: usize) -> Result<()> {
        self.hits1 += acc_at_k(scores, truth, 1)?;
        self.hits5 += acc_at_k(scores, truth, 5.min(scores.len()))?;
        self.n_answers += 1;
        Ok(())
    }

    pub fn add_question(&mut self, hypothesis: &[&str], reference: &[&str]) -> Result<()> {
        self.bleu += sentence_bleu(hypothesis, reference)?;
        self.n_questions += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &EvalAccumulator) {
        self.hits1 += other.hits1;
        self.hits5 += other.hits5;
        self.bleu += other.bleu;
        self.n_answers += other.n_answers;
        self.n_questions += other.n_questions;
    }

    pub fn finish(&self) -> Result<EvalReport> {
        if self.n_answers == 0 {
            return Err(Error::InvalidArgument("no examples evaluated".into()));
        }
        let n = self.n_answers as f64;
        let bleu = if self.n_questions == 0 {
            0.0
        } else {
            self.bleu / self.n_questions as f64
        };
        Ok(EvalReport {
            acc_at_1: self.hits1 / n,
            acc_at_5: self.hits5 / n,
            bleu,
            n_examples: self.n_answers,
        })
    }
}
