//! The joint VQA/VQG model.
//!
//! Each part (fusion, attention, answer table, recurrent codec) lives in a
//! small vector with one entry when shared and two when not. The VQA side
//! reads entry 0, the VQG side the last entry, so a shared part is one
//! storage by construction.
//!
//! Forward paths for one example:
//!
//! ```text
//! VQA: q = enc(question)   v_q = attend(grid, q)   q̃ = W_q q   ṽ = W_v v_q
//!      ã* = fuse(q̃, ṽ)     scores = E_cls · lift_a(ã*)
//! VQG: a = E_a[answer]     v_a = attend(grid, a)   ã = W_a a   ṽ' = W_v v_a
//!      q̃* = fuse(ã, ṽ')    decoder starts from lift_q(q̃*)
//! ```
//!
//! `lift_x` is the identity when the final projection is skipped and `W_xᵀ`
//! otherwise. The duality penalties compare `q̃*` with `q̃` and `ã*` with
//! `ã` under the skip, and the lifted features with `q` and `a` without it.

use rand::Rng;

use crate::attention::{attend, AttentionParams, AttentionVars, FeatureGrid};
use crate::autodiff::{softmax, Tape, Var};
use crate::codec::{
    decode_beam, AnswerTable, BeamConfig, Hypothesis, OutputLayer, OutputVars, QuestionDecoder, RecurrentParams,
    RecurrentVars, END,
};
use crate::config::ModelConfig;
use crate::dual::skip_final_projection;
use crate::error::{Error, Result};
use crate::fusion::{lowrank_fuse, FusionConfig, FusionParams, FusionVars};
use crate::linalg::Vector;
use crate::metrics::ranked_answers;
use crate::objectives::{tape_sequence_loss, tape_total, LossBreakdown, LossWeights};
use crate::params::{matrix_ref, ArrayRef, Binder, ParamSet};

/// A training or evaluation item in model ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedExample {
    pub grid: FeatureGrid,
    /// Word ids without `<start>`/`<end>`. `None` for answer-only items.
    pub question: Option<Vec<usize>>,
    pub answer: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    fusion: Vec<FusionParams>,
    attention: Vec<AttentionParams>,
    answers: Vec<AnswerTable>,
    recurrent: Vec<RecurrentParams>,
    output: OutputLayer,
}

fn one_or_two<T, R: Rng + ?Sized>(shared: bool, rng: &mut R, mut make: impl FnMut(usize, &mut R) -> Result<T>) -> Result<Vec<T>> {
    if shared {
        Ok(vec![make(0, rng)?])
    } else {
        Ok(vec![make(0, rng)?, make(1, rng)?])
    }
}

impl Model {
    pub fn init<R: Rng + ?Sized>(
        config: &ModelConfig,
        vocab_size: usize,
        n_answers: usize,
        d_v: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if vocab_size <= END || n_answers == 0 || d_v == 0 {
            return Err(Error::Config(format!(
                "need a vocabulary past the reserved ids, answers and cell features \
                 (vocab={vocab_size}, answers={n_answers}, d_v={d_v})"
            )));
        }
        let c = config;
        let fcfg = FusionConfig {
            d_q: c.d_q,
            d_v,
            d_a: c.d_a,
            t: c.t,
            t_v: c.t_v,
            rank: c.rank,
            backend: c.backend,
        };
        let fusion = one_or_two(c.dual_mutan, rng, |_, r| FusionParams::init(&fcfg, r))?;
        let attention = one_or_two(c.share_attention, rng, |i, r| {
            let guide = if i == 0 { c.d_q } else { c.d_a };
            AttentionParams::init(guide, d_v, c.t, c.t_v, c.rank, r)
        })?;
        let classifier_dim = if c.skip_final_projection { c.t } else { c.d_a };
        let decoder_hidden = if c.skip_final_projection { c.t } else { c.d_q };
        // answers[0] embeds (VQG input), answers.last() classifies (VQA output)
        let answers = one_or_two(c.share_codec, rng, |i, r| {
            let dim = if i == 0 { c.d_a } else { classifier_dim };
            Ok(AnswerTable::init(n_answers, dim, r))
        })?;
        // recurrent[0] encodes, recurrent.last() decodes
        let recurrent = one_or_two(c.share_codec, rng, |i, r| {
            let hidden = if i == 0 { c.d_q } else { decoder_hidden };
            Ok(RecurrentParams::init(vocab_size, c.d_w, hidden, r))
        })?;
        let output = OutputLayer::init(vocab_size, decoder_hidden, rng);
        Ok(Self {
            config: *config,
            fusion,
            attention,
            answers,
            recurrent,
            output,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.output.w.rows()
    }

    pub fn n_answers(&self) -> usize {
        self.answers[0].n_answers()
    }

    pub fn d_v(&self) -> usize {
        self.fusion[0].d_v()
    }

    pub fn fusion_sets(&self) -> usize {
        self.fusion.len()
    }

    pub fn vqa_fusion(&self) -> &FusionParams {
        &self.fusion[0]
    }

    pub fn vqg_fusion(&self) -> &FusionParams {
        self.fusion.last().expect("at least one fusion set")
    }

    pub fn vqa_fusion_mut(&mut self) -> &mut FusionParams {
        &mut self.fusion[0]
    }

    pub fn vqg_fusion_mut(&mut self) -> &mut FusionParams {
        self.fusion.last_mut().expect("at least one fusion set")
    }

    pub fn vqa_attention(&self) -> &AttentionParams {
        &self.attention[0]
    }

    pub fn vqg_attention(&self) -> &AttentionParams {
        self.attention.last().expect("at least one attention head")
    }

    pub fn answer_embedding(&self) -> &AnswerTable {
        &self.answers[0]
    }

    pub fn answer_classifier(&self) -> &AnswerTable {
        self.answers.last().expect("at least one answer table")
    }

    pub fn answer_embedding_mut(&mut self) -> &mut AnswerTable {
        &mut self.answers[0]
    }

    pub fn answer_classifier_mut(&mut self) -> &mut AnswerTable {
        self.answers.last_mut().expect("at least one answer table")
    }

    pub fn encoder(&self) -> &RecurrentParams {
        &self.recurrent[0]
    }

    pub fn decoder(&self) -> &RecurrentParams {
        self.recurrent.last().expect("at least one recurrent set")
    }

    pub fn encoder_mut(&mut self) -> &mut RecurrentParams {
        &mut self.recurrent[0]
    }

    pub fn output_layer(&self) -> &OutputLayer {
        &self.output
    }

    fn check_example(&self, grid: &FeatureGrid, answer: Option<usize>) -> Result<()> {
        if grid.d_v() != self.d_v() {
            return Err(Error::shape(
                "model",
                format!("grid cells have dim {}, model expects {}", grid.d_v(), self.d_v()),
            ));
        }
        if let Some(a) = answer {
            if a >= self.n_answers() {
                return Err(Error::InvalidArgument(format!(
                    "answer id {a} out of range for {} answers",
                    self.n_answers()
                )));
            }
        }
        Ok(())
    }

    /// Per-answer scores for a question about `grid`.
    pub fn answer_scores(&self, grid: &FeatureGrid, question: &[usize]) -> Result<Vector> {
        self.check_example(grid, None)?;
        let f = self.vqa_fusion();
        let q = self.encoder().encode_question(question)?;
        let v_q = attend(grid, &q, self.vqa_attention())?.pooled;
        let (q_t, v_t) = f.project(&q, &v_q)?;
        let a_star = lowrank_fuse(&q_t, &v_t, &f.slices)?;
        let a_hat = skip_final_projection(&a_star, &f.w_a, self.config.skip_final_projection)?;
        self.answer_classifier().classify_answer(&a_hat)
    }

    /// The `k` best answers with softmax probabilities, best first.
    pub fn top_answers(&self, grid: &FeatureGrid, question: &[usize], k: usize) -> Result<Vec<(usize, f64)>> {
        let scores = self.answer_scores(grid, question)?;
        let probs = softmax(scores.as_slice());
        Ok(ranked_answers(&scores).into_iter().take(k).map(|i| (i, probs[i])).collect())
    }

    /// Initial decoder state for generating a question about `answer`.
    pub fn question_feature(&self, grid: &FeatureGrid, answer: usize) -> Result<Vector> {
        self.check_example(grid, Some(answer))?;
        let f = self.vqg_fusion();
        let a = self.answer_embedding().embed_answer(answer)?;
        let v_a = attend(grid, &a, self.vqg_attention())?.pooled;
        let a_t = f.w_a.matvec(&a)?;
        let v_t = f.w_v.matvec(&v_a)?;
        let q_star = lowrank_fuse(&a_t, &v_t, &f.slices)?;
        skip_final_projection(&q_star, &f.w_q, self.config.skip_final_projection)
    }

    pub fn generate(&self, grid: &FeatureGrid, answer: usize, beam: &BeamConfig) -> Result<Hypothesis> {
        let decoder = QuestionDecoder {
            recurrent: self.decoder(),
            output: &self.output,
            init: self.question_feature(grid, answer)?,
        };
        decode_beam(&decoder, beam)
    }

    pub(crate) fn bind(&self, tape: &mut Tape) -> (ModelVars, Vec<Var>) {
        let mut b = Binder::new(tape);
        let fusion = self.fusion.iter().map(|f| f.bind(&mut b)).collect();
        let attention = self.attention.iter().map(|a| a.bind(&mut b)).collect();
        let answers = self.answers.iter().map(|t| b.matrix(&t.e_a)).collect();
        let recurrent = self.recurrent.iter().map(|r| r.bind(&mut b)).collect();
        let output = self.output.bind(&mut b);
        let vars = ModelVars {
            fusion,
            attention,
            answers,
            recurrent,
            output,
            skip: self.config.skip_final_projection,
        };
        (vars, b.bound)
    }

    /// Loss of one example on `tape`. Returns the weighted total node and
    /// the four term nodes (classification, generation, question duality,
    /// answer duality).
    pub(crate) fn example_loss(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        ex: &EncodedExample,
        weights: LossWeights,
    ) -> Result<(Var, [Var; 4])> {
        self.check_example(&ex.grid, Some(ex.answer))?;
        let question = ex
            .question
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("training example has no question".into()))?;
        let terms = vars.terms(tape, ex, question)?;
        let total = tape_total(tape, terms.map(Some), weights)?;
        Ok((total, terms))
    }

    /// Loss breakdown and gradients (in [`ParamSet::arrays_mut`] order) of
    /// the mean loss over `batch`.
    pub fn batch_gradients(&self, batch: &[&EncodedExample], weights: LossWeights) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mut tape = Tape::new();
        let (vars, leaves) = self.bind(&mut tape);
        let mut totals = Vec::with_capacity(batch.len());
        let mut parts = Vec::with_capacity(batch.len());
        for ex in batch {
            let (total, terms) = self.example_loss(&mut tape, &vars, ex, weights)?;
            parts.push(LossBreakdown::from_terms(terms.map(|t| tape.scalar(t)), weights));
            totals.push(total);
        }
        let mut sum = totals[0];
        for &t in &totals[1..] {
            sum = tape.add(sum, t)?;
        }
        let mean = tape.scale(sum, 1.0 / batch.len() as f64);
        if !tape.scalar(mean).is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {}", tape.scalar(mean))));
        }
        tape.backward(mean)?;
        let grads = leaves.iter().map(|&l| tape.grad_slice(l)).collect();
        Ok((LossBreakdown::mean(&parts).expect("nonempty batch"), grads))
    }

    /// Loss breakdown of one example without gradients.
    pub fn loss(&self, ex: &EncodedExample, weights: LossWeights) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let (vars, _) = self.bind(&mut tape);
        let (_, terms) = self.example_loss(&mut tape, &vars, ex, weights)?;
        Ok(LossBreakdown::from_terms(terms.map(|t| tape.scalar(t)), weights))
    }
}

fn prefixed(prefix: &str, name: &str, shared: bool, i: usize, roles: [&str; 2]) -> String {
    let base = if shared {
        name.to_string()
    } else {
        format!("{name}_{}", roles[i])
    };
    crate::params::join(prefix, &base)
}

impl ParamSet for Model {
    fn arrays(&self, prefix: &str) -> Vec<ArrayRef<'_>> {
        let mut out = Vec::new();
        let shared = self.fusion.len() == 1;
        for (i, f) in self.fusion.iter().enumerate() {
            out.extend(f.arrays(&prefixed(prefix, "fusion", shared, i, ["vqa", "vqg"])));
        }
        let shared = self.attention.len() == 1;
        for (i, a) in self.attention.iter().enumerate() {
            out.extend(a.arrays(&prefixed(prefix, "attention", shared, i, ["vqa", "vqg"])));
        }
        let shared = self.answers.len() == 1;
        for (i, t) in self.answers.iter().enumerate() {
            let name = prefixed(prefix, "answers", shared, i, ["embedding", "classifier"]);
            out.push(matrix_ref(&name, "e_a", &t.e_a));
        }
        let shared = self.recurrent.len() == 1;
        for (i, r) in self.recurrent.iter().enumerate() {
            out.extend(r.arrays(&prefixed(prefix, "recurrent", shared, i, ["encoder", "decoder"])));
        }
        out.extend(self.output.arrays(&crate::params::join(prefix, "output")));
        out
    }

    fn arrays_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for f in &mut self.fusion {
            out.extend(f.arrays_mut());
        }
        for a in &mut self.attention {
            out.extend(a.arrays_mut());
        }
        for t in &mut self.answers {
            out.push(t.e_a.as_mut_slice());
        }
        for r in &mut self.recurrent {
            out.extend(r.arrays_mut());
        }
        out.extend(self.output.arrays_mut());
        out
    }
}

pub(crate) struct ModelVars {
    fusion: Vec<FusionVars>,
    attention: Vec<AttentionVars>,
    answers: Vec<Var>,
    recurrent: Vec<RecurrentVars>,
    output: OutputVars,
    skip: bool,
}

impl ModelVars {
    fn lift(&self, tape: &mut Tape, feature: Var, projection: Var) -> Result<Var> {
        if self.skip {
            Ok(feature)
        } else {
            tape.t_matvec(projection, feature)
        }
    }

    fn terms(&self, tape: &mut Tape, ex: &EncodedExample, question: &[usize]) -> Result<[Var; 4]> {
        let cells = tape.constant(ex.grid.cells().clone());
        let fq = &self.fusion[0];
        let fg = self.fusion.last().expect("fusion");
        let enc = &self.recurrent[0];
        let dec = self.recurrent.last().expect("recurrent");

        // answer the question
        let q = enc.encode_question(tape, question)?;
        let v_q = self.attention[0].attend(tape, cells, q)?;
        let q_t = tape.matvec(fq.w_q, q)?;
        let v_t = tape.matvec(fq.w_v, v_q)?;
        let a_star = fq.lowrank_fuse(tape, q_t, v_t)?;
        let a_hat = self.lift(tape, a_star, fq.w_a)?;
        let classifier = *self.answers.last().expect("answers");
        let scores = tape.matvec(classifier, a_hat)?;
        let vqa = tape.cross_entropy(scores, ex.answer)?;

        // ask for the answer
        let a = tape.row(self.answers[0], ex.answer)?;
        let v_a = self.attention.last().expect("attention").attend(tape, cells, a)?;
        let a_t = tape.matvec(fg.w_a, a)?;
        let v_t2 = tape.matvec(fg.w_v, v_a)?;
        let q_star = fg.lowrank_fuse(tape, a_t, v_t2)?;
        let q_hat = self.lift(tape, q_star, fg.w_q)?;
        let logits = dec.decode_teacher_forced(tape, &self.output, q_hat, question)?;
        let targets: Vec<usize> = question.iter().copied().chain(std::iter::once(END)).collect();
        let vqg = tape_sequence_loss(tape, &logits, &targets)?;

        let (q_pred, q_ref, a_pred, a_ref) = if self.skip {
            (q_star, q_t, a_star, a_t)
        } else {
            (q_hat, q, a_hat, a)
        };
        let dq = tape.sub(q_pred, q_ref)?;
        let q_dual = tape.smooth_l1_mean(dq);
        let da = tape.sub(a_pred, a_ref)?;
        let a_dual = tape.smooth_l1_mean(da);
        Ok([vqa, vqg, q_dual, a_dual])
    }
}
