//! Question and answer encoding/decoding.
//!
//! Answers: one table `E_a` (`|A| × d_a`). Looking up answer `c` returns row
//! `c`; classifying a feature `â` returns `E_a · â`. Both views read the same
//! storage, so any update through either path is seen by the other.
//!
//! Questions: a single gated recurrent cell. The encoder runs it over the
//! embedded tokens from a zero state and returns the final hidden state; the
//! decoder starts from a predicted question feature and feeds back its own
//! previous token. When the codec is shared, encoder and decoder hold the
//! same [`RecurrentParams`].

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;

use crate::autodiff::{log_softmax, sigmoid, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::params::{init_matrix, matrix_ref, vector_ref, ArrayRef, Binder, ParamSet};

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED_TOKENS: [&str; 4] = ["<pad>", "<start>", "<end>", "<unk>"];

/// Token ↔ id bijection. Ids 0..4 are always `<pad> <start> <end> <unk>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from ordinary tokens, in first-seen order.
    pub fn new<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED_TOKENS.iter().copied() {
            vocab.push(t);
        }
        for t in tokens {
            vocab.push(t.as_ref());
        }
        vocab
    }

    fn push(&mut self, token: &str) {
        if !self.index.contains_key(token) {
            self.index.insert(token.to_string(), self.tokens.len());
            self.tokens.push(token.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or `<unk>`.
    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|t| self.id_or_unk(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < RESERVED_TOKENS.len() || lines[..4] != RESERVED_TOKENS {
            return Err(Error::InvalidArgument(
                "vocabulary file must start with <pad>, <start>, <end>, <unk>".into(),
            ));
        }
        let vocab = Self::new(lines[4..].iter().copied());
        if vocab.len() != lines.len() {
            return Err(Error::InvalidArgument("vocabulary file has duplicate tokens".into()));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Answer embedding table, also used transposed as the answer classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerTable {
    pub e_a: Matrix,
}

impl AnswerTable {
    pub fn init<R: Rng + ?Sized>(n_answers: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            e_a: init_matrix(n_answers, dim, dim, rng),
        }
    }

    pub fn n_answers(&self) -> usize {
        self.e_a.rows()
    }

    pub fn dim(&self) -> usize {
        self.e_a.cols()
    }

    pub fn embed_answer(&self, answer: usize) -> Result<Vector> {
        if answer >= self.e_a.rows() {
            return Err(Error::InvalidArgument(format!(
                "answer id {answer} out of range for {} answers",
                self.e_a.rows()
            )));
        }
        Ok(Vector::from_vec(self.e_a.row(answer).to_vec()))
    }

    /// Per-class scores `E_a · â`.
    pub fn classify_answer(&self, feature: &Vector) -> Result<Vector> {
        self.e_a.matvec(feature)
    }
}

impl ParamSet for AnswerTable {
    fn arrays(&self, prefix: &str) -> Vec<ArrayRef<'_>> {
        vec![matrix_ref(prefix, "e_a", &self.e_a)]
    }

    fn arrays_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.e_a.as_mut_slice()]
    }
}

/// Gated recurrent cell with update gate `z`, reset gate `r` and tanh
/// candidate `n`:
///
/// ```text
/// z  = σ(W_z x + U_z h + b_z)
/// r  = σ(W_r x + U_r h + b_r)
/// n  = tanh(W_n x + r ⊙ (U_n h) + b_n)
/// h' = n + z ⊙ (h − n)
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct GruCell {
    pub w_z: Matrix,
    pub w_r: Matrix,
    pub w_n: Matrix,
    pub u_z: Matrix,
    pub u_r: Matrix,
    pub u_n: Matrix,
    pub b_z: Vector,
    pub b_r: Vector,
    pub b_n: Vector,
}

impl GruCell {
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            w_z: init_matrix(hidden, input, hidden, rng),
            w_r: init_matrix(hidden, input, hidden, rng),
            w_n: init_matrix(hidden, input, hidden, rng),
            u_z: init_matrix(hidden, hidden, hidden, rng),
            u_r: init_matrix(hidden, hidden, hidden, rng),
            u_n: init_matrix(hidden, hidden, hidden, rng),
            b_z: Vector::uniform(hidden, bound, rng),
            b_r: Vector::uniform(hidden, bound, rng),
            b_n: Vector::uniform(hidden, bound, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.u_z.rows()
    }

    pub fn input(&self) -> usize {
        self.w_z.cols()
    }

    pub fn step(&self, x: &Vector, h: &Vector) -> Result<Vector> {
        let gate = |w: &Matrix, u: &Matrix, b: &Vector| -> Result<Vector> {
            Ok(w.matvec(x)?.add(&u.matvec(h)?)?.add(b)?.map(sigmoid))
        };
        let z = gate(&self.w_z, &self.u_z, &self.b_z)?;
        let r = gate(&self.w_r, &self.u_r, &self.b_r)?;
        let n = self
            .w_n
            .matvec(x)?
            .add(&r.hadamard(&self.u_n.matvec(h)?)?)?
            .add(&self.b_n)?
            .map(f64::tanh);
        n.add(&z.hadamard(&h.sub(&n)?)?)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct GruVars {
    w_z: Var,
    w_r: Var,
    w_n: Var,
    u_z: Var,
    u_r: Var,
    u_n: Var,
    b_z: Var,
    b_r: Var,
    b_n: Var,
}

impl GruVars {
    pub fn step(&self, tape: &mut Tape, x: Var, h: Var) -> Result<Var> {
        let mut gate = |w: Var, u: Var, b: Var| -> Result<Var> {
            let wx = tape.matvec(w, x)?;
            let uh = tape.matvec(u, h)?;
            let s = tape.add(wx, uh)?;
            let s = tape.add(s, b)?;
            Ok(tape.sigmoid(s))
        };
        let z = gate(self.w_z, self.u_z, self.b_z)?;
        let r = gate(self.w_r, self.u_r, self.b_r)?;
        let wx = tape.matvec(self.w_n, x)?;
        let uh = tape.matvec(self.u_n, h)?;
        let ruh = tape.mul(r, uh)?;
        let s = tape.add(wx, ruh)?;
        let s = tape.add(s, self.b_n)?;
        let n = tape.tanh(s);
        let diff = tape.sub(h, n)?;
        let zd = tape.mul(z, diff)?;
        tape.add(n, zd)
    }
}

impl ParamSet for GruCell {
    fn arrays(&self, prefix: &str) -> Vec<ArrayRef<'_>> {
        vec![
            matrix_ref(prefix, "w_z", &self.w_z),
            matrix_ref(prefix, "w_r", &self.w_r),
            matrix_ref(prefix, "w_n", &self.w_n),
            matrix_ref(prefix, "u_z", &self.u_z),
            matrix_ref(prefix, "u_r", &self.u_r),
            matrix_ref(prefix, "u_n", &self.u_n),
            vector_ref(prefix, "b_z", &self.b_z),
            vector_ref(prefix, "b_r", &self.b_r),
            vector_ref(prefix, "b_n", &self.b_n),
        ]
    }

    fn arrays_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w_z.as_mut_slice(),
            self.w_r.as_mut_slice(),
            self.w_n.as_mut_slice(),
            self.u_z.as_mut_slice(),
            self.u_r.as_mut_slice(),
            self.u_n.as_mut_slice(),
            self.b_z.as_mut_slice(),
            self.b_r.as_mut_slice(),
            self.b_n.as_mut_slice(),
        ]
    }
}

impl GruCell {
    pub(crate) fn bind(&self, b: &mut Binder<'_>) -> GruVars {
        GruVars {
            w_z: b.matrix(&self.w_z),
            w_r: b.matrix(&self.w_r),
            w_n: b.matrix(&self.w_n),
            u_z: b.matrix(&self.u_z),
            u_r: b.matrix(&self.u_r),
            u_n: b.matrix(&self.u_n),
            b_z: b.vector(&self.b_z),
            b_r: b.vector(&self.b_r),
            b_n: b.vector(&self.b_n),
        }
    }
}

/// Word embeddings plus the recurrent cell. One instance serves both the
/// question encoder and the question decoder when the codec is shared.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentParams {
    pub embedding: Matrix,
    pub cell: GruCell,
}

impl RecurrentParams {
    pub fn init<R: Rng + ?Sized>(vocab: usize, word_dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            embedding: init_matrix(vocab, word_dim, word_dim, rng),
            cell: GruCell::init(word_dim, hidden, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.cell.hidden()
    }

    fn embed(&self, token: usize) -> Result<Vector> {
        if token >= self.embedding.rows() {
            return Err(Error::InvalidArgument(format!(
                "token id {token} out of range for {} words",
                self.embedding.rows()
            )));
        }
        Ok(Vector::from_vec(self.embedding.row(token).to_vec()))
    }

    /// Final hidden state after reading `tokens` left to right from zero.
    pub fn encode_question(&self, tokens: &[usize]) -> Result<Vector> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("cannot encode an empty question".into()));
        }
        let mut h = Vector::zeros(self.hidden());
        for &t in tokens {
            h = self.cell.step(&self.embed(t)?, &h)?;
        }
        Ok(h)
    }

    pub(crate) fn bind(&self, b: &mut Binder<'_>) -> RecurrentVars {
        RecurrentVars {
            embedding: b.matrix(&self.embedding),
            cell: self.cell.bind(b),
            hidden: self.hidden(),
        }
    }
}

impl ParamSet for RecurrentParams {
    fn arrays(&self, prefix: &str) -> Vec<ArrayRef<'_>> {
        let mut out = vec![matrix_ref(prefix, "embedding", &self.embedding)];
        out.extend(self.cell.arrays(&crate::params::join(prefix, "cell")));
        out
    }

    fn arrays_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![self.embedding.as_mut_slice()];
        out.extend(self.cell.arrays_mut());
        out
    }
}

#[derive(Debug, Clone)]
pub(crate) struct RecurrentVars {
    embedding: Var,
    cell: GruVars,
    hidden: usize,
}

impl RecurrentVars {
    pub fn encode_question(&self, tape: &mut Tape, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("cannot encode an empty question".into()));
        }
        let mut h = tape.constant(Vector::zeros(self.hidden));
        for &t in tokens {
            let x = tape.row(self.embedding, t)?;
            h = self.cell.step(tape, x, h)?;
        }
        Ok(h)
    }

    /// Teacher-forced decoder logits: inputs `<start> w_1 … w_n`, one logit
    /// vector per step (targets are `w_1 … w_n <end>`).
    pub fn decode_teacher_forced(
        &self,
        tape: &mut Tape,
        out: &OutputVars,
        init: Var,
        tokens: &[usize],
    ) -> Result<Vec<Var>> {
        let mut h = init;
        let mut logits = Vec::with_capacity(tokens.len() + 1);
        for &t in std::iter::once(&START).chain(tokens) {
            let x = tape.row(self.embedding, t)?;
            h = self.cell.step(tape, x, h)?;
            logits.push(out.logits(tape, h)?);
        }
        Ok(logits)
    }
}

/// Decoder output layer, hidden state → word logits.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputLayer {
    pub w: Matrix,
    pub b: Vector,
}

impl OutputLayer {
    pub fn init<R: Rng + ?Sized>(vocab: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w: init_matrix(vocab, hidden, hidden, rng),
            b: Vector::zeros(vocab),
        }
    }

    pub fn logits(&self, h: &Vector) -> Result<Vector> {
        self.w.matvec(h)?.add(&self.b)
    }

    pub(crate) fn bind(&self, b: &mut Binder<'_>) -> OutputVars {
        OutputVars {
            w: b.matrix(&self.w),
            b: b.vector(&self.b),
        }
    }
}

impl ParamSet for OutputLayer {
    fn arrays(&self, prefix: &str) -> Vec<ArrayRef<'_>> {
        vec![matrix_ref(prefix, "w", &self.w), vector_ref(prefix, "b", &self.b)]
    }

    fn arrays_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.w.as_mut_slice(), self.b.as_mut_slice()]
    }
}

#[derive(Debug, Clone)]
pub(crate) struct OutputVars {
    w: Var,
    b: Var,
}

impl OutputVars {
    pub fn logits(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let wh = tape.matvec(self.w, h)?;
        tape.add(wh, self.b)
    }
}

/// One step of an autoregressive token model.
pub trait StepModel {
    type State: Clone;

    fn initial_state(&self) -> Self::State;

    /// Consumes `token` and returns the next state with log-probabilities
    /// over the vocabulary for the following token.
    fn step(&self, state: &Self::State, token: usize) -> Result<(Self::State, Vec<f64>)>;
}

/// The recurrent question decoder conditioned on a predicted question
/// feature, which becomes the initial hidden state.
pub struct QuestionDecoder<'a> {
    pub recurrent: &'a RecurrentParams,
    pub output: &'a OutputLayer,
    pub init: Vector,
}

impl StepModel for QuestionDecoder<'_> {
    type State = Vector;

    fn initial_state(&self) -> Vector {
        self.init.clone()
    }

    fn step(&self, state: &Vector, token: usize) -> Result<(Vector, Vec<f64>)> {
        let h = self.recurrent.cell.step(&self.recurrent.embed(token)?, state)?;
        let logp = log_softmax(self.output.logits(&h)?.as_slice());
        Ok((h, logp))
    }
}

/// Highest-scoring token; ties go to the lowest id.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Emitted tokens, without `<start>` and `<end>`.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// Step at which the hypothesis finished.
    pub finished_at: usize,
}

/// Greedy decoding from `<start>`, stopping at `<end>` or after `max_len`
/// emitted tokens.
pub fn decode_greedy<M: StepModel>(model: &M, max_len: usize) -> Result<Hypothesis> {
    let mut state = model.initial_state();
    let mut token = START;
    let mut out = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished_at: 0,
    };
    for step in 1..=max_len.max(1) {
        let (next, logp) = model.step(&state, token)?;
        let best = argmax(&logp);
        out.log_prob += logp[best];
        out.finished_at = step;
        if best == END {
            break;
        }
        out.tokens.push(best);
        state = next;
        token = best;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamConfig {
    pub width: usize,
    pub max_len: usize,
    /// Rank finished hypotheses by mean rather than total log-probability.
    pub length_normalize: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            width: 3,
            max_len: 16,
            length_normalize: false,
        }
    }
}

fn final_score(h: &Hypothesis, cfg: &BeamConfig) -> f64 {
    if cfg.length_normalize {
        h.log_prob / h.finished_at.max(1) as f64
    } else {
        h.log_prob
    }
}

/// `a` ranks before `b`: higher score, then earlier completion, then
/// lexicographically smaller tokens.
fn ranks_before(a: &Hypothesis, b: &Hypothesis, cfg: &BeamConfig) -> bool {
    let (sa, sb) = (final_score(a, cfg), final_score(b, cfg));
    if sa != sb {
        return sa > sb;
    }
    if a.finished_at != b.finished_at {
        return a.finished_at < b.finished_at;
    }
    a.tokens < b.tokens
}

/// Beam search over a [`StepModel`].
///
/// Each step expands every live hypothesis by every token and keeps the
/// `width` best expansions by cumulative log-probability (ties by token
/// order). Expansions ending in `<end>` leave the beam as finished; live
/// hypotheses are closed when `max_len` tokens have been emitted. The greedy
/// path is always among the finished candidates, so the result never scores
/// below greedy decoding.
pub fn decode_beam<M: StepModel>(model: &M, cfg: &BeamConfig) -> Result<Hypothesis> {
    if cfg.width == 0 {
        return Err(Error::InvalidArgument("beam width must be >= 1".into()));
    }
    let max_len = cfg.max_len.max(1);
    let mut finished = vec![decode_greedy(model, max_len)?];
    let mut live: Vec<(Hypothesis, M::State, usize)> = vec![(
        Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            finished_at: 0,
        },
        model.initial_state(),
        START,
    )];
    for step in 1..=max_len {
        let mut expansions: Vec<(Hypothesis, M::State, usize)> = Vec::new();
        for (hyp, state, last) in &live {
            let (next, logp) = model.step(state, *last)?;
            for (tok, &lp) in logp.iter().enumerate() {
                let mut tokens = hyp.tokens.clone();
                if tok != END {
                    tokens.push(tok);
                }
                expansions.push((
                    Hypothesis {
                        tokens,
                        log_prob: hyp.log_prob + lp,
                        finished_at: step,
                    },
                    next.clone(),
                    tok,
                ));
            }
        }
        expansions.sort_by(|(a, _, ta), (b, _, tb)| {
            b.log_prob
                .partial_cmp(&a.log_prob)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| {
                    let ka = a.tokens.iter().copied().chain(std::iter::once(*ta));
                    let kb = b.tokens.iter().copied().chain(std::iter::once(*tb));
                    ka.cmp(kb)
                })
        });
        expansions.truncate(cfg.width);
        live.clear();
        for (hyp, state, tok) in expansions {
            if tok == END || step == max_len {
                finished.push(hyp);
            } else {
                live.push((hyp, state, tok));
            }
        }
        if live.is_empty() {
            break;
        }
        // Log-probabilities only decrease, so nothing live can overtake the
        // best finished hypothesis by total score.
        if !cfg.length_normalize {
            let best_done = finished.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
            if live.iter().all(|(h, _, _)| h.log_prob < best_done) {
                break;
            }
        }
    }
    let mut best = finished.swap_remove(0);
    for h in finished {
        if ranks_before(&h, &best, cfg) {
            best = h;
        }
    }
    Ok(best)
}
