//! Training loop, evaluation, VQG augmentation and the experiment regimes.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, RngState};
use crate::codec::{BeamConfig, Vocabulary};
use crate::config::{Regime, TrainConfig};
use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::metrics::{EvalAccumulator, EvalReport};
use crate::microworld::{
    answer_id, render_grid, split_for_augmentation, world_answers, world_vocabulary, Dataset, QAExample, RenderConfig,
    SplitSpec, CELL_DIM,
};
use crate::model::{EncodedExample, Model};
use crate::objectives::LossBreakdown;
use crate::optim::Adam;

/// One line of the metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Training phase within a regime: `set1`, `vqg`, `union` or `finetune`.
    pub phase: String,
    pub epoch: usize,
    pub split: String,
    pub acc1: f64,
    pub acc5: f64,
    pub bleu: f64,
    /// Mean training loss terms over the epoch; absent for epoch 0.
    pub vqa_loss: Option<f64>,
    pub vqg_loss: Option<f64>,
    pub q_duality: Option<f64>,
    pub a_duality: Option<f64>,
    pub total: Option<f64>,
}

impl EpochRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("records always serialize")
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub best_report: EvalReport,
    pub last: Checkpoint,
    pub records: Vec<EpochRecord>,
}

/// Renders grids and maps words and answers to ids.
pub fn encode_examples(examples: &[QAExample], render: &RenderConfig, vocab: &Vocabulary) -> Result<Vec<EncodedExample>> {
    examples
        .iter()
        .map(|e| {
            let answer = answer_id(&e.answer)
                .ok_or_else(|| Error::InvalidArgument(format!("{}: unknown answer `{}`", e.image_id, e.answer)))?;
            Ok(EncodedExample {
                grid: render_grid(&e.scene, &e.image_id, render)?,
                question: e.question.as_deref().map(|q| vocab.encode(q)),
                answer,
            })
        })
        .collect()
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {threads} eval threads: {e}")))
}

/// Answer accuracy and BLEU of beam-decoded questions against the reference
/// questions. Per-example work fans out over
/// `threads` workers (0 = all cores); the sums are folded in input order, so
/// the report does not depend on the thread count.
pub fn evaluate(model: &Model, examples: &[EncodedExample], beam: &BeamConfig, threads: usize) -> Result<EvalReport> {
    let one = |ex: &EncodedExample| -> Result<(Vector, Vec<usize>)> {
        let q = ex
            .question
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("evaluation example has no question".into()))?;
        let scores = model.answer_scores(&ex.grid, q)?;
        let hyp = model.generate(&ex.grid, ex.answer, beam)?;
        Ok((scores, hyp.tokens))
    };
    let results: Vec<_> = if threads == 1 {
        examples.iter().map(one).collect()
    } else {
        pool(threads)?.install(|| examples.par_iter().map(one).collect())
    };
    let mut acc = EvalAccumulator::default();
    for (ex, r) in examples.iter().zip(results) {
        let (scores, hyp) = r?;
        acc.add_answer(&scores, ex.answer)?;
        // BLEU over ids equals BLEU over words: the map is one-to-one
        let h: Vec<String> = hyp.iter().map(|t| t.to_string()).collect();
        let r: Vec<String> = ex.question.iter().flatten().map(|t| t.to_string()).collect();
        let h: Vec<&str> = h.iter().map(|s| s.as_str()).collect();
        let r: Vec<&str> = r.iter().map(|s| s.as_str()).collect();
        acc.add_question(&h, &r)?;
    }
    acc.finish()
}

fn record(phase: &str, epoch: usize, report: &EvalReport, loss: Option<&LossBreakdown>) -> EpochRecord {
    EpochRecord {
        phase: phase.to_string(),
        epoch,
        split: "val".into(),
        acc1: report.acc_at_1,
        acc5: report.acc_at_5,
        bleu: report.bleu,
        vqa_loss: loss.map(|l| l.vqa_loss),
        vqg_loss: loss.map(|l| l.vqg_loss),
        q_duality: loss.map(|l| l.q_duality),
        a_duality: loss.map(|l| l.a_duality),
        total: loss.map(|l| l.total),
    }
}

/// Receives each epoch record as soon as it is computed.
pub type RecordSink<'a> = &'a mut dyn FnMut(&EpochRecord) -> Result<()>;

/// Trains for `config.epochs` epochs and keeps the checkpoint with the best
/// validation Acc@1 (earliest on ties). Epoch 0 is the starting point.
///
/// Starts from `init` when given, otherwise from a fresh model drawn from
/// `config.seed`. Shuffling uses its own stream of the same seed.
pub fn train(
    config: &TrainConfig,
    phase: &str,
    train_set: &[EncodedExample],
    val_set: &[EncodedExample],
    init: Option<Model>,
    sink: RecordSink<'_>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "train and val sets must be nonempty (got {} and {})",
            train_set.len(),
            val_set.len()
        )));
    }
    let weights = config.effective_weights();
    let mut model = match init {
        Some(m) => m,
        None => {
            let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
            Model::init(
                &config.effective_model(),
                world_vocabulary().len(),
                world_answers().len(),
                CELL_DIM,
                &mut init_rng,
            )?
        }
    };
    let mut adam = Adam::new(config.lr, &model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);

    let snapshot = |model: &Model, adam: &Adam, epoch: usize, rng: &ChaCha8Rng| Checkpoint {
        config: config.clone(),
        model: model.clone(),
        adam: Some(adam.clone()),
        epoch,
        rng: Some(RngState::capture(rng)),
    };

    let report = evaluate(&model, val_set, &config.beam, config.eval_threads)?;
    let r0 = record(phase, 0, &report, None);
    sink(&r0)?;
    let mut records = vec![r0];
    let mut best = (snapshot(&model, &adam, 0, &rng), 0, report);

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut parts = Vec::with_capacity(train_set.len());
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&EncodedExample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, grads) = model.batch_gradients(&batch, weights).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("{phase} epoch {epoch} batch {b}: {m}")),
                other => other,
            })?;
            adam.update(&mut model, &grads).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("{phase} epoch {epoch} batch {b}: {m}")),
                other => other,
            })?;
            parts.extend(std::iter::repeat_n(loss, batch.len()));
        }
        let mean = LossBreakdown::mean(&parts).expect("nonempty epoch");
        let report = evaluate(&model, val_set, &config.beam, config.eval_threads)?;
        let r = record(phase, epoch, &report, Some(&mean));
        sink(&r)?;
        records.push(r);
        if report.acc_at_1 > best.2.acc_at_1 {
            best = (snapshot(&model, &adam, epoch, &rng), epoch, report);
        }
    }
    let last = snapshot(&model, &adam, config.epochs, &rng);
    Ok(TrainOutcome {
        best: best.0,
        best_epoch: best.1,
        best_report: best.2,
        last,
        records,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Augmentation {
    pub examples: Vec<QAExample>,
    /// Records whose decoded question came out empty.
    pub dropped: usize,
}

/// Gives every answer-only record a beam-decoded question and marks it
/// synthetic.
pub fn augment_with_vqg(
    model: &Model,
    set2: &[QAExample],
    render: &RenderConfig,
    vocab: &Vocabulary,
    beam: &BeamConfig,
) -> Result<Augmentation> {
    let mut out = Augmentation {
        examples: Vec::with_capacity(set2.len()),
        dropped: 0,
    };
    for e in set2 {
        let answer = answer_id(&e.answer)
            .ok_or_else(|| Error::InvalidArgument(format!("{}: unknown answer `{}`", e.image_id, e.answer)))?;
        let grid = render_grid(&e.scene, &e.image_id, render)?;
        let hyp = model.generate(&grid, answer, beam)?;
        if hyp.tokens.is_empty() {
            out.dropped += 1;
            continue;
        }
        out.examples.push(QAExample {
            question: Some(vocab.decode(&hyp.tokens)),
            synthetic: true,
            ..e.clone()
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct RegimeOutcome {
    pub report: EvalReport,
    pub checkpoint: Checkpoint,
    pub records: Vec<EpochRecord>,
    /// Synthetic examples added to the training set, if any.
    pub augmented: usize,
    pub dropped: usize,
}

/// Runs one experiment row end to end.
///
/// * `baseline`, `dt`: train on Set 1.
/// * `vqg_baseline`, `vqg_dt`: train a model of the same kind on Set 1,
///   let it write questions for Set 2, then train a fresh model on the union.
/// * `vqg_dt_ft`: as `vqg_dt`, then continue on Set 1 alone for
///   [`TrainConfig::finetune_epochs`] epochs with a fresh optimizer.
pub fn run_regime(config: &TrainConfig, data: &Dataset, sink: RecordSink<'_>) -> Result<RegimeOutcome> {
    config.validate()?;
    let render = data.manifest.render();
    let vocab = world_vocabulary();
    let (set1, set2) = split_for_augmentation(
        &data.train,
        &SplitSpec {
            fraction_pairs: config.set1_fraction,
            seed: config.seed,
        },
    )?;
    if set1.is_empty() {
        return Err(Error::Config(format!(
            "set1_fraction {} leaves no labelled pairs out of {}",
            config.set1_fraction,
            data.train.len()
        )));
    }
    let enc1 = encode_examples(&set1, &render, &vocab)?;
    let val = encode_examples(&data.val, &render, &vocab)?;

    if !config.regime.augments() {
        let out = train(config, "set1", &enc1, &val, None, sink)?;
        return Ok(RegimeOutcome {
            report: out.best_report,
            checkpoint: out.best,
            records: out.records,
            augmented: 0,
            dropped: 0,
        });
    }

    let mut records = Vec::new();
    let generator = train(config, "vqg", &enc1, &val, None, sink)?;
    records.extend(generator.records);
    let aug = augment_with_vqg(&generator.best.model, &set2, &render, &vocab, &config.beam)?;
    let mut union = enc1.clone();
    union.extend(encode_examples(&aug.examples, &render, &vocab)?);
    let pre = train(config, "union", &union, &val, None, sink)?;
    records.extend(pre.records);
    let mut outcome = RegimeOutcome {
        report: pre.best_report,
        checkpoint: pre.best,
        records,
        augmented: aug.examples.len(),
        dropped: aug.dropped,
    };
    if config.regime == Regime::VqgDtFt {
        let ft_cfg = TrainConfig {
            epochs: config.finetune_epochs(),
            ..config.clone()
        };
        let ft = train(&ft_cfg, "finetune", &enc1, &val, Some(outcome.checkpoint.model.clone()), sink)?;
        outcome.records.extend(ft.records);
        outcome.report = ft.best_report;
        outcome.checkpoint = ft.best;
    }
    Ok(outcome)
}

/// A sink that writes each record as one JSON line.
pub fn jsonl_sink<W: Write>(w: &mut W) -> impl FnMut(&EpochRecord) -> Result<()> + '_ {
    move |r| {
        writeln!(w, "{}", r.to_json()).map_err(|e| Error::io(Path::new("<metrics>"), e))?;
        w.flush().map_err(|e| Error::io(Path::new("<metrics>"), e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::microworld::{generate_dataset, GenConfig};
    use crate::params::ParamSet;

    fn small_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                d_w: 8,
                d_q: 12,
                d_a: 12,
                t: 12,
                t_v: 12,
                rank: 2,
                ..ModelConfig::default()
            },
            epochs,
            batch_size: 16,
            eval_threads: 1,
            beam: BeamConfig {
                width: 2,
                max_len: 12,
                length_normalize: false,
            },
            ..TrainConfig::default()
        }
    }

    fn data(n_train: usize, n_val: usize) -> (Vec<EncodedExample>, Vec<EncodedExample>) {
        let d = generate_dataset(n_train, n_val, &GenConfig::default(), 5).unwrap();
        let r = d.manifest.render();
        let v = world_vocabulary();
        (encode_examples(&d.train, &r, &v).unwrap(), encode_examples(&d.val, &r, &v).unwrap())
    }

    fn no_sink() -> impl FnMut(&EpochRecord) -> Result<()> {
        |_| Ok(())
    }

    #[test]
    fn zero_epochs_returns_initial_params_with_a_report() {
        let (tr, va) = data(20, 10);
        let cfg = small_config(0);
        let out = train(&cfg, "set1", &tr, &va, None, &mut no_sink()).unwrap();
        let fresh = Model::init(&cfg.effective_model(), 28, 15, CELL_DIM, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
        assert_eq!(out.best.model, fresh);
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.records[0].epoch, 0);
        assert!(out.records[0].total.is_none());
    }

    #[test]
    fn zero_learning_rate_leaves_params() {
        let (tr, va) = data(20, 10);
        let cfg = TrainConfig { lr: 0.0, ..small_config(2) };
        let out = train(&cfg, "set1", &tr, &va, None, &mut no_sink()).unwrap();
        let fresh = Model::init(&cfg.effective_model(), 28, 15, CELL_DIM, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
        assert_eq!(out.last.model, fresh);
        assert_eq!(out.last.adam.as_ref().unwrap().step, 4);
    }

    #[test]
    fn loss_decreases_each_epoch_on_a_micro_run() {
        let (tr, va) = data(200, 20);
        let cfg = small_config(5);
        let out = train(&cfg, "set1", &tr, &va, None, &mut no_sink()).unwrap();
        let totals: Vec<f64> = out.records[1..].iter().map(|r| r.total.unwrap()).collect();
        assert!(totals.windows(2).all(|w| w[1] < w[0]), "{totals:?}");
    }

    #[test]
    fn identical_seeds_give_identical_records() {
        let (tr, va) = data(40, 10);
        let cfg = small_config(2);
        let run = || {
            let mut buf = Vec::new();
            let out = train(&cfg, "set1", &tr, &va, None, &mut jsonl_sink(&mut buf)).unwrap();
            (buf, out.last.to_bytes())
        };
        let (a, ca) = run();
        let (b, cb) = run();
        assert_eq!(a, b);
        assert_eq!(ca, cb);
        let other = TrainConfig { seed: 2, ..cfg.clone() };
        let mut buf = Vec::new();
        train(&other, "set1", &tr, &va, None, &mut jsonl_sink(&mut buf)).unwrap();
        assert_ne!(a, buf);
    }

    #[test]
    fn eval_does_not_depend_on_thread_count() {
        let (tr, va) = data(10, 30);
        let _ = tr;
        let cfg = small_config(0);
        let m = Model::init(&cfg.model, 28, 15, CELL_DIM, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let a = evaluate(&m, &va, &cfg.beam, 1).unwrap();
        let b = evaluate(&m, &va, &cfg.beam, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn baseline_regime_trains_separate_sets_without_duality() {
        let cfg = TrainConfig {
            regime: Regime::Baseline,
            ..small_config(1)
        };
        let d = generate_dataset(30, 10, &GenConfig::default(), 2).unwrap();
        let out = run_regime(&cfg, &d, &mut no_sink()).unwrap();
        let m = &out.checkpoint.model;
        assert_eq!(m.fusion_sets(), 2);
        assert!(!m.config.duality_regularizer);
        assert_eq!(cfg.effective_weights().q_duality, 0.0);
        assert!(m.arrays("").iter().any(|a| a.name == "answers_classifier.e_a"));
    }

    #[test]
    fn augmentation_of_nothing_is_nothing() {
        let cfg = small_config(0);
        let m = Model::init(&cfg.model, 28, 15, CELL_DIM, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let r = GenConfig::default().render(1);
        let aug = augment_with_vqg(&m, &[], &r, &world_vocabulary(), &cfg.beam).unwrap();
        assert!(aug.examples.is_empty());
        assert_eq!(aug.dropped, 0);
    }

    #[test]
    fn dt_at_full_fraction_skips_augmentation() {
        let cfg = small_config(1);
        let d = generate_dataset(20, 10, &GenConfig::default(), 2).unwrap();
        let out = run_regime(&cfg, &d, &mut no_sink()).unwrap();
        assert_eq!(out.augmented, 0);
        assert!(out.records.iter().all(|r| r.phase == "set1"));
    }

    #[test]
    fn finetune_regime_runs_all_phases() {
        let cfg = TrainConfig {
            regime: Regime::VqgDtFt,
            set1_fraction: 0.5,
            finetune_fraction: 0.5,
            ..small_config(2)
        };
        let d = generate_dataset(20, 8, &GenConfig::default(), 2).unwrap();
        let out = run_regime(&cfg, &d, &mut no_sink()).unwrap();
        let phases: Vec<&str> = out.records.iter().map(|r| r.phase.as_str()).collect();
        assert_eq!(phases.iter().filter(|p| **p == "finetune").count(), 2);
        assert!(phases.contains(&"vqg") && phases.contains(&"union"));
        assert_eq!(out.augmented + out.dropped, 10);
    }
}
