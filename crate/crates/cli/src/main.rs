use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use iqan_core::checkpoint::Checkpoint;
use iqan_core::gradcheck::{run_suite, DEFAULT_STEP, DEFAULT_TOLERANCE};
use iqan_core::microworld::{
    answer_id, generate_dataset, load_dataset, render_grid, save_dataset, split_for_augmentation, world_answers,
    world_vocabulary, write_jsonl, Dataset, QAExample, SplitSpec, CELL_DIM,
};
use iqan_core::train::{augment_with_vqg, encode_examples, evaluate, jsonl_sink, run_regime};
use iqan_core::{Model, Regime, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "iqan", version, about = "Dual visual question answering and generation on a synthetic grid world")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand. Flags win over the config file.
#[derive(Args, Debug, Clone)]
struct Common {
    /// Config file with `[section]` headers and `key = value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,
    /// Dataset directory (train.jsonl, val.jsonl, manifest.json).
    #[arg(long, global = true, value_name = "PATH")]
    data: Option<PathBuf>,
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_regime)]
    regime: Option<Regime>,
    #[arg(long = "set1-fraction", global = true, value_name = "FLOAT")]
    set1_fraction: Option<f64>,
    /// Beam width for question decoding.
    #[arg(long, global = true, value_name = "INT")]
    beam: Option<usize>,
    #[arg(long = "eval-threads", global = true, value_name = "INT")]
    eval_threads: Option<usize>,
}

fn parse_regime(s: &str) -> Result<Regime, String> {
    s.parse().map_err(|e: iqan_core::Error| e.to_string())
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset into --out.
    GenData,
    /// Train under --regime on --data; writes best.ckpt, report.json and metrics.jsonl into --out.
    Train,
    /// Evaluate on the val split of --data. Without --checkpoint a freshly initialised model is used.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Print the five best answers for a question about one image.
    Answer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "image-id")]
        image_id: String,
        #[arg(long)]
        question: String,
    },
    /// Print the question decoded for an answer about one image.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "image-id")]
        image_id: String,
        #[arg(long)]
        answer: String,
    },
    /// Write questions for the answer-only part of the training split.
    Augment {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck,
}

fn effective_config(common: &Common, base: Option<TrainConfig>) -> Result<TrainConfig> {
    let mut cfg = base.unwrap_or_default();
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path).map_err(|e| iqan_core::Error::Io {
            path: path.clone(),
            source: e,
        })?;
        cfg.apply_text(&text, path)?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(r) = common.regime {
        cfg.regime = r;
    }
    if let Some(f) = common.set1_fraction {
        cfg.set1_fraction = f;
    }
    if let Some(b) = common.beam {
        cfg.beam.width = b;
    }
    if let Some(t) = common.eval_threads {
        cfg.eval_threads = t;
    }
    cfg.validate()?;
    eprintln!("# effective config");
    for line in cfg.to_text().lines() {
        eprintln!("# {line}");
    }
    Ok(cfg)
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| iqan_core::Error::InvalidArgument(format!("{flag} is required")).into())
}

fn find_record<'a>(data: &'a Dataset, image_id: &str) -> Result<&'a QAExample> {
    data.train
        .iter()
        .chain(&data.val)
        .find(|e| e.image_id == image_id)
        .ok_or_else(|| iqan_core::Error::InvalidArgument(format!("no record with image_id `{image_id}`")).into())
}

fn load_checkpoint(path: &Path, common: &Common) -> Result<(Checkpoint, TrainConfig)> {
    let ck = Checkpoint::load(path)?;
    let cfg = effective_config(common, Some(ck.config.clone()))?;
    Ok((ck, cfg))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| iqan_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    match &cli.command {
        Command::GenData => {
            let cfg = effective_config(c, None)?;
            let out = require(&c.out, "--out")?;
            let data = generate_dataset(cfg.n_train, cfg.n_val, &cfg.data, cfg.seed)?;
            save_dataset(out, &data)?;
            println!("wrote {} train and {} val records to {}", data.train.len(), data.val.len(), out.display());
        }
        Command::Train => {
            let cfg = effective_config(c, None)?;
            let data = load_dataset(require(&c.data, "--data")?)?;
            let out = require(&c.out, "--out")?;
            std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            let metrics_path = out.join("metrics.jsonl");
            let file = File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?;
            let mut w = BufWriter::new(file);
            let outcome = run_regime(&cfg, &data, &mut jsonl_sink(&mut w))?;
            w.flush()?;
            outcome.checkpoint.save(&out.join("best.ckpt"))?;
            write_json(&out.join("report.json"), &outcome.report)?;
            if outcome.augmented + outcome.dropped > 0 {
                println!("augmented={} dropped={}", outcome.augmented, outcome.dropped);
            }
            println!("regime={}", cfg.regime.as_str());
            print!("{}", outcome.report.to_key_value());
        }
        Command::Eval { checkpoint } => {
            let (model, cfg) = match checkpoint {
                Some(p) => {
                    let (ck, cfg) = load_checkpoint(p, c)?;
                    (ck.model, cfg)
                }
                None => {
                    let cfg = effective_config(c, None)?;
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                    let m = Model::init(
                        &cfg.effective_model(),
                        world_vocabulary().len(),
                        world_answers().len(),
                        CELL_DIM,
                        &mut rng,
                    )?;
                    (m, cfg)
                }
            };
            let data = load_dataset(require(&c.data, "--data")?)?;
            let val = encode_examples(&data.val, &data.manifest.render(), &world_vocabulary())?;
            let report = evaluate(&model, &val, &cfg.beam, cfg.eval_threads)?;
            print!("{}", report.to_key_value());
            if let Some(out) = &c.out {
                std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
                write_json(&out.join("eval.json"), &report)?;
            }
        }
        Command::Answer {
            checkpoint,
            image_id,
            question,
        } => {
            let (ck, _) = load_checkpoint(checkpoint, c)?;
            let data = load_dataset(require(&c.data, "--data")?)?;
            let rec = find_record(&data, image_id)?;
            let grid = render_grid(&rec.scene, &rec.image_id, &data.manifest.render())?;
            let tokens = world_vocabulary().encode(question);
            let answers = world_answers();
            for (id, p) in ck.model.top_answers(&grid, &tokens, 5)? {
                println!("{}\t{p:.4}", answers[id]);
            }
        }
        Command::Generate {
            checkpoint,
            image_id,
            answer,
        } => {
            let (ck, cfg) = load_checkpoint(checkpoint, c)?;
            let data = load_dataset(require(&c.data, "--data")?)?;
            let rec = find_record(&data, image_id)?;
            let grid = render_grid(&rec.scene, &rec.image_id, &data.manifest.render())?;
            let a = answer_id(answer)
                .ok_or_else(|| iqan_core::Error::InvalidArgument(format!("unknown answer `{answer}`")))?;
            let hyp = ck.model.generate(&grid, a, &cfg.beam)?;
            println!("{}", world_vocabulary().decode(&hyp.tokens));
        }
        Command::Augment { checkpoint } => {
            let (ck, cfg) = load_checkpoint(checkpoint, c)?;
            let data = load_dataset(require(&c.data, "--data")?)?;
            let out = require(&c.out, "--out")?;
            let (_, set2) = split_for_augmentation(
                &data.train,
                &SplitSpec {
                    fraction_pairs: cfg.set1_fraction,
                    seed: cfg.seed,
                },
            )?;
            let aug = augment_with_vqg(&ck.model, &set2, &data.manifest.render(), &world_vocabulary(), &cfg.beam)?;
            std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            write_jsonl(&out.join("augmented.jsonl"), &aug.examples)?;
            println!("synthesized={} dropped={}", aug.examples.len(), aug.dropped);
        }
        Command::Gradcheck => {
            effective_config(c, None)?;
            let results = run_suite(DEFAULT_STEP)?;
            let mut failed = 0;
            for r in &results {
                let ok = r.passed(DEFAULT_TOLERANCE);
                failed += usize::from(!ok);
                println!("{}\t{:.3e}\t{}", r.name, r.error, if ok { "ok" } else { "FAIL" });
            }
            if failed > 0 {
                return Err(anyhow!(iqan_core::Error::Numeric(format!(
                    "{failed} of {} gradient checks above {DEFAULT_TOLERANCE:e}",
                    results.len()
                ))));
            }
            println!("all {} checks below {DEFAULT_TOLERANCE:e}", results.len());
        }
    }
    Ok(())
}

fn kind(err: &anyhow::Error) -> &'static str {
    match err.downcast_ref::<iqan_core::Error>() {
        Some(e) => e.kind(),
        None if err.downcast_ref::<std::io::Error>().is_some() => "io",
        None if err.downcast_ref::<serde_json::Error>().is_some() => "parse",
        None => "other",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error[{}]: {msg}", kind(&e));
            ExitCode::FAILURE
        }
    }
}
