//! Experiment configuration and its flat `key=value` text form.
//!
//! ```text
//! [model]
//! t = 24
//! dual_mutan = true
//! [train]
//! lr = 0.004
//! ```
//!
//! Keys are addressed as `section.key`. A dotted key may also appear
//! outside any section. `#` starts a comment.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::codec::BeamConfig;
use crate::error::{Error, Result};
use crate::fusion::Backend;
use crate::microworld::GenConfig;
use crate::objectives::LossWeights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Regime {
    Baseline,
    #[default]
    Dt,
    VqgBaseline,
    VqgDt,
    VqgDtFt,
}

impl Regime {
    pub const ALL: [Regime; 5] = [
        Regime::Baseline,
        Regime::Dt,
        Regime::VqgBaseline,
        Regime::VqgDt,
        Regime::VqgDtFt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Baseline => "baseline",
            Regime::Dt => "dt",
            Regime::VqgBaseline => "vqg_baseline",
            Regime::VqgDt => "vqg_dt",
            Regime::VqgDtFt => "vqg_dt_ft",
        }
    }

    /// Regimes built on separately trained VQA and VQG models.
    pub fn is_baseline(self) -> bool {
        matches!(self, Regime::Baseline | Regime::VqgBaseline)
    }

    pub fn augments(self) -> bool {
        matches!(self, Regime::VqgBaseline | Regime::VqgDt | Regime::VqgDtFt)
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Regime> {
        Regime::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown regime `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub d_w: usize,
    pub d_q: usize,
    pub d_a: usize,
    pub t: usize,
    pub t_v: usize,
    pub rank: usize,
    pub backend: Backend,
    /// One fusion parameter set for both directions.
    pub dual_mutan: bool,
    pub duality_regularizer: bool,
    /// Answer table tied to the classifier, one recurrent cell for question
    /// encoding and decoding.
    pub share_codec: bool,
    pub share_attention: bool,
    /// Feed the projected-space fused features straight to the answer
    /// classifier and question decoder.
    pub skip_final_projection: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_w: 16,
            d_q: 24,
            d_a: 24,
            t: 24,
            t_v: 24,
            rank: 3,
            backend: Backend::Mutan,
            dual_mutan: true,
            duality_regularizer: true,
            share_codec: true,
            share_attention: true,
            skip_final_projection: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.d_w, self.d_q, self.d_a, self.t, self.t_v, self.rank];
        if dims.contains(&0) {
            return Err(Error::Config(format!("model dims must all be >= 1: {self:?}")));
        }
        if self.skip_final_projection && (self.t != self.d_q || self.t != self.d_a) {
            return Err(Error::Config(format!(
                "skip_final_projection feeds t-dim features to the classifier and decoder, \
                 so it needs t == d_q == d_a (got t={} d_q={} d_a={})",
                self.t, self.d_q, self.d_a
            )));
        }
        if self.share_attention && self.d_q != self.d_a {
            return Err(Error::Config(format!(
                "a shared attention head takes both question and answer guides, so d_q must equal d_a \
                 (got {} and {})",
                self.d_q, self.d_a
            )));
        }
        if self.backend == Backend::Mlb && self.t != self.t_v {
            return Err(Error::Config(format!("mlb backend needs t == t_v, got {} and {}", self.t, self.t_v)));
        }
        Ok(())
    }

    /// The five ablation rows as `(dual_mutan, duality_regularizer,
    /// share_codec)`, baseline first.
    pub const ABLATION_ROWS: [(bool, bool, bool); 5] = [
        (false, false, false),
        (true, false, false),
        (true, false, true),
        (true, true, false),
        (true, true, true),
    ];

    pub fn with_flags(self, (dual_mutan, duality_regularizer, share_codec): (bool, bool, bool)) -> Self {
        Self {
            dual_mutan,
            duality_regularizer,
            share_codec,
            ..self
        }
    }

    /// Everything shared off and no regularizer: two independent models.
    pub fn separated(self) -> Self {
        Self {
            dual_mutan: false,
            duality_regularizer: false,
            share_codec: false,
            share_attention: false,
            ..self
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub regime: Regime,
    pub set1_fraction: f64,
    /// Finetune epochs as a fraction of the pretrain epochs.
    pub finetune_fraction: f64,
    pub beam: BeamConfig,
    /// Worker threads for evaluation; 0 uses every core.
    pub eval_threads: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub data: GenConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            lr: 4e-3,
            batch_size: 32,
            epochs: 50,
            seed: 1,
            regime: Regime::Dt,
            set1_fraction: 1.0,
            finetune_fraction: 0.2,
            beam: BeamConfig {
                width: 3,
                max_len: 12,
                length_normalize: false,
            },
            eval_threads: 0,
            n_train: 2000,
            n_val: 500,
            data: GenConfig::default(),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean `{value}` for `{key}`"))),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        self.data.validate()?;
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.set1_fraction > 0.0 && self.set1_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "set1_fraction must be in (0, 1], got {}",
                self.set1_fraction
            )));
        }
        if !(self.finetune_fraction.is_finite() && self.finetune_fraction >= 0.0) {
            return Err(Error::Config(format!(
                "finetune_fraction must be >= 0, got {}",
                self.finetune_fraction
            )));
        }
        if self.beam.width == 0 || self.beam.max_len == 0 {
            return Err(Error::Config("decode.beam and decode.max_len must be >= 1".into()));
        }
        if self.n_train == 0 {
            return Err(Error::Config("data.n_train must be >= 1".into()));
        }
        Ok(())
    }

    /// The model actually trained under the configured regime. Baseline
    /// regimes always train two separate models.
    pub fn effective_model(&self) -> ModelConfig {
        if self.regime.is_baseline() {
            self.model.separated()
        } else {
            self.model
        }
    }

    /// Loss weights with the duality terms zeroed when the regularizer is
    /// off.
    pub fn effective_weights(&self) -> LossWeights {
        if self.effective_model().duality_regularizer {
            self.weights
        } else {
            LossWeights {
                q_duality: 0.0,
                a_duality: 0.0,
                ..self.weights
            }
        }
    }

    pub fn finetune_epochs(&self) -> usize {
        (self.finetune_fraction * self.epochs as f64).round() as usize
    }

    /// Sets one `section.key`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let m = &mut self.model;
        match key {
            "model.d_w" => m.d_w = parse_value(key, value)?,
            "model.d_q" => m.d_q = parse_value(key, value)?,
            "model.d_a" => m.d_a = parse_value(key, value)?,
            "model.t" => m.t = parse_value(key, value)?,
            "model.t_v" => m.t_v = parse_value(key, value)?,
            "model.rank" => m.rank = parse_value(key, value)?,
            "model.backend" => m.backend = Backend::parse(value)?,
            "model.dual_mutan" => m.dual_mutan = parse_bool(key, value)?,
            "model.duality_regularizer" => m.duality_regularizer = parse_bool(key, value)?,
            "model.share_codec" => m.share_codec = parse_bool(key, value)?,
            "model.share_attention" => m.share_attention = parse_bool(key, value)?,
            "model.skip_final_projection" => m.skip_final_projection = parse_bool(key, value)?,
            "loss.vqa" => self.weights.vqa = parse_value(key, value)?,
            "loss.vqg" => self.weights.vqg = parse_value(key, value)?,
            "loss.q_duality" => self.weights.q_duality = parse_value(key, value)?,
            "loss.a_duality" => self.weights.a_duality = parse_value(key, value)?,
            "train.lr" => self.lr = parse_value(key, value)?,
            "train.batch_size" => self.batch_size = parse_value(key, value)?,
            "train.epochs" => self.epochs = parse_value(key, value)?,
            "train.seed" => self.seed = parse_value(key, value)?,
            "train.regime" => self.regime = value.parse()?,
            "train.set1_fraction" => self.set1_fraction = parse_value(key, value)?,
            "train.finetune_fraction" => self.finetune_fraction = parse_value(key, value)?,
            "decode.beam" => self.beam.width = parse_value(key, value)?,
            "decode.max_len" => self.beam.max_len = parse_value(key, value)?,
            "decode.length_normalize" => self.beam.length_normalize = parse_bool(key, value)?,
            "eval.threads" => self.eval_threads = parse_value(key, value)?,
            "data.n_train" => self.n_train = parse_value(key, value)?,
            "data.n_val" => self.n_val = parse_value(key, value)?,
            "data.sigma" => self.data.sigma = parse_value(key, value)?,
            "data.height" => self.data.height = parse_value(key, value)?,
            "data.width" => self.data.width = parse_value(key, value)?,
            "data.min_objects" => self.data.min_objects = parse_value(key, value)?,
            "data.max_objects" => self.data.max_objects = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines on top of `self`. `origin` names the
    /// source in parse errors.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message,
            };
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| err(format!("unterminated section header `{line}`")))?;
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got `{line}`")))?;
            let k = k.trim();
            let full = if k.contains('.') || section.is_empty() {
                k.to_string()
            } else {
                format!("{section}.{k}")
            };
            self.set(&full, v).map_err(|e| err(e.to_string()))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text, origin)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }

    /// Full effective configuration; parsing it back gives `self`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let _ = writeln!(s, "[model]");
        let _ = writeln!(s, "d_w = {}", m.d_w);
        let _ = writeln!(s, "d_q = {}", m.d_q);
        let _ = writeln!(s, "d_a = {}", m.d_a);
        let _ = writeln!(s, "t = {}", m.t);
        let _ = writeln!(s, "t_v = {}", m.t_v);
        let _ = writeln!(s, "rank = {}", m.rank);
        let _ = writeln!(s, "backend = {}", m.backend.as_str());
        let _ = writeln!(s, "dual_mutan = {}", m.dual_mutan);
        let _ = writeln!(s, "duality_regularizer = {}", m.duality_regularizer);
        let _ = writeln!(s, "share_codec = {}", m.share_codec);
        let _ = writeln!(s, "share_attention = {}", m.share_attention);
        let _ = writeln!(s, "skip_final_projection = {}", m.skip_final_projection);
        let _ = writeln!(s, "[loss]");
        let _ = writeln!(s, "vqa = {:?}", self.weights.vqa);
        let _ = writeln!(s, "vqg = {:?}", self.weights.vqg);
        let _ = writeln!(s, "q_duality = {:?}", self.weights.q_duality);
        let _ = writeln!(s, "a_duality = {:?}", self.weights.a_duality);
        let _ = writeln!(s, "[train]");
        let _ = writeln!(s, "lr = {:?}", self.lr);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "regime = {}", self.regime.as_str());
        let _ = writeln!(s, "set1_fraction = {:?}", self.set1_fraction);
        let _ = writeln!(s, "finetune_fraction = {:?}", self.finetune_fraction);
        let _ = writeln!(s, "[decode]");
        let _ = writeln!(s, "beam = {}", self.beam.width);
        let _ = writeln!(s, "max_len = {}", self.beam.max_len);
        let _ = writeln!(s, "length_normalize = {}", self.beam.length_normalize);
        let _ = writeln!(s, "[eval]");
        let _ = writeln!(s, "threads = {}", self.eval_threads);
        let _ = writeln!(s, "[data]");
        let _ = writeln!(s, "n_train = {}", self.n_train);
        let _ = writeln!(s, "n_val = {}", self.n_val);
        let _ = writeln!(s, "sigma = {:?}", self.data.sigma);
        let _ = writeln!(s, "height = {}", self.data.height);
        let _ = writeln!(s, "width = {}", self.data.width);
        let _ = writeln!(s, "min_objects = {}", self.data.min_objects);
        let _ = writeln!(s, "max_objects = {}", self.data.max_objects);
        s
    }
}
