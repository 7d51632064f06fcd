//! On-disk model snapshots.
//!
//! A checkpoint is a UTF-8 header followed by raw little-endian f64
//! payloads:
//!
//! ```text
//! iqan-checkpoint v1
//! epoch 7
//! rng seed=<64 hex> stream=0 word_pos=1234
//! adam step=210 lr=0.004
//! shape vocab=28 answers=15 d_v=16
//! [config]
//! ...config text...
//! [arrays]
//! fusion.w_q dims=24x24 offset=0 len=576
//! adam.m/fusion.w_q dims=24x24 offset=4608 len=576
//! ...
//! [payload]
//! ```
//!
//! Offsets are in bytes from the first byte after the `[payload]` line.
//! Lines `rng` and `adam` are optional.

use std::fmt::Write as _;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::Adam;
use crate::params::ParamSet;

pub const MAGIC: &str = "iqan-checkpoint v1";
const PAYLOAD_MARK: &str = "[payload]\n";

/// Position of a [`ChaCha8Rng`] stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Snapshot of the run configuration; its model section is the model
    /// actually stored.
    pub config: TrainConfig,
    pub model: Model,
    pub adam: Option<Adam>,
    pub epoch: usize,
    pub rng: Option<RngState>,
}

struct Entry {
    name: String,
    dims: Vec<usize>,
    offset: usize,
    len: usize,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn dims_text(dims: &[usize]) -> String {
    dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<[u8; 32]> {
    if s.len() != 64 || !s.is_ascii() {
        return Err(bad(format!("rng seed must be 64 hex digits, got `{s}`")));
    }
    let mut out = [0u8; 32];
    for (i, byte) in out.iter_mut().enumerate() {
        *byte = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| bad(format!("bad hex in rng seed `{s}`")))?;
    }
    Ok(out)
}

/// `key=value` fields of a header line after its leading word.
fn fields<'a>(line: &'a str, word: &str) -> Result<Vec<(&'a str, &'a str)>> {
    let rest = line
        .strip_prefix(word)
        .ok_or_else(|| bad(format!("expected `{word}` line, got `{line}`")))?;
    rest.split_whitespace()
        .map(|kv| kv.split_once('=').ok_or_else(|| bad(format!("bad field `{kv}` in `{line}`"))))
        .collect()
}

fn field<'a>(fs: &[(&'a str, &'a str)], key: &str, line: &str) -> Result<&'a str> {
    fs.iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| *v)
        .ok_or_else(|| bad(format!("missing `{key}` in `{line}`")))
}

fn num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse().map_err(|_| bad(format!("bad {what} `{s}`")))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut cfg = self.config.clone();
        cfg.model = self.model.config;

        let mut arrays: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        let params = self.model.arrays("");
        for a in &params {
            arrays.push((a.name.clone(), a.dims.clone(), a.data));
        }
        if let Some(adam) = &self.adam {
            for (a, m) in params.iter().zip(&adam.m) {
                arrays.push((format!("adam.m/{}", a.name), a.dims.clone(), m));
            }
            for (a, v) in params.iter().zip(&adam.v) {
                arrays.push((format!("adam.v/{}", a.name), a.dims.clone(), v));
            }
        }

        let mut h = String::new();
        let _ = writeln!(h, "{MAGIC}");
        let _ = writeln!(h, "epoch {}", self.epoch);
        if let Some(r) = &self.rng {
            let _ = writeln!(h, "rng seed={} stream={} word_pos={}", hex(&r.seed), r.stream, r.word_pos);
        }
        if let Some(a) = &self.adam {
            let _ = writeln!(h, "adam step={} lr={:?}", a.step, a.lr);
        }
        let _ = writeln!(
            h,
            "shape vocab={} answers={} d_v={}",
            self.model.vocab_size(),
            self.model.n_answers(),
            self.model.d_v()
        );
        h.push_str("[config]\n");
        h.push_str(&cfg.to_text());
        h.push_str("[arrays]\n");
        let mut offset = 0;
        for (name, dims, data) in &arrays {
            let _ = writeln!(h, "{name} dims={} offset={offset} len={}", dims_text(dims), data.len());
            offset += data.len() * 8;
        }
        h.push_str(PAYLOAD_MARK);

        let mut out = h.into_bytes();
        out.reserve(offset);
        for (_, _, data) in &arrays {
            for x in data.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mark = bytes
            .windows(PAYLOAD_MARK.len())
            .position(|w| w == PAYLOAD_MARK.as_bytes())
            .ok_or_else(|| bad("no payload marker"))?;
        let header = std::str::from_utf8(&bytes[..mark]).map_err(|_| bad("header is not UTF-8"))?;
        let payload = &bytes[mark + PAYLOAD_MARK.len()..];
        let mut lines = header.lines();

        if lines.next() != Some(MAGIC) {
            return Err(bad(format!("not a checkpoint or unsupported version (want `{MAGIC}`)")));
        }
        let epoch_line = lines.next().unwrap_or("");
        let epoch = num(
            epoch_line
                .strip_prefix("epoch ")
                .ok_or_else(|| bad(format!("expected epoch line, got `{epoch_line}`")))?,
            "epoch",
        )?;

        let mut rng = None;
        let mut adam_head = None;
        let mut line = lines.next().unwrap_or("");
        if line.starts_with("rng ") {
            let fs = fields(line, "rng")?;
            rng = Some(RngState {
                seed: unhex(field(&fs, "seed", line)?)?,
                stream: num(field(&fs, "stream", line)?, "rng stream")?,
                word_pos: num(field(&fs, "word_pos", line)?, "rng word_pos")?,
            });
            line = lines.next().unwrap_or("");
        }
        if line.starts_with("adam ") {
            let fs = fields(line, "adam")?;
            let step: u64 = num(field(&fs, "step", line)?, "adam step")?;
            let lr: f64 = num(field(&fs, "lr", line)?, "adam lr")?;
            adam_head = Some((step, lr));
            line = lines.next().unwrap_or("");
        }
        let fs = fields(line, "shape")?;
        let vocab: usize = num(field(&fs, "vocab", line)?, "vocab size")?;
        let answers: usize = num(field(&fs, "answers", line)?, "answer count")?;
        let d_v: usize = num(field(&fs, "d_v", line)?, "d_v")?;

        if lines.next() != Some("[config]") {
            return Err(bad("missing [config] block"));
        }
        let mut cfg_text = String::new();
        let mut found_arrays = false;
        for l in lines.by_ref() {
            if l == "[arrays]" {
                found_arrays = true;
                break;
            }
            cfg_text.push_str(l);
            cfg_text.push('\n');
        }
        if !found_arrays {
            return Err(bad("missing [arrays] block"));
        }
        let config = TrainConfig::from_text(&cfg_text, Path::new("<checkpoint>"))
            .map_err(|e| bad(format!("config block: {e}")))?;

        let mut entries = Vec::new();
        for l in lines {
            let (name, rest) = l.split_once(' ').ok_or_else(|| bad(format!("bad manifest line `{l}`")))?;
            let fs = fields(rest, "")?;
            let dims = field(&fs, "dims", l)?
                .split('x')
                .map(|d| num(d, "dimension"))
                .collect::<Result<Vec<usize>>>()?;
            let entry = Entry {
                name: name.to_string(),
                dims,
                offset: num(field(&fs, "offset", l)?, "offset")?,
                len: num(field(&fs, "len", l)?, "length")?,
            };
            if entry.dims.iter().product::<usize>() != entry.len {
                return Err(bad(format!("`{}`: dims {:?} disagree with len {}", entry.name, entry.dims, entry.len)));
            }
            if !entry.offset.is_multiple_of(8) || entry.offset + entry.len * 8 > payload.len() {
                return Err(bad(format!("`{}`: payload range out of bounds", entry.name)));
            }
            entries.push(entry);
        }

        let mut dummy = ChaCha8Rng::seed_from_u64(0);
        let mut model = Model::init(&config.model, vocab, answers, d_v, &mut dummy)?;
        let expected: Vec<(String, Vec<usize>)> = model.arrays("").into_iter().map(|a| (a.name, a.dims)).collect();
        let n = expected.len();
        let want_entries = if adam_head.is_some() { 3 * n } else { n };
        if entries.len() != want_entries {
            return Err(bad(format!("manifest has {} arrays, expected {want_entries}", entries.len())));
        }
        let read = |e: &Entry| -> Vec<f64> {
            payload[e.offset..e.offset + e.len * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect()
        };
        let check = |e: &Entry, name: &str, dims: &[usize]| -> Result<()> {
            if e.name != name || e.dims != dims {
                return Err(bad(format!(
                    "manifest entry `{}` {:?} where `{name}` {dims:?} was expected",
                    e.name, e.dims
                )));
            }
            Ok(())
        };
        for ((e, (name, dims)), dst) in entries.iter().zip(&expected).zip(model.arrays_mut()) {
            check(e, name, dims)?;
            dst.copy_from_slice(&read(e));
        }
        let adam = match adam_head {
            None => None,
            Some((step, lr)) => {
                let mut m = Vec::with_capacity(n);
                let mut v = Vec::with_capacity(n);
                for (i, (name, dims)) in expected.iter().enumerate() {
                    let em = &entries[n + i];
                    let ev = &entries[2 * n + i];
                    check(em, &format!("adam.m/{name}"), dims)?;
                    check(ev, &format!("adam.v/{name}"), dims)?;
                    m.push(read(em));
                    v.push(read(ev));
                }
                Some(Adam { lr, step, m, v })
            }
        };
        Ok(Self {
            config,
            model,
            adam,
            epoch,
            rng,
        })
    }

    /// Writes via a temporary file so a crash never leaves half a checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::FeatureGrid;
    use crate::linalg::Matrix;
    use crate::objectives::LossWeights;
    use rand::RngCore;

    fn sample(flags: (bool, bool, bool), with_state: bool) -> Checkpoint {
        let mut config = TrainConfig::default();
        config.model = config.model.with_flags(flags);
        config.model.share_attention = flags.2;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = Model::init(&config.model, 20, 15, 16, &mut rng).unwrap();
        let mut adam = Adam::new(0.01, &model).unwrap();
        let mut model = model;
        // a few real updates so the moments are not all zero
        let grid = FeatureGrid::new(2, 2, Matrix::uniform(4, 16, 1.0, &mut rng)).unwrap();
        let ex = crate::model::EncodedExample {
            grid,
            question: Some(vec![5, 9, 4]),
            answer: 3,
        };
        for _ in 0..2 {
            let (_, g) = model.batch_gradients(&[&ex], LossWeights::default()).unwrap();
            adam.update(&mut model, &g).unwrap();
        }
        rng.next_u64();
        Checkpoint {
            config,
            model,
            adam: with_state.then_some(adam),
            epoch: 4,
            rng: with_state.then(|| RngState::capture(&rng)),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for flags in crate::config::ModelConfig::ABLATION_ROWS {
            for with_state in [true, false] {
                let ck = sample(flags, with_state);
                let bytes = ck.to_bytes();
                let back = Checkpoint::from_bytes(&bytes).unwrap();
                assert_eq!(back, ck);
                assert_eq!(back.to_bytes(), bytes);
                for (a, b) in ck.model.arrays("").iter().zip(back.model.arrays("")) {
                    assert!(a.data.iter().zip(b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
                }
            }
        }
    }

    #[test]
    fn forward_and_rng_survive_a_file_round_trip() {
        let ck = sample((true, true, true), true);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let grid = FeatureGrid::new(3, 3, Matrix::uniform(9, 16, 1.0, &mut r)).unwrap();
        let q = [4, 7, 8, 5];
        let a = ck.model.answer_scores(&grid, &q).unwrap();
        let b = back.model.answer_scores(&grid, &q).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        let mut r1 = ck.rng.unwrap().restore();
        let mut r2 = back.rng.unwrap().restore();
        assert_eq!(r1.next_u64(), r2.next_u64());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample((true, true, true), false).to_bytes();
        assert!(Checkpoint::from_bytes(b"hello").is_err());
        let mut wrong_magic = bytes.clone();
        wrong_magic[16] = b'9';
        assert!(Checkpoint::from_bytes(&wrong_magic).is_err());
        let truncated = &bytes[..bytes.len() - 8];
        let err = Checkpoint::from_bytes(truncated).unwrap_err();
        assert_eq!(err.kind(), "checkpoint");
        let mark = bytes.windows(9).position(|w| w == b"[payload]").unwrap();
        let header = std::str::from_utf8(&bytes[..mark]).unwrap();
        assert!(header.contains("\nfusion.w_q dims="));
        let mut renamed = header.replacen("\nfusion.w_q dims=", "\nfusion.w_x dims=", 1).into_bytes();
        renamed.extend_from_slice(&bytes[mark..]);
        let err = Checkpoint::from_bytes(&renamed).unwrap_err();
        assert!(err.to_string().contains("fusion.w_x"), "{err}");
    }
}
