//! A small CLEVR-like world: symbolic scenes on a grid, rendered to cell
//! features, with templated "what ..." questions about one object's
//! shape, color, size or material.
//!
//! Every question mentions the three attributes it does not ask about, and
//! scenes where that description matches more than one object are
//! rejected, so the answer is always a plain attribute lookup.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::FeatureGrid;
use crate::codec::Vocabulary;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const SHAPES: [&str; 3] = ["cube", "sphere", "cylinder"];
pub const COLORS: [&str; 8] = ["red", "green", "blue", "yellow", "purple", "cyan", "gray", "brown"];
pub const SIZES: [&str; 2] = ["small", "large"];
pub const MATERIALS: [&str; 2] = ["rubber", "metal"];

/// Attribute one-hots plus an occupancy bit.
pub const CELL_DIM: usize = SHAPES.len() + COLORS.len() + SIZES.len() + MATERIALS.len() + 1;

pub const TEMPLATES: [&str; 2] = [
    "what <qtype> is the <mentions> <noun>",
    "what is the <qtype> of the <mentions> <noun>",
];

const FUNCTION_WORDS: [&str; 4] = ["what", "is", "the", "of"];
const GENERIC_NOUN: &str = "object";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QType {
    Shape,
    Color,
    Size,
    Material,
}

impl QType {
    pub const ALL: [QType; 4] = [QType::Shape, QType::Color, QType::Size, QType::Material];

    pub fn as_str(self) -> &'static str {
        match self {
            QType::Shape => "shape",
            QType::Color => "color",
            QType::Size => "size",
            QType::Material => "material",
        }
    }

    pub fn parse(s: &str) -> Option<QType> {
        QType::ALL.into_iter().find(|q| q.as_str() == s)
    }

    pub fn values(self) -> &'static [&'static str] {
        match self {
            QType::Shape => &SHAPES,
            QType::Color => &COLORS,
            QType::Size => &SIZES,
            QType::Material => &MATERIALS,
        }
    }

    /// Which attribute a value word belongs to.
    pub fn of_value(word: &str) -> Option<QType> {
        QType::ALL.into_iter().find(|q| q.values().contains(&word))
    }
}

impl fmt::Display for QType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneObject {
    pub row: usize,
    pub col: usize,
    pub shape: String,
    pub color: String,
    pub size: String,
    pub material: String,
}

impl SceneObject {
    pub fn attribute(&self, q: QType) -> &str {
        match q {
            QType::Shape => &self.shape,
            QType::Color => &self.color,
            QType::Size => &self.size,
            QType::Material => &self.material,
        }
    }

    fn validate(&self) -> Result<()> {
        for q in QType::ALL {
            if !q.values().contains(&self.attribute(q)) {
                return Err(Error::InvalidArgument(format!(
                    "unknown {q} value `{}`",
                    self.attribute(q)
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
}

impl SceneSpec {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.objects.is_empty() {
            return Err(Error::InvalidArgument("scene has no objects".into()));
        }
        let mut seen = HashSet::new();
        for o in &self.objects {
            o.validate()?;
            if o.row >= height || o.col >= width {
                return Err(Error::InvalidArgument(format!(
                    "object at ({}, {}) outside the {height}x{width} grid",
                    o.row, o.col
                )));
            }
            if !seen.insert((o.row, o.col)) {
                return Err(Error::InvalidArgument(format!("two objects in cell ({}, {})", o.row, o.col)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub height: usize,
    pub width: usize,
    /// Amplitude of the uniform per-object noise.
    pub sigma: f64,
    pub seed: u64,
}

fn fnv1a(bytes: &[u8], mut h: u64) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn cell_noise_seed(seed: u64, image_id: &str, row: usize, col: usize) -> u64 {
    let mut h = fnv1a(&seed.to_le_bytes(), 0xcbf2_9ce4_8422_2325);
    h = fnv1a(image_id.as_bytes(), h);
    h = fnv1a(&(row as u64).to_le_bytes(), h);
    fnv1a(&(col as u64).to_le_bytes(), h)
}

/// Clean feature vector of one object: shape, color, size and material
/// one-hots followed by the occupancy bit.
pub fn object_features(o: &SceneObject) -> Vec<f64> {
    let mut out = Vec::with_capacity(CELL_DIM);
    for q in QType::ALL {
        out.extend(q.values().iter().map(|v| if *v == o.attribute(q) { 1.0 } else { 0.0 }));
    }
    out.push(1.0);
    out
}

/// Row-major grid of cell features. Empty cells are zero; occupied cells get
/// their attribute encoding plus noise seeded from `(seed, image_id, cell)`.
pub fn render_grid(scene: &SceneSpec, image_id: &str, cfg: &RenderConfig) -> Result<FeatureGrid> {
    scene.validate(cfg.height, cfg.width)?;
    let mut cells = Matrix::zeros(cfg.height * cfg.width, CELL_DIM);
    for o in &scene.objects {
        let mut rng = ChaCha8Rng::seed_from_u64(cell_noise_seed(cfg.seed, image_id, o.row, o.col));
        let idx = o.row * cfg.width + o.col;
        for (d, x) in object_features(o).into_iter().enumerate() {
            let noise = if cfg.sigma > 0.0 {
                rng.gen_range(-cfg.sigma..=cfg.sigma)
            } else {
                0.0
            };
            cells.set(idx, d, x + noise);
        }
    }
    FeatureGrid::new(cfg.height, cfg.width, cells)
}

/// One record of a dataset file. `question` is absent for answer-only
/// records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAExample {
    pub image_id: String,
    pub scene: SceneSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    pub answer: String,
    pub qtype: QType,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub synthetic: bool,
}

impl QAExample {
    pub fn question_tokens(&self) -> Option<Vec<&str>> {
        self.question.as_ref().map(|q| q.split_whitespace().collect())
    }
}

/// All words the templates can produce.
pub fn world_vocabulary() -> Vocabulary {
    let mut words: Vec<&str> = FUNCTION_WORDS.to_vec();
    words.extend(QType::ALL.iter().map(|q| q.as_str()));
    words.push(GENERIC_NOUN);
    for q in QType::ALL {
        words.extend(q.values());
    }
    Vocabulary::new(words)
}

/// Answer classes in fixed order: shapes, colors, sizes, materials.
pub fn world_answers() -> Vec<&'static str> {
    QType::ALL.iter().flat_map(|q| q.values().iter().copied()).collect()
}

pub fn answer_id(answer: &str) -> Option<usize> {
    world_answers().iter().position(|a| *a == answer)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub sigma: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            height: 4,
            width: 4,
            min_objects: 2,
            max_objects: 5,
            sigma: 0.1,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("grid must be at least 1x1".into()));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::Config(format!(
                "need 1 <= min_objects <= max_objects, got {}..{}",
                self.min_objects, self.max_objects
            )));
        }
        if self.max_objects > self.height * self.width {
            return Err(Error::Config(format!(
                "{} objects do not fit a {}x{} grid",
                self.max_objects, self.height, self.width
            )));
        }
        // every object must be describable uniquely by three attributes
        let tuples = SHAPES.len() * COLORS.len() * SIZES.len() * MATERIALS.len();
        if self.max_objects > tuples {
            return Err(Error::Config(format!("attribute space too small for {} objects", self.max_objects)));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::Config(format!("sigma must be finite and >= 0, got {}", self.sigma)));
        }
        Ok(())
    }

    pub fn render(&self, seed: u64) -> RenderConfig {
        RenderConfig {
            height: self.height,
            width: self.width,
            sigma: self.sigma,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub sigma: f64,
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub templates: Vec<String>,
}

impl Manifest {
    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            height: self.height,
            width: self.width,
            min_objects: self.min_objects,
            max_objects: self.max_objects,
            sigma: self.sigma,
        }
    }

    pub fn render(&self) -> RenderConfig {
        self.gen_config().render(self.seed)
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<QAExample>,
    pub val: Vec<QAExample>,
    pub manifest: Manifest,
}

fn pick<'a, R: Rng + ?Sized>(values: &[&'a str], rng: &mut R) -> &'a str {
    values[rng.gen_range(0..values.len())]
}

fn random_scene<R: Rng + ?Sized>(cfg: &GenConfig, rng: &mut R) -> SceneSpec {
    let n = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut cells: Vec<usize> = (0..cfg.height * cfg.width).collect();
    cells.shuffle(rng);
    let mut cells = cells[..n].to_vec();
    cells.sort_unstable();
    let objects = cells
        .into_iter()
        .map(|c| SceneObject {
            row: c / cfg.width,
            col: c % cfg.width,
            shape: pick(&SHAPES, rng).into(),
            color: pick(&COLORS, rng).into(),
            size: pick(&SIZES, rng).into(),
            material: pick(&MATERIALS, rng).into(),
        })
        .collect();
    SceneSpec { objects }
}

/// Words describing `o` without mentioning `asked`: size, color, material,
/// then the noun (its shape, or "object" when shape is asked).
fn description(o: &SceneObject, asked: QType) -> Vec<String> {
    let mut words = Vec::new();
    for q in [QType::Size, QType::Color, QType::Material] {
        if q != asked {
            words.push(o.attribute(q).to_string());
        }
    }
    words.push(if asked == QType::Shape {
        GENERIC_NOUN.to_string()
    } else {
        o.shape.clone()
    });
    words
}

fn is_unique(scene: &SceneSpec, target: usize, asked: QType) -> bool {
    let t = &scene.objects[target];
    let same = |o: &SceneObject| QType::ALL.iter().filter(|&&q| q != asked).all(|&q| o.attribute(q) == t.attribute(q));
    scene.objects.iter().filter(|o| same(o)).count() == 1
}

pub fn render_question(o: &SceneObject, asked: QType, template: usize) -> String {
    let mut words = vec!["what".to_string()];
    if template == 0 {
        words.extend([asked.as_str().to_string(), "is".into(), "the".into()]);
    } else {
        words.extend(["is".into(), "the".into(), asked.as_str().to_string(), "of".into(), "the".into()]);
    }
    words.extend(description(o, asked));
    words.join(" ")
}

fn generate_one<R: Rng + ?Sized>(
    cfg: &GenConfig,
    image_id: String,
    asked: QType,
    forbidden: &HashSet<SceneSpec>,
    rng: &mut R,
) -> QAExample {
    loop {
        let scene = random_scene(cfg, rng);
        if forbidden.contains(&scene) {
            continue;
        }
        let target = rng.gen_range(0..scene.objects.len());
        if !is_unique(&scene, target, asked) {
            continue;
        }
        let template = rng.gen_range(0..TEMPLATES.len());
        let o = &scene.objects[target];
        return QAExample {
            question: Some(render_question(o, asked, template)),
            answer: o.attribute(asked).to_string(),
            image_id,
            qtype: asked,
            scene,
            synthetic: false,
        };
    }
}

fn balanced_qtypes<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<QType> {
    let mut out: Vec<QType> = (0..n).map(|i| QType::ALL[i % QType::ALL.len()]).collect();
    out.shuffle(rng);
    out
}

/// Train and val sets with question types balanced to within one example.
/// No val scene equals any train scene.
pub fn generate_dataset(n_train: usize, n_val: usize, cfg: &GenConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    if n_train == 0 {
        return Err(Error::InvalidArgument("n_train must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let none = HashSet::new();
    let train: Vec<QAExample> = balanced_qtypes(n_train, &mut rng)
        .into_iter()
        .enumerate()
        .map(|(i, q)| generate_one(cfg, format!("train-{i:06}"), q, &none, &mut rng))
        .collect();
    let train_scenes: HashSet<SceneSpec> = train.iter().map(|e| e.scene.clone()).collect();
    let val = balanced_qtypes(n_val, &mut rng)
        .into_iter()
        .enumerate()
        .map(|(i, q)| generate_one(cfg, format!("val-{i:06}"), q, &train_scenes, &mut rng))
        .collect();
    Ok(Dataset {
        train,
        val,
        manifest: Manifest {
            seed,
            sigma: cfg.sigma,
            height: cfg.height,
            width: cfg.width,
            min_objects: cfg.min_objects,
            max_objects: cfg.max_objects,
            n_train,
            n_val,
            templates: TEMPLATES.iter().map(|t| t.to_string()).collect(),
        },
    })
}

/// What a question asks about and the words that pick out its object.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedQuestion {
    pub qtype: QType,
    pub mentions: Vec<(QType, String)>,
}

/// Reads a question produced by either template. Returns `None` for
/// anything else.
pub fn parse_question(question: &str) -> Option<ParsedQuestion> {
    let w: Vec<&str> = question.split_whitespace().collect();
    let (qtype, rest) = match w.as_slice() {
        ["what", "is", "the", q, "of", "the", rest @ ..] => (QType::parse(q)?, rest),
        ["what", q, "is", "the", rest @ ..] => (QType::parse(q)?, rest),
        _ => return None,
    };
    let (noun, adjectives) = rest.split_last()?;
    let mut mentions = Vec::new();
    for a in adjectives {
        let q = QType::of_value(a)?;
        if q == QType::Shape || q == qtype {
            return None;
        }
        mentions.push((q, a.to_string()));
    }
    if *noun != GENERIC_NOUN {
        let q = QType::of_value(noun)?;
        if q != QType::Shape || qtype == QType::Shape {
            return None;
        }
        mentions.push((q, noun.to_string()));
    }
    Some(ParsedQuestion { qtype, mentions })
}

/// Answers a question by attribute lookup on the scene. `None` when the
/// question does not parse or does not pick out exactly one object.
pub fn symbolic_answer(scene: &SceneSpec, question: &str) -> Option<String> {
    let p = parse_question(question)?;
    let mut hits = scene
        .objects
        .iter()
        .filter(|o| p.mentions.iter().all(|(q, v)| o.attribute(*q) == v));
    let first = hits.next()?;
    if hits.next().is_some() {
        return None;
    }
    Some(first.attribute(p.qtype).to_string())
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FilterRules {
    /// Keep only questions whose first word is one of these. Empty disables
    /// the rule.
    pub prefixes: Vec<String>,
    /// Keep only answers among the `k` most frequent (ties by answer text).
    pub top_k_answers: Option<usize>,
}

impl FilterRules {
    pub fn what_where_who() -> Self {
        Self {
            prefixes: vec!["what".into(), "where".into(), "who".into()],
            top_k_answers: None,
        }
    }
}

/// Order-preserving filter. Records without a question pass the prefix
/// rule.
pub fn filter_examples(examples: &[QAExample], rules: &FilterRules) -> Vec<QAExample> {
    let allowed_answers: Option<HashSet<&str>> = rules.top_k_answers.map(|k| {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for e in examples {
            *counts.entry(e.answer.as_str()).or_insert(0) += 1;
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        ranked.into_iter().take(k).map(|(a, _)| a).collect()
    });
    examples
        .iter()
        .filter(|e| {
            let prefix_ok = rules.prefixes.is_empty()
                || e.question.as_deref().is_none_or(|q| {
                    let first = q.split_whitespace().next().unwrap_or("");
                    rules.prefixes.iter().any(|p| p == first)
                });
            let answer_ok = allowed_answers.as_ref().is_none_or(|s| s.contains(e.answer.as_str()));
            prefix_ok && answer_ok
        })
        .cloned()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub fraction_pairs: f64,
    pub seed: u64,
}

/// Set 1 keeps `round(fraction · n)` full pairs; Set 2 keeps the rest with
/// the question removed. Both preserve the input order.
pub fn split_for_augmentation(train: &[QAExample], spec: &SplitSpec) -> Result<(Vec<QAExample>, Vec<QAExample>)> {
    let f = spec.fraction_pairs;
    if !(f > 0.0 && f <= 1.0) {
        return Err(Error::InvalidArgument(format!("set1 fraction must be in (0, 1], got {f}")));
    }
    let n1 = (f * train.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let mut in_set1 = vec![false; train.len()];
    for &i in &order[..n1] {
        in_set1[i] = true;
    }
    let mut set1 = Vec::with_capacity(n1);
    let mut set2 = Vec::with_capacity(train.len() - n1);
    for (e, keep) in train.iter().zip(in_set1) {
        if keep {
            set1.push(e.clone());
        } else {
            set2.push(QAExample {
                question: None,
                ..e.clone()
            });
        }
    }
    Ok((set1, set2))
}

pub fn write_jsonl(path: &Path, examples: &[QAExample]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for e in examples {
        let line = serde_json::to_string(e).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<QAExample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: QAExample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if answer_id(&rec.answer).is_none() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("unknown answer `{}`", rec.answer),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, m: &Manifest) -> Result<()> {
    let text = serde_json::to_string_pretty(m).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Writes `train.jsonl`, `val.jsonl` and `manifest.json` into `dir`.
pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_jsonl(&dir.join("train.jsonl"), &data.train)?;
    write_jsonl(&dir.join("val.jsonl"), &data.val)?;
    write_manifest(&dir.join("manifest.json"), &data.manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    Ok(Dataset {
        train: read_jsonl(&dir.join("train.jsonl"))?,
        val: read_jsonl(&dir.join("val.jsonl"))?,
        manifest: read_manifest(&dir.join("manifest.json"))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn obj(row: usize, col: usize, shape: &str, color: &str, size: &str, material: &str) -> SceneObject {
        SceneObject {
            row,
            col,
            shape: shape.into(),
            color: color.into(),
            size: size.into(),
            material: material.into(),
        }
    }

    fn small() -> Dataset {
        generate_dataset(200, 40, &GenConfig::default(), 7).unwrap()
    }

    #[test]
    fn same_seed_gives_identical_files() {
        let dir = tempfile::tempdir().unwrap();
        let a = generate_dataset(50, 10, &GenConfig::default(), 11).unwrap();
        let b = generate_dataset(50, 10, &GenConfig::default(), 11).unwrap();
        save_dataset(&dir.path().join("a"), &a).unwrap();
        save_dataset(&dir.path().join("b"), &b).unwrap();
        for f in ["train.jsonl", "val.jsonl", "manifest.json"] {
            let x = std::fs::read(dir.path().join("a").join(f)).unwrap();
            let y = std::fs::read(dir.path().join("b").join(f)).unwrap();
            assert_eq!(x, y, "{f}");
        }
        let back = load_dataset(&dir.path().join("a")).unwrap();
        assert_eq!(back.train, a.train);
        assert_eq!(back.manifest, a.manifest);
        let c = generate_dataset(50, 10, &GenConfig::default(), 12).unwrap();
        assert_ne!(c.train, a.train);
    }

    #[test]
    fn single_example_and_bad_configs() {
        let d = generate_dataset(1, 0, &GenConfig::default(), 1).unwrap();
        assert_eq!(d.train.len(), 1);
        assert!(d.val.is_empty());
        assert!(generate_dataset(0, 1, &GenConfig::default(), 1).is_err());
        let crowded = GenConfig {
            max_objects: 17,
            ..GenConfig::default()
        };
        assert!(generate_dataset(1, 1, &crowded, 1).is_err());
        let empty = GenConfig {
            min_objects: 0,
            ..GenConfig::default()
        };
        assert!(generate_dataset(1, 1, &empty, 1).is_err());
    }

    #[test]
    fn qtypes_are_balanced() {
        let d = generate_dataset(1000, 0, &GenConfig::default(), 3).unwrap();
        for q in QType::ALL {
            let n = d.train.iter().filter(|e| e.qtype == q).count();
            assert!((n as f64 / 1000.0 - 0.25).abs() <= 0.02, "{q}: {n}");
        }
    }

    #[test]
    fn answer_marginal_within_each_qtype_is_near_uniform() {
        let d = generate_dataset(10_000, 0, &GenConfig::default(), 5).unwrap();
        for q in QType::ALL {
            let of_type: Vec<&QAExample> = d.train.iter().filter(|e| e.qtype == q).collect();
            let uniform = of_type.len() as f64 / q.values().len() as f64;
            for v in q.values() {
                let n = of_type.iter().filter(|e| e.answer == *v).count() as f64;
                assert!(n >= 0.5 * uniform && n <= 2.0 * uniform, "{q}={v}: {n} vs {uniform}");
            }
        }
    }

    #[test]
    fn val_scenes_are_disjoint_from_train() {
        let d = small();
        let train: HashSet<&SceneSpec> = d.train.iter().map(|e| &e.scene).collect();
        assert!(d.val.iter().all(|e| !train.contains(&e.scene)));
    }

    #[test]
    fn symbolic_answerer_is_exact_on_generated_data() {
        let d = small();
        for e in d.train.iter().chain(&d.val) {
            let q = e.question.as_deref().unwrap();
            assert!(q.starts_with("what "));
            assert!(q.split_whitespace().count() <= 12);
            assert_eq!(symbolic_answer(&e.scene, q).as_deref(), Some(e.answer.as_str()), "{q}");
            assert_eq!(parse_question(q).unwrap().qtype, e.qtype);
        }
    }

    #[test]
    fn vocabulary_covers_every_question() {
        let v = world_vocabulary();
        assert!(v.len() <= 40);
        let d = small();
        for e in &d.train {
            for w in e.question_tokens().unwrap() {
                assert!(v.id(w).is_some(), "{w}");
            }
        }
        assert_eq!(world_answers().len(), 15);
    }

    #[test]
    fn symbolic_answerer_rejects_ambiguity_and_junk() {
        let scene = SceneSpec {
            objects: vec![
                obj(0, 0, "cube", "red", "small", "metal"),
                obj(0, 1, "cube", "blue", "small", "metal"),
            ],
        };
        assert_eq!(symbolic_answer(&scene, "what color is the small metal cube"), None);
        assert_eq!(
            symbolic_answer(&scene, "what is the size of the blue metal cube").as_deref(),
            Some("small")
        );
        assert_eq!(symbolic_answer(&scene, "is the cube red"), None);
        assert_eq!(symbolic_answer(&scene, "what color is the small metal sphere"), None);
    }

    #[test]
    fn render_fixtures() {
        let cfg = RenderConfig {
            height: 2,
            width: 2,
            sigma: 0.0,
            seed: 0,
        };
        let scene = SceneSpec {
            objects: vec![
                obj(0, 0, "sphere", "cyan", "large", "rubber"),
                obj(1, 1, "sphere", "cyan", "large", "rubber"),
            ],
        };
        let g = render_grid(&scene, "x", &cfg).unwrap();
        assert!(g.cell(0, 1).iter().all(|&x| x == 0.0));
        assert!(g.cell(1, 0).iter().all(|&x| x == 0.0));
        assert_eq!(g.cell(0, 0), g.cell(1, 1));
        assert_eq!(g.cell(0, 0).iter().filter(|&&x| x == 1.0).count(), 5);

        let bad = SceneSpec {
            objects: vec![obj(0, 0, "cube", "red", "small", "metal"), obj(0, 0, "cube", "red", "small", "metal")],
        };
        assert!(render_grid(&bad, "x", &cfg).is_err());
        assert!(render_grid(&SceneSpec { objects: vec![] }, "x", &cfg).is_err());
        let off = SceneSpec {
            objects: vec![obj(2, 0, "cube", "red", "small", "metal")],
        };
        assert!(render_grid(&off, "x", &cfg).is_err());
    }

    #[test]
    fn noisy_same_attribute_cells_stay_close() {
        let cfg = RenderConfig {
            height: 4,
            width: 4,
            sigma: 0.1,
            seed: 9,
        };
        let scene = SceneSpec {
            objects: vec![
                obj(0, 0, "cylinder", "purple", "small", "metal"),
                obj(3, 2, "cylinder", "purple", "small", "metal"),
            ],
        };
        for draw in 0..100 {
            let g = render_grid(&scene, &format!("img-{draw}"), &cfg).unwrap();
            let (a, b) = (g.cell(0, 0), g.cell(3, 2));
            let cos = a.dot(&b).unwrap() / (a.norm_squared() * b.norm_squared()).sqrt();
            assert!(cos > 0.9, "draw {draw}: {cos}");
            assert_ne!(a, b);
        }
        // same ids reproduce the same noise
        let g1 = render_grid(&scene, "img-0", &cfg).unwrap();
        let g2 = render_grid(&scene, "img-0", &cfg).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn clean_rendering_is_injective_on_attribute_tuples() {
        let mut seen = HashSet::new();
        for s in SHAPES {
            for c in COLORS {
                for z in SIZES {
                    for m in MATERIALS {
                        let f = object_features(&obj(0, 0, s, c, z, m));
                        let key: Vec<u64> = f.iter().map(|x| x.to_bits()).collect();
                        assert!(seen.insert(key));
                    }
                }
            }
        }
        assert_eq!(seen.len(), 96);
    }

    fn with_question(q: Option<&str>, answer: &str) -> QAExample {
        QAExample {
            image_id: "i".into(),
            scene: SceneSpec {
                objects: vec![obj(0, 0, "cube", "red", "small", "metal")],
            },
            question: q.map(str::to_string),
            answer: answer.into(),
            qtype: QType::Color,
            synthetic: false,
        }
    }

    #[test]
    fn filter_fixtures() {
        let d = small();
        let rules = FilterRules::what_where_who();
        assert_eq!(filter_examples(&d.train, &rules), d.train);
        assert_eq!(filter_examples(&d.train, &FilterRules::default()), d.train);

        let mut mixed = d.train[..6].to_vec();
        for i in [1, 3, 4] {
            mixed.insert(i, with_question(Some("is the cube red"), "red"));
        }
        let kept = filter_examples(&mixed, &rules);
        assert_eq!(kept, d.train[..6].to_vec());
    }

    #[test]
    fn top_k_answer_cap() {
        let items = vec![
            with_question(Some("what color is it"), "red"),
            with_question(Some("what color is it"), "blue"),
            with_question(Some("what color is it"), "red"),
            with_question(Some("what color is it"), "green"),
            with_question(Some("what color is it"), "blue"),
        ];
        let rules = FilterRules {
            prefixes: vec![],
            top_k_answers: Some(2),
        };
        let kept = filter_examples(&items, &rules);
        let kept: Vec<&str> = kept.iter().map(|e| e.answer.as_str()).collect();
        assert_eq!(kept, vec!["red", "blue", "red", "blue"]);
        // tie at count one goes to the alphabetically first answer
        let rules = FilterRules {
            prefixes: vec![],
            top_k_answers: Some(1),
        };
        assert_eq!(filter_examples(&items[1..4], &rules).len(), 1);
        assert_eq!(filter_examples(&items[1..4], &rules)[0].answer, "blue");
    }

    #[test]
    fn split_fixtures() {
        let d = generate_dataset(10, 0, &GenConfig::default(), 2).unwrap();
        let (s1, s2) = split_for_augmentation(&d.train, &SplitSpec { fraction_pairs: 1.0, seed: 1 }).unwrap();
        assert_eq!(s1, d.train);
        assert!(s2.is_empty());

        let spec = SplitSpec {
            fraction_pairs: 0.5,
            seed: 4,
        };
        let (s1, s2) = split_for_augmentation(&d.train, &spec).unwrap();
        assert_eq!((s1.len(), s2.len()), (5, 5));
        assert!(s2.iter().all(|e| e.question.is_none()));
        let ids1: HashSet<&str> = s1.iter().map(|e| e.image_id.as_str()).collect();
        assert!(s2.iter().all(|e| !ids1.contains(e.image_id.as_str())));
        assert_eq!(split_for_augmentation(&d.train, &spec).unwrap(), (s1, s2));

        for f in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(split_for_augmentation(&d.train, &SplitSpec { fraction_pairs: f, seed: 0 }).is_err());
        }
    }

    #[test]
    fn malformed_jsonl_reports_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        let good = serde_json::to_string(&with_question(Some("what color is the small metal cube"), "red")).unwrap();
        std::fs::write(&p, format!("{good}\n{{\"image_id\": 3\n")).unwrap();
        match read_jsonl(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        std::fs::write(&p, good.replace("\"red\"", "\"teal\"")).unwrap();
        assert!(matches!(read_jsonl(&p), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(read_jsonl(&dir.path().join("missing.jsonl")), Err(Error::Io { .. })));
    }

    #[test]
    fn answer_only_records_omit_the_question_field() {
        let e = with_question(None, "red");
        let s = serde_json::to_string(&e).unwrap();
        assert!(!s.contains("question"));
        assert!(!s.contains("synthetic"));
        let back: QAExample = serde_json::from_str(&s).unwrap();
        assert_eq!(back, e);
    }

    proptest! {
        #[test]
        fn filter_and_split_are_order_preserving_and_idempotent(seed in 0u64..200, frac in 0.05f64..1.0) {
            let d = generate_dataset(20, 0, &GenConfig::default(), seed).unwrap();
            let rules = FilterRules { prefixes: vec!["what".into()], top_k_answers: Some(6) };
            let once = filter_examples(&d.train, &rules);
            prop_assert_eq!(filter_examples(&once, &rules), once.clone());
            let pos = |e: &QAExample| d.train.iter().position(|x| x.image_id == e.image_id).unwrap();
            prop_assert!(once.windows(2).all(|w| pos(&w[0]) < pos(&w[1])));

            let (s1, s2) = split_for_augmentation(&d.train, &SplitSpec { fraction_pairs: frac, seed }).unwrap();
            prop_assert_eq!(s1.len() + s2.len(), d.train.len());
            prop_assert_eq!(s1.len(), (frac * 20.0).round() as usize);
            prop_assert!(s1.windows(2).all(|w| pos(&w[0]) < pos(&w[1])));
            prop_assert!(s2.windows(2).all(|w| pos(&w[0]) < pos(&w[1])));
            let (again, rest) = split_for_augmentation(&s1, &SplitSpec { fraction_pairs: 1.0, seed }).unwrap();
            prop_assert_eq!(again, s1);
            prop_assert!(rest.is_empty());
        }
    }
}
