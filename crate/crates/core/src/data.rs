//! Synthetic relational scenes and their captions.
//!
//! Each scene holds 2..=`n_max` objects with distinct (color, shape) pairs,
//! listed in canonical order (color, then shape). The caption names every
//! object and, between consecutive objects, whether the first has the larger
//! or the smaller box area:
//!
//! `BOS red circle larger blue square smaller blue triangle EOS`
//!
//! Features carry only the attributes (one-hot plus noise); box sizes are
//! visible to a model solely through geometry, so the relation words measure
//! whether the encoder uses it.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::param::RngState;
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const SHAPES: [&str; 3] = ["circle", "square", "triangle"];
pub const RELATIONS: [&str; 2] = ["larger", "smaller"];

/// One-hot color, one-hot shape, one pure-noise channel.
pub const FEAT_DIM: usize = COLORS.len() + SHAPES.len() + 1;

/// Consecutive objects differ in area by at least this factor.
pub const MIN_AREA_RATIO: f64 = 1.5;

pub const SCENES_FILE: &str = "scenes.jsonl";
pub const VOCAB_FILE: &str = "vocab.json";

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved tokens, then colors, shapes and relation words.
    pub fn relational() -> Self {
        let words = ["<pad>", "<bos>", "<eos>"]
            .into_iter()
            .chain(COLORS)
            .chain(SHAPES)
            .chain(RELATIONS);
        Self::from_tokens(words.map(String::from).collect()).expect("built-in vocabulary is valid")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token `{t}`")));
            }
        }
        let v = Vocabulary { tokens, index };
        for (id, name) in [(PAD, "<pad>"), (BOS, "<bos>"), (EOS, "<eos>")] {
            if v.id(name) != Some(id) {
                return Err(Error::Data(format!("reserved token `{name}` must have id {id}")));
            }
        }
        Ok(v)
    }

    /// Builds from a token-to-id map whose ids must be exactly `0..len`.
    pub fn from_map(map: &BTreeMap<String, usize>) -> Result<Self> {
        let mut tokens = vec![None; map.len()];
        for (t, &id) in map {
            match tokens.get_mut(id) {
                Some(slot @ None) => *slot = Some(t.clone()),
                _ => return Err(Error::Data(format!("vocabulary id {id} of `{t}` is out of range or repeated"))),
            }
        }
        Self::from_tokens(tokens.into_iter().map(Option::unwrap).collect())
    }

    pub fn to_map(&self) -> BTreeMap<String, usize> {
        self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn relation_ids(&self) -> Vec<usize> {
        RELATIONS.iter().filter_map(|r| self.id(r)).collect()
    }

    pub fn render(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Record", into = "Record")]
pub struct SceneExample {
    pub features: Tensor,
    pub boxes: Vec<BoundingBox>,
    /// Token ids, BOS first and EOS last.
    pub caption: Vec<usize>,
}

/// On-disk form of one scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    features: Vec<Vec<f64>>,
    boxes: Vec<BoundingBox>,
    caption: Vec<usize>,
}

impl TryFrom<Record> for SceneExample {
    type Error = Error;

    fn try_from(r: Record) -> Result<Self> {
        if r.features.is_empty() {
            return Err(Error::Data("scene has no objects".into()));
        }
        let features = Tensor::from_rows(&r.features).map_err(|e| Error::Data(format!("features: {e}")))?;
        Ok(SceneExample {
            features,
            boxes: r.boxes,
            caption: r.caption,
        })
    }
}

impl From<SceneExample> for Record {
    fn from(s: SceneExample) -> Self {
        let c = s.features.cols();
        Record {
            features: s.features.data().chunks(c).map(<[f64]>::to_vec).collect(),
            boxes: s.boxes,
            caption: s.caption,
        }
    }
}

impl SceneExample {
    pub fn objects(&self) -> usize {
        self.boxes.len()
    }
}

/// Object attributes recovered from the features by argmax.
fn attributes(features: &Tensor, row: usize) -> (usize, usize) {
    let r = features.row(row);
    let argmax = |s: &[f64]| {
        let mut best = 0;
        for (i, &v) in s.iter().enumerate() {
            if v > s[best] {
                best = i;
            }
        }
        best
    };
    (argmax(&r[..COLORS.len()]), argmax(&r[COLORS.len()..COLORS.len() + SHAPES.len()]))
}

/// Relation word between two boxes in caption order.
pub fn size_relation(a: &BoundingBox, b: &BoundingBox) -> &'static str {
    if a.area() > b.area() {
        RELATIONS[0]
    } else {
        RELATIONS[1]
    }
}

/// The caption the grammar assigns to objects in the given order.
pub fn caption_for(vocab: &Vocabulary, attrs: &[(usize, usize)], boxes: &[BoundingBox]) -> Vec<usize> {
    let mut ids = vec![BOS];
    for (k, &(c, s)) in attrs.iter().enumerate() {
        if k > 0 {
            ids.push(vocab.id(size_relation(&boxes[k - 1], &boxes[k])).unwrap());
        }
        ids.push(vocab.id(COLORS[c]).unwrap());
        ids.push(vocab.id(SHAPES[s]).unwrap());
    }
    ids.push(EOS);
    ids
}

/// Re-derives the caption from features and boxes and compares.
pub fn recheck_caption(ex: &SceneExample, vocab: &Vocabulary) -> Result<()> {
    let attrs: Vec<_> = (0..ex.objects()).map(|i| attributes(&ex.features, i)).collect();
    let expected = caption_for(vocab, &attrs, &ex.boxes);
    if expected != ex.caption {
        return Err(Error::Data(format!(
            "caption `{}` disagrees with the scene (expected `{}`)",
            vocab.render(&ex.caption),
            vocab.render(&expected)
        )));
    }
    Ok(())
}

fn sample_sizes(rng: &mut RngState, n: usize) -> Vec<(f64, f64)> {
    'retry: loop {
        let sizes: Vec<(f64, f64)> = (0..n).map(|_| (rng.uniform(0.05, 0.35), rng.uniform(0.05, 0.35))).collect();
        for k in 1..n {
            let ratio = (sizes[k - 1].0 * sizes[k - 1].1) / (sizes[k].0 * sizes[k].1);
            if ratio.ln().abs() < MIN_AREA_RATIO.ln() {
                continue 'retry;
            }
        }
        return sizes;
    }
}

fn sample_scene(rng: &mut RngState, vocab: &Vocabulary, n_max: usize, noise: f64) -> SceneExample {
    let n = 2 + rng.below(n_max - 1);
    let mut pool: Vec<(usize, usize)> = (0..COLORS.len()).flat_map(|c| (0..SHAPES.len()).map(move |s| (c, s))).collect();
    let mut attrs = Vec::with_capacity(n);
    for _ in 0..n {
        attrs.push(pool.swap_remove(rng.below(pool.len())));
    }
    attrs.sort_unstable();
    let sizes = sample_sizes(rng, n);
    let boxes: Vec<BoundingBox> = sizes
        .iter()
        .map(|&(w, h)| BoundingBox {
            x: rng.uniform(0.15, 0.85),
            y: rng.uniform(0.15, 0.85),
            w,
            h,
        })
        .collect();
    let mut feats = Vec::with_capacity(n * FEAT_DIM);
    for &(c, s) in &attrs {
        let mut row = vec![0.0; FEAT_DIM];
        row[c] = 1.0;
        row[COLORS.len() + s] = 1.0;
        for v in &mut row {
            *v += noise * rng.normal();
        }
        feats.extend(row);
    }
    let caption = caption_for(vocab, &attrs, &boxes);
    SceneExample {
        features: Tensor::from_parts(vec![n, FEAT_DIM], feats),
        boxes,
        caption,
    }
}

pub const DEFAULT_NOISE: f64 = 0.05;

/// Generates `count` scenes with 2..=`n_max` objects each.
pub fn generate_dataset(count: usize, n_max: usize, rng: &mut RngState) -> Result<(Vec<SceneExample>, Vocabulary)> {
    if count == 0 {
        return Err(Error::Config("dataset count must be at least 1".into()));
    }
    let combos = COLORS.len() * SHAPES.len();
    if !(2..=combos).contains(&n_max) {
        return Err(Error::Config(format!("n_max must lie in 2..={combos}, got {n_max}")));
    }
    let vocab = Vocabulary::relational();
    let scenes = (0..count).map(|_| sample_scene(rng, &vocab, n_max, DEFAULT_NOISE)).collect();
    Ok((scenes, vocab))
}

/// Caption indices holding relation words.
pub fn relation_slots(caption: &[usize], vocab: &Vocabulary) -> Vec<usize> {
    let rel = vocab.relation_ids();
    caption
        .iter()
        .enumerate()
        .filter(|(_, t)| rel.contains(t))
        .map(|(i, _)| i)
        .collect()
}

/// Structural checks on one scene against a vocabulary.
pub fn validate_example(ex: &SceneExample, vocab: &Vocabulary, feat_dim: usize) -> Result<()> {
    let n = ex.features.rows();
    if ex.features.rank() != 2 || ex.features.cols() != feat_dim {
        return Err(Error::Data(format!(
            "features have shape {:?}, expected [N, {feat_dim}]",
            ex.features.shape()
        )));
    }
    if ex.boxes.len() != n {
        return Err(Error::Data(format!("{n} feature rows but {} boxes", ex.boxes.len())));
    }
    for b in &ex.boxes {
        BoundingBox::new(b.x, b.y, b.w, b.h).map_err(|e| Error::Data(e.to_string()))?;
    }
    if ex.caption.first() != Some(&BOS) || ex.caption.last() != Some(&EOS) || ex.caption.len() < 2 {
        return Err(Error::Data("caption must start with BOS and end with EOS".into()));
    }
    if let Some(t) = ex.caption.iter().find(|&&t| t >= vocab.len()) {
        return Err(Error::Data(format!("caption token {t} outside vocabulary of {}", vocab.len())));
    }
    Ok(())
}

pub fn write_dataset(dir: &Path, scenes: &[SceneExample], vocab: &Vocabulary) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(dir.join(SCENES_FILE))?);
    for s in scenes {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    std::fs::write(dir.join(VOCAB_FILE), serde_json::to_string_pretty(&vocab.to_map())? + "\n")?;
    Ok(())
}

/// Reads and validates a dataset directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<(Vec<SceneExample>, Vocabulary)> {
    let vocab_text = std::fs::read_to_string(dir.join(VOCAB_FILE))?;
    let map: BTreeMap<String, usize> =
        serde_json::from_str(&vocab_text).map_err(|e| Error::Data(format!("{VOCAB_FILE}: {e}")))?;
    let vocab = Vocabulary::from_map(&map)?;
    let file = std::fs::File::open(dir.join(SCENES_FILE))?;
    let mut scenes = Vec::new();
    let mut feat_dim = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |e: &dyn std::fmt::Display| Error::Data(format!("{SCENES_FILE} line {}: {e}", i + 1));
        let ex: SceneExample = serde_json::from_str(&line).map_err(|e| at(&e))?;
        let fd = *feat_dim.get_or_insert(ex.features.cols());
        validate_example(&ex, &vocab, fd).map_err(|e| at(&e))?;
        scenes.push(ex);
    }
    if scenes.is_empty() {
        return Err(Error::Data(format!("{} holds no scenes", dir.join(SCENES_FILE).display())));
    }
    Ok((scenes, vocab))
}
