//! Comparative utterance catalog, tokenizer and triplet labeling.

use std::collections::HashMap;
use std::fmt;

use rand::seq::{index, IndexedRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_from_seed;
use crate::world::{Features, Split, TrajId, TrajectoryPool, FEATURE_COUNT, FEATURE_NAMES};

/// Which way an utterance asks a feature to move.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "i8", into = "i8")]
pub enum Direction {
    Decrease,
    Increase,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Increase => 1.0,
            Direction::Decrease => -1.0,
        }
    }

    /// Direction of a nonzero change.
    pub fn of(delta: f64) -> Option<Direction> {
        if delta > 0.0 {
            Some(Direction::Increase)
        } else if delta < 0.0 {
            Some(Direction::Decrease)
        } else {
            None
        }
    }

    pub fn flip(self) -> Direction {
        match self {
            Direction::Increase => Direction::Decrease,
            Direction::Decrease => Direction::Increase,
        }
    }
}

impl From<Direction> for i8 {
    fn from(d: Direction) -> i8 {
        match d {
            Direction::Increase => 1,
            Direction::Decrease => -1,
        }
    }
}

impl TryFrom<i8> for Direction {
    type Error = String;

    fn try_from(v: i8) -> Result<Self, String> {
        match v {
            1 => Ok(Direction::Increase),
            -1 => Ok(Direction::Decrease),
            other => Err(format!("direction must be +1 or -1, got {other}")),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Increase => "+1",
            Direction::Decrease => "-1",
        })
    }
}

/// A `(feature, direction)` pair identifies one paraphrase class.
pub type UtteranceClass = (usize, Direction);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub feature: usize,
    pub direction: Direction,
    pub texts: Vec<String>,
}

/// Paraphrase lists keyed by `(feature, direction)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Catalog {
    entries: Vec<CatalogEntry>,
}

fn builtin_texts(feature: &str, direction: Direction) -> Option<&'static [&'static str]> {
    use Direction::*;
    Some(match (feature, direction) {
        ("height", Increase) => &[
            "Move higher.",
            "Move taller.",
            "Move at a greater height.",
            "Move to a greater height.",
            "Go higher up.",
            "Move your gripper higher.",
            "Increase the overall height of the trajectory.",
        ],
        ("height", Decrease) => &[
            "Move lower.",
            "Move shorter.",
            "Move at a lesser height.",
            "Move to a lower height.",
            "Go lower down.",
            "Move your gripper lower.",
            "Decrease the overall height of the trajectory.",
        ],
        ("speed", Increase) => &[
            "Move faster.",
            "Move quicker.",
            "Move swifter.",
            "Move at a higher speed.",
            "Move more quickly.",
            "Increase the pace.",
            "Increase your velocity.",
        ],
        ("speed", Decrease) => &[
            "Move slower.",
            "Move at a lower speed.",
            "Move more moderate.",
            "Move more sluggish.",
            "Move more slowly.",
            "Decrease the pace.",
            "Decrease your velocity.",
        ],
        ("pan_distance", Increase) => &[
            "Move farther from the pan.",
            "Move further from the pan.",
            "Move more distant from the pan.",
            "Stay farther from the pan.",
            "Keep a larger distance from the pan.",
            "Give wider berth to the pan.",
            "Move your gripper away from the pan.",
        ],
        ("pan_distance", Decrease) => &[
            "Move closer to the pan.",
            "Move nearer to the pan.",
            "Move more nearby to the pan.",
            "Move less distant to the pan.",
            "Stay closer to the pan.",
            "Keep a smaller distance to the pan.",
            "Get closer to the pan.",
        ],
        ("success", Increase) => &[
            "Pick up the spoon better.",
            "Pick up the spoon more successfully.",
            "Pick up the spoon more effectively.",
            "Grasp the spoon better.",
            "Do a better job picking up the spoon.",
            "Get the spoon more reliably.",
        ],
        ("success", Decrease) => &[
            "Pick up the spoon worse.",
            "Pick up the spoon not as well.",
            "Pick up the spoon less successfully.",
            "Pick up the spoon less effectively.",
            "Grasp the spoon worse.",
            "Do a worse job picking up the spoon.",
        ],
        _ => return None,
    })
}

impl Catalog {
    /// Built-in paraphrases for every world feature.
    pub fn builtin() -> Self {
        Catalog::for_features(&FEATURE_NAMES).expect("built-in features are covered")
    }

    /// Built-in paraphrases for the named features; feature ids follow the
    /// order of `names`.
    pub fn for_features(names: &[&str]) -> Result<Self> {
        let mut entries = Vec::new();
        for (feature, name) in names.iter().enumerate() {
            for direction in [Direction::Increase, Direction::Decrease] {
                let texts = builtin_texts(name, direction)
                    .ok_or_else(|| Error::Invalid(format!("no utterances for feature `{name}`")))?;
                entries.push(CatalogEntry {
                    feature,
                    direction,
                    texts: texts.iter().map(|s| s.to_string()).collect(),
                });
            }
        }
        Ok(Catalog { entries })
    }

    pub fn from_entries(entries: Vec<CatalogEntry>) -> Result<Self> {
        let mut c = Catalog { entries: Vec::new() };
        c.extend(entries)?;
        Ok(c)
    }

    /// Merges extra paraphrases (e.g. an imported augmentation list).
    /// A text may belong to only one class.
    pub fn extend(&mut self, extra: Vec<CatalogEntry>) -> Result<()> {
        for e in extra {
            if e.feature >= FEATURE_COUNT {
                return Err(Error::Invalid(format!("feature id {} out of range", e.feature)));
            }
            for text in e.texts {
                if normalize(&text).is_empty() {
                    return Err(Error::Invalid(format!("catalog text {text:?} has no words")));
                }
                match self.class_of(&text) {
                    Some(c) if c == (e.feature, e.direction) => continue,
                    Some(c) => {
                        return Err(Error::Invalid(format!(
                            "{text:?} already belongs to feature {} direction {}",
                            c.0, c.1
                        )))
                    }
                    None => {}
                }
                match self
                    .entries
                    .iter_mut()
                    .find(|x| x.feature == e.feature && x.direction == e.direction)
                {
                    Some(x) => x.texts.push(text),
                    None => self.entries.push(CatalogEntry {
                        feature: e.feature,
                        direction: e.direction,
                        texts: vec![text],
                    }),
                }
            }
        }
        Ok(())
    }

    pub fn entries(&self) -> &[CatalogEntry] {
        &self.entries
    }

    pub fn texts(&self, feature: usize, direction: Direction) -> &[String] {
        self.entries
            .iter()
            .find(|e| e.feature == feature && e.direction == direction)
            .map_or(&[], |e| e.texts.as_slice())
    }

    /// Every `(class, text)` in catalog order.
    pub fn iter(&self) -> impl Iterator<Item = (UtteranceClass, &str)> {
        self.entries
            .iter()
            .flat_map(|e| e.texts.iter().map(move |t| ((e.feature, e.direction), t.as_str())))
    }

    pub fn len(&self) -> usize {
        self.entries.iter().map(|e| e.texts.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class_of(&self, text: &str) -> Option<UtteranceClass> {
        self.iter().find(|(_, t)| *t == text).map(|(c, _)| c)
    }

    /// Every catalog text as a tokenized utterance, in catalog order.
    pub fn utterances(&self, vocab: &Vocabulary) -> Result<Vec<Utterance>> {
        self.iter()
            .map(|((feature, direction), text)| Utterance::new(feature, direction, text, vocab))
            .collect()
    }
}

/// Lowercased words with punctuation removed.
pub fn normalize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

pub const UNKNOWN_TOKEN: &str = "<unk>";

/// Word list with index 0 reserved for unknown words.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocabulary { words, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.words
    }
}

impl Vocabulary {
    /// Sorted words of every catalog text.
    pub fn from_catalog(catalog: &Catalog) -> Self {
        let mut words: Vec<String> = catalog.iter().flat_map(|(_, t)| normalize(t)).collect();
        words.sort();
        words.dedup();
        words.insert(0, UNKNOWN_TOKEN.to_string());
        Vocabulary::from(words)
    }

    pub fn unknown_index(&self) -> usize {
        0
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied().filter(|&i| i != 0)
    }

    pub fn word(&self, index: usize) -> Option<&str> {
        self.words.get(index).map(String::as_str)
    }
}

pub fn tokenize(text: &str, vocab: &Vocabulary) -> Result<Vec<usize>> {
    let words = normalize(text);
    if words.is_empty() {
        return Err(Error::Invalid("utterance is empty".into()));
    }
    Ok(words
        .iter()
        .map(|w| vocab.get(w).unwrap_or(vocab.unknown_index()))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub feature: usize,
    pub direction: Direction,
    pub text: String,
    pub tokens: Vec<usize>,
}

impl Utterance {
    pub fn new(feature: usize, direction: Direction, text: &str, vocab: &Vocabulary) -> Result<Self> {
        Ok(Utterance {
            feature,
            direction,
            text: text.to_string(),
            tokens: tokenize(text, vocab)?,
        })
    }

    pub fn class(&self) -> UtteranceClass {
        (self.feature, self.direction)
    }
}

/// Per-feature dead-band below which a change is not described.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Epsilon(pub [f64; FEATURE_COUNT]);

impl Epsilon {
    /// `fraction` of each feature's range over the training split.
    pub fn from_train_split(pool: &TrajectoryPool, fraction: f64) -> Result<Self> {
        let mut lo = [f64::INFINITY; FEATURE_COUNT];
        let mut hi = [f64::NEG_INFINITY; FEATURE_COUNT];
        let mut n = 0;
        for e in pool.in_split(Split::Train) {
            n += 1;
            for d in 0..FEATURE_COUNT {
                lo[d] = lo[d].min(e.features.get(d));
                hi[d] = hi[d].max(e.features.get(d));
            }
        }
        if n < 2 {
            return Err(Error::Invalid("training split needs at least two trajectories".into()));
        }
        let eps: [f64; FEATURE_COUNT] = std::array::from_fn(|d| fraction * (hi[d] - lo[d]));
        if eps.iter().any(|&e| !(e > 0.0)) {
            return Err(Error::Invalid(format!("degenerate feature range, epsilon {eps:?}")));
        }
        Ok(Epsilon(eps))
    }
}

/// Utterances describing how `b` differs from `a`: one per feature whose
/// change exceeds its dead-band, paraphrase drawn uniformly.
pub fn label_pair<R: Rng + ?Sized>(
    a: &Features,
    b: &Features,
    eps: &Epsilon,
    catalog: &Catalog,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<Vec<Utterance>> {
    let mut out = Vec::new();
    for (d, delta) in a.delta(b).into_iter().enumerate() {
        if delta.abs() <= eps.0[d] {
            continue;
        }
        let direction = Direction::of(delta).expect("nonzero beyond dead-band");
        let text = catalog
            .texts(d, direction)
            .choose(rng)
            .ok_or_else(|| Error::Invalid(format!("catalog has no text for feature {d} direction {direction}")))?;
        out.push(Utterance::new(d, direction, text, vocab)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub a_id: TrajId,
    pub b_id: TrajId,
    pub text: String,
    pub feature: usize,
    pub direction: Direction,
}

impl Triplet {
    pub fn class(&self) -> UtteranceClass {
        (self.feature, self.direction)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletDataset {
    pub train: Vec<Triplet>,
    pub val: Vec<Triplet>,
    pub test: Vec<Triplet>,
}

impl TripletDataset {
    pub fn split(&self, split: Split) -> &[Triplet] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn split_mut(&mut self, split: Split) -> &mut Vec<Triplet> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Number of trajectory pairs to draw from each split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairsPerSplit {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl PairsPerSplit {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

impl Default for PairsPerSplit {
    fn default() -> Self {
        PairsPerSplit {
            train: 860,
            val: 110,
            test: 110,
        }
    }
}

/// Draws distinct unordered pairs inside each split (random orientation)
/// and emits one triplet per feature that changed beyond its dead-band.
pub fn build_triplets(
    pool: &TrajectoryPool,
    catalog: &Catalog,
    eps: &Epsilon,
    pairs: PairsPerSplit,
    seed: u64,
) -> Result<TripletDataset> {
    let vocab = Vocabulary::from_catalog(catalog);
    let mut rng = rng_from_seed(seed);
    let mut data = TripletDataset::default();
    for split in Split::ALL {
        let wanted = pairs.get(split);
        if wanted == 0 {
            continue;
        }
        let members: Vec<(TrajId, &Features)> = pool
            .in_split(split)
            .map(|e| (e.trajectory.id, &e.features))
            .collect();
        let n = members.len();
        let available = n * n.saturating_sub(1) / 2;
        if wanted > available {
            return Err(Error::SplitTooSmall {
                split: split.name().to_string(),
                available: n,
                requested: wanted,
            });
        }
        let all_pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        for k in index::sample(&mut rng, available, wanted) {
            let (mut i, mut j) = all_pairs[k];
            if rng.random_bool(0.5) {
                std::mem::swap(&mut i, &mut j);
            }
            let (a, b) = (members[i], members[j]);
            for u in label_pair(a.1, b.1, eps, catalog, &vocab, &mut rng)? {
                data.split_mut(split).push(Triplet {
                    a_id: a.0,
                    b_id: b.0,
                    text: u.text,
                    feature: u.feature,
                    direction: u.direction,
                });
            }
        }
    }
    Ok(data)
}
