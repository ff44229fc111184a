//! Seeded lexicon-template tweet generator and the fixtures built from it.
//!
//! A polar tweet is a handful of neutral filler words with one or two words
//! from its class lexicon spliced in; the positive and negative lexicons are
//! disjoint, so the two-point task is separable. On the five-point scale the
//! strong classes (±2) carry an intensifier before the first cue word, but
//! only with probability `1 - INTENSITY_NOISE`, and the mild classes (±1) carry
//! one with probability `INTENSITY_NOISE`. That makes the five-point task a
//! strict, noisy refinement of the binary one. Neutral tweets are filler only.
//! Mentions, links, HTML entities and capitalization are sprinkled in so the
//! normalizer has work to do.
//!
//! The TSV files under `fixtures/` are exactly what these functions produce;
//! a unit test keeps them in sync.

use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{CorpusError, Dataset, Label, LabeledTweet, Subtask, TextField};

pub const INTENSITY_NOISE: f64 = 0.25;

const POSITIVE: &[&str] = &[
    "love",
    "great",
    "awesome",
    "amazing",
    "happy",
    "excellent",
    "wonderful",
    "fantastic",
    "brilliant",
    "enjoyed",
    "perfect",
    "beautiful",
    "glad",
    "superb",
    "delighted",
    "best",
    "fun",
    "thrilled",
    "lovely",
    "impressive",
];
const NEGATIVE: &[&str] = &[
    "hate",
    "awful",
    "terrible",
    "horrible",
    "sad",
    "worst",
    "disappointing",
    "angry",
    "boring",
    "ugly",
    "annoying",
    "broken",
    "useless",
    "disgusting",
    "miserable",
    "poor",
    "rude",
    "upset",
    "painful",
    "pathetic",
];
const INTENSIFIERS: &[&str] = &["extremely", "absolutely", "totally", "incredibly", "utterly", "so"];
const FILLER: &[&str] = &[
    "the", "a", "this", "that", "today", "tomorrow", "tonight", "just", "watched", "saw", "new", "game", "show",
    "phone", "update", "weekend", "morning", "with", "my", "friends", "at", "in", "on", "for", "about", "again",
    "after", "before", "episode", "album", "match", "season", "trailer", "news", "store", "city", "team", "class",
    "coffee", "event",
];
const TOPICS: &[&str] = &[
    "iphone",
    "netflix",
    "tesla",
    "starbucks",
    "playstation",
    "spotify",
    "twitter",
    "olympics",
    "beyonce",
    "nintendo",
];

/// Bundled files, relative to the fixture root.
pub const B200: [&str; 3] = ["b200/train.tsv", "b200/dev.tsv", "b200/test.tsv"];
pub const B500: [&str; 3] = ["b500/train.tsv", "b500/dev.tsv", "b500/test.tsv"];
pub const TOY_A32: &str = "toy_a32.tsv";
pub const STUDY_BINARY: [&str; 2] = ["study/binary_train.tsv", "study/binary_test.tsv"];
pub const STUDY_FIVE: [&str; 2] = ["study/five_train.tsv", "study/five_test.tsv"];

pub const STUDY_TRAIN: usize = 300;
pub const STUDY_TEST: usize = 100;
const STUDY_SEED: u64 = 2017;

/// Directory holding the bundled fixture files.
pub fn fixture_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn lexicon(label: Label) -> &'static [&'static str] {
    if label.0 > 0 {
        POSITIVE
    } else {
        NEGATIVE
    }
}

fn tweet_text(rng: &mut ChaCha8Rng, label: Label, topic: Option<&str>, five_point: bool) -> String {
    let mut words: Vec<String> = (0..rng.random_range(3..=6))
        .map(|_| FILLER.choose(rng).expect("nonempty").to_string())
        .collect();
    if label.0 != 0 {
        let intensified = five_point && {
            let p = if label.0.abs() == 2 {
                1.0 - INTENSITY_NOISE
            } else {
                INTENSITY_NOISE
            };
            rng.random_bool(p)
        };
        for k in 0..rng.random_range(1..=2) {
            let at = rng.random_range(0..=words.len());
            words.insert(at, lexicon(label).choose(rng).expect("nonempty").to_string());
            if k == 0 && intensified {
                words.insert(at, INTENSIFIERS.choose(rng).expect("nonempty").to_string());
            }
        }
    }
    if let Some(t) = topic {
        if rng.random_bool(0.5) {
            let at = rng.random_range(0..=words.len());
            let shown = if rng.random_bool(0.5) {
                capitalize(t)
            } else {
                t.to_string()
            };
            words.insert(at, shown);
        }
    }
    if rng.random_bool(0.1) {
        let at = rng.random_range(0..=words.len());
        words.insert(at, "&amp;".into());
    }
    if rng.random_bool(0.5) {
        words[0] = capitalize(&words[0]);
    }
    if rng.random_bool(0.2) {
        words.last_mut().expect("nonempty").push('!');
    }
    if rng.random_bool(0.2) {
        words.insert(0, format!("@fan_{}", rng.random_range(1..100)));
    }
    if rng.random_bool(0.15) {
        let slug: String = (0..6).map(|_| rng.random_range(b'a'..=b'z') as char).collect();
        words.push(format!("https://t.co/{slug}"));
    }
    words.join(" ")
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// `size` tweets cycling through `labels` (then shuffled), ids
/// `<prefix><index>`.
pub fn generate(subtask: Subtask, labels: &[Label], size: usize, seed: u64, id_prefix: &str) -> Dataset {
    assert!(!labels.is_empty(), "at least one label");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assigned: Vec<Label> = (0..size).map(|i| labels[i % labels.len()]).collect();
    assigned.shuffle(&mut rng);
    let five_point = subtask == Subtask::C;
    let examples = assigned
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let topic = subtask
                .has_topic()
                .then(|| TOPICS.choose(&mut rng).expect("nonempty").to_string());
            let text = tweet_text(&mut rng, label, topic.as_deref(), five_point);
            LabeledTweet::new(format!("{id_prefix}{i:04}"), topic, label, text)
        })
        .collect();
    Dataset::new(subtask, examples)
}

fn slices(ds: &Dataset, sizes: &[usize]) -> Vec<Dataset> {
    let mut start = 0;
    sizes
        .iter()
        .map(|&n| {
            let part = Dataset::new(ds.subtask, ds.examples[start..start + n].to_vec());
            start += n;
            part
        })
        .collect()
}

/// Train/dev/test of the 200-tweet two-point fixture (140/20/40).
pub fn b200() -> [Dataset; 3] {
    let all = generate(Subtask::B, &[Label::NEGATIVE, Label::POSITIVE], 200, 200, "b200-");
    slices(&all, &[140, 20, 40]).try_into().expect("three parts")
}

/// Train/dev/test of the 500-tweet two-point fixture (350/50/100).
pub fn b500() -> [Dataset; 3] {
    let all = generate(Subtask::B, &[Label::NEGATIVE, Label::POSITIVE], 500, 500, "b500-");
    slices(&all, &[350, 50, 100]).try_into().expect("three parts")
}

/// 32 three-point tweets for overfitting checks.
pub fn toy_a32() -> Dataset {
    generate(
        Subtask::A,
        &[Label::NEGATIVE, Label::NEUTRAL, Label::POSITIVE],
        32,
        32,
        "toy-",
    )
}

/// Matched study data: the same tweets labelled on the two-point scale and
/// on the four polar classes of the five-point scale. With `collapse`, every
/// tweet is strongly positive.
#[derive(Clone, Debug)]
pub struct StudyData {
    pub binary: [Dataset; 2],
    pub five: [Dataset; 2],
}

pub fn study_data(seed: u64, collapse: bool) -> StudyData {
    let labels: &[Label] = if collapse {
        &[Label(2)]
    } else {
        &[Label(-2), Label(-1), Label(1), Label(2)]
    };
    let five = generate(Subtask::C, labels, STUDY_TRAIN + STUDY_TEST, seed, "study-");
    let binary = Dataset::new(
        Subtask::B,
        five.examples
            .iter()
            .map(|e| LabeledTweet {
                label: Label(e.label.0.signum()),
                ..e.clone()
            })
            .collect(),
    );
    StudyData {
        binary: slices(&binary, &[STUDY_TRAIN, STUDY_TEST])
            .try_into()
            .expect("two parts"),
        five: slices(&five, &[STUDY_TRAIN, STUDY_TEST]).try_into().expect("two parts"),
    }
}

pub fn bundled_study() -> StudyData {
    study_data(STUDY_SEED, false)
}

/// Every bundled file with its dataset, relative to the fixture root.
pub fn bundled() -> Vec<(&'static str, Dataset)> {
    let mut out: Vec<(&'static str, Dataset)> = B200.into_iter().zip(b200()).collect();
    out.extend(B500.into_iter().zip(b500()));
    out.push((TOY_A32, toy_a32()));
    let study = bundled_study();
    out.extend(STUDY_BINARY.into_iter().zip(study.binary));
    out.extend(STUDY_FIVE.into_iter().zip(study.five));
    out
}

pub fn render(ds: &Dataset) -> String {
    let mut buf = Vec::new();
    ds.write_tsv(&mut buf, TextField::Raw)
        .expect("generated text is writable");
    String::from_utf8(buf).expect("utf-8")
}

/// Writes every bundled fixture file below `root`.
pub fn write_bundled(root: &Path) -> Result<(), CorpusError> {
    for (rel, ds) in bundled() {
        let path = root.join(rel);
        let io = |source| CorpusError::Io {
            path: path.clone(),
            source,
        };
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        std::fs::write(&path, render(&ds)).map_err(io)?;
    }
    Ok(())
}
