//! SemEval-2017 Task 4 tweet files: label scales, TSV parsing, text
//! normalization and stratified splits.
//!
//! Record layouts (one record per line, LF or CRLF):
//!
//! ```text
//! subtask A:     id<TAB>label<TAB>text             label ∈ negative|neutral|positive
//! subtask B:     id<TAB>topic<TAB>label<TAB>text   label ∈ negative|positive
//! subtask C:     id<TAB>topic<TAB>label<TAB>text   label ∈ -2|-1|0|1|2
//! ```
//!
//! Records whose text is the placeholder `Not Available` (deleted tweets in
//! the official distribution) are skipped and counted.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::LazyLock;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Text of records whose tweet was deleted before the corpus was hydrated.
pub const UNAVAILABLE_PLACEHOLDER: &str = "Not Available";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}:{line}: expected {expected} tab-separated fields, found {found}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("{}:{line}: label `{token}` is not on the {scale} scale", path.display())]
    Label {
        path: PathBuf,
        line: usize,
        token: String,
        scale: ScaleKind,
    },
    #[error("cannot stratify: class `{label}` has {count} example(s), at least 2 are required")]
    Stratify { label: String, count: usize },
    #[error("split fraction must lie strictly between 0 and 1, got {0}")]
    Fraction(f64),
    #[error("unknown subtask `{0}` (expected A, B or C)")]
    Subtask(String),
    #[error("field {0:?} cannot be written to TSV (contains a tab or line break)")]
    Unwritable(String),
}

/// The three SemEval-2017 Task 4 classification subtasks handled here.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Subtask {
    A,
    B,
    C,
}

impl Subtask {
    pub fn scale(self) -> SentimentScale {
        match self {
            Subtask::A => SentimentScale::THREE_POINT,
            Subtask::B => SentimentScale::TWO_POINT,
            Subtask::C => SentimentScale::FIVE_POINT,
        }
    }

    /// B and C records carry a topic column.
    pub fn has_topic(self) -> bool {
        !matches!(self, Subtask::A)
    }

    fn field_count(self) -> usize {
        if self.has_topic() {
            4
        } else {
            3
        }
    }
}

impl fmt::Display for Subtask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Subtask::A => "A",
            Subtask::B => "B",
            Subtask::C => "C",
        };
        f.write_str(s)
    }
}

impl FromStr for Subtask {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "A" | "a" => Ok(Subtask::A),
            "B" | "b" => Ok(Subtask::B),
            "C" | "c" => Ok(Subtask::C),
            other => Err(CorpusError::Subtask(other.to_string())),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleKind {
    ThreePoint,
    TwoPoint,
    FivePoint,
}

impl fmt::Display for ScaleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ScaleKind::ThreePoint => "three_point",
            ScaleKind::TwoPoint => "two_point",
            ScaleKind::FivePoint => "five_point",
        };
        f.write_str(s)
    }
}

/// A sentiment label as a signed polarity: -1/0/+1 on the 3- and 2-point
/// scales, -2..=2 on the 5-point scale. The scale decides its spelling.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Label(pub i8);

impl Label {
    pub const NEGATIVE: Label = Label(-1);
    pub const NEUTRAL: Label = Label(0);
    pub const POSITIVE: Label = Label(1);
}

const THREE_POINT_LABELS: [Label; 3] = [Label(-1), Label(0), Label(1)];
const TWO_POINT_LABELS: [Label; 2] = [Label(-1), Label(1)];
const FIVE_POINT_LABELS: [Label; 5] = [Label(-2), Label(-1), Label(0), Label(1), Label(2)];

/// Ordered label set of one subtask.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SentimentScale {
    pub kind: ScaleKind,
}

impl SentimentScale {
    pub const THREE_POINT: SentimentScale = SentimentScale {
        kind: ScaleKind::ThreePoint,
    };
    pub const TWO_POINT: SentimentScale = SentimentScale {
        kind: ScaleKind::TwoPoint,
    };
    pub const FIVE_POINT: SentimentScale = SentimentScale {
        kind: ScaleKind::FivePoint,
    };

    pub fn labels(&self) -> &'static [Label] {
        match self.kind {
            ScaleKind::ThreePoint => &THREE_POINT_LABELS,
            ScaleKind::TwoPoint => &TWO_POINT_LABELS,
            ScaleKind::FivePoint => &FIVE_POINT_LABELS,
        }
    }

    pub fn len(&self) -> usize {
        self.labels().len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index_of(&self, label: Label) -> Option<usize> {
        self.labels().iter().position(|&l| l == label)
    }

    pub fn label_at(&self, index: usize) -> Option<Label> {
        self.labels().get(index).copied()
    }

    pub fn contains(&self, label: Label) -> bool {
        self.index_of(label).is_some()
    }

    /// File spelling of a label. Panics if the label is off-scale.
    pub fn token(&self, label: Label) -> &'static str {
        assert!(self.contains(label), "label {label:?} not on {} scale", self.kind);
        match self.kind {
            ScaleKind::ThreePoint | ScaleKind::TwoPoint => match label.0 {
                -1 => "negative",
                0 => "neutral",
                _ => "positive",
            },
            ScaleKind::FivePoint => ["-2", "-1", "0", "1", "2"][(label.0 + 2) as usize],
        }
    }

    pub fn tokens(&self) -> Vec<&'static str> {
        self.labels().iter().map(|&l| self.token(l)).collect()
    }

    pub fn parse(&self, token: &str) -> Option<Label> {
        self.labels().iter().copied().find(|&l| self.token(l) == token)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledTweet {
    pub id: String,
    pub topic: Option<String>,
    pub label: Label,
    pub raw_text: String,
    pub norm_text: String,
}

impl LabeledTweet {
    pub fn new(id: impl Into<String>, topic: Option<String>, label: Label, raw: impl Into<String>) -> Self {
        let raw_text = raw.into();
        let norm_text = normalize_tweet(&raw_text);
        Self {
            id: id.into(),
            topic,
            label,
            raw_text,
            norm_text,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub subtask: Subtask,
    pub scale: SentimentScale,
    pub examples: Vec<LabeledTweet>,
    pub source_path: PathBuf,
    /// Records dropped because their text was the `Not Available` placeholder.
    pub skipped_unavailable: usize,
}

impl Dataset {
    pub fn new(subtask: Subtask, examples: Vec<LabeledTweet>) -> Self {
        Self {
            subtask,
            scale: subtask.scale(),
            examples,
            source_path: PathBuf::new(),
            skipped_unavailable: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Class indices of every example, in scale order.
    pub fn label_indices(&self) -> Vec<usize> {
        self.examples
            .iter()
            .map(|e| self.scale.index_of(e.label).expect("example label on dataset scale"))
            .collect()
    }

    fn with_examples(&self, examples: Vec<LabeledTweet>) -> Self {
        Self {
            subtask: self.subtask,
            scale: self.scale,
            examples,
            source_path: self.source_path.clone(),
            skipped_unavailable: 0,
        }
    }

    /// Re-normalizes every example with non-default options.
    pub fn renormalize(&mut self, opts: &NormalizeOptions) {
        for ex in &mut self.examples {
            ex.norm_text = normalize_with(&ex.raw_text, opts);
        }
    }

    pub fn write_tsv<W: Write>(&self, out: W, field: TextField) -> Result<(), CorpusError> {
        write_tsv(self, out, field)
    }
}

/// Which text column [`write_tsv`] emits.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum TextField {
    Raw,
    Normalized,
}

pub fn load_dataset(path: impl AsRef<Path>, subtask: Subtask) -> Result<Dataset, CorpusError> {
    load_dataset_with(path, subtask, &NormalizeOptions::default())
}

pub fn load_dataset_with(
    path: impl AsRef<Path>,
    subtask: Subtask,
    opts: &NormalizeOptions,
) -> Result<Dataset, CorpusError> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut ds = parse_dataset(&content, subtask, path, opts)?;
    ds.source_path = path.to_path_buf();
    Ok(ds)
}

/// Parses TSV content already in memory; `path` is only used in diagnostics.
pub fn parse_dataset(
    content: &str,
    subtask: Subtask,
    path: &Path,
    opts: &NormalizeOptions,
) -> Result<Dataset, CorpusError> {
    let scale = subtask.scale();
    let expected = subtask.field_count();
    let mut examples = Vec::new();
    let mut skipped = 0;

    for (i, line) in content.split('\n').enumerate() {
        let line_no = i + 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.splitn(expected, '\t').collect();
        if fields.len() != expected {
            return Err(CorpusError::Parse {
                path: path.to_path_buf(),
                line: line_no,
                expected,
                found: fields.len(),
            });
        }
        let (id, topic, label_token, text) = if subtask.has_topic() {
            (fields[0], Some(fields[1]), fields[2], fields[3])
        } else {
            (fields[0], None, fields[1], fields[2])
        };
        let label = scale.parse(label_token).ok_or_else(|| CorpusError::Label {
            path: path.to_path_buf(),
            line: line_no,
            token: label_token.to_string(),
            scale: scale.kind,
        })?;
        if text.trim() == UNAVAILABLE_PLACEHOLDER {
            skipped += 1;
            continue;
        }
        examples.push(LabeledTweet {
            id: id.to_string(),
            topic: topic.map(str::to_string),
            label,
            raw_text: text.to_string(),
            norm_text: normalize_with(text, opts),
        });
    }

    Ok(Dataset {
        subtask,
        scale,
        examples,
        source_path: path.to_path_buf(),
        skipped_unavailable: skipped,
    })
}

/// Writes `ds` in the layout [`load_dataset`] reads.
pub fn write_tsv<W: Write>(ds: &Dataset, mut out: W, field: TextField) -> Result<(), CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: PathBuf::from("<tsv writer>"),
        source,
    };
    for ex in &ds.examples {
        let text = match field {
            TextField::Raw => &ex.raw_text,
            TextField::Normalized => &ex.norm_text,
        };
        let mut cols: Vec<&str> = vec![&ex.id];
        if ds.subtask.has_topic() {
            cols.push(ex.topic.as_deref().unwrap_or(""));
        }
        cols.push(ds.scale.token(ex.label));
        for c in &cols {
            if c.contains(['\t', '\n', '\r']) {
                return Err(CorpusError::Unwritable(c.to_string()));
            }
        }
        if text.contains(['\n', '\r']) {
            return Err(CorpusError::Unwritable(text.clone()));
        }
        writeln!(out, "{}\t{}", cols.join("\t"), text).map_err(io_err)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizeOptions {
    pub lowercase: bool,
}

impl Default for NormalizeOptions {
    fn default() -> Self {
        Self { lowercase: true }
    }
}

static ENTITY: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)&(amp|lt|gt|quot);").unwrap());
static URL: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)(?:https?://|www\.)\S*").unwrap());
static MENTION: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"@\w+").unwrap());

/// Normalizes tweet text: HTML entities unescaped, URLs replaced by `<url>`,
/// @-mentions by `<user>`, lowercased, whitespace collapsed and trimmed.
///
/// Idempotent. Output never contains `@` followed by a word character, nor
/// a URL prefix.
pub fn normalize_tweet(raw: &str) -> String {
    normalize_with(raw, &NormalizeOptions::default())
}

pub fn normalize_with(raw: &str, opts: &NormalizeOptions) -> String {
    // Repeat until stable so `&amp;lt;` cannot survive one pass as `&lt;`.
    let mut text = raw.to_string();
    loop {
        let next = ENTITY.replace_all(&text, |c: &regex::Captures| match c[1].to_ascii_lowercase().as_str() {
            "amp" => "&",
            "lt" => "<",
            "gt" => ">",
            _ => "\"",
        });
        if next == text {
            break;
        }
        text = next.into_owned();
    }
    let text = URL.replace_all(&text, "<url>");
    let text = MENTION.replace_all(&text, "<user>");
    let text = if opts.lowercase {
        // Lowercasing can turn a non-word character after `@` into a word
        // character for a handful of code points.
        MENTION.replace_all(&text.to_lowercase(), "<user>").into_owned()
    } else {
        text.into_owned()
    };
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Splits `ds` into two parts, the first holding `fraction` of every class
/// (rounded, at least one example on each side). Both parts keep file order.
pub fn stratified_split(ds: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset), CorpusError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(CorpusError::Fraction(fraction));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.scale.len()];
    for (i, class) in ds.label_indices().into_iter().enumerate() {
        by_class[class].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_first = vec![false; ds.len()];
    for (class, members) in by_class.iter_mut().enumerate() {
        let n = members.len();
        if n == 0 {
            continue;
        }
        if n < 2 {
            return Err(CorpusError::Stratify {
                label: ds.scale.tokens()[class].to_string(),
                count: n,
            });
        }
        let take = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
        members.shuffle(&mut rng);
        for &i in &members[..take] {
            in_first[i] = true;
        }
    }
    let (mut first, mut second) = (Vec::new(), Vec::new());
    for (ex, &sel) in ds.examples.iter().zip(&in_first) {
        if sel {
            first.push(ex.clone());
        } else {
            second.push(ex.clone());
        }
    }
    Ok((ds.with_examples(first), ds.with_examples(second)))
}

/// Per-label counts in scale order, zeros included.
pub fn class_distribution(ds: &Dataset) -> IndexMap<Label, usize> {
    let mut counts: IndexMap<Label, usize> = ds.scale.labels().iter().map(|&l| (l, 0)).collect();
    for ex in &ds.examples {
        *counts.entry(ex.label).or_insert(0) += 1;
    }
    counts
}

/// [`class_distribution`] keyed by file spelling, for JSON output.
pub fn class_distribution_named(ds: &Dataset) -> IndexMap<String, usize> {
    class_distribution(ds)
        .into_iter()
        .map(|(l, n)| (ds.scale.token(l).to_string(), n))
        .collect()
}

/// Counts of duplicated ids; ids are not required to be unique.
pub fn duplicate_ids(ds: &Dataset) -> usize {
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for ex in &ds.examples {
        *seen.entry(ex.id.as_str()).or_default() += 1;
    }
    seen.values().map(|&n| n - 1).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(content: &str, subtask: Subtask) -> Result<Dataset, CorpusError> {
        parse_dataset(content, subtask, Path::new("mem.tsv"), &NormalizeOptions::default())
    }

    #[test]
    fn parses_subtask_a_line() {
        let ds = parse(
            "635930169241374720\tneutral\tOrder Go Set a Watchman in store today\n",
            Subtask::A,
        )
        .unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.examples[0].label, Label::NEUTRAL);
        assert_eq!(ds.examples[0].id, "635930169241374720");
        assert_eq!(ds.examples[0].topic, None);
        assert_eq!(ds.examples[0].norm_text, "order go set a watchman in store today");
    }

    #[test]
    fn empty_file_has_no_examples() {
        let ds = parse("", Subtask::A).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn topic_layouts_and_crlf() {
        let ds = parse(
            "1\tapple\tpositive\tlove it\r\n2\tapple\tnegative\thate it\r\n",
            Subtask::B,
        )
        .unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.examples[1].topic.as_deref(), Some("apple"));
        assert_eq!(ds.examples[1].raw_text, "hate it");

        let ds = parse("7\tdunkirk\t-2\tawful\n8\tdunkirk\t2\tsuperb\n", Subtask::C).unwrap();
        assert_eq!(ds.examples[0].label, Label(-2));
        assert_eq!(ds.examples[1].label, Label(2));
    }

    #[test]
    fn subtask_b_rejects_neutral_with_line_number() {
        let err = parse("1\tt\tpositive\tok\n2\tt\tneutral\tmeh\n", Subtask::B).unwrap_err();
        match err {
            CorpusError::Label { line, token, .. } => {
                assert_eq!(line, 2);
                assert_eq!(token, "neutral");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_field_count_is_a_parse_error() {
        let err = parse("1\tpositive\n", Subtask::A).unwrap_err();
        assert!(matches!(
            err,
            CorpusError::Parse {
                line: 1,
                expected: 3,
                found: 2,
                ..
            }
        ));
        let err = parse("1\tpositive\tfine\n", Subtask::C).unwrap_err();
        assert!(matches!(
            err,
            CorpusError::Parse {
                expected: 4,
                found: 3,
                ..
            }
        ));
    }

    #[test]
    fn five_point_rejects_words() {
        assert!(matches!(
            parse("1\tt\tpositive\tx\n", Subtask::C),
            Err(CorpusError::Label { .. })
        ));
        assert!(matches!(
            parse("1\tt\t3\tx\n", Subtask::C),
            Err(CorpusError::Label { .. })
        ));
    }

    #[test]
    fn unavailable_placeholder_is_skipped_and_counted() {
        let ds = parse(
            "1\tpositive\tNot Available\n2\tnegative\tbad\n2\tnegative\tbad again\n",
            Subtask::A,
        )
        .unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.skipped_unavailable, 1);
        assert_eq!(duplicate_ids(&ds), 1);
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_dataset("/nonexistent/semeval.tsv", Subtask::A).unwrap_err();
        assert!(matches!(err, CorpusError::Io { .. }));
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(
            normalize_tweet("@John check https://t.co/xyz GREAT &amp; fun"),
            "<user> check <url> great & fun"
        );
        assert_eq!(normalize_tweet(""), "");
        assert_eq!(normalize_tweet("hello world"), "hello world");
        assert_eq!(normalize_tweet("  see WWW.Example.com\t\tnow  "), "see <url> now");
        assert_eq!(normalize_tweet("&amp;lt;3"), "<3");
        assert_eq!(normalize_tweet("&QUOT;hi&quot;"), "\"hi\"");
    }

    #[test]
    fn normalize_can_keep_case() {
        let opts = NormalizeOptions { lowercase: false };
        assert_eq!(normalize_with("Hi @Bob", &opts), "Hi <user>");
    }

    #[test]
    fn scales_are_ordered_and_spelled() {
        assert_eq!(
            SentimentScale::THREE_POINT.tokens(),
            ["negative", "neutral", "positive"]
        );
        assert_eq!(SentimentScale::TWO_POINT.tokens(), ["negative", "positive"]);
        assert_eq!(SentimentScale::FIVE_POINT.tokens(), ["-2", "-1", "0", "1", "2"]);
        for scale in [
            SentimentScale::THREE_POINT,
            SentimentScale::TWO_POINT,
            SentimentScale::FIVE_POINT,
        ] {
            let labels = scale.labels();
            assert!(labels.windows(2).all(|w| w[0] < w[1]));
        }
    }

    fn two_class(n_neg: usize, n_pos: usize) -> Dataset {
        let mut ex = Vec::new();
        for i in 0..n_neg {
            ex.push(LabeledTweet::new(
                format!("n{i}"),
                Some("t".into()),
                Label::NEGATIVE,
                "bad",
            ));
        }
        for i in 0..n_pos {
            ex.push(LabeledTweet::new(
                format!("p{i}"),
                Some("t".into()),
                Label::POSITIVE,
                "good",
            ));
        }
        Dataset::new(Subtask::B, ex)
    }

    #[test]
    fn stratified_split_sizes() {
        let ds = two_class(50, 50);
        let (a, b) = stratified_split(&ds, 0.8, 3).unwrap();
        assert_eq!(a.len(), 80);
        assert_eq!(b.len(), 20);
        // brute-force tally of the first part
        let neg = a.examples.iter().filter(|e| e.label == Label::NEGATIVE).count();
        assert!((39..=41).contains(&neg));
        let neg_b = b.examples.iter().filter(|e| e.label == Label::NEGATIVE).count();
        assert_eq!(neg + neg_b, 50);
    }

    #[test]
    fn stratified_split_rejects_singletons() {
        let ds = two_class(1, 1);
        assert!(matches!(
            stratified_split(&ds, 0.5, 0),
            Err(CorpusError::Stratify { .. })
        ));
        assert!(matches!(
            stratified_split(&two_class(4, 4), 1.0, 0),
            Err(CorpusError::Fraction(_))
        ));
    }

    #[test]
    fn stratified_split_is_deterministic() {
        let ds = two_class(30, 17);
        let ids = |d: &Dataset| d.examples.iter().map(|e| e.id.clone()).collect::<Vec<_>>();
        let (a1, b1) = stratified_split(&ds, 0.7, 11).unwrap();
        let (a2, b2) = stratified_split(&ds, 0.7, 11).unwrap();
        assert_eq!(ids(&a1), ids(&a2));
        assert_eq!(ids(&b1), ids(&b2));
    }

    #[test]
    fn distribution_counts() {
        let ds = two_class(1, 3);
        let d = class_distribution(&ds);
        assert_eq!(d[&Label::POSITIVE], 3);
        assert_eq!(d[&Label::NEGATIVE], 1);
        let empty = Dataset::new(Subtask::A, vec![]);
        assert!(class_distribution(&empty).values().all(|&n| n == 0));
        assert_eq!(class_distribution(&empty).len(), 3);
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "\\PC{0,60}") {
            let once = normalize_tweet(&s);
            prop_assert_eq!(normalize_tweet(&once), once.clone());
        }

        #[test]
        fn normalize_idempotent_on_tweetlike(s in "(@[A-Za-z_]{1,6}|https?://[a-z./]{1,8}|www\\.[a-z]{1,5}|&(amp|lt|gt|quot);|[A-Za-z]{1,5}|[ \t]{1,3}|[&;@<>#])*") {
            let once = normalize_tweet(&s);
            prop_assert_eq!(normalize_tweet(&once), once.clone());
            let mention = Regex::new(r"@\w").unwrap();
            prop_assert!(!mention.is_match(&once));
            let lower = once.to_lowercase();
            prop_assert!(!lower.contains("http://") && !lower.contains("https://") && !lower.contains("www."));
        }

        #[test]
        fn split_partitions_input(n_neg in 2usize..40, n_pos in 2usize..40, frac in 0.05f64..0.95, seed in any::<u64>()) {
            let ds = two_class(n_neg, n_pos);
            let (a, b) = stratified_split(&ds, frac, seed).unwrap();
            prop_assert_eq!(a.len() + b.len(), ds.len());
            let mut ids: Vec<_> = a.examples.iter().chain(&b.examples).map(|e| e.id.clone()).collect();
            let mut orig: Vec<_> = ds.examples.iter().map(|e| e.id.clone()).collect();
            ids.sort();
            orig.sort();
            prop_assert_eq!(ids, orig);
            for (label, n) in [(Label::NEGATIVE, n_neg), (Label::POSITIVE, n_pos)] {
                let got = a.examples.iter().filter(|e| e.label == label).count() as f64;
                prop_assert!((got - frac * n as f64).abs() <= 1.0);
            }
        }

        #[test]
        fn tsv_round_trip(rows in proptest::collection::vec(
            ("[0-9]{1,12}", "[a-z ]{1,10}", 0usize..5, "[^\t\r\n]{1,40}"), 0..20)) {
            let examples: Vec<_> = rows
                .iter()
                .filter(|r| r.3.trim() != UNAVAILABLE_PLACEHOLDER && !r.3.trim().is_empty())
                .map(|(id, topic, l, text)| {
                    LabeledTweet::new(id.clone(), Some(topic.clone()), FIVE_POINT_LABELS[*l], text.clone())
                })
                .collect();
            let ds = Dataset::new(Subtask::C, examples);
            let mut buf = Vec::new();
            ds.write_tsv(&mut buf, TextField::Raw).unwrap();
            let back = parse(std::str::from_utf8(&buf).unwrap(), Subtask::C).unwrap();
            prop_assert_eq!(back.examples, ds.examples);
        }

        #[test]
        fn subtask_b_never_neutral(labels in proptest::collection::vec(0usize..3, 1..20)) {
            let content: String = labels
                .iter()
                .enumerate()
                .map(|(i, &l)| format!("{i}\ttopic\t{}\ttext {i}\n", ["negative", "neutral", "positive"][l]))
                .collect();
            match parse(&content, Subtask::B) {
                Ok(ds) => prop_assert!(ds.examples.iter().all(|e| e.label != Label::NEUTRAL)),
                Err(CorpusError::Label { token, .. }) => prop_assert_eq!(token, "neutral"),
                Err(e) => prop_assert!(false, "unexpected error {}", e),
            }
        }
    }
}
