//! Multinomial naive Bayes over unigram counts with add-alpha smoothing, in
//! log space.
//!
//! With `N_c` training documents of class `c` out of `N`, and `V` the training
//! vocabulary plus one shared unknown-word bucket:
//!
//! ```text
//! log P(c)   = log(N_c / N)
//! log P(w|c) = log((count(w, c) + α) / (Σ_w' count(w', c) + α·(|V| + 1)))
//! score(c)   = log P(c) + Σ_{w ∈ doc} log P(w|c)
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dataset, Label, SentimentScale};

pub const DEFAULT_ALPHA: f64 = 1.0;
const FORMAT_TAG: &str = "tweetbench-nb/1";

#[derive(Debug, Error)]
pub enum NbError {
    #[error("cannot train on an empty dataset")]
    EmptyDataset,
    #[error("smoothing constant must be positive and finite, got {0}")]
    Alpha(f64),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("model file {}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct NbModel {
    pub scale: SentimentScale,
    /// Classes seen in training, in scale order.
    pub labels: Vec<Label>,
    pub alpha: f64,
    pub log_prior: Vec<f64>,
    /// Sorted training vocabulary.
    pub vocab: Vec<String>,
    /// `log_likelihood[class][word]`.
    pub log_likelihood: Vec<Vec<f64>>,
    /// Per-class log likelihood of the unknown-word bucket.
    pub log_unknown: Vec<f64>,
    word_index: HashMap<String, usize>,
}

/// Trains on the normalized text of every example.
pub fn train_nb(ds: &Dataset, alpha: f64) -> Result<NbModel, NbError> {
    let docs: Vec<(Label, &str)> = ds.examples.iter().map(|e| (e.label, e.norm_text.as_str())).collect();
    train_nb_docs(ds.scale, &docs, alpha)
}

/// Trains on `(label, text)` pairs; text is split on whitespace.
pub fn train_nb_docs(scale: SentimentScale, docs: &[(Label, &str)], alpha: f64) -> Result<NbModel, NbError> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(NbError::Alpha(alpha));
    }
    if docs.is_empty() {
        return Err(NbError::EmptyDataset);
    }
    let k = scale.len();
    let mut doc_counts = vec![0u64; k];
    let mut word_counts: Vec<BTreeMap<&str, u64>> = vec![BTreeMap::new(); k];
    let mut all_words: BTreeMap<&str, ()> = BTreeMap::new();
    for &(label, text) in docs {
        let c = scale
            .index_of(label)
            .unwrap_or_else(|| panic!("label {label:?} not on {} scale", scale.kind));
        doc_counts[c] += 1;
        for w in text.split_whitespace() {
            *word_counts[c].entry(w).or_default() += 1;
            all_words.insert(w, ());
        }
    }
    let vocab: Vec<String> = all_words.keys().map(|w| w.to_string()).collect();
    let denom_extra = alpha * (vocab.len() as f64 + 1.0);
    let n = docs.len() as f64;

    let mut labels = Vec::new();
    let mut log_prior = Vec::new();
    let mut log_likelihood = Vec::new();
    let mut log_unknown = Vec::new();
    for c in 0..k {
        let label = scale.labels()[c];
        if doc_counts[c] == 0 {
            log::warn!(
                "class `{}` has no training documents; dropped from the model",
                scale.token(label)
            );
            continue;
        }
        let total: u64 = word_counts[c].values().sum();
        let denom = total as f64 + denom_extra;
        labels.push(label);
        log_prior.push((doc_counts[c] as f64 / n).ln());
        log_likelihood.push(
            vocab
                .iter()
                .map(|w| ((word_counts[c].get(w.as_str()).copied().unwrap_or(0) as f64 + alpha) / denom).ln())
                .collect(),
        );
        log_unknown.push((alpha / denom).ln());
    }
    Ok(NbModel::assemble(
        scale,
        labels,
        alpha,
        log_prior,
        vocab,
        log_likelihood,
        log_unknown,
    ))
}

impl NbModel {
    fn assemble(
        scale: SentimentScale,
        labels: Vec<Label>,
        alpha: f64,
        log_prior: Vec<f64>,
        vocab: Vec<String>,
        log_likelihood: Vec<Vec<f64>>,
        log_unknown: Vec<f64>,
    ) -> Self {
        let word_index = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self {
            scale,
            labels,
            alpha,
            log_prior,
            vocab,
            log_likelihood,
            log_unknown,
            word_index,
        }
    }

    pub fn log_likelihood_of(&self, label: Label, word: &str) -> Option<f64> {
        let c = self.labels.iter().position(|&l| l == label)?;
        Some(match self.word_index.get(word) {
            Some(&i) => self.log_likelihood[c][i],
            None => self.log_unknown[c],
        })
    }

    pub fn log_prior_of(&self, label: Label) -> Option<f64> {
        let c = self.labels.iter().position(|&l| l == label)?;
        Some(self.log_prior[c])
    }

    /// Unnormalized log posteriors, in scale order.
    pub fn scores(&self, text: &str) -> Vec<f64> {
        let mut scores = self.log_prior.clone();
        for w in text.split_whitespace() {
            let wi = self.word_index.get(w).copied();
            for (c, s) in scores.iter_mut().enumerate() {
                *s += match wi {
                    Some(i) => self.log_likelihood[c][i],
                    None => self.log_unknown[c],
                };
            }
        }
        scores
    }

    pub fn predict_label(&self, text: &str) -> Label {
        self.labels[argmax_first(&self.scores(text))]
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NbError> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(&NbFile::from(self)).expect("model serializes");
        fs::write(path, json + "\n").map_err(|source| NbError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NbError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| NbError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let format_err = |reason: String| NbError::Format {
            path: path.to_path_buf(),
            reason,
        };
        let file: NbFile = serde_json::from_str(&text).map_err(|e| format_err(e.to_string()))?;
        file.into_model().map_err(format_err)
    }
}

/// Index of the maximum; the first one wins ties.
pub fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Predicted label plus every class's unnormalized log posterior.
pub fn predict_nb(model: &NbModel, text: &str) -> (Label, IndexMap<Label, f64>) {
    let scores = model.scores(text);
    let label = model.labels[argmax_first(&scores)];
    (label, model.labels.iter().copied().zip(scores).collect())
}

/// Softmax of log scores, computed stably around the maximum.
pub fn normalize_log_scores(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn nb_probabilities(model: &NbModel, text: &str) -> IndexMap<Label, f64> {
    let probs = normalize_log_scores(&model.scores(text));
    model.labels.iter().copied().zip(probs).collect()
}

/// JSON layout of a saved model.
#[derive(Serialize, Deserialize)]
struct NbFile {
    format: String,
    scale: SentimentScale,
    alpha: f64,
    labels: Vec<String>,
    log_prior: Vec<f64>,
    vocab: Vec<String>,
    log_likelihood: Vec<Vec<f64>>,
    log_unknown: Vec<f64>,
}

impl From<&NbModel> for NbFile {
    fn from(m: &NbModel) -> Self {
        NbFile {
            format: FORMAT_TAG.to_string(),
            scale: m.scale,
            alpha: m.alpha,
            labels: m.labels.iter().map(|&l| m.scale.token(l).to_string()).collect(),
            log_prior: m.log_prior.clone(),
            vocab: m.vocab.clone(),
            log_likelihood: m.log_likelihood.clone(),
            log_unknown: m.log_unknown.clone(),
        }
    }
}

impl NbFile {
    fn into_model(self) -> Result<NbModel, String> {
        if self.format != FORMAT_TAG {
            return Err(format!("unsupported format tag {:?}", self.format));
        }
        let labels = self
            .labels
            .iter()
            .map(|t| {
                self.scale
                    .parse(t)
                    .ok_or_else(|| format!("label {t:?} not on {} scale", self.scale.kind))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let k = labels.len();
        if k == 0 || self.log_prior.len() != k || self.log_likelihood.len() != k || self.log_unknown.len() != k {
            return Err("per-class tables disagree with the label list".into());
        }
        if self.log_likelihood.iter().any(|row| row.len() != self.vocab.len()) {
            return Err("likelihood rows disagree with the vocabulary".into());
        }
        Ok(NbModel::assemble(
            self.scale,
            labels,
            self.alpha,
            self.log_prior,
            self.vocab,
            self.log_likelihood,
            self.log_unknown,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{LabeledTweet, Subtask};
    use proptest::prelude::*;

    // c = China (negative slot), j = Japan (positive slot)
    const C: Label = Label::NEGATIVE;
    const J: Label = Label::POSITIVE;

    fn chinese_docs() -> Vec<(Label, &'static str)> {
        vec![
            (C, "chinese beijing chinese"),
            (C, "chinese chinese shanghai"),
            (C, "chinese macao"),
            (J, "tokyo japan chinese"),
        ]
    }

    /// Direct evaluation of the smoothed formula by recounting.
    fn oracle_log_likelihood(docs: &[(Label, &str)], alpha: f64, label: Label, word: &str) -> f64 {
        let mut vocab: Vec<&str> = docs.iter().flat_map(|d| d.1.split_whitespace()).collect();
        vocab.sort();
        vocab.dedup();
        let class_words: Vec<&str> = docs
            .iter()
            .filter(|d| d.0 == label)
            .flat_map(|d| d.1.split_whitespace())
            .collect();
        let count = class_words.iter().filter(|&&w| w == word).count() as f64;
        ((count + alpha) / (class_words.len() as f64 + alpha * (vocab.len() as f64 + 1.0))).ln()
    }

    fn oracle_score(docs: &[(Label, &str)], alpha: f64, label: Label, text: &str) -> f64 {
        let prior = docs.iter().filter(|d| d.0 == label).count() as f64 / docs.len() as f64;
        prior.ln()
            + text
                .split_whitespace()
                .map(|w| oracle_log_likelihood(docs, alpha, label, w))
                .sum::<f64>()
    }

    #[test]
    fn textbook_example() {
        let docs = chinese_docs();
        let m = train_nb_docs(SentimentScale::TWO_POINT, &docs, 1.0).unwrap();
        assert!((m.log_prior_of(C).unwrap() - (0.75f64).ln()).abs() < 1e-15);
        assert!((m.log_likelihood_of(C, "chinese").unwrap() - (6.0f64 / 15.0).ln()).abs() < 1e-15);
        assert!((m.log_likelihood_of(J, "chinese").unwrap() - (2.0f64 / 10.0).ln()).abs() < 1e-15);
        let text = "chinese chinese chinese tokyo japan";
        let (label, scores) = predict_nb(&m, text);
        assert_eq!(label, C);
        assert!(scores[&C] > scores[&J]);
        for l in [C, J] {
            assert!((scores[&l] - oracle_score(&docs, 1.0, l, text)).abs() < 1e-12);
        }
        let p = nb_probabilities(&m, text);
        // P(c) ∝ 3/4·(3/7)³·(1/14)²… recomputed from the oracle scores
        let (sc, sj) = (oracle_score(&docs, 1.0, C, text), oracle_score(&docs, 1.0, J, text));
        let pc = 1.0 / (1.0 + (sj - sc).exp());
        assert!((p[&C] - pc).abs() < 1e-12);
    }

    #[test]
    fn single_doc_single_class() {
        let m = train_nb_docs(SentimentScale::TWO_POINT, &[(J, "a")], 1.0).unwrap();
        assert_eq!(m.labels, vec![J]);
        assert_eq!(m.log_prior_of(J).unwrap(), 0.0);
        // |V| = 1, one word in class: (1 + 1) / (1 + 1·2)
        assert!((m.log_likelihood_of(J, "a").unwrap() - oracle_log_likelihood(&[(J, "a")], 1.0, J, "a")).abs() < 1e-15);
        assert!((m.log_likelihood_of(J, "a").unwrap() - (2.0f64 / 3.0).ln()).abs() < 1e-15);
        assert_eq!(nb_probabilities(&m, "a b")[&J], 1.0);
    }

    #[test]
    fn identical_corpora_identical_tables() {
        let docs = [(C, "x y z x"), (J, "x y z x")];
        let m = train_nb_docs(SentimentScale::TWO_POINT, &docs, 0.5).unwrap();
        assert_eq!(m.log_likelihood[0], m.log_likelihood[1]);
        assert_eq!(m.log_unknown[0], m.log_unknown[1]);
    }

    #[test]
    fn empty_text_and_ties() {
        let docs = [(C, "a"), (C, "b"), (J, "c")];
        let m = train_nb_docs(SentimentScale::TWO_POINT, &docs, 1.0).unwrap();
        assert_eq!(predict_nb(&m, "").0, C);
        let balanced = train_nb_docs(SentimentScale::TWO_POINT, &[(C, "a"), (J, "b")], 1.0).unwrap();
        assert_eq!(predict_nb(&balanced, "zzz qqq").0, C);
        let p = nb_probabilities(&balanced, "zzz");
        assert_eq!(p[&C], 0.5);
        assert_eq!(p[&J], 0.5);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            train_nb_docs(SentimentScale::TWO_POINT, &[], 1.0),
            Err(NbError::EmptyDataset)
        ));
        assert!(matches!(
            train_nb_docs(SentimentScale::TWO_POINT, &[(C, "a")], 0.0),
            Err(NbError::Alpha(_))
        ));
        assert!(matches!(
            train_nb_docs(SentimentScale::TWO_POINT, &[(C, "a")], -1.0),
            Err(NbError::Alpha(_))
        ));
    }

    #[test]
    fn missing_classes_are_dropped() {
        let ds = Dataset::new(
            Subtask::A,
            vec![
                LabeledTweet::new("1", None, Label::POSITIVE, "good"),
                LabeledTweet::new("2", None, Label::NEGATIVE, "bad"),
            ],
        );
        let m = train_nb(&ds, 1.0).unwrap();
        assert_eq!(m.labels, vec![Label::NEGATIVE, Label::POSITIVE]);
        let total: f64 = m.log_prior.iter().map(|p| p.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nb.json");
        let m = train_nb_docs(SentimentScale::TWO_POINT, &chinese_docs(), 1.0).unwrap();
        m.save(&path).unwrap();
        let back = NbModel::load(&path).unwrap();
        assert_eq!(back, m);
        fs::write(&path, "{\"format\": \"other\"}").unwrap();
        assert!(matches!(NbModel::load(&path), Err(NbError::Format { .. })));
    }

    #[test]
    fn disjoint_lexicons_are_separated() {
        let mut docs = Vec::new();
        let pos = ["love", "great", "happy", "awesome"];
        let neg = ["hate", "awful", "sad", "terrible"];
        for i in 0..40 {
            docs.push((J, format!("{} {} today", pos[i % 4], pos[(i + 1) % 4])));
            docs.push((C, format!("{} {} today", neg[i % 4], neg[(i + 3) % 4])));
        }
        let refs: Vec<(Label, &str)> = docs.iter().map(|(l, t)| (*l, t.as_str())).collect();
        let m = train_nb_docs(SentimentScale::TWO_POINT, &refs, 1.0).unwrap();
        assert!(refs.iter().all(|(l, t)| m.predict_label(t) == *l));
        let doubled: Vec<(Label, &str)> = refs.iter().chain(refs.iter()).copied().collect();
        let m2 = train_nb_docs(SentimentScale::TWO_POINT, &doubled, 1.0).unwrap();
        assert_eq!(m2.log_prior, m.log_prior);
        assert!(refs.iter().all(|(_, t)| m2.predict_label(t) == m.predict_label(t)));
    }

    fn docs_strategy() -> impl Strategy<Value = Vec<(usize, Vec<usize>)>> {
        proptest::collection::vec((0usize..3, proptest::collection::vec(0usize..6, 0..6)), 1..20)
    }

    fn render(docs: &[(usize, Vec<usize>)]) -> Vec<(Label, String)> {
        let words = ["w0", "w1", "w2", "w3", "w4", "w5"];
        docs.iter()
            .map(|(c, ws)| {
                let text = ws.iter().map(|&w| words[w]).collect::<Vec<_>>().join(" ");
                (SentimentScale::THREE_POINT.labels()[*c], text)
            })
            .collect()
    }

    proptest! {
        #[test]
        fn probabilities_match_oracle(docs in docs_strategy(), query in proptest::collection::vec(0usize..8, 0..6), alpha in 0.1f64..3.0) {
            let docs = render(&docs);
            let refs: Vec<(Label, &str)> = docs.iter().map(|(l, t)| (*l, t.as_str())).collect();
            let m = train_nb_docs(SentimentScale::THREE_POINT, &refs, alpha).unwrap();
            let text = query.iter().map(|q| format!("w{q}")).collect::<Vec<_>>().join(" ");
            let probs = nb_probabilities(&m, &text);
            let oracle: Vec<f64> = m.labels.iter().map(|&l| oracle_score(&refs, alpha, l, &text)).collect();
            let max = oracle.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = oracle.iter().map(|s| (s - max).exp()).sum();
            for (i, l) in m.labels.iter().enumerate() {
                prop_assert!((probs[l] - (oracle[i] - max).exp() / z).abs() < 1e-9);
            }
            prop_assert!((probs.values().sum::<f64>() - 1.0).abs() < 1e-12);
            for (c, l) in m.labels.iter().enumerate() {
                let total: f64 = m.log_likelihood[c].iter().map(|x| x.exp()).sum::<f64>() + m.log_unknown[c].exp();
                prop_assert!((total - 1.0).abs() < 1e-12, "class {:?} sums to {}", l, total);
            }
        }

        #[test]
        fn duplicating_corpus_keeps_decisions(docs in docs_strategy(), query in proptest::collection::vec(0usize..8, 0..6), alpha in 0.1f64..3.0) {
            let docs = render(&docs);
            let refs: Vec<(Label, &str)> = docs.iter().map(|(l, t)| (*l, t.as_str())).collect();
            let doubled: Vec<(Label, &str)> = refs.iter().chain(refs.iter()).copied().collect();
            let a = train_nb_docs(SentimentScale::THREE_POINT, &refs, alpha).unwrap();
            // Add-alpha smoothing is scale-free only when the pseudo-count
            // scales with the corpus.
            let b = train_nb_docs(SentimentScale::THREE_POINT, &doubled, 2.0 * alpha).unwrap();
            let text = query.iter().map(|q| format!("w{q}")).collect::<Vec<_>>().join(" ");
            prop_assert_eq!(&a.log_prior, &b.log_prior);
            for (ra, rb) in a.log_likelihood.iter().zip(&b.log_likelihood) {
                for (x, y) in ra.iter().zip(rb) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }
            let mut sa = a.scores(&text);
            sa.sort_by(|x, y| y.partial_cmp(x).unwrap());
            if sa.len() < 2 || sa[0] - sa[1] > 1e-9 {
                prop_assert_eq!(a.predict_label(&text), b.predict_label(&text));
            }
        }

        #[test]
        fn constant_shift_invariance(scores in proptest::collection::vec(-50.0f64..50.0, 1..6), shift in -1e3f64..1e3) {
            let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            prop_assert_eq!(argmax_first(&scores), argmax_first(&shifted));
            let (p, q) = (normalize_log_scores(&scores), normalize_log_scores(&shifted));
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
