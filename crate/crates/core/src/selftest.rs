//! Property suite behind `tweetbench selftest`. Each check carries its own
//! oracle, computed independently of the code under test.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::{Label, SentimentScale};
use crate::encoder::{
    self, grad_check, EncoderConfig, EncoderModel, GradCheckOptions, Targets, TensorKind, TrainConfig,
};
use crate::fixtures;
use crate::metrics::{compute_metrics, confusion};
use crate::nb::{predict_nb, train_nb_docs};
use crate::tokenizer::{apply_mlm_mask, build_vocab, encode_dataset, EncodeOptions, TokenSequence, Vocab, MASK};

pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Default)]
pub struct SelftestOptions {
    /// Skip the checks that train a model.
    pub quick: bool,
    pub seed: u64,
    /// Double the analytic feed-forward gradient before the gradient check.
    /// Exists to prove the check can fail.
    pub mutate_grad: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct PropertyResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SelftestReport {
    pub results: Vec<PropertyResult>,
    pub skipped: Vec<&'static str>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failed(&self) -> Vec<&'static str> {
        self.results.iter().filter(|r| !r.passed).map(|r| r.name).collect()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.results {
            out.push_str(&format!(
                "{} {:<16} {:>7.2}s  {}\n",
                if r.passed { "PASS" } else { "FAIL" },
                r.name,
                r.seconds,
                r.detail
            ));
        }
        for s in &self.skipped {
            out.push_str(&format!("SKIP {s:<16} (--quick)\n"));
        }
        out
    }
}

type Check = fn(&SelftestOptions) -> Result<String, String>;

const QUICK: [(&str, Check); 5] = [
    ("metrics_oracle", metrics_oracle),
    ("nb_hand_example", nb_hand_example),
    ("mlm_masking", mlm_masking),
    ("param_count", param_count),
    ("grad_check", grad_check_desk),
];

const TRAINING: [(&str, Check); 1] = [("overfit_toy", overfit_toy)];

pub fn run_selftest(opts: &SelftestOptions) -> SelftestReport {
    let mut results = Vec::new();
    let mut skipped = Vec::new();
    for (name, check) in QUICK.iter().chain(TRAINING.iter()) {
        if opts.quick && TRAINING.iter().any(|(n, _)| n == name) {
            skipped.push(*name);
            continue;
        }
        let start = Instant::now();
        let outcome = check(opts);
        let seconds = start.elapsed().as_secs_f64();
        let (passed, detail) = match outcome {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        results.push(PropertyResult {
            name,
            passed,
            detail,
            seconds,
        });
    }
    SelftestReport { results, skipped }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Per-class tallies recounted from scratch, no confusion matrix involved.
fn brute_force(gold: &[usize], pred: &[usize], k: usize) -> [f64; 4] {
    let n = gold.len() as f64;
    let correct = gold.iter().zip(pred).filter(|(g, p)| g == p).count() as f64;
    let (mut p_sum, mut r_sum, mut f_sum) = (0.0, 0.0, 0.0);
    for c in 0..k {
        let mut tp = 0.0;
        let mut predicted = 0.0;
        let mut actual = 0.0;
        for i in 0..gold.len() {
            if pred[i] == c {
                predicted += 1.0;
            }
            if gold[i] == c {
                actual += 1.0;
                if pred[i] == c {
                    tp += 1.0;
                }
            }
        }
        let p = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let r = if actual > 0.0 { tp / actual } else { 0.0 };
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        p_sum += p;
        r_sum += r;
        f_sum += f;
    }
    let kf = k as f64;
    [correct / n, p_sum / kf, r_sum / kf, f_sum / kf]
}

/// Checks `confusion` + `compute_metrics` on 10 000 random (gold, pred)
/// label pairs per scale, split into evaluations of random length.
pub fn metrics_oracle(opts: &SelftestOptions) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut evaluations = 0;
    let mut worst: f64 = 0.0;
    for scale in [
        SentimentScale::TWO_POINT,
        SentimentScale::THREE_POINT,
        SentimentScale::FIVE_POINT,
    ] {
        let k = scale.len();
        let mut remaining = 10_000usize;
        while remaining > 0 {
            let n = rng.random_range(1..=400).min(remaining);
            remaining -= n;
            let gold: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let pred: Vec<usize> = gold
                .iter()
                .map(|&g| {
                    if rng.random_bool(0.4) {
                        g
                    } else {
                        rng.random_range(0..k)
                    }
                })
                .collect();
            let to_labels = |xs: &[usize]| xs.iter().map(|&i| scale.labels()[i]).collect::<Vec<Label>>();
            let m = confusion(&to_labels(&gold), &to_labels(&pred), scale).map_err(|e| e.to_string())?;
            let r = compute_metrics(&m).map_err(|e| e.to_string())?;
            let got = [r.accuracy, r.macro_avg.precision, r.macro_avg.recall, r.macro_avg.f1];
            let want = brute_force(&gold, &pred, k);
            for (g, w) in got.iter().zip(want) {
                worst = worst.max((g - w).abs());
            }
            ensure(r.n == n as u64 && m.total() == n as u64, || {
                format!("count mismatch on {n} pairs")
            })?;
            evaluations += 1;
        }
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e} > 1e-12"))?;
    Ok(format!(
        "30000 pairs in {evaluations} evaluations, max deviation {worst:.1e}"
    ))
}

/// The four-document add-one smoothing example: three "china" documents,
/// one "japan" document.
pub fn nb_hand_example(_: &SelftestOptions) -> Result<String, String> {
    let (china, japan) = (Label::NEGATIVE, Label::POSITIVE);
    let docs = [
        (china, "chinese beijing chinese"),
        (china, "chinese chinese shanghai"),
        (china, "chinese macao"),
        (japan, "tokyo japan chinese"),
    ];
    let model = train_nb_docs(SentimentScale::TWO_POINT, &docs, 1.0).map_err(|e| e.to_string())?;
    let text = "chinese chinese chinese tokyo japan";
    let vocab: std::collections::BTreeSet<&str> = docs.iter().flat_map(|d| d.1.split_whitespace()).collect();
    let mut worst: f64 = 0.0;
    let mut oracle_scores = Vec::new();
    for label in [china, japan] {
        let words: Vec<&str> = docs
            .iter()
            .filter(|d| d.0 == label)
            .flat_map(|d| d.1.split_whitespace())
            .collect();
        // One extra vocabulary slot for the unknown-word bucket.
        let denom = words.len() as f64 + vocab.len() as f64 + 1.0;
        let prior = (docs.iter().filter(|d| d.0 == label).count() as f64 / docs.len() as f64).ln();
        worst = worst.max((model.log_prior_of(label).unwrap() - prior).abs());
        for w in &vocab {
            let count = words.iter().filter(|x| *x == w).count() as f64;
            let want = ((count + 1.0) / denom).ln();
            worst = worst.max((model.log_likelihood_of(label, w).unwrap() - want).abs());
        }
        let score = prior
            + text
                .split_whitespace()
                .map(|w| ((words.iter().filter(|x| **x == w).count() as f64 + 1.0) / denom).ln())
                .sum::<f64>();
        oracle_scores.push(score);
    }
    let (label, scores) = predict_nb(&model, text);
    worst = worst.max((scores[&china] - oracle_scores[0]).abs());
    worst = worst.max((scores[&japan] - oracle_scores[1]).abs());
    ensure(label == china, || format!("classified as {label:?}"))?;
    ensure(worst <= 1e-9, || format!("max log-probability deviation {worst:e}"))?;
    Ok(format!("class c, max deviation {worst:.1e}"))
}

/// Selection rate of the 15% masking over at least 10 000 eligible
/// positions; specials and padding must never be touched.
pub fn mlm_masking(opts: &SelftestOptions) -> Result<String, String> {
    let [train, _, _] = fixtures::b500();
    let corpus: Vec<&str> = train.examples.iter().map(|e| e.norm_text.as_str()).collect();
    let vocab = build_vocab(&corpus, 2000, 1).map_err(|e| e.to_string())?;
    let enc = EncodeOptions {
        max_len: 48,
        use_topic: true,
    };
    let seqs = encode_dataset(&vocab, &train, &enc).map_err(|e| e.to_string())?;
    let mut batch: Vec<TokenSequence> = Vec::new();
    let eligible_in = |s: &TokenSequence| {
        (0..s.len())
            .filter(|&i| s.attention_mask[i] == 1 && !Vocab::is_special(s.ids[i]) && !s.special_positions.contains(&i))
            .count()
    };
    let mut eligible = 0;
    while eligible < 10_000 {
        for s in &seqs {
            eligible += eligible_in(s);
            batch.push(s.clone());
        }
    }
    let masked = apply_mlm_mask(&batch, 0.15, opts.seed);
    let selected = masked.num_masked();
    for (orig, (inp, labels)) in batch.iter().zip(masked.inputs.iter().zip(&masked.labels)) {
        for (i, label) in labels.iter().enumerate() {
            let protected =
                orig.attention_mask[i] == 0 || Vocab::is_special(orig.ids[i]) || orig.special_positions.contains(&i);
            if protected {
                ensure(label.is_none() && inp.ids[i] == orig.ids[i], || {
                    format!("protected position {i} was masked")
                })?;
            } else if let Some(id) = *label {
                ensure(id == orig.ids[i] && inp.ids[i] == MASK, || {
                    format!("position {i} label does not match input")
                })?;
            }
        }
    }
    let rate = selected as f64 / eligible as f64;
    ensure((0.13..=0.17).contains(&rate), || {
        format!("selected fraction {rate:.4} outside [0.13, 0.17]")
    })?;
    Ok(format!("{selected} of {eligible} eligible positions ({rate:.4})"))
}

/// Shape arithmetic for the base and large architectures.
pub fn param_count(_: &SelftestOptions) -> Result<String, String> {
    let base = EncoderConfig::base(2).parameter_count() as f64;
    let large = EncoderConfig::large(2).parameter_count() as f64;
    ensure((base / 110e6 - 1.0).abs() <= 0.05, || {
        format!("base has {base} parameters")
    })?;
    ensure((large / 340e6 - 1.0).abs() <= 0.05, || {
        format!("large has {large} parameters")
    })?;
    Ok(format!("base {:.1}M, large {:.1}M", base / 1e6, large / 1e6))
}

fn gradcheck_batch(vocab: u32, rng: &mut ChaCha8Rng) -> Vec<TokenSequence> {
    (0..3)
        .map(|k| {
            let real = 5 + k;
            let mut ids = vec![crate::tokenizer::CLS];
            ids.extend((0..real - 2).map(|_| rng.random_range(5..vocab)));
            ids.push(crate::tokenizer::SEP);
            let mut segment_ids = vec![0u8; real];
            segment_ids[real - 2..].fill(1);
            let mut s = TokenSequence {
                ids,
                segment_ids,
                attention_mask: vec![1; real],
                special_positions: vec![0, real - 1],
            };
            s.ids.resize(8, 0);
            s.segment_ids.resize(8, 0);
            s.attention_mask.resize(8, 0);
            s
        })
        .collect()
}

/// Central differences against the analytic gradient of the combined
/// classification and MLM loss, on every tensor kind of the desk encoder.
pub fn grad_check_desk(opts: &SelftestOptions) -> Result<String, String> {
    let cfg = EncoderConfig {
        dropout_rate: 0.0,
        mlm_head: true,
        max_len: 16,
        ..EncoderConfig::desk(30, 3)
    };
    let mut model = EncoderModel::init(&cfg).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37);
    for p in model.params_mut() {
        *p += rng.random_range(-0.05..0.05);
    }
    let batch = gradcheck_batch(30, &mut rng);
    let masked = apply_mlm_mask(&batch, 0.5, opts.seed);
    let classes = [0, 2, 1];
    let targets = Targets {
        classes: Some(&classes),
        mlm: Some(&masked.labels),
    };
    let gopts = GradCheckOptions {
        seed: opts.seed,
        mutate: opts.mutate_grad.then_some((TensorKind::FfnInWeight, 2.0)),
        ..GradCheckOptions::default()
    };
    let report = grad_check(&model, &masked.inputs, &targets, &gopts).map_err(|e| e.to_string())?;
    let kinds = model
        .layout()
        .specs()
        .iter()
        .map(|s| s.kind)
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    ensure(report.kinds_covered() == kinds, || {
        format!("covered {} of {kinds} tensor kinds", report.kinds_covered())
    })?;
    let summary = format!(
        "{} coordinates, max relative error {:.2e}",
        report.coordinates, report.max_relative
    );
    ensure(report.passed(GRAD_TOLERANCE), || match &report.worst {
        Some(w) => format!(
            "{summary}; worst {}[{}] analytic {:e} numeric {:e}",
            w.tensor, w.index, w.analytic, w.numeric
        ),
        None => summary.clone(),
    })?;
    Ok(summary)
}

/// The desk encoder memorizes the 32-tweet toy set.
pub fn overfit_toy(opts: &SelftestOptions) -> Result<String, String> {
    let (epochs, acc) = overfit_toy_run(opts.seed, 200)?;
    ensure(acc == 1.0, || format!("train accuracy {acc} after {epochs} epochs"))?;
    Ok(format!("train accuracy 1.0 after {epochs} epochs"))
}

/// Trains on the toy set until it is memorized or `max_epochs` pass;
/// returns the epochs used and the final train accuracy.
pub fn overfit_toy_run(seed: u64, max_epochs: usize) -> Result<(usize, f64), String> {
    let toy = fixtures::toy_a32();
    let corpus: Vec<&str> = toy.examples.iter().map(|e| e.norm_text.as_str()).collect();
    let vocab = build_vocab(&corpus, 1000, 1).map_err(|e| e.to_string())?;
    let seqs = encode_dataset(
        &vocab,
        &toy,
        &EncodeOptions {
            max_len: 32,
            use_topic: false,
        },
    )
    .map_err(|e| e.to_string())?;
    let classes = toy.label_indices();
    let cfg = EncoderConfig {
        max_len: 32,
        seed,
        ..EncoderConfig::desk(vocab.len(), toy.scale.len())
    };
    let model = EncoderModel::init(&cfg).map_err(|e| e.to_string())?;
    let tcfg = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 8,
        epochs: max_epochs,
        warmup_fraction: 0.0,
        seed,
        target_dev_accuracy: Some(1.0),
        ..TrainConfig::default()
    };
    // The training set doubles as the dev set, so training stops once it is
    // memorized.
    let out = encoder::train_on_sequences(model, (&seqs, &classes), Some((&seqs, &classes)), &tcfg)
        .map_err(|e| e.to_string())?;
    let acc = encoder::accuracy(&out.model, &seqs, &classes).map_err(|e| e.to_string())?;
    Ok((out.history.len(), acc))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suite_passes_and_skips_training() {
        let report = run_selftest(&SelftestOptions {
            quick: true,
            ..SelftestOptions::default()
        });
        assert!(report.passed(), "{}", report.render());
        assert_eq!(report.skipped, vec!["overfit_toy"]);
    }

    #[test]
    fn mutated_gradient_fails_grad_check_only() {
        let report = run_selftest(&SelftestOptions {
            quick: true,
            mutate_grad: true,
            ..SelftestOptions::default()
        });
        assert_eq!(report.failed(), vec!["grad_check"], "{}", report.render());
        assert!(report.render().contains("FAIL grad_check"));
    }

    #[test]
    fn brute_force_oracle_on_a_hand_case() {
        // gold 0 0 1 1, pred 0 1 1 1: class 0 p=1 r=.5, class 1 p=2/3 r=1
        let got = brute_force(&[0, 0, 1, 1], &[0, 1, 1, 1], 2);
        let f0 = 2.0 * 0.5 / 1.5;
        let f1 = 2.0 * (2.0 / 3.0) / (5.0 / 3.0);
        let want = [0.75, (1.0 + 2.0 / 3.0) / 2.0, 0.75, (f0 + f1) / 2.0];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-15);
        }
    }
}
