use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::model::{loss_and_grad, Targets};
use super::params::{EncoderModel, TensorKind, TensorSpec};
use super::EncoderError;
use crate::tokenizer::TokenSequence;

/// Below this gradient magnitude the comparison is absolute instead of
/// relative.
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Minimum number of sampled coordinates; every tensor gets at least one.
    pub min_coordinates: usize,
    pub seed: u64,
    /// Multiply the analytic gradient of one tensor kind before comparing.
    pub mutate: Option<(TensorKind, f64)>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            min_coordinates: 200,
            seed: 0,
            mutate: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Worst {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub coordinates: usize,
    /// Over coordinates whose gradient magnitude reaches [`ABS_FLOOR`].
    pub max_relative: f64,
    /// Over the remaining coordinates.
    pub max_absolute: f64,
    pub per_kind: BTreeMap<TensorKind, f64>,
    pub worst: Option<Worst>,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_relative < tolerance && self.max_absolute < ABS_FLOOR
    }

    pub fn kinds_covered(&self) -> usize {
        self.per_kind.len()
    }
}

/// Rows of each embedding table the batch can reach; other rows have
/// identically zero gradient.
struct UsedRows {
    tokens: Vec<usize>,
    positions: Vec<usize>,
    segments: Vec<usize>,
}

impl UsedRows {
    fn new(batch: &[TokenSequence]) -> Self {
        let (mut t, mut p, mut s) = (BTreeSet::new(), BTreeSet::new(), BTreeSet::new());
        for seq in batch {
            for i in (0..seq.len()).filter(|&i| seq.attention_mask[i] != 0) {
                t.insert(seq.ids[i] as usize);
                p.insert(i);
                s.insert(seq.segment_ids[i] as usize);
            }
        }
        Self {
            tokens: t.into_iter().collect(),
            positions: p.into_iter().collect(),
            segments: s.into_iter().collect(),
        }
    }

    fn rows_for(&self, kind: TensorKind) -> Option<&[usize]> {
        match kind {
            TensorKind::TokenEmbedding => Some(&self.tokens),
            TensorKind::PositionEmbedding => Some(&self.positions),
            TensorKind::SegmentEmbedding => Some(&self.segments),
            _ => None,
        }
    }
}

fn sample(spec: &TensorSpec, count: usize, used: &UsedRows, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..count)
        .map(|_| match used.rows_for(spec.kind) {
            Some(rows) if !rows.is_empty() => {
                let r = rows[rng.random_range(0..rows.len())];
                spec.offset + r * spec.cols + rng.random_range(0..spec.cols)
            }
            _ => spec.offset + rng.random_range(0..spec.len()),
        })
        .collect()
}

/// Compares the analytic gradient with central differences
/// `(f(θ+ε) − f(θ−ε)) / 2ε` on coordinates spread over every tensor.
/// Dropout is off throughout.
pub fn grad_check(
    model: &EncoderModel,
    batch: &[TokenSequence],
    targets: &Targets,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, EncoderError> {
    let (_, mut grads) = loss_and_grad(model, batch, targets, None)?;
    if let Some((kind, factor)) = opts.mutate {
        for spec in model.layout().specs().iter().filter(|s| s.kind == kind) {
            grads.data[spec.range()].iter_mut().for_each(|g| *g *= factor);
        }
    }
    let specs = model.layout().specs();
    let per_tensor = opts.min_coordinates.div_ceil(specs.len()).max(1);
    let used = UsedRows::new(batch);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        coordinates: 0,
        max_relative: 0.0,
        max_absolute: 0.0,
        per_kind: BTreeMap::new(),
        worst: None,
    };
    let mut worst_score = -1.0;
    for spec in specs {
        for idx in sample(spec, per_tensor, &used, &mut rng) {
            let original = probe.params()[idx];
            probe.params_mut()[idx] = original + opts.epsilon;
            let plus = loss_and_grad(&probe, batch, targets, None)?.0.total;
            probe.params_mut()[idx] = original - opts.epsilon;
            let minus = loss_and_grad(&probe, batch, targets, None)?.0.total;
            probe.params_mut()[idx] = original;

            let numeric = (plus - minus) / (2.0 * opts.epsilon);
            let analytic = grads.data[idx];
            let diff = (analytic - numeric).abs();
            let scale = analytic.abs().max(numeric.abs());
            // Normalized so that 1.0 means "at the threshold" for both regimes.
            let score = if scale < ABS_FLOOR {
                report.max_absolute = report.max_absolute.max(diff);
                diff / ABS_FLOOR * 1e-4
            } else {
                let rel = diff / scale;
                report.max_relative = report.max_relative.max(rel);
                let entry = report.per_kind.entry(spec.kind).or_insert(0.0);
                *entry = entry.max(rel);
                rel
            };
            report.per_kind.entry(spec.kind).or_insert(0.0);
            report.coordinates += 1;
            if score > worst_score {
                worst_score = score;
                report.worst = Some(Worst {
                    tensor: spec.name.clone(),
                    index: idx - spec.offset,
                    analytic,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
