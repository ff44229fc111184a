//! Published full-scale results, shipped as read-only targets for report
//! rendering and delta replay. Nothing in the crate asserts against them.

use serde::{Deserialize, Serialize};

use crate::corpus::Subtask;
use crate::metrics::{render_table, Summary};

const TABLE2_JSON: &str = include_str!("../fixtures/reference/table2.json");

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    NaiveBayes,
    Encoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub model: String,
    pub subtask: Subtask,
    pub kind: ModelKind,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ReferenceRow {
    pub fn summary(&self) -> Summary {
        Summary {
            accuracy: self.accuracy,
            precision: self.precision,
            recall: self.recall,
            f1: self.f1,
        }
    }
}

#[derive(Deserialize)]
struct ReferenceFile {
    rows: Vec<ReferenceRow>,
}

/// The six published rows, in published order.
pub fn table2() -> Vec<ReferenceRow> {
    serde_json::from_str::<ReferenceFile>(TABLE2_JSON)
        .expect("bundled reference file parses")
        .rows
}

/// Encoder-minus-baseline rows, one per subtask.
pub fn table2_deltas() -> Vec<(String, Summary)> {
    let rows = table2();
    [Subtask::A, Subtask::B, Subtask::C]
        .into_iter()
        .filter_map(|st| {
            let enc = rows.iter().find(|r| r.subtask == st && r.kind == ModelKind::Encoder)?;
            let base = rows
                .iter()
                .find(|r| r.subtask == st && r.kind == ModelKind::NaiveBayes)?;
            Some((
                format!("delta {} - {}", enc.model, base.model),
                enc.summary().minus(&base.summary()),
            ))
        })
        .collect()
}

/// Published rows followed by the replayed deltas.
pub fn render_table2(with_deltas: bool) -> String {
    let rows = table2();
    let mut table: Vec<(String, Summary)> = rows.iter().map(|r| (r.model.clone(), r.summary())).collect();
    if with_deltas {
        table.extend(table2_deltas());
    }
    render_table(table.iter().map(|(n, s)| (n.as_str(), *s)))
}
