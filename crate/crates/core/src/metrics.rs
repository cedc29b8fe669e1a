//! Evaluation records and their CSV form.
//!
//! CSV columns, in order: `epoch, step, energy, layer_energies, train_loss,
//! test_loss, accuracy, perplexity`. `layer_energies` joins per-layer values
//! with `;`. Empty cells mean "not applicable" (for example `energy` for
//! backpropagation runs). Wall-clock time is kept out of the CSV so that
//! identical runs produce identical files; it is reported in the JSON
//! summary instead.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub step: usize,
    /// Mean settled total energy over the training batches since the last
    /// record.
    pub energy: Option<f64>,
    pub layer_energies: Vec<f64>,
    pub train_loss: f64,
    pub test_loss: f64,
    pub accuracy: Option<f64>,
    pub perplexity: Option<f64>,
    #[serde(default)]
    pub wall_clock_s: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    epoch: usize,
    step: usize,
    energy: Option<f64>,
    layer_energies: String,
    train_loss: f64,
    test_loss: f64,
    accuracy: Option<f64>,
    perplexity: Option<f64>,
}

impl From<&MetricsRecord> for Row {
    fn from(r: &MetricsRecord) -> Self {
        Row {
            epoch: r.epoch,
            step: r.step,
            energy: r.energy,
            layer_energies: r.layer_energies.iter().map(f64::to_string).collect::<Vec<_>>().join(";"),
            train_loss: r.train_loss,
            test_loss: r.test_loss,
            accuracy: r.accuracy,
            perplexity: r.perplexity,
        }
    }
}

pub fn to_csv(records: &[MetricsRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if records.is_empty() {
        w.write_record([
            "epoch",
            "step",
            "energy",
            "layer_energies",
            "train_loss",
            "test_loss",
            "accuracy",
            "perplexity",
        ])
        .map_err(|e| Error::Format(e.to_string()))?;
    }
    for r in records {
        w.serialize(Row::from(r)).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

pub fn from_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for row in r.deserialize::<Row>() {
        let row = row.map_err(|e| Error::Format(format!("metrics row: {e}")))?;
        let layer_energies = if row.layer_energies.is_empty() {
            Vec::new()
        } else {
            row.layer_energies
                .split(';')
                .map(|s| s.parse::<f64>().map_err(|e| Error::Format(format!("layer energy {s:?}: {e}"))))
                .collect::<Result<_>>()?
        };
        out.push(MetricsRecord {
            epoch: row.epoch,
            step: row.step,
            energy: row.energy,
            layer_energies,
            train_loss: row.train_loss,
            test_loss: row.test_loss,
            accuracy: row.accuracy,
            perplexity: row.perplexity,
            wall_clock_s: 0.0,
        });
    }
    Ok(out)
}
