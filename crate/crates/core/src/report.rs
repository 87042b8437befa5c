//! CSV and JSON export of attributions, loss records and evaluation reports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::nn::{CombinedModel, TokenSequence};
use crate::scalar::Scalar;
use crate::shapley::Attribution;
use crate::train::argmax_index;

/// Rows are features, columns are classes.
pub fn attribution_csv(a: &Attribution) -> String {
    let mut out = String::from("feature");
    for c in 0..a.classes {
        out.push_str(&format!(",class_{c}"));
    }
    out.push('\n');
    for i in 0..a.players {
        out.push_str(&i.to_string());
        for c in 0..a.classes {
            out.push_str(&format!(",{}", a.get(i, c)));
        }
        out.push('\n');
    }
    out
}

/// `[feature][class]` nesting of the attribution values.
pub fn attribution_rows(a: &Attribution) -> Vec<Vec<f64>> {
    (0..a.players).map(|i| (0..a.classes).map(|c| a.get(i, c)).collect()).collect()
}

/// One explained input as emitted by the combined model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub prediction: usize,
    pub logits: Vec<f64>,
    pub attribution: Vec<Vec<f64>>,
    /// Largest `|1ᵀφ − (v(1) − v(0))|` over classes.
    pub efficiency_residual: f64,
}

pub fn explanation_record<T: Scalar>(model: &CombinedModel<T>, x: &TokenSequence<T>) -> Result<ExplanationRecord> {
    let out = model.explain(x)?;
    let logits = out.logits.row(0).iter().map(|v| v.as_f64()).collect::<Vec<_>>();
    let attr = Attribution::from_tensor(&out.attribution, true)?;
    let full = out.full_value.row(0);
    let efficiency_residual = (0..attr.classes)
        .map(|c| (attr.total(c) - (full[c].as_f64() - out.null_value[c].as_f64())).abs())
        .fold(0.0, f64::max);
    Ok(ExplanationRecord {
        prediction: argmax_index(&logits),
        logits,
        attribution: attribution_rows(&attr),
        efficiency_residual,
    })
}

/// `method,mode,fraction,value` rows for every mean curve in the report.
pub fn curves_csv(report: &EvalReport) -> String {
    let mut out = String::from("method,mode,fraction,value\n");
    for f in &report.faithfulness {
        for (mode, c) in [("insertion", &f.insertion), ("deletion", &f.deletion)] {
            for (x, y) in c.fractions.iter().zip(&c.values) {
                out.push_str(&format!("{},{mode},{x},{y}\n", f.method));
            }
        }
    }
    out
}

pub fn to_json<S: Serialize>(value: &S) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_json<S: Serialize>(path: impl AsRef<Path>, value: &S) -> Result<()> {
    write_text(path, &to_json(value)?)
}

pub fn read_json<D: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<D> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let a = Attribution::new(2, 2, vec![0.5, -0.5, 0.25, 0.0], true).unwrap();
        assert_eq!(attribution_csv(&a), "feature,class_0,class_1\n0,0.5,-0.5\n1,0.25,0\n");
        assert_eq!(attribution_rows(&a), vec![vec![0.5, -0.5], vec![0.25, 0.0]]);
    }
}
