//! Faithfulness curves and representation diagnostics.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::shapley::{full_mask, Game};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurveMode {
    Insertion,
    Deletion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InsertionDeletionCurve {
    pub mode: CurveMode,
    /// Fraction of features inserted (or deleted) at each step.
    pub fractions: Vec<f64>,
    /// Predicted probability of the evaluated class at each step.
    pub values: Vec<f64>,
    pub auc: f64,
}

impl InsertionDeletionCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fraction,value\n");
        for (f, v) in self.fractions.iter().zip(&self.values) {
            out.push_str(&format!("{f},{v}\n"));
        }
        out
    }
}

/// Steps with more features than this are grouped into this many quantile steps.
pub const MAX_CURVE_STEPS: usize = 64;

/// Cumulative feature counts visited by a curve, starting at 0 and ending at `d`.
pub fn curve_counts(d: usize) -> Vec<usize> {
    if d <= MAX_CURVE_STEPS {
        (0..=d).collect()
    } else {
        (0..=MAX_CURVE_STEPS).map(|k| (k * d + MAX_CURVE_STEPS / 2) / MAX_CURVE_STEPS).collect()
    }
}

/// Feature indices by descending score, ties broken by ascending index.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

pub fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    xs.windows(2).zip(ys.windows(2)).map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0).sum()
}

/// Insert (from nothing) or delete (from everything) features in order of
/// decreasing attribution, recording the game's value for `class` at each step.
pub fn insertion_deletion(scores: &[f64], game: &dyn Game, class: usize, mode: CurveMode) -> Result<InsertionDeletionCurve> {
    let d = game.players();
    if scores.len() != d {
        return Err(Error::shape("insertion_deletion", format!("{} scores for {d} players", scores.len())));
    }
    if class >= game.outputs() {
        return Err(Error::contract(format!("class {class} out of range for {} outputs", game.outputs())));
    }
    let order = ranking(scores);
    let counts = curve_counts(d);
    let coalitions: Vec<u64> = counts
        .iter()
        .map(|&n| {
            let top: u64 = order[..n].iter().fold(0, |acc, &i| acc | 1 << i);
            match mode {
                CurveMode::Insertion => top,
                CurveMode::Deletion => full_mask(d) & !top,
            }
        })
        .collect();
    let values: Vec<f64> = game.evaluate(&coalitions)?.into_iter().map(|v| v[class]).collect();
    let fractions: Vec<f64> = counts.iter().map(|&n| n as f64 / d as f64).collect();
    let auc = trapezoid(&fractions, &values);
    Ok(InsertionDeletionCurve { mode, fractions, values, auc })
}

fn centered(x: &[f64], n: usize) -> Result<DMatrix<f64>> {
    if n < 2 || x.len() % n != 0 || x.is_empty() {
        return Err(Error::shape("cka", format!("{} values do not form {n} rows (n ≥ 2)", x.len())));
    }
    let mut m = DMatrix::from_row_slice(n, x.len() / n, x);
    for mut col in m.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    Ok(m)
}

/// Linear centered kernel alignment between row-major `n×p` and `n×q` feature matrices.
pub fn cka(x: &[f64], y: &[f64], n: usize) -> Result<f64> {
    let x = centered(x, n)?;
    let y = centered(y, n)?;
    let cross = (y.transpose() * &x).norm_squared();
    let xx = (x.transpose() * &x).norm();
    let yy = (y.transpose() * &y).norm();
    if xx == 0.0 || yy == 0.0 {
        return Err(Error::Undefined("CKA of a zero-variance representation".into()));
    }
    Ok(cross / (xx * yy))
}

/// Cosine similarity between two flattened gradients.
pub fn gradient_conflict(g1: &[f64], g2: &[f64]) -> Result<f64> {
    if g1.len() != g2.len() {
        return Err(Error::shape("gradient_conflict", format!("lengths {} and {}", g1.len(), g2.len())));
    }
    let dot: f64 = g1.iter().zip(g2).map(|(a, b)| a * b).sum();
    let n1 = g1.iter().map(|v| v * v).sum::<f64>().sqrt();
    let n2 = g2.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::Undefined("cosine of a zero gradient".into()));
    }
    Ok((dot / (n1 * n2)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapley::FnGame;

    #[test]
    fn ranking_breaks_ties_by_index() {
        assert_eq!(ranking(&[0.5, 1.0, 0.5, -1.0]), vec![1, 0, 2, 3]);
    }

    #[test]
    fn curve_counts_quantiles() {
        assert_eq!(curve_counts(3), vec![0, 1, 2, 3]);
        let c = curve_counts(200);
        assert_eq!(c.len(), 65);
        assert_eq!((c[0], c[64]), (0, 200));
        assert!(c.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn constant_and_counting_predictors() {
        let c = FnGame::new(5, 1, |_| vec![0.3]);
        for mode in [CurveMode::Insertion, CurveMode::Deletion] {
            let curve = insertion_deletion(&[0.1, 0.5, 0.2, 0.0, 0.9], &c, 0, mode).unwrap();
            assert!((curve.auc - 0.3).abs() < 1e-12);
        }
        let counting = FnGame::new(5, 1, |s| vec![s.count_ones() as f64 / 5.0]);
        let curve = insertion_deletion(&[3.0, 1.0, 4.0, 1.0, 5.0], &counting, 0, CurveMode::Insertion).unwrap();
        assert!((curve.auc - 0.5).abs() < 1e-15);
        assert_eq!(curve.values[0], 0.0);
        assert_eq!(*curve.values.last().unwrap(), 1.0);
    }

    #[test]
    fn gradient_conflict_cases() {
        assert!((gradient_conflict(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((gradient_conflict(&[1.0, 2.0], &[-1.0, -2.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(gradient_conflict(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert!(matches!(gradient_conflict(&[0.0, 0.0], &[1.0, 1.0]), Err(Error::Undefined(_))));
    }

    #[test]
    fn cka_identity_and_zero_variance() {
        let x: Vec<f64> = (0..12).map(|i| ((i * 7) % 5) as f64).collect();
        assert!((cka(&x, &x, 4).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(cka(&[1.0; 8], &x[..8], 4), Err(Error::Undefined(_))));
    }
}
