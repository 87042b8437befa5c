//! Measured check of the explainer error bound in terms of excess regression loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{BatchInput, MaskVector, SideTunedModel, TokenSequence};
use crate::scalar::Scalar;
use crate::shapley::{harmonic, shapley_from_table, shapley_kernel, Attribution, SurrogateGame, TableGame};
use crate::train::{Estimate, Explainer};

/// Largest player count for which the bound is checked against a full oracle table.
pub const BOUND_ORACLE_PLAYERS: usize = 12;

/// `z` for a two-sided 95% interval.
pub const Z95: f64 = 1.959_963_984_540_054;

fn estimate(xs: &[f64]) -> Estimate {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Estimate { mean, ci95: Z95 * (var / n).sqrt() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub players: usize,
    pub samples: usize,
    /// Mean `‖φ_θ − φ_v‖₂` over inputs.
    pub lhs: f64,
    /// `√(2·H_{d−1}·(L_exp − L*_exp + CI))`.
    pub rhs: f64,
    /// Same without the interval slack.
    pub rhs_point: f64,
    pub explainer_loss: Estimate,
    pub optimal_loss: Estimate,
    /// Paired estimate of `L_exp − L*_exp`.
    pub excess: Estimate,
    pub harmonic: f64,
    pub skipped: bool,
    pub passed: bool,
}

impl BoundReport {
    pub fn skipped(players: usize) -> Self {
        let nan = Estimate { mean: f64::NAN, ci95: f64::NAN };
        BoundReport {
            players,
            samples: 0,
            lhs: f64::NAN,
            rhs: f64::NAN,
            rhs_point: f64::NAN,
            explainer_loss: nan.clone(),
            optimal_loss: nan.clone(),
            excess: nan,
            harmonic: harmonic(players.saturating_sub(1)),
            skipped: true,
            passed: false,
        }
    }

    /// From per-input errors and paired per-(input, coalition) squared residuals of the
    /// explainer and of the exact values.
    pub fn from_terms(players: usize, errors: &[f64], explainer_terms: &[f64], optimal_terms: &[f64]) -> Self {
        let h = harmonic(players - 1);
        let excess_terms: Vec<f64> = explainer_terms.iter().zip(optimal_terms).map(|(a, b)| a - b).collect();
        let excess = estimate(&excess_terms);
        let lhs = errors.iter().sum::<f64>() / errors.len() as f64;
        let rhs = (2.0 * h * (excess.mean + excess.ci95).max(0.0)).sqrt();
        let rhs_point = (2.0 * h * excess.mean.max(0.0)).sqrt();
        BoundReport {
            players,
            samples: errors.len(),
            lhs,
            rhs,
            rhs_point,
            explainer_loss: estimate(explainer_terms),
            optimal_loss: estimate(optimal_terms),
            excess,
            harmonic: h,
            skipped: false,
            passed: lhs <= rhs,
        }
    }
}

/// Surrogate probabilities on the full input for one sample.
pub fn full_value<T: Scalar>(surrogate: &SideTunedModel<T>, x: &TokenSequence<T>) -> Result<Vec<f64>> {
    let d = surrogate.config().num_tokens;
    let p = surrogate.surrogate_probs(&BatchInput::repeated(x, &[MaskVector::all(d)])?)?;
    Ok(p.row(0).iter().map(|v| v.as_f64()).collect())
}

/// Explainer output for one sample, shifted to satisfy efficiency against the surrogate.
pub fn normalized_attribution<T: Scalar, E: Explainer<T>>(
    explainer: &E,
    surrogate: &SideTunedModel<T>,
    null: &[f64],
    x: &TokenSequence<T>,
) -> Result<Attribution> {
    let raw = explainer.explain_raw(&BatchInput::new(&[x], None)?)?;
    let full = full_value(surrogate, x)?;
    Ok(Attribution::from_tensor(&raw, false)?.normalized(&full, null))
}

/// Predicted class of the frozen backbone classifier.
pub fn predicted_class<T: Scalar>(surrogate: &SideTunedModel<T>, x: &TokenSequence<T>) -> Result<usize> {
    let logits = surrogate.backbone_classifier().forward(x, &MaskVector::all(x.num_tokens()))?;
    Ok(crate::train::argmax_index(&logits))
}

/// Measure both sides of the error bound on `xs`, evaluating each sample's predicted
/// class, with `total_masks` kernel draws shared between the two loss estimates.
pub fn check_error_bound<T: Scalar, E: Explainer<T>>(
    explainer: &E,
    surrogate: &SideTunedModel<T>,
    xs: &[TokenSequence<T>],
    total_masks: usize,
    seed: u64,
) -> Result<BoundReport> {
    let d = surrogate.config().num_tokens;
    if d > BOUND_ORACLE_PLAYERS || xs.is_empty() {
        return Ok(BoundReport::skipped(d));
    }
    let null: Vec<f64> = surrogate.null_value()?.iter().map(|v| v.as_f64()).collect();
    let kernel = shapley_kernel(d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per = (total_masks / xs.len()).max(1);
    let mut errors = Vec::with_capacity(xs.len());
    let mut theta_terms = Vec::with_capacity(per * xs.len());
    let mut star_terms = Vec::with_capacity(per * xs.len());
    for x in xs {
        let table = TableGame::tabulate(&SurrogateGame::new(surrogate, x)?)?;
        let y = predicted_class(surrogate, x)?;
        let exact = shapley_from_table(&table)?.class(y);
        let approx = normalized_attribution(explainer, surrogate, &null, x)?.class(y);
        errors.push(exact.iter().zip(&approx).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt());
        let v0 = table.table()[0][y];
        for s in kernel.sample_with(&mut rng, per, false)? {
            let bits = s.to_bits();
            let target = table.table()[bits as usize][y] - v0;
            let dot = |phi: &[f64]| (0..d).filter(|&i| s.get(i)).map(|i| phi[i]).sum::<f64>();
            theta_terms.push((target - dot(&approx)).powi(2));
            star_terms.push((target - dot(&exact)).powi(2));
        }
    }
    Ok(BoundReport::from_terms(d, &errors, &theta_terms, &star_terms))
}
