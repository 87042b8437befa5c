//! Exact Shapley values, the regression estimator and efficiency normalization.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::shapley::game::{Game, TableGame};
use crate::shapley::kernel::shapley_kernel;
use crate::shapley::sample_subsets;
use crate::tensor::Tensor;
use crate::Scalar;

pub const MAX_EXACT_PLAYERS: usize = 20;

/// Per-player, per-class attribution values, row-major `[players][classes]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub players: usize,
    pub classes: usize,
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl Attribution {
    pub fn new(players: usize, classes: usize, values: Vec<f64>, normalized: bool) -> Result<Self> {
        if values.len() != players * classes {
            return Err(Error::shape(
                "attribution",
                format!("{} values for {players} players × {classes} classes", values.len()),
            ));
        }
        Ok(Attribution { players, classes, values, normalized })
    }

    /// From a `[players, classes]` tensor.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, normalized: bool) -> Result<Self> {
        if t.shape().len() != 2 {
            return Err(Error::shape("attribution", format!("expected a matrix, got {:?}", t.shape())));
        }
        Attribution::new(t.shape()[0], t.shape()[1], t.to_f64_vec(), normalized)
    }

    pub fn get(&self, player: usize, class: usize) -> f64 {
        self.values[player * self.classes + class]
    }

    pub fn class(&self, class: usize) -> Vec<f64> {
        (0..self.players).map(|i| self.get(i, class)).collect()
    }

    pub fn total(&self, class: usize) -> f64 {
        (0..self.players).map(|i| self.get(i, class)).sum()
    }

    /// `max |self − other|` over all entries.
    pub fn max_abs_diff(&self, other: &Attribution) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Exact Shapley values of a fully tabulated game.
pub fn shapley_from_table(game: &TableGame) -> Result<Attribution> {
    let d = game.players();
    let outputs = game.outputs();
    let table = game.table();
    // weight of a coalition of size k not containing i: k!(d−k−1)!/d! = 1/(d·C(d−1,k))
    let weights: Vec<f64> = (0..d).map(|k| 1.0 / (d as f64 * super::binomial::<f64>(d - 1, k))).collect();
    let mut phi = vec![0.0; d * outputs];
    for s in 0..(1usize << d) {
        let k = (s as u64).count_ones() as usize;
        for i in (0..d).filter(|i| s >> i & 1 == 0) {
            let with = &table[s | 1 << i];
            let without = &table[s];
            let w = weights[k];
            for c in 0..outputs {
                phi[i * outputs + c] += w * (with[c] - without[c]);
            }
        }
    }
    Attribution::new(d, outputs, phi, false)
}

/// Exact Shapley values by enumerating every coalition.
pub fn exact_shapley(game: &dyn Game) -> Result<Attribution> {
    shapley_from_table(&TableGame::tabulate(game)?)
}

/// Regression estimate from `n` coalitions drawn from the Shapley kernel, with the
/// efficiency constraint enforced exactly by eliminating the last player.
pub fn kernelshap(game: &dyn Game, n: usize, paired: bool, seed: u64) -> Result<Attribution> {
    let d = game.players();
    let dist = shapley_kernel(d)?;
    let masks = sample_subsets(&dist, n, paired, seed)?;
    let coalitions: Vec<u64> = masks.iter().map(|m| m.to_bits()).collect();
    kernelshap_on(game, &coalitions)
}

/// The regression estimator on a given list of coalitions.
pub fn kernelshap_on(game: &dyn Game, coalitions: &[u64]) -> Result<Attribution> {
    let d = game.players();
    let outputs = game.outputs();
    if d < 2 {
        return Err(Error::contract("at least two players required"));
    }
    let ends = game.evaluate(&[0, game.full()])?;
    let (v0, v1) = (&ends[0], &ends[1]);
    let values = game.evaluate(coalitions)?;
    let m = d - 1;
    let bit = |s: u64, i: usize| (s >> i & 1) as f64;
    let mut xtx = DMatrix::<f64>::zeros(m, m);
    let mut xty = DMatrix::<f64>::zeros(m, outputs);
    for (&s, v) in coalitions.iter().zip(&values) {
        let last = bit(s, m);
        let row: Vec<f64> = (0..m).map(|i| bit(s, i) - last).collect();
        for i in 0..m {
            if row[i] == 0.0 {
                continue;
            }
            for j in 0..m {
                xtx[(i, j)] += row[i] * row[j];
            }
            for c in 0..outputs {
                let target = v[c] - v0[c] - last * (v1[c] - v0[c]);
                xty[(i, c)] += row[i] * target;
            }
        }
    }
    let eig = SymmetricEigen::new(xtx);
    let max = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) || min <= max * 1e-12 {
        return Err(Error::Singular {
            condition: if min > 0.0 { max / min } else { f64::INFINITY },
            detail: format!(
                "{} coalitions do not determine {d} players (eigenvalues in [{min:.3e}, {max:.3e}])",
                coalitions.len()
            ),
        });
    }
    // (XᵀX)⁻¹ = V Λ⁻¹ Vᵀ
    let inv_diag = DMatrix::from_diagonal(&DVector::from_iterator(m, eig.eigenvalues.iter().map(|l| 1.0 / l)));
    let inv = &eig.eigenvectors * inv_diag * eig.eigenvectors.transpose();
    let beta = inv * xty;
    let mut phi = vec![0.0; d * outputs];
    for c in 0..outputs {
        let mut rest = 0.0;
        for i in 0..m {
            phi[i * outputs + c] = beta[(i, c)];
            rest += beta[(i, c)];
        }
        phi[m * outputs + c] = v1[c] - v0[c] - rest;
    }
    Attribution::new(d, outputs, phi, true)
}

/// Shift every player's value equally so that the values sum to `gap`.
pub fn efficiency_normalize(raw: &[f64], gap: f64) -> Vec<f64> {
    let d = raw.len() as f64;
    let shift = (gap - raw.iter().sum::<f64>()) / d;
    raw.iter().map(|v| v + shift).collect()
}

impl Attribution {
    /// Normalize every class against `full[c] − null[c]`.
    pub fn normalized(&self, full: &[f64], null: &[f64]) -> Attribution {
        let mut out = self.clone();
        for c in 0..self.classes {
            let col = efficiency_normalize(&self.class(c), full[c] - null[c]);
            for (i, v) in col.into_iter().enumerate() {
                out.values[i * self.classes + c] = v;
            }
        }
        out.normalized = true;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapley::FnGame;

    fn linear(w: Vec<f64>) -> FnGame<impl Fn(u64) -> Vec<f64>> {
        let d = w.len();
        FnGame::new(d, 1, move |s| vec![(0..d).filter(|i| s >> i & 1 == 1).map(|i| w[i]).sum()])
    }

    #[test]
    fn exact_linear_and_majority() {
        let phi = exact_shapley(&linear(vec![1.0, 2.0, 3.0])).unwrap();
        for (a, b) in phi.values.iter().zip([1.0, 2.0, 3.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let maj = FnGame::new(3, 1, |s| vec![(s.count_ones() >= 2) as u8 as f64]);
        for v in exact_shapley(&maj).unwrap().values {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_respects_budget() {
        let g = FnGame::new(21, 1, |_| vec![0.0]);
        assert!(matches!(exact_shapley(&g), Err(Error::Budget(_))));
    }

    #[test]
    fn kernelshap_linear_is_exact() {
        let w = vec![0.5, -1.0, 2.0, 0.25];
        let est = kernelshap(&linear(w.clone()), 64, true, 1).unwrap();
        for (a, b) in est.values.iter().zip(&w) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn kernelshap_reports_rank_deficiency() {
        // all coalitions identical: the design has rank at most one
        let g = linear(vec![1.0, 2.0, 3.0, 4.0]);
        match kernelshap_on(&g, &[0b0011; 10]) {
            Err(Error::Singular { condition, .. }) => assert!(condition > 1e12),
            other => panic!("expected singular system, got {other:?}"),
        }
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(efficiency_normalize(&[1.0, 2.0, 3.0], 6.0), vec![1.0, 2.0, 3.0]);
        assert_eq!(efficiency_normalize(&[0.0, 0.0, 0.0], 3.0), vec![1.0, 1.0, 1.0]);
        let n = efficiency_normalize(&[0.2, -0.1, 0.4], 1.0);
        for (a, b) in n.iter().zip([0.3667, 0.0667, 0.5667]) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}
