//! End-to-end evaluation of a trained explainer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bounds::{check_error_bound, full_value, normalized_attribution, predicted_class, BoundReport, BOUND_ORACLE_PLAYERS};
use super::cost::{combined_flops, separate_flops, EfficiencyReport};
use super::metrics::{cka, insertion_deletion, CurveMode, InsertionDeletionCurve};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::nn::{BatchInput, Classifier, SideConfig, SideRole, SideTunedModel, TokenSequence};
use crate::scalar::Scalar;
use crate::shapley::{shapley_from_table, Game, Memo, SurrogateGame, TableGame};
use crate::train::Explainer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Test samples used for the faithfulness curves.
    pub samples: usize,
    /// Kernel draws for the loss estimates of the bound check.
    pub bound_masks: usize,
    /// Test samples used for the bound check.
    pub bound_samples: usize,
    /// Samples whose class-token states feed the CKA matrix.
    pub cka_samples: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { samples: 200, bound_masks: 50_000, bound_samples: 50, cka_samples: 64, seed: 0 }
    }
}

/// Mean insertion and deletion curves for one way of ranking features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Faithfulness {
    pub method: String,
    pub insertion: InsertionDeletionCurve,
    pub deletion: InsertionDeletionCurve,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub players: usize,
    pub samples: usize,
    pub seed: u64,
    pub faithfulness: Vec<Faithfulness>,
    /// Largest `|1ᵀφ − (v(1) − v(0))|` over the evaluated attributions.
    pub max_efficiency_residual: f64,
    /// `cka[i][j]` compares block `i` of the reference classifier with block `j` of
    /// the evaluated model's encoder.
    pub cka: Vec<Vec<f64>>,
    pub bound: BoundReport,
    pub efficiency: EfficiencyReport,
    pub combined_gflops: f64,
    pub separate_gflops: f64,
}

impl EvalReport {
    pub fn method(&self, name: &str) -> Option<&Faithfulness> {
        self.faithfulness.iter().find(|f| f.method == name)
    }
}

struct CurveSum {
    method: &'static str,
    insertion: Option<InsertionDeletionCurve>,
    deletion: Option<InsertionDeletionCurve>,
}

impl CurveSum {
    fn new(method: &'static str) -> Self {
        CurveSum { method, insertion: None, deletion: None }
    }

    fn add(&mut self, scores: &[f64], game: &dyn Game, class: usize) -> Result<()> {
        for mode in [CurveMode::Insertion, CurveMode::Deletion] {
            let c = insertion_deletion(scores, game, class, mode)?;
            let slot = if mode == CurveMode::Insertion { &mut self.insertion } else { &mut self.deletion };
            match slot {
                None => *slot = Some(c),
                Some(acc) => {
                    acc.values.iter_mut().zip(&c.values).for_each(|(a, b)| *a += b);
                    acc.auc += c.auc;
                }
            }
        }
        Ok(())
    }

    fn finish(self, n: usize) -> Option<Faithfulness> {
        let scale = |mut c: InsertionDeletionCurve| {
            c.values.iter_mut().for_each(|v| *v /= n as f64);
            c.auc /= n as f64;
            c
        };
        Some(Faithfulness {
            method: self.method.to_string(),
            insertion: scale(self.insertion?),
            deletion: scale(self.deletion?),
        })
    }
}

/// Row-major `[n, width]` class-token states per block.
fn block_states<T: Scalar>(clf: &Classifier<T>, xs: &[TokenSequence<T>]) -> Result<Vec<Vec<f64>>> {
    let refs: Vec<&TokenSequence<T>> = xs.iter().collect();
    let states = clf.class_token_states(&BatchInput::new(&refs, None)?)?;
    Ok(states.iter().map(|t| t.to_f64_vec()).collect())
}

/// Linear CKA between every block of `a` and every block of `b` on `xs`.
pub fn layer_cka<T: Scalar>(a: &Classifier<T>, b: &Classifier<T>, xs: &[TokenSequence<T>]) -> Result<Vec<Vec<f64>>> {
    let sa = block_states(a, xs)?;
    let sb = block_states(b, xs)?;
    sa.iter().map(|x| sb.iter().map(|y| cka(x, y, xs.len())).collect()).collect()
}

/// Faithfulness of `explainer` against random and (when tractable) exact rankings,
/// representation drift against `reference`, the error-bound check and analytic costs.
///
/// `encoder` is the classifier whose blocks are compared with `reference`; `side`
/// describes the branch whose cost is reported.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<T: Scalar, E: Explainer<T>>(
    explainer: &E,
    surrogate: &SideTunedModel<T>,
    reference: &Classifier<T>,
    encoder: &Classifier<T>,
    side: &SideConfig,
    data: &Dataset,
    options: &EvalOptions,
) -> Result<EvalReport> {
    let cfg = surrogate.config().clone();
    let d = cfg.num_tokens;
    let xs = data.sequences::<T>(Split::Test);
    if xs.is_empty() || options.samples == 0 {
        return Err(Error::config("evaluation needs at least one test sample"));
    }
    let n = options.samples.min(xs.len());
    let null: Vec<f64> = surrogate.null_value()?.iter().map(|v| v.as_f64()).collect();
    let oracle = d <= BOUND_ORACLE_PLAYERS;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut trained = CurveSum::new("explainer");
    let mut random = CurveSum::new("random");
    let mut exact = CurveSum::new("exact");
    let mut residual = 0.0f64;
    for x in &xs[..n] {
        let y = predicted_class(surrogate, x)?;
        let attr = normalized_attribution(explainer, surrogate, &null, x)?;
        let full = full_value(surrogate, x)?;
        for c in 0..cfg.num_classes {
            residual = residual.max((attr.total(c) - (full[c] - null[c])).abs());
        }
        let noise: Vec<f64> = (0..d).map(|_| rng.random()).collect();
        let game = SurrogateGame::new(surrogate, x)?;
        if oracle {
            let table = TableGame::tabulate(&game)?;
            trained.add(&attr.class(y), &table, y)?;
            random.add(&noise, &table, y)?;
            exact.add(&shapley_from_table(&table)?.class(y), &table, y)?;
        } else {
            let memo = Memo::new(game);
            trained.add(&attr.class(y), &memo, y)?;
            random.add(&noise, &memo, y)?;
        }
    }
    let faithfulness = [trained, random, exact].into_iter().filter_map(|c| c.finish(n)).collect();

    let m = options.cka_samples.clamp(2, xs.len().max(2)).min(xs.len());
    let cka = layer_cka(reference, encoder, &xs[..m])?;

    let nb = options.bound_samples.min(xs.len());
    let bound = check_error_bound(explainer, surrogate, &xs[..nb], options.bound_masks, options.seed.wrapping_add(1))?;

    let combined = SideConfig { role: SideRole::Explainer, ..side.clone() };
    Ok(EvalReport {
        players: d,
        samples: n,
        seed: options.seed,
        faithfulness,
        max_efficiency_residual: residual,
        cka,
        bound,
        efficiency: EfficiencyReport::for_training(&cfg, Some(side)),
        combined_gflops: combined_flops(&cfg, &combined).giga(),
        separate_gflops: separate_flops(&cfg, side.head_depth).giga(),
    })
}
