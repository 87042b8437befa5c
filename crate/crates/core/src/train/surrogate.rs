use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::classifier::argmax;
use super::{check_loss, shuffled, verify_frozen, BestTracker, LossRecord, Pipeline, Stage, StageConfig};
use crate::autodiff::{softmax_f64, Graph, Optimizer};
use crate::data::{Dataset, Split};
use crate::error::Result;
use crate::nn::{BatchInput, Classifier, MaskVector, SideTunedModel, TokenSequence};
use crate::scalar::Scalar;
use crate::shapley::sample_equicardinal;
use crate::tensor::Tensor;

/// `KL(softmax(p) ‖ softmax(q))` with log-sum-exp stabilization.
pub fn kl_divergence(p_logits: &[f64], q_logits: &[f64]) -> f64 {
    let lse = |x: &[f64]| {
        let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
    };
    let (lp, lq) = (lse(p_logits), lse(q_logits));
    p_logits
        .iter()
        .zip(q_logits)
        .map(|(a, b)| {
            let log_p = a - lp;
            log_p.exp() * (log_p - (b - lq))
        })
        .sum::<f64>()
        .max(0.0)
}

fn entropy_term(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum()
}

pub(crate) fn teacher_probs<T: Scalar>(clf: &Classifier<T>, xs: &[TokenSequence<T>]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(xs.len());
    for chunk in xs.chunks(64) {
        let refs: Vec<&TokenSequence<T>> = chunk.iter().collect();
        let logits = clf.logits(&BatchInput::new(&refs, None)?)?;
        for r in 0..chunk.len() {
            out.push(softmax_f64(&logits.row(r).iter().map(|v| v.as_f64()).collect::<Vec<_>>()));
        }
    }
    Ok(out)
}

/// Mean `KL(teacher ‖ surrogate(x_s))` over the listed (sample, mask) pairs, in graph `g`.
fn batch_kl<T: Scalar>(
    g: &mut Graph<T>,
    model: &SideTunedModel<T>,
    xs: &[&TokenSequence<T>],
    teacher: &[&[f64]],
    masks: &[MaskVector],
) -> Result<(crate::autodiff::Var, f64)> {
    let m = masks.len() / xs.len();
    let seqs: Vec<&TokenSequence<T>> = xs.iter().flat_map(|x| std::iter::repeat_n(*x, m)).collect();
    let input = BatchInput::new(&seqs, Some(masks))?;
    let logits = model.surrogate_graph(g, &input)?;
    let classes = teacher[0].len();
    let mut p = Vec::with_capacity(seqs.len() * classes);
    let mut ent = 0.0;
    for t in teacher {
        for _ in 0..m {
            p.extend(t.iter().map(|&v| T::from_f64_lossy(v)));
            ent += entropy_term(t);
        }
    }
    let rows = seqs.len() as f64;
    let p = g.constant(Tensor::new(vec![seqs.len(), classes], p)?);
    let lq = g.log_softmax(logits)?;
    let cross = g.mul(lq, p)?;
    let cross = g.sum(cross)?;
    let loss = g.scale(cross, -1.0 / rows)?;
    Ok((loss, ent / rows))
}

fn val_kl<T: Scalar>(
    model: &SideTunedModel<T>,
    xs: &[TokenSequence<T>],
    teacher: &[Vec<f64>],
    masks: &[Vec<MaskVector>],
) -> Result<f64> {
    let mut total = 0.0;
    for ((x, t), ms) in xs.iter().zip(teacher).zip(masks) {
        let mut g = Graph::inference();
        let (loss, ent) = batch_kl(&mut g, model, &[x], &[t.as_slice()], ms)?;
        total += g.value(loss).item()?.as_f64() + ent;
    }
    Ok(total / xs.len() as f64)
}

/// Fit a surrogate branch to reproduce the frozen classifier's full-input
/// predictions from masked inputs.
pub fn train_surrogate<T: Scalar>(
    classifier: &Classifier<T>,
    data: &Dataset,
    reduction: usize,
    head_depth: usize,
    config: &StageConfig,
) -> Result<(SideTunedModel<T>, LossRecord)> {
    config.expect(Stage::Surrogate, &[Pipeline::Autognothi, Pipeline::FullFinetune])?;
    let mut model = SideTunedModel::with_surrogate(classifier, reduction, head_depth, config.seed)?;
    let full_finetune = config.pipeline == Pipeline::FullFinetune;
    if full_finetune {
        model.store.set_trainable_prefix("backbone.", true);
        model.store.set_trainable_prefix("backbone.head.", false);
        model.store.set_trainable_prefix("backbone.norm.", false);
    }
    let d = model.config().num_tokens;
    let train = data.sequences::<T>(Split::Train);
    let val = data.sequences::<T>(Split::Val);
    let teacher = teacher_probs(classifier, &train)?;
    let val_teacher = teacher_probs(classifier, &val)?;
    let mut val_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7a1_5e7);
    let val_masks: Vec<Vec<MaskVector>> =
        val.iter().map(|_| sample_equicardinal(&mut val_rng, d, config.masks_per_input)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_5a77);
    let mut opt = Optimizer::new(config.optimizer.clone())?;
    let before = model.store.clone();
    let initial = val_kl(&model, &val, &val_teacher, &val_masks)?;
    let mut record = LossRecord::new(Stage::Surrogate, config.pipeline, initial);
    let mut best = BestTracker::new();
    for _ in 0..config.epochs {
        let order = shuffled(&mut rng, train.len());
        for idx in order.chunks(config.inputs_per_batch) {
            let xs: Vec<&TokenSequence<T>> = idx.iter().map(|&i| &train[i]).collect();
            let ts: Vec<&[f64]> = idx.iter().map(|&i| teacher[i].as_slice()).collect();
            let masks = sample_equicardinal(&mut rng, d, config.masks_per_input * xs.len());
            let mut g = Graph::new();
            let (loss, ent) = batch_kl(&mut g, &model, &xs, &ts, &masks)?;
            let l = g.value(loss).item()?.as_f64() + ent;
            check_loss(Stage::Surrogate, record.step_losses.len(), l)?;
            record.step_losses.push(l);
            let grads = g.backward(loss)?;
            opt.step(&mut model.store, &grads)?;
        }
        let v = val_kl(&model, &val, &val_teacher, &val_masks)?;
        best.observe(&mut record, v, &model.store)?;
    }
    model.store = best.into_store();
    if !full_finetune {
        verify_frozen(&before, &model.store, |n| n.starts_with("surrogate."))?;
    }
    Ok((model, record))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateReport {
    /// Mean KL to the classifier's full-input prediction, indexed by coalition size.
    pub kl_by_size: Vec<f64>,
    /// Surrogate accuracy with no features removed.
    pub full_accuracy: f64,
    /// Classifier accuracy on the same samples.
    pub classifier_accuracy: f64,
}

impl SurrogateReport {
    pub fn measure<T: Scalar>(
        model: &SideTunedModel<T>,
        classifier: &Classifier<T>,
        xs: &[TokenSequence<T>],
        labels: &[usize],
        masks_per_size: usize,
        seed: u64,
    ) -> Result<Self> {
        let d = model.config().num_tokens;
        let teacher = teacher_probs(classifier, xs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut kl_by_size = vec![0.0; d + 1];
        for (k, slot) in kl_by_size.iter_mut().enumerate() {
            let mut total = 0.0;
            for (x, t) in xs.iter().zip(&teacher) {
                let masks: Vec<MaskVector> = (0..masks_per_size)
                    .map(|_| {
                        let mut idx: Vec<usize> = (0..d).collect();
                        rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
                        let mut m = MaskVector::none(d);
                        for &i in &idx[..k] {
                            m.set(i, true);
                        }
                        m
                    })
                    .collect();
                let mut g = Graph::inference();
                let (loss, ent) = batch_kl(&mut g, model, &[x], &[t.as_slice()], &masks)?;
                total += g.value(loss).item()?.as_f64() + ent;
            }
            *slot = total / xs.len() as f64;
        }
        let mut correct = 0usize;
        let mut clf_correct = 0usize;
        for ((x, t), &y) in xs.iter().zip(&teacher).zip(labels) {
            let p = model.surrogate_probs(&BatchInput::repeated(x, &[MaskVector::all(d)])?)?;
            correct += (argmax(p.row(0)) == y) as usize;
            clf_correct += (argmax(t) == y) as usize;
        }
        Ok(SurrogateReport {
            kl_by_size,
            full_accuracy: correct as f64 / xs.len() as f64,
            classifier_accuracy: clf_correct as f64 / xs.len() as f64,
        })
    }
}
