use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::classifier::class_loss;
use super::{check_loss, shuffled, verify_frozen, BestTracker, ClassWeighting, LossRecord, Pipeline, Stage, StageConfig};
use crate::autodiff::{Graph, Optimizer, ParamId, ParamStore, Var};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::gradient_conflict;
use crate::nn::{BatchInput, MaskVector, SideTunedModel, TokenSequence};
use crate::scalar::Scalar;
use crate::shapley::{shapley_kernel, ShapleyKernelDist};
use crate::tensor::Tensor;

/// Anything that maps unmasked inputs to raw per-token, per-class attributions.
pub trait Explainer<T: Scalar> {
    /// Raw attributions `[batch·d, classes]` and, for jointly trained models, prediction logits.
    fn explain_graph(&self, g: &mut Graph<T>, input: &BatchInput<T>) -> Result<(Var, Option<Var>)>;

    fn params(&self) -> &ParamStore<T>;

    fn params_mut(&mut self) -> &mut ParamStore<T>;

    /// Raw attributions without recording gradients.
    fn explain_raw(&self, input: &BatchInput<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let (phi, _) = self.explain_graph(&mut g, input)?;
        Ok(g.value(phi).clone())
    }
}

impl<T: Scalar> Explainer<T> for SideTunedModel<T> {
    fn explain_graph(&self, g: &mut Graph<T>, input: &BatchInput<T>) -> Result<(Var, Option<Var>)> {
        Ok((self.explainer_graph(g, input)?, None))
    }

    fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }
}

/// Regression targets for one batch of inputs and their coalitions.
#[derive(Clone, Debug)]
pub struct ExplanationTargets<T> {
    /// Block-diagonal coalition indicators `[batch·m, batch·d]`.
    pub coalitions: Tensor<T>,
    /// `v(s) − v(0)` per coalition and class, `[batch·m, classes]`.
    pub target: Tensor<T>,
    /// Class weights per coalition row, `[batch·m, classes]`.
    pub weight: Tensor<T>,
    /// `v(1) − v(0)` per input, `[batch, classes]`.
    pub gap: Tensor<T>,
    pub batch: usize,
    pub players: usize,
}

/// Evaluate the surrogate on every coalition (plus the full input) of every input.
pub fn explanation_targets<T: Scalar>(
    surrogate: &SideTunedModel<T>,
    null: &[T],
    xs: &[&TokenSequence<T>],
    labels: &[usize],
    masks: &[MaskVector],
    weighting: ClassWeighting,
) -> Result<ExplanationTargets<T>> {
    let (b, d) = (xs.len(), surrogate.config().num_tokens);
    let classes = surrogate.config().num_classes;
    if masks.len() % b != 0 {
        return Err(Error::contract(format!("{} masks do not split over {b} inputs", masks.len())));
    }
    let m = masks.len() / b;
    let mut seqs = Vec::with_capacity(b * (m + 1));
    let mut all = Vec::with_capacity(b * (m + 1));
    for (i, x) in xs.iter().enumerate() {
        for s in &masks[i * m..(i + 1) * m] {
            seqs.push(*x);
            all.push(s.clone());
        }
        seqs.push(*x);
        all.push(MaskVector::all(d));
    }
    let probs = surrogate.surrogate_probs(&BatchInput::new(&seqs, Some(&all))?)?;
    let mut coalitions = Tensor::zeros(&[b * m, b * d]);
    let mut target = Tensor::zeros(&[b * m, classes]);
    let mut weight = Tensor::zeros(&[b * m, classes]);
    let mut gap = Tensor::zeros(&[b, classes]);
    for i in 0..b {
        let full = probs.row(i * (m + 1) + m).to_vec();
        for c in 0..classes {
            gap.data_mut()[i * classes + c] = full[c] - null[c];
        }
        for j in 0..m {
            let r = i * m + j;
            for (p, &keep) in masks[r].bits().iter().enumerate() {
                if keep {
                    coalitions.data_mut()[r * b * d + i * d + p] = T::one();
                }
            }
            let v = probs.row(i * (m + 1) + j);
            for c in 0..classes {
                target.data_mut()[r * classes + c] = v[c] - null[c];
                weight.data_mut()[r * classes + c] = match weighting {
                    ClassWeighting::SurrogateProbs => full[c],
                    ClassWeighting::Label => T::from_f64_lossy((labels[i] == c) as u8 as f64),
                };
            }
        }
    }
    Ok(ExplanationTargets { coalitions, target, weight, gap, batch: b, players: d })
}

/// Weighted squared error of normalized attributions against coalition values.
pub(crate) fn explanation_loss<T: Scalar>(g: &mut Graph<T>, raw: Var, t: &ExplanationTargets<T>) -> Result<Var> {
    let phi = g.efficiency_normalize(raw, &t.gap, t.batch, t.players)?;
    let s = g.constant(t.coalitions.clone());
    let pred = g.matmul(s, phi)?;
    let target = g.constant(t.target.clone());
    let diff = g.sub(pred, target)?;
    let sq = g.square(diff)?;
    let w = g.constant(t.weight.clone());
    let weighted = g.mul(sq, w)?;
    let total = g.sum(weighted)?;
    g.scale(total, 1.0 / t.target.rows() as f64)
}

pub(crate) struct ExplainLoop<'a, T: Scalar> {
    pub surrogate: &'a SideTunedModel<T>,
    pub null: Vec<T>,
    pub kernel: ShapleyKernelDist,
    pub config: &'a StageConfig,
    pub stage_pipeline: Pipeline,
    /// Parameters whose gradients are compared across the two joint losses.
    pub shared: Vec<(ParamId, usize)>,
}

impl<T: Scalar> ExplainLoop<'_, T> {
    fn val_loss<E: Explainer<T>>(
        &self,
        model: &E,
        val: &[TokenSequence<T>],
        labels: &[usize],
        masks: &[Vec<MaskVector>],
    ) -> Result<f64> {
        let mut total = 0.0;
        let per = self.config.inputs_per_batch;
        for start in (0..val.len()).step_by(per) {
            let end = (start + per).min(val.len());
            let xs: Vec<&TokenSequence<T>> = val[start..end].iter().collect();
            let ms: Vec<MaskVector> = masks[start..end].iter().flatten().cloned().collect();
            let t = explanation_targets(self.surrogate, &self.null, &xs, &labels[start..end], &ms, self.config.weighting)?;
            let mut g = Graph::inference();
            let (raw, _) = model.explain_graph(&mut g, &BatchInput::new(&xs, None)?)?;
            let l = explanation_loss(&mut g, raw, &t)?;
            total += g.value(l).item()?.as_f64() * xs.len() as f64;
        }
        Ok(total / val.len() as f64)
    }

    pub fn run<E: Explainer<T>>(&self, model: &mut E, data: &Dataset) -> Result<LossRecord> {
        let config = self.config;
        let train = data.sequences::<T>(Split::Train);
        let labels = data.labels(Split::Train);
        let val = data.sequences::<T>(Split::Val);
        let val_labels = data.labels(Split::Val);
        let mut val_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7a1_e4b1);
        let val_masks: Vec<Vec<MaskVector>> = val
            .iter()
            .map(|_| self.kernel.sample_with(&mut val_rng, config.masks_per_input, true))
            .collect::<Result<_>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_e4b1);
        let mut opt = Optimizer::new(config.optimizer.clone())?;
        let initial = self.val_loss(model, &val, &val_labels, &val_masks)?;
        let mut record = LossRecord::new(Stage::Explainer, self.stage_pipeline, initial);
        let mut best = BestTracker::new();
        for _ in 0..config.epochs {
            let order = shuffled(&mut rng, train.len());
            for idx in order.chunks(config.inputs_per_batch) {
                let xs: Vec<&TokenSequence<T>> = idx.iter().map(|&i| &train[i]).collect();
                let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                let masks = self.kernel.sample_with(&mut rng, config.masks_per_input * xs.len(), true)?;
                let t = explanation_targets(self.surrogate, &self.null, &xs, &ys, &masks, config.weighting)?;
                let mut g = Graph::new();
                let (raw, logits) = model.explain_graph(&mut g, &BatchInput::new(&xs, None)?)?;
                let loss = explanation_loss(&mut g, raw, &t)?;
                let l = g.value(loss).item()?.as_f64();
                check_loss(Stage::Explainer, record.step_losses.len(), l)?;
                record.step_losses.push(l);
                let grads = match logits {
                    None => g.backward(loss)?,
                    Some(logits) => {
                        let cls = class_loss(&mut g, logits, &ys, config.class_loss)?;
                        let g_exp = g.backward(loss)?;
                        let g_cls = g.backward(cls)?;
                        if let Ok(c) = gradient_conflict(&g_cls.flatten(&self.shared), &g_exp.flatten(&self.shared)) {
                            record.cosine_trace.push(c);
                        }
                        g_exp.merged(&g_cls)
                    }
                };
                opt.step(model.params_mut(), &grads)?;
            }
            let v = self.val_loss(model, &val, &val_labels, &val_masks)?;
            best.observe(&mut record, v, model.params())?;
        }
        *model.params_mut() = best.into_store();
        Ok(record)
    }
}

/// Attach an explainer branch to a trained surrogate and fit it to the surrogate's
/// Shapley values by paired-kernel regression.
pub fn train_explainer<T: Scalar>(
    surrogate: &SideTunedModel<T>,
    data: &Dataset,
    config: &StageConfig,
) -> Result<(SideTunedModel<T>, LossRecord)> {
    config.expect(Stage::Explainer, &[Pipeline::Autognothi, Pipeline::FullFinetune])?;
    if surrogate.explainer.is_some() {
        return Err(Error::Role { expected: "surrogate".into(), found: "explainer".into() });
    }
    let mut model = surrogate.clone();
    model.attach_explainer(config.seed)?;
    if config.pipeline == Pipeline::FullFinetune {
        model.store.set_trainable_prefix("backbone.", true);
        model.store.set_trainable_prefix("backbone.head.", false);
        model.store.set_trainable_prefix("backbone.norm.", false);
    }
    let lp = ExplainLoop {
        surrogate,
        null: surrogate.null_value()?,
        kernel: shapley_kernel(surrogate.config().num_tokens)?,
        config,
        stage_pipeline: config.pipeline,
        shared: Vec::new(),
    };
    let before = model.store.clone();
    let record = lp.run(&mut model, data)?;
    if config.pipeline == Pipeline::Autognothi {
        verify_frozen(&before, &model.store, |n| n.starts_with("explainer."))?;
    }
    Ok((model, record))
}
