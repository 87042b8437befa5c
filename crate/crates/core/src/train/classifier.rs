use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_loss, shuffled, BestTracker, ClassLoss, LossRecord, Pipeline, Stage, StageConfig};
use crate::autodiff::{Graph, Optimizer, ParamStore, Var};
use crate::data::{Dataset, Split};
use crate::error::Result;
use crate::nn::{BatchInput, Classifier, ModelConfig, TokenSequence, Transformer};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &y) in labels.iter().enumerate() {
        t.data_mut()[i * classes + y] = T::one();
    }
    t
}

/// Mean classification loss of `logits` against `labels`.
pub(crate) fn class_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize], kind: ClassLoss) -> Result<Var> {
    let classes = g.shape(logits)[1];
    let y = g.constant(one_hot(labels, classes));
    let per = match kind {
        ClassLoss::Mse => {
            let p = g.softmax(logits)?;
            let diff = g.sub(p, y)?;
            g.square(diff)?
        }
        ClassLoss::CrossEntropy => {
            let lp = g.log_softmax(logits)?;
            let picked = g.mul(lp, y)?;
            g.scale(picked, -1.0)?
        }
    };
    let total = g.sum(per)?;
    g.scale(total, 1.0 / labels.len() as f64)
}

fn eval_loss<T: Scalar>(
    net: &Transformer,
    store: &ParamStore<T>,
    xs: &[TokenSequence<T>],
    labels: &[usize],
    kind: ClassLoss,
    batch: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for (chunk, ys) in xs.chunks(batch).zip(labels.chunks(batch)) {
        let refs: Vec<&TokenSequence<T>> = chunk.iter().collect();
        let mut g = Graph::inference();
        let logits = net.forward(&mut g, store, &BatchInput::new(&refs, None)?)?;
        let l = class_loss(&mut g, logits, ys, kind)?;
        total += g.value(l).item()?.as_f64() * ys.len() as f64;
    }
    Ok(total / labels.len() as f64)
}

/// Fraction of samples whose argmax logit equals the label.
pub fn accuracy<T: Scalar>(model: &Classifier<T>, xs: &[TokenSequence<T>], labels: &[usize]) -> Result<f64> {
    let mut correct = 0usize;
    for (chunk, ys) in xs.chunks(64).zip(labels.chunks(64)) {
        let refs: Vec<&TokenSequence<T>> = chunk.iter().collect();
        let logits = model.logits(&BatchInput::new(&refs, None)?)?;
        for (i, &y) in ys.iter().enumerate() {
            correct += (argmax(logits.row(i)) == y) as usize;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Train a classifier from scratch and keep the epoch with the lowest validation loss.
pub fn train_classifier<T: Scalar>(
    data: &Dataset,
    model: &ModelConfig,
    config: &StageConfig,
) -> Result<(Classifier<T>, LossRecord)> {
    config.expect(Stage::Classifier, &[Pipeline::Autognothi])?;
    let mut clf = Classifier::<T>::new(model, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_c1a5);
    let train = data.sequences::<T>(Split::Train);
    let labels = data.labels(Split::Train);
    let val = data.sequences::<T>(Split::Val);
    let val_labels = data.labels(Split::Val);
    let mut opt = Optimizer::new(config.optimizer.clone())?;
    let initial = eval_loss(&clf.net, &clf.store, &val, &val_labels, config.class_loss, 64)?;
    let mut record = LossRecord::new(Stage::Classifier, Pipeline::Autognothi, initial);
    let mut best = BestTracker::new();
    for _ in 0..config.epochs {
        let order = shuffled(&mut rng, train.len());
        for idx in order.chunks(config.batch_size) {
            let refs: Vec<&TokenSequence<T>> = idx.iter().map(|&i| &train[i]).collect();
            let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let logits = clf.net.forward(&mut g, &clf.store, &BatchInput::new(&refs, None)?)?;
            let loss = class_loss(&mut g, logits, &ys, config.class_loss)?;
            let l = g.value(loss).item()?.as_f64();
            check_loss(Stage::Classifier, record.step_losses.len(), l)?;
            record.step_losses.push(l);
            let grads = g.backward(loss)?;
            opt.step(&mut clf.store, &grads)?;
        }
        let v = eval_loss(&clf.net, &clf.store, &val, &val_labels, config.class_loss, 64)?;
        best.observe(&mut record, v, &clf.store)?;
    }
    clf.store = best.into_store();
    Ok((clf, record))
}
