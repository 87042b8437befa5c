//! Ladder side branches on a frozen backbone and the merged predict-and-explain model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::layers::{Init, LayerNorm, Linear, MsaBlock};
use crate::nn::transformer::{BatchInput, Classifier, ModelConfig, TokenSequence, Transformer};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SideRole {
    Surrogate,
    Explainer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SideConfig {
    /// Side width is `hidden / reduction`.
    pub reduction: usize,
    pub role: SideRole,
    /// Hidden layers in the explainer head before the output layer.
    #[serde(default = "default_head_depth")]
    pub head_depth: usize,
}

fn default_head_depth() -> usize {
    3
}

impl SideConfig {
    pub fn new(reduction: usize, role: SideRole) -> Self {
        SideConfig { reduction, role, head_depth: 3 }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.reduction == 0 || model.hidden % self.reduction != 0 {
            return Err(Error::config(format!(
                "hidden {} is not divisible by reduction {}",
                model.hidden, self.reduction
            )));
        }
        if self.head_depth == 0 {
            return Err(Error::config("explainer head depth must be at least 1"));
        }
        Ok(())
    }

    pub fn width(&self, model: &ModelConfig) -> usize {
        model.hidden / self.reduction
    }

    pub fn heads(&self, model: &ModelConfig) -> usize {
        if self.width(model) % model.heads == 0 {
            model.heads
        } else {
            1
        }
    }

    pub fn mlp_hidden(&self, model: &ModelConfig) -> usize {
        ((model.mlp_ratio * self.width(model) as f64).round() as usize).max(1)
    }
}

/// Per-token regression head: layer norm, `depth` GELU layers at `width`, then a
/// linear map to `classes`. Applied to every feature token independently.
#[derive(Clone, Debug)]
pub struct TokenHead {
    pub norm: LayerNorm,
    pub hidden: Vec<Linear>,
    pub out: Linear,
}

impl TokenHead {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        depth: usize,
        classes: usize,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        let norm = LayerNorm::new(store, &format!("{name}.norm"), width, true)?;
        let hidden = (0..depth)
            .map(|i| Linear::new(store, &format!("{name}.fc{i}"), width, width, Init::Kaiming, true, rng))
            .collect::<Result<Vec<_>>>()?;
        let out = Linear::new(store, &format!("{name}.out"), width, classes, Init::Kaiming, true, rng)?;
        Ok(TokenHead { norm, hidden, out })
    }

    /// `state` is `[batch·(d+1), width]`; returns `[batch·d, classes]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        state: Var,
        batch: usize,
        d: usize,
    ) -> Result<Var> {
        let rows: Vec<usize> = (0..batch).flat_map(|b| (1..=d).map(move |j| b * (d + 1) + j)).collect();
        let mut u = g.select_rows(state, &rows)?;
        u = self.norm.forward(g, store, u)?;
        for fc in &self.hidden {
            u = fc.forward(g, store, u)?;
            u = g.gelu(u)?;
        }
        self.out.forward(g, store, u)
    }

    pub fn count(width: usize, depth: usize, classes: usize) -> usize {
        2 * width + depth * (width * width + width) + width * classes + classes
    }
}

#[derive(Clone, Debug)]
pub enum SideHead {
    /// Class-token classification head.
    Surrogate(Linear),
    Explainer(TokenHead),
}

/// Narrow copy of the backbone fed by downsampled per-block backbone states.
#[derive(Clone, Debug)]
pub struct SideBranch {
    pub prefix: String,
    pub width: usize,
    pub downs: Vec<Linear>,
    pub blocks: Vec<MsaBlock>,
    pub norm: LayerNorm,
    pub head: SideHead,
}

impl SideBranch {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        model: &ModelConfig,
        side: &SideConfig,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        side.validate(model)?;
        let w = side.width(model);
        let init = Init::Kaiming;
        let mut downs = Vec::with_capacity(model.depth);
        let mut blocks = Vec::with_capacity(model.depth);
        for i in 0..model.depth {
            downs.push(Linear::new(store, &format!("{prefix}.down{i}"), model.hidden, w, init, true, rng)?);
            blocks.push(MsaBlock::new(
                store,
                &format!("{prefix}.block{i}"),
                w,
                side.heads(model),
                side.mlp_hidden(model),
                init,
                true,
                rng,
            )?);
        }
        let norm = LayerNorm::new(store, &format!("{prefix}.norm"), w, true)?;
        let head = match side.role {
            SideRole::Surrogate => SideHead::Surrogate(Linear::new(
                store,
                &format!("{prefix}.head"),
                w,
                model.num_classes,
                init,
                true,
                rng,
            )?),
            SideRole::Explainer => SideHead::Explainer(TokenHead::new(
                store,
                &format!("{prefix}.head"),
                w,
                side.head_depth,
                model.num_classes,
                rng,
            )?),
        };
        Ok(SideBranch { prefix: prefix.to_string(), width: w, downs, blocks, norm, head })
    }

    pub fn role(&self) -> SideRole {
        match self.head {
            SideHead::Surrogate(_) => SideRole::Surrogate,
            SideHead::Explainer(_) => SideRole::Explainer,
        }
    }

    /// Run the side blocks over backbone taps `main[i]`, the state after block `i`.
    /// Block 1 reads `FC1(z1)`; block `i > 1` reads its predecessor's output plus `FCi(zi)`.
    pub fn trunk<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        main: &[Var],
        keep: Option<&[bool]>,
        batch: usize,
        seq: usize,
    ) -> Result<Var> {
        if main.len() != self.blocks.len() {
            return Err(Error::contract(format!("{} backbone taps for {} side blocks", main.len(), self.blocks.len())));
        }
        let mut z: Option<Var> = None;
        for ((down, block), &zm) in self.downs.iter().zip(&self.blocks).zip(main) {
            let tap = down.forward(g, store, zm)?;
            let input = match z {
                None => tap,
                Some(prev) => g.add(prev, tap)?,
            };
            z = Some(block.forward(g, store, input, keep, batch, seq)?);
        }
        Ok(z.expect("depth >= 1"))
    }

    /// Surrogate logits `[batch, classes]` or explainer output `[batch·d, classes]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        main: &[Var],
        keep: Option<&[bool]>,
        batch: usize,
        d: usize,
    ) -> Result<Var> {
        let z = self.trunk(g, store, main, keep, batch, d + 1)?;
        match &self.head {
            SideHead::Surrogate(lin) => {
                let rows: Vec<usize> = (0..batch).map(|b| b * (d + 1)).collect();
                let c = g.select_rows(z, &rows)?;
                let c = self.norm.forward(g, store, c)?;
                lin.forward(g, store, c)
            }
            SideHead::Explainer(head) => {
                let z = self.norm.forward(g, store, z)?;
                head.forward(g, store, z, batch, d)
            }
        }
    }
}

/// Trainable parameters of a side branch (downsamplers, side blocks, head).
pub fn count_side_params(model: &ModelConfig, side: &SideConfig) -> usize {
    let w = side.width(model);
    let trunk = model.depth * (model.hidden * w + w + MsaBlock::count(w, side.mlp_hidden(model))) + 2 * w;
    let head = match side.role {
        SideRole::Surrogate => w * model.num_classes + model.num_classes,
        SideRole::Explainer => TokenHead::count(w, side.head_depth, model.num_classes),
    };
    trunk + head
}

pub const SURROGATE: &str = "surrogate";
pub const EXPLAINER: &str = "explainer";

/// Frozen backbone with a surrogate branch and, once attached, an explainer branch.
#[derive(Clone, Debug)]
pub struct SideTunedModel<T> {
    pub backbone: Transformer,
    pub reduction: usize,
    pub head_depth: usize,
    pub surrogate: SideBranch,
    pub explainer: Option<SideBranch>,
    pub store: ParamStore<T>,
}

impl<T: Scalar> SideTunedModel<T> {
    /// Freeze a trained classifier and attach a freshly initialized surrogate branch.
    pub fn with_surrogate(classifier: &Classifier<T>, reduction: usize, head_depth: usize, seed: u64) -> Result<Self> {
        let mut store = classifier.store.clone();
        store.set_trainable_prefix("", false);
        let side = SideConfig { reduction, role: SideRole::Surrogate, head_depth };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let surrogate = SideBranch::new(&mut store, SURROGATE, classifier.config(), &side, &mut rng)?;
        Ok(SideTunedModel {
            backbone: classifier.net.clone(),
            reduction,
            head_depth,
            surrogate,
            explainer: None,
            store,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.backbone.config
    }

    /// The frozen backbone as a standalone classifier.
    pub fn backbone_classifier(&self) -> Classifier<T> {
        Classifier { net: self.backbone.clone(), store: self.store.clone() }
    }

    pub fn side_config(&self, role: SideRole) -> SideConfig {
        SideConfig { reduction: self.reduction, role, head_depth: self.head_depth }
    }

    pub fn role(&self) -> SideRole {
        if self.explainer.is_some() {
            SideRole::Explainer
        } else {
            SideRole::Surrogate
        }
    }

    /// Attach an explainer branch whose trunk starts from the surrogate's weights and
    /// whose head is new. The surrogate is frozen from here on.
    pub fn attach_explainer(&mut self, seed: u64) -> Result<()> {
        if self.explainer.is_some() {
            return Err(Error::contract("explainer already attached"));
        }
        self.store.set_trainable_prefix(&format!("{SURROGATE}."), false);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let side = self.side_config(SideRole::Explainer);
        let branch = SideBranch::new(&mut self.store, EXPLAINER, &self.backbone.config, &side, &mut rng)?;
        let copy: Vec<(String, String)> = self
            .store
            .iter()
            .filter_map(|(_, name, _)| {
                let rest = name.strip_prefix(&format!("{SURROGATE}."))?;
                (!rest.starts_with("head.")).then(|| (name.to_string(), format!("{EXPLAINER}.{rest}")))
            })
            .collect();
        for (src, dst) in copy {
            let value = self.store.get(self.store.id(&src).expect("listed")).clone();
            let id = self.store.id(&dst).ok_or_else(|| Error::Invariant(format!("missing explainer param {dst}")))?;
            self.store.set(id, value)?;
        }
        self.explainer = Some(branch);
        Ok(())
    }

    /// Surrogate logits on masked inputs, built into `g`.
    pub fn surrogate_graph(&self, g: &mut Graph<T>, input: &BatchInput<T>) -> Result<Var> {
        let main = self.backbone.encode(g, &self.store, input)?;
        self.surrogate.forward(g, &self.store, &main, input.keep.as_deref(), input.batch, input.num_tokens)
    }

    /// Raw explainer output `[batch·d, classes]` on unmasked inputs, built into `g`.
    pub fn explainer_graph(&self, g: &mut Graph<T>, input: &BatchInput<T>) -> Result<Var> {
        let branch = self.explainer_branch()?;
        if input.keep.is_some() {
            return Err(Error::contract("the explainer always sees the full input"));
        }
        let main = self.backbone.encode(g, &self.store, input)?;
        branch.forward(g, &self.store, &main, None, input.batch, input.num_tokens)
    }

    fn explainer_branch(&self) -> Result<&SideBranch> {
        self.explainer.as_ref().ok_or(Error::Role { expected: "explainer".into(), found: "surrogate".into() })
    }

    /// Surrogate class probabilities `[batch, classes]`.
    pub fn surrogate_probs(&self, input: &BatchInput<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let logits = self.surrogate_graph(&mut g, input)?;
        let p = g.softmax(logits)?;
        Ok(g.value(p).clone())
    }

    /// Unnormalized explainer output for each sample, `[batch·d, classes]`.
    pub fn explainer_raw(&self, input: &BatchInput<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let phi = self.explainer_graph(&mut g, input)?;
        Ok(g.value(phi).clone())
    }

    /// Surrogate probabilities with every feature removed. Only the class token is
    /// visible, so the result does not depend on the input.
    pub fn null_value(&self) -> Result<Vec<T>> {
        let cfg = self.config();
        let zeros = TokenSequence::new(Tensor::zeros(&[cfg.num_tokens, cfg.token_input_dim]))?;
        let input = BatchInput::repeated(&zeros, &[crate::nn::MaskVector::none(cfg.num_tokens)])?;
        Ok(self.surrogate_probs(&input)?.into_data())
    }
}

/// One shared backbone pass producing the prediction, the surrogate's full-input
/// value and normalized attributions.
#[derive(Clone, Debug)]
pub struct CombinedModel<T> {
    pub model: SideTunedModel<T>,
    null: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct CombinedOutput<T> {
    /// Backbone classification logits, one row per sample.
    pub logits: Tensor<T>,
    /// Surrogate probabilities on the full input, `v(1)`.
    pub full_value: Tensor<T>,
    /// Surrogate probabilities with all features removed, `v(0)`.
    pub null_value: Vec<T>,
    /// Attributions before efficiency normalization, `[batch·d, classes]`.
    pub raw: Tensor<T>,
    /// Attributions after efficiency normalization.
    pub attribution: Tensor<T>,
}

impl<T: Scalar> CombinedModel<T> {
    pub fn new(model: SideTunedModel<T>) -> Result<Self> {
        model.explainer_branch()?;
        let null = model.null_value()?;
        Ok(CombinedModel { model, null })
    }

    pub fn config(&self) -> &ModelConfig {
        self.model.config()
    }

    pub fn null_value(&self) -> &[T] {
        &self.null
    }

    pub fn forward(&self, input: &BatchInput<T>) -> Result<CombinedOutput<T>> {
        if input.keep.is_some() {
            return Err(Error::contract("combined forward takes unmasked inputs"));
        }
        let m = &self.model;
        let explainer = m.explainer_branch()?;
        let (batch, d) = (input.batch, input.num_tokens);
        let mut g = Graph::inference();
        let main = m.backbone.encode(&mut g, &m.store, input)?;
        let logits = m.backbone.classify(&mut g, &m.store, *main.last().expect("depth >= 1"), batch)?;
        let surr = m.surrogate.forward(&mut g, &m.store, &main, None, batch, d)?;
        let full = g.softmax(surr)?;
        let raw = explainer.forward(&mut g, &m.store, &main, None, batch, d)?;
        let classes = self.config().num_classes;
        let mut gap = Vec::with_capacity(batch * classes);
        for b in 0..batch {
            for c in 0..classes {
                gap.push(g.value(full).row(b)[c] - self.null[c]);
            }
        }
        let gap = Tensor::new(vec![batch, classes], gap)?;
        let attr = g.efficiency_normalize(raw, &gap, batch, d)?;
        Ok(CombinedOutput {
            logits: g.value(logits).clone(),
            full_value: g.value(full).clone(),
            null_value: self.null.clone(),
            raw: g.value(raw).clone(),
            attribution: g.value(attr).clone(),
        })
    }

    /// Prediction and normalized attribution `[d, classes]` for one sample.
    pub fn explain(&self, x: &TokenSequence<T>) -> Result<CombinedOutput<T>> {
        self.forward(&BatchInput::new(&[x], None)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::normal_tensor;
    use crate::nn::transformer::BACKBONE;
    use crate::nn::MaskVector;

    fn cfg() -> ModelConfig {
        ModelConfig {
            depth: 2,
            hidden: 8,
            heads: 2,
            mlp_ratio: 2.0,
            num_tokens: 4,
            token_input_dim: 3,
            num_classes: 3,
            positional: true,
        }
    }

    fn x(seed: u64) -> TokenSequence<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TokenSequence::new(normal_tensor(&mut rng, &[4, 3], 1.0)).unwrap()
    }

    fn model() -> SideTunedModel<f64> {
        let clf = Classifier::new(&cfg(), 1).unwrap();
        let mut m = SideTunedModel::with_surrogate(&clf, 2, 3, 2).unwrap();
        m.attach_explainer(3).unwrap();
        m
    }

    #[test]
    fn side_counts_match_store() {
        let c = cfg();
        let clf = Classifier::<f32>::new(&c, 1).unwrap();
        let mut m = SideTunedModel::with_surrogate(&clf, 2, 3, 2).unwrap();
        let surrogate_only = m.store.num_trainable_scalars();
        assert_eq!(surrogate_only, count_side_params(&c, &SideConfig::new(2, SideRole::Surrogate)));
        m.attach_explainer(3).unwrap();
        assert_eq!(m.store.num_trainable_scalars(), count_side_params(&c, &SideConfig::new(2, SideRole::Explainer)));
    }

    #[test]
    fn head_count_falls_back_to_one() {
        let c = ModelConfig { hidden: 12, heads: 4, ..cfg() };
        assert_eq!(SideConfig::new(2, SideRole::Surrogate).heads(&c), 1);
        assert_eq!(SideConfig::new(3, SideRole::Surrogate).heads(&c), 4);
    }

    #[test]
    fn explainer_trunk_starts_from_surrogate() {
        let m = model();
        for (_, name, value) in m.store.iter() {
            if let Some(rest) = name.strip_prefix("explainer.") {
                if !rest.starts_with("head.") {
                    assert_eq!(value, m.store.get(m.store.id(&format!("surrogate.{rest}")).unwrap()));
                }
            }
        }
    }

    #[test]
    fn surrogate_outputs_distribution_and_ignores_masked_content() {
        let m = model();
        let s = MaskVector::new(vec![true, false, false, true]);
        let a = x(1);
        let mut b = a.clone();
        for j in 3..9 {
            b.tokens_mut().data_mut()[j] = 7.5;
        }
        let pa = m.surrogate_probs(&BatchInput::repeated(&a, std::slice::from_ref(&s)).unwrap()).unwrap();
        let pb = m.surrogate_probs(&BatchInput::repeated(&b, std::slice::from_ref(&s)).unwrap()).unwrap();
        assert!((pa.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(pa, pb);
    }

    #[test]
    fn null_value_is_input_independent() {
        let m = model();
        let none = [MaskVector::none(4)];
        let a = m.surrogate_probs(&BatchInput::repeated(&x(5), &none).unwrap()).unwrap();
        assert_eq!(a.data(), m.null_value().unwrap().as_slice());
    }

    #[test]
    fn combined_matches_separate_paths() {
        let m = model();
        let clf_logits = {
            let clf = Classifier { net: m.backbone.clone(), store: m.store.clone() };
            clf.logits(&BatchInput::new(&[&x(9)], None).unwrap()).unwrap()
        };
        let combined = CombinedModel::new(m.clone()).unwrap();
        let out = combined.explain(&x(9)).unwrap();
        assert_eq!(out.logits, clf_logits);
        let raw = m.explainer_raw(&BatchInput::new(&[&x(9)], None).unwrap()).unwrap();
        assert_eq!(out.raw, raw);
        assert_eq!(out.attribution.shape(), &[4, 3]);
        for c in 0..3 {
            let total: f64 = (0..4).map(|j| out.attribution.row(j)[c]).sum();
            let gap = out.full_value.row(0)[c] - out.null_value[c];
            assert!((total - gap).abs() < 1e-12);
        }
    }

    #[test]
    fn explainer_rejects_masks_and_missing_branch() {
        let clf = Classifier::<f64>::new(&cfg(), 1).unwrap();
        let m = SideTunedModel::with_surrogate(&clf, 2, 3, 2).unwrap();
        let input = BatchInput::new(&[&x(1)], None).unwrap();
        assert!(matches!(m.explainer_raw(&input), Err(Error::Role { .. })));
        assert!(CombinedModel::new(m).is_err());
        let m = model();
        let masked = BatchInput::repeated(&x(1), &[MaskVector::all(4)]).unwrap();
        assert!(m.explainer_raw(&masked).is_err());
    }

    #[test]
    fn backbone_is_frozen_in_side_models() {
        let m = model();
        for (id, name, _) in m.store.iter() {
            let trainable = m.store.is_trainable(id);
            assert_eq!(trainable, name.starts_with("explainer."), "{name}");
        }
        assert!(m.store.iter().any(|(_, n, _)| n.starts_with(BACKBONE)));
    }
}
