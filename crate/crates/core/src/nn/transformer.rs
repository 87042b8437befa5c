//! Encoder-only transformer classifier with attention-mask feature removal.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::layers::{normal_tensor, Init, LayerNorm, Linear, MsaBlock};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of transformer blocks.
    pub depth: usize,
    pub hidden: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    /// Feature tokens per sample, excluding the class token.
    pub num_tokens: usize,
    pub token_input_dim: usize,
    pub num_classes: usize,
    #[serde(default = "default_true")]
    pub positional: bool,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.depth == 0 || self.hidden == 0 || self.heads == 0 || self.token_input_dim == 0 {
            return bad(format!("depth, hidden, heads and token_input_dim must be positive: {self:?}"));
        }
        if self.hidden % self.heads != 0 {
            return bad(format!("hidden {} is not divisible by heads {}", self.hidden, self.heads));
        }
        if self.num_tokens < 2 {
            return bad(format!("need at least two feature tokens, got {}", self.num_tokens));
        }
        if self.num_classes < 2 {
            return bad(format!("need at least two classes, got {}", self.num_classes));
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return bad(format!("mlp_ratio must be positive, got {}", self.mlp_ratio));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.hidden as f64).round() as usize
    }

    /// Sequence length seen by attention (feature tokens plus class token).
    pub fn seq_len(&self) -> usize {
        self.num_tokens + 1
    }
}

/// Indicator over feature tokens; `true` keeps the token. The class token
/// has no bit and is never removed.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskVector {
    bits: Vec<bool>,
}

impl MaskVector {
    pub fn new(bits: Vec<bool>) -> Self {
        MaskVector { bits }
    }

    pub fn all(d: usize) -> Self {
        MaskVector { bits: vec![true; d] }
    }

    pub fn none(d: usize) -> Self {
        MaskVector { bits: vec![false; d] }
    }

    /// Little-endian bitmask: bit `i` is feature `i`.
    pub fn from_bits(bits: u64, d: usize) -> Self {
        assert!(d <= 64, "bitmask form supports at most 64 players");
        MaskVector { bits: (0..d).map(|i| bits >> i & 1 == 1).collect() }
    }

    pub fn to_bits(&self) -> u64 {
        assert!(self.bits.len() <= 64, "bitmask form supports at most 64 players");
        self.bits.iter().enumerate().fold(0, |acc, (i, &b)| acc | (b as u64) << i)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn set(&mut self, i: usize, keep: bool) {
        self.bits[i] = keep;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn complement(&self) -> Self {
        MaskVector { bits: self.bits.iter().map(|b| !b).collect() }
    }
}

/// One sample: `num_tokens` feature vectors of width `token_input_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T> {
    tokens: Tensor<T>,
}

impl<T: Scalar> TokenSequence<T> {
    pub fn new(tokens: Tensor<T>) -> Result<Self> {
        if tokens.shape().len() != 2 {
            return Err(Error::shape("token_sequence", format!("expected [d, dim], got {:?}", tokens.shape())));
        }
        Ok(TokenSequence { tokens })
    }

    pub fn from_f32(d: usize, dim: usize, values: &[f32]) -> Result<Self> {
        let data = values.iter().map(|&v| T::from_f64_lossy(v as f64)).collect();
        Self::new(Tensor::new(vec![d, dim], data)?)
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn tokens(&self) -> &Tensor<T> {
        &self.tokens
    }

    pub fn tokens_mut(&mut self) -> &mut Tensor<T> {
        &mut self.tokens
    }
}

/// Packed batch ready for the encoder.
#[derive(Clone, Debug)]
pub struct BatchInput<T> {
    pub tokens: Tensor<T>,
    /// Key mask over `batch·(num_tokens+1)` rows; `None` keeps everything.
    pub keep: Option<Vec<bool>>,
    pub batch: usize,
    pub num_tokens: usize,
}

impl<T: Scalar> BatchInput<T> {
    /// Pair each sequence with an optional mask (`None` = unmasked batch).
    pub fn new(seqs: &[&TokenSequence<T>], masks: Option<&[MaskVector]>) -> Result<Self> {
        let first = seqs.first().ok_or_else(|| Error::contract("empty batch"))?;
        let (d, dim) = (first.num_tokens(), first.dim());
        let mut data = Vec::with_capacity(seqs.len() * d * dim);
        for s in seqs {
            if s.num_tokens() != d || s.dim() != dim {
                return Err(Error::shape("batch", "sequences differ in shape"));
            }
            data.extend_from_slice(s.tokens.data());
        }
        let keep = match masks {
            None => None,
            Some(ms) => {
                if ms.len() != seqs.len() {
                    return Err(Error::contract(format!("{} masks for {} sequences", ms.len(), seqs.len())));
                }
                Some(pack_keep(ms, d)?)
            }
        };
        Ok(BatchInput { tokens: Tensor::new(vec![seqs.len() * d, dim], data)?, keep, batch: seqs.len(), num_tokens: d })
    }

    /// The same sequence under many masks.
    pub fn repeated(seq: &TokenSequence<T>, masks: &[MaskVector]) -> Result<Self> {
        let seqs = vec![seq; masks.len()];
        Self::new(&seqs, Some(masks))
    }
}

pub(crate) fn pack_keep(masks: &[MaskVector], d: usize) -> Result<Vec<bool>> {
    let mut keep = Vec::with_capacity(masks.len() * (d + 1));
    for m in masks {
        if m.len() != d {
            return Err(Error::contract(format!("mask length {} does not match {d} tokens", m.len())));
        }
        keep.push(true);
        keep.extend_from_slice(m.bits());
    }
    Ok(keep)
}

/// Encoder weights (handles into a [`ParamStore`]).
#[derive(Clone, Debug)]
pub struct Transformer {
    pub config: ModelConfig,
    pub embed: Linear,
    pub cls: ParamId,
    pub pos: Option<ParamId>,
    pub blocks: Vec<MsaBlock>,
    pub norm: LayerNorm,
    pub head: Linear,
}

impl Transformer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        config: &ModelConfig,
        trainable: bool,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let init = Init::Xavier;
        let embed = Linear::new(store, &format!("{prefix}.embed"), config.token_input_dim, h, init, trainable, rng)?;
        let cls = store.add(format!("{prefix}.cls"), normal_tensor(rng, &[h], 0.02), trainable)?;
        let pos = if config.positional {
            Some(store.add(format!("{prefix}.pos"), normal_tensor(rng, &[config.seq_len(), h], 0.02), trainable)?)
        } else {
            None
        };
        let blocks = (0..config.depth)
            .map(|i| {
                MsaBlock::new(store, &format!("{prefix}.block{i}"), h, config.heads, config.mlp_hidden(), init, trainable, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(store, &format!("{prefix}.norm"), h, trainable)?;
        let head = Linear::new(store, &format!("{prefix}.head"), h, config.num_classes, init, trainable, rng)?;
        Ok(Transformer { config: config.clone(), embed, cls, pos, blocks, norm, head })
    }

    /// Run all blocks; returns the post-residual state after every block,
    /// each `[batch·(d+1), hidden]` with the class token at row 0 of each sample.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, input: &BatchInput<T>) -> Result<Vec<Var>> {
        let cfg = &self.config;
        if input.num_tokens != cfg.num_tokens || input.tokens.cols() != cfg.token_input_dim {
            return Err(Error::shape(
                "encode",
                format!(
                    "input has {} tokens of width {}, model expects {} of width {}",
                    input.num_tokens,
                    input.tokens.cols(),
                    cfg.num_tokens,
                    cfg.token_input_dim
                ),
            ));
        }
        let x = g.constant(input.tokens.clone());
        let e = self.embed.forward(g, store, x)?;
        let cls = g.param(store, self.cls);
        let mut z = g.with_class_token(e, cls, input.batch, cfg.num_tokens)?;
        if let Some(pos) = self.pos {
            let p = g.param(store, pos);
            z = g.add_tiled(z, p)?;
        }
        let mut states = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            z = block.forward(g, store, z, input.keep.as_deref(), input.batch, cfg.seq_len())?;
            states.push(z);
        }
        Ok(states)
    }

    /// Classification head on the class-token row of the last state: `[batch, classes]`.
    pub fn classify<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, last: Var, batch: usize) -> Result<Var> {
        let seq = self.config.seq_len();
        let rows: Vec<usize> = (0..batch).map(|b| b * seq).collect();
        let cls_rows = g.select_rows(last, &rows)?;
        let u = self.norm.forward(g, store, cls_rows)?;
        self.head.forward(g, store, u)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, input: &BatchInput<T>) -> Result<Var> {
        let states = self.encode(g, store, input)?;
        let last = *states.last().expect("depth >= 1");
        self.classify(g, store, last, input.batch)
    }
}

/// Exact parameter count of a classifier built from `config`.
pub fn count_params(config: &ModelConfig) -> usize {
    let h = config.hidden;
    let embed = config.token_input_dim * h + h;
    let pos = if config.positional { config.seq_len() * h } else { 0 };
    embed + h + pos + config.depth * MsaBlock::count(h, config.mlp_hidden()) + 2 * h + h * config.num_classes + config.num_classes
}

/// A standalone classifier: encoder plus its own parameter store.
#[derive(Clone, Debug)]
pub struct Classifier<T> {
    pub net: Transformer,
    pub store: ParamStore<T>,
}

pub const BACKBONE: &str = "backbone";

impl<T: Scalar> Classifier<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Transformer::new(&mut store, BACKBONE, config, true, &mut rng)?;
        Ok(Classifier { net, store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    /// Logits `[batch, classes]` without recording gradients.
    pub fn logits(&self, input: &BatchInput<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let out = self.net.forward(&mut g, &self.store, input)?;
        Ok(g.value(out).clone())
    }

    /// Logits for one sample under one mask.
    pub fn forward(&self, x: &TokenSequence<T>, s: &MaskVector) -> Result<Vec<T>> {
        let input = BatchInput::new(&[x], Some(std::slice::from_ref(s)))?;
        Ok(self.logits(&input)?.into_data())
    }

    /// Class-token representation after every block, for similarity analysis.
    pub fn class_token_states(&self, input: &BatchInput<T>) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::inference();
        let states = self.net.encode(&mut g, &self.store, input)?;
        let seq = self.config().seq_len();
        let rows: Vec<usize> = (0..input.batch).map(|b| b * seq).collect();
        states
            .into_iter()
            .map(|s| {
                let r = g.select_rows(s, &rows)?;
                Ok(g.value(r).clone())
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    fn tiny() -> ModelConfig {
        ModelConfig {
            depth: 2,
            hidden: 8,
            heads: 2,
            mlp_ratio: 2.0,
            num_tokens: 5,
            token_input_dim: 3,
            num_classes: 3,
            positional: true,
        }
    }

    fn sample(seed: u64, cfg: &ModelConfig) -> TokenSequence<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TokenSequence::new(normal_tensor(&mut rng, &[cfg.num_tokens, cfg.token_input_dim], 1.0)).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.num_tokens = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn count_matches_store() {
        let cfg = tiny();
        let m = Classifier::<f32>::new(&cfg, 1).unwrap();
        assert_eq!(m.store.num_scalars(), count_params(&cfg));
    }

    #[test]
    fn hand_counted_minimal_model() {
        // h = 2, one block, one head, no embedding table beyond a 1-wide input,
        // no positions, two classes.
        let cfg = ModelConfig {
            depth: 1,
            hidden: 2,
            heads: 1,
            mlp_ratio: 1.0,
            num_tokens: 2,
            token_input_dim: 1,
            num_classes: 2,
            positional: false,
        };
        // embed 1*2+2, cls 2, block: ln 4 + qkv 2*6+6 + proj 2*2+2 + ln 4 + fc1 2*2+2 + fc2 2*2+2 = 44,
        // final ln 4, head 2*2+2
        assert_eq!(count_params(&cfg), 4 + 2 + 44 + 4 + 6);
    }

    #[test]
    fn fresh_model_gives_finite_logits() {
        let cfg = tiny();
        let m = Classifier::<f32>::new(&cfg, 7).unwrap();
        let logits = m.forward(&sample(3, &cfg), &MaskVector::all(cfg.num_tokens)).unwrap();
        assert_eq!(logits.len(), 3);
        assert!(logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn masked_token_content_is_invisible() {
        let cfg = tiny();
        let m = Classifier::<f32>::new(&cfg, 9).unwrap();
        let x = sample(4, &cfg);
        let s = MaskVector::new(vec![true, false, true, false, true]);
        let mut x2 = x.clone();
        for j in 0..cfg.token_input_dim {
            x2.tokens_mut().data_mut()[cfg.token_input_dim + j] = 100.0;
            x2.tokens_mut().data_mut()[3 * cfg.token_input_dim + j] = -42.0;
        }
        let a = m.forward(&x, &s).unwrap();
        let b = m.forward(&x2, &s).unwrap();
        assert_eq!(a, b);
        // and the mask does matter
        let c = m.forward(&x2, &MaskVector::all(cfg.num_tokens)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn wrong_mask_length_is_rejected() {
        let cfg = tiny();
        let m = Classifier::<f32>::new(&cfg, 9).unwrap();
        assert!(m.forward(&sample(1, &cfg), &MaskVector::all(4)).is_err());
    }

    #[test]
    fn batched_equals_single() {
        let cfg = tiny();
        let m = Classifier::<f64>::new(&cfg, 2).unwrap();
        let xs: Vec<TokenSequence<f64>> = (0..3)
            .map(|i| {
                let s = sample(i, &cfg);
                TokenSequence::new(s.tokens().cast()).unwrap()
            })
            .collect();
        let masks = vec![
            MaskVector::all(5),
            MaskVector::new(vec![false, true, true, false, true]),
            MaskVector::none(5),
        ];
        let refs: Vec<&TokenSequence<f64>> = xs.iter().collect();
        let batched = m.logits(&BatchInput::new(&refs, Some(&masks)).unwrap()).unwrap();
        for i in 0..3 {
            let single = m.forward(&xs[i], &masks[i]).unwrap();
            for (a, b) in batched.row(i).iter().zip(&single) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_flow_to_all_parameters() {
        let cfg = tiny();
        let m = Classifier::<f64>::new(&cfg, 5).unwrap();
        let x = TokenSequence::new(sample(1, &cfg).tokens().cast()).unwrap();
        let input = BatchInput::new(&[&x], None).unwrap();
        let mut g = Graph::new();
        let out = m.net.forward(&mut g, &m.store, &input).unwrap();
        let sq = g.square(out).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        for id in m.store.ids() {
            assert!(grads.param(id).is_some(), "{}", m.store.name(id));
        }
    }
}
