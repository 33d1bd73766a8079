//! Image encoder → projector → image-prefixed causal decoder.
//!
//! The encoder splits the image into non-overlapping patches, embeds them
//! linearly, adds learned positions and runs a bidirectional layer-norm/GELU
//! transformer stack. A linear projector maps its features into the decoder's
//! embedding space, where they are placed as pseudo-tokens between an `IMG`
//! marker and the `BOS` that starts the question:
//!
//! ```text
//! [IMG] [img_0 .. img_{P-1}] [BOS] [question ...] [answer ... EOS]
//! ```
//!
//! The decoder is an RMS-norm/SiLU causal stack with learned absolute
//! positions and an untied output head.

use serde::{Deserialize, Serialize};

use crate::data::tokenizer::{BOS, EOS, IMG, PAD, VOCAB_SIZE};
use crate::data::GrayImage;
use crate::error::{Error, Result};
use crate::lora::{self, LoraAdapter, LoraConfig};
use crate::nn::{positional_embedding, Activation, BlockConfig, LinearMap, Norm, TransformerBlock};
use crate::params::{matches_any, Initializer, ParamStore, INIT_STD};
use crate::tensor::{NormKind, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisionConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
}

impl Default for VisionConfig {
    fn default() -> Self {
        VisionConfig {
            image_size: 32,
            channels: 1,
            patch_size: 8,
            embed_dim: 32,
            depth: 2,
            num_heads: 4,
        }
    }
}

impl VisionConfig {
    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    fn block(&self) -> BlockConfig {
        BlockConfig {
            embed_dim: self.embed_dim,
            num_heads: self.num_heads,
            ff_multiplier: 4,
            causal: false,
            norm_kind: NormKind::LayerNorm,
            activation: Activation::Gelu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels != 1 {
            return Err(Error::Config("only single-channel images are supported".into()));
        }
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} is not a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        self.block().validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub context_len: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            vocab_size: VOCAB_SIZE,
            embed_dim: 64,
            depth: 4,
            num_heads: 4,
            context_len: 256,
        }
    }
}

impl LmConfig {
    fn block(&self) -> BlockConfig {
        BlockConfig {
            embed_dim: self.embed_dim,
            num_heads: self.num_heads,
            ff_multiplier: 4,
            causal: true,
            norm_kind: NormKind::RmsNorm,
            activation: Activation::Silu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < VOCAB_SIZE {
            return Err(Error::Config(format!(
                "vocab_size {} cannot hold the byte tokenizer ({VOCAB_SIZE})",
                self.vocab_size
            )));
        }
        if self.context_len < 3 {
            return Err(Error::Config("context_len must be at least 3".into()));
        }
        self.block().validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationParams {
    pub max_new_tokens: usize,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams { max_new_tokens: 16 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisionTower {
    pub patch_embed: LinearMap,
    pub blocks: Vec<TransformerBlock>,
    pub final_norm: Norm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageModel {
    pub blocks: Vec<TransformerBlock>,
    pub final_norm: Norm,
    pub head: LinearMap,
}

pub const VISION_POS: &str = "vision.pos_embed";
pub const LM_TOKENS: &str = "lm.tok_embed";
pub const LM_POS: &str = "lm.pos_embed";

/// Which part of the fused sequence a position belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Zone {
    /// `IMG` marker and projected image features.
    Prefix,
    /// `BOS` and question tokens.
    Question,
    Answer,
}

#[derive(Debug, Clone)]
pub struct FusedSequence {
    /// `[len × lm.embed_dim]` token embeddings, before positions are added.
    pub embeddings: Var,
    pub zones: Vec<Zone>,
}

impl FusedSequence {
    pub fn len(&self) -> usize {
        self.zones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.zones.is_empty()
    }
}

/// One training or evaluation example in token form.
#[derive(Debug, Clone, Copy)]
pub struct VqaSample<'a> {
    /// `None` trains the decoder on text alone (empty image prefix).
    pub image: Option<&'a GrayImage>,
    pub question_ids: &'a [usize],
    /// Answer tokens ending in `EOS`, optionally followed by `PAD`s.
    pub answer_ids: &'a [usize],
}

#[derive(Debug, Clone, PartialEq)]
pub struct VlmModel {
    pub vision_cfg: VisionConfig,
    pub lm_cfg: LmConfig,
    pub seed: u64,
    pub vision: VisionTower,
    pub projector: LinearMap,
    pub lm: LanguageModel,
    pub params: ParamStore,
    /// Present once adapters have been attached.
    pub lora: Option<LoraConfig>,
}

impl VlmModel {
    /// Fresh model: weights `N(0, 0.02)`, biases zero, norm gains one.
    pub fn new(vision_cfg: VisionConfig, lm_cfg: LmConfig, seed: u64) -> Result<Self> {
        vision_cfg.validate()?;
        lm_cfg.validate()?;
        let mut params = ParamStore::new();
        let mut init = Initializer::new(seed);

        let vb = vision_cfg.block();
        let patch_embed = LinearMap::init(
            &mut params,
            &mut init,
            "vision.patch_embed",
            vision_cfg.patch_dim(),
            vision_cfg.embed_dim,
            true,
        )?;
        params.insert(
            VISION_POS,
            init.normal(&[vision_cfg.num_patches(), vision_cfg.embed_dim], INIT_STD)
                .with_requires_grad(true),
        )?;
        let vblocks = (0..vision_cfg.depth)
            .map(|i| TransformerBlock::init(&mut params, &mut init, &format!("vision.blocks.{i}"), &vb))
            .collect::<Result<Vec<_>>>()?;
        let vnorm = Norm::init(
            &mut params,
            "vision.final_norm",
            NormKind::LayerNorm,
            vision_cfg.embed_dim,
        )?;

        let projector = LinearMap::init(
            &mut params,
            &mut init,
            "projector",
            vision_cfg.embed_dim,
            lm_cfg.embed_dim,
            true,
        )?;

        let lb = lm_cfg.block();
        params.insert(
            LM_TOKENS,
            init.normal(&[lm_cfg.vocab_size, lm_cfg.embed_dim], INIT_STD)
                .with_requires_grad(true),
        )?;
        params.insert(
            LM_POS,
            init.normal(&[lm_cfg.context_len, lm_cfg.embed_dim], INIT_STD)
                .with_requires_grad(true),
        )?;
        let lblocks = (0..lm_cfg.depth)
            .map(|i| TransformerBlock::init(&mut params, &mut init, &format!("lm.blocks.{i}"), &lb))
            .collect::<Result<Vec<_>>>()?;
        let lnorm = Norm::init(&mut params, "lm.final_norm", NormKind::RmsNorm, lm_cfg.embed_dim)?;
        let head = LinearMap::init(
            &mut params,
            &mut init,
            "lm.head",
            lm_cfg.embed_dim,
            lm_cfg.vocab_size,
            false,
        )?;

        Ok(VlmModel {
            vision_cfg,
            lm_cfg,
            seed,
            vision: VisionTower {
                patch_embed,
                blocks: vblocks,
                final_norm: vnorm,
            },
            projector,
            lm: LanguageModel {
                blocks: lblocks,
                final_norm: lnorm,
                head,
            },
            params,
            lora: None,
        })
    }

    /// Rebuilds a model around an existing parameter set (e.g. from a checkpoint).
    /// Adapters are re-attached for every selected map whose tensors are present.
    pub fn from_params(
        vision_cfg: VisionConfig,
        lm_cfg: LmConfig,
        seed: u64,
        lora: Option<LoraConfig>,
        params: ParamStore,
    ) -> Result<Self> {
        let mut model = VlmModel::new(vision_cfg, lm_cfg, seed)?;
        for (name, t) in model.params.iter() {
            let got = params
                .get(name)
                .ok_or_else(|| Error::Integrity(format!("parameter `{name}` missing")))?;
            if got.shape() != t.shape() {
                return Err(Error::Integrity(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if let Some(cfg) = &lora {
            for map in model.linear_maps_mut() {
                if matches_any(&cfg.target_selectors, &map.name) && params.contains(&lora::lora_a_name(&map.name)) {
                    map.adapter = Some(LoraAdapter {
                        rank: cfg.rank,
                        scaling: cfg.scaling(),
                    });
                }
            }
        }
        model.params = params;
        model.lora = lora;
        Ok(model)
    }

    pub fn linear_maps_mut(&mut self) -> Vec<&mut LinearMap> {
        let mut maps = vec![&mut self.vision.patch_embed];
        for b in &mut self.vision.blocks {
            maps.extend(b.linear_maps_mut());
        }
        maps.push(&mut self.projector);
        for b in &mut self.lm.blocks {
            maps.extend(b.linear_maps_mut());
        }
        maps.push(&mut self.lm.head);
        maps
    }

    /// Attaches low-rank adapters; every other parameter becomes frozen.
    pub fn attach_lora(&mut self, cfg: &LoraConfig) -> Result<usize> {
        if self.lora.is_some() {
            return Err(Error::Config("adapters are already attached".into()));
        }
        let mut init = Initializer::new(self.seed ^ 0x4c6f_5241);
        let mut params = std::mem::take(&mut self.params);
        let result = lora::attach(self.linear_maps_mut(), &mut params, cfg, &mut init);
        self.params = params;
        let n = result?;
        self.lora = Some(cfg.clone());
        Ok(n)
    }

    /// Folds every adapter into its base weight. Returns how many were merged.
    pub fn merge_lora(&mut self) -> Result<usize> {
        let mut params = std::mem::take(&mut self.params);
        let mut merged = 0;
        let mut result = Ok(());
        for map in self.linear_maps_mut() {
            if map.adapter.is_some() {
                if let Err(e) = lora::merge(map, &mut params) {
                    result = Err(e);
                    break;
                }
                merged += 1;
            }
        }
        self.params = params;
        result?;
        if merged == 0 {
            return Err(Error::Contract("no adapters attached".into()));
        }
        self.lora = None;
        Ok(merged)
    }

    /// `(total, trainable)` element counts.
    pub fn count_parameters(&self) -> (usize, usize) {
        self.params.count()
    }

    /// Patch features `[P × vision.embed_dim]`.
    pub fn encode_image(&self, tape: &mut Tape, image: &GrayImage) -> Result<Var> {
        let cfg = &self.vision_cfg;
        if image.width != cfg.image_size || image.height != cfg.image_size {
            return Err(Error::shape(
                "encode_image",
                &[image.height, image.width],
                &[cfg.image_size, cfg.image_size],
            ));
        }
        let patches = tape.constant(patchify(image, cfg.patch_size));
        let mut h = self.vision.patch_embed.forward(tape, &self.params, patches)?;
        let pos = positional_embedding(tape, &self.params, VISION_POS, cfg.num_patches())?;
        h = tape.add(h, pos)?;
        for b in &self.vision.blocks {
            h = b.forward(tape, &self.params, h)?;
        }
        self.vision.final_norm.forward(tape, &self.params, h)
    }

    /// Builds `[IMG] projector(features) [BOS] question`. `features` of `None`
    /// gives an empty image prefix.
    pub fn fuse(&self, tape: &mut Tape, features: Option<Var>, question_ids: &[usize]) -> Result<FusedSequence> {
        let p = features.map_or(0, |f| tape.shape(f)[0]);
        let needed = p + question_ids.len() + 2;
        if needed > self.lm_cfg.context_len {
            return Err(Error::ContextLength {
                needed,
                max: self.lm_cfg.context_len,
            });
        }
        let table = tape.param(&self.params, LM_TOKENS)?;
        let mut parts = vec![tape.embedding(table, &[IMG])?];
        if let Some(f) = features {
            parts.push(self.projector.forward(tape, &self.params, f)?);
        }
        let mut text = Vec::with_capacity(question_ids.len() + 1);
        text.push(BOS);
        text.extend_from_slice(question_ids);
        parts.push(tape.embedding(table, &text)?);
        let embeddings = tape.concat_rows(&parts)?;
        let mut zones = vec![Zone::Prefix; 1 + p];
        zones.extend(std::iter::repeat_n(Zone::Question, text.len()));
        Ok(FusedSequence { embeddings, zones })
    }

    /// Appends token embeddings (answer zone) to a fused sequence.
    pub fn extend_with_tokens(&self, tape: &mut Tape, seq: FusedSequence, ids: &[usize]) -> Result<FusedSequence> {
        if ids.is_empty() {
            return Ok(seq);
        }
        let table = tape.param(&self.params, LM_TOKENS)?;
        let emb = tape.embedding(table, ids)?;
        let embeddings = tape.concat_rows(&[seq.embeddings, emb])?;
        let mut zones = seq.zones;
        zones.extend(std::iter::repeat_n(Zone::Answer, ids.len()));
        Ok(FusedSequence { embeddings, zones })
    }

    /// Decoder logits `[T × vocab]` for input embeddings `[T × d]`.
    pub fn decode(&self, tape: &mut Tape, embeddings: Var) -> Result<Var> {
        let t = tape.shape(embeddings)[0];
        let pos = positional_embedding(tape, &self.params, LM_POS, t)?;
        let mut h = tape.add(embeddings, pos)?;
        for b in &self.lm.blocks {
            h = b.forward(tape, &self.params, h)?;
        }
        let h = self.lm.final_norm.forward(tape, &self.params, h)?;
        self.lm.head.forward(tape, &self.params, h)
    }

    /// Decoder logits for a plain token sequence (no image features).
    pub fn token_logits(&self, tape: &mut Tape, ids: &[usize]) -> Result<Var> {
        if ids.len() > self.lm_cfg.context_len {
            return Err(Error::ContextLength {
                needed: ids.len(),
                max: self.lm_cfg.context_len,
            });
        }
        let table = tape.param(&self.params, LM_TOKENS)?;
        let emb = tape.embedding(table, ids)?;
        self.decode(tape, emb)
    }

    /// Mean next-token loss over the answer tokens of one sample, recorded on `tape`.
    /// Returns the loss node and the number of supervised tokens.
    pub fn sample_loss(&self, tape: &mut Tape, sample: &VqaSample<'_>) -> Result<(Var, usize)> {
        let answer = sample.answer_ids;
        let supervised = supervised_len(answer)?;
        let features = sample.image.map(|img| self.encode_image(tape, img)).transpose()?;
        let seq = self.fuse(tape, features, sample.question_ids)?;
        let prefix_len = seq.len();
        // Teacher forcing: every answer token except the last is also an input.
        let seq = self.extend_with_tokens(tape, seq, &answer[..answer.len() - 1])?;
        if seq.len() > self.lm_cfg.context_len {
            return Err(Error::ContextLength {
                needed: seq.len(),
                max: self.lm_cfg.context_len,
            });
        }
        let logits = self.decode(tape, seq.embeddings)?;
        let mut targets = vec![0; seq.len()];
        let mut mask = vec![false; seq.len()];
        for (j, &tok) in answer.iter().enumerate() {
            let pos = prefix_len - 1 + j;
            targets[pos] = tok;
            mask[pos] = j < supervised;
        }
        Ok((tape.cross_entropy(logits, &targets, &mask)?, supervised))
    }

    /// Mean over the batch of per-sample mean answer losses (forward only).
    pub fn forward_loss(&self, batch: &[VqaSample<'_>]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyObjective);
        }
        let mut total = 0.0;
        for s in batch {
            let mut tape = Tape::new();
            let (loss, _) = self.sample_loss(&mut tape, s)?;
            total += tape.item(loss);
        }
        Ok(total / batch.len() as f64)
    }

    /// Greedy decoding. Stops after `EOS` (not returned) or `max_new_tokens`.
    pub fn generate(
        &self,
        image: Option<&GrayImage>,
        question_ids: &[usize],
        params: &GenerationParams,
    ) -> Result<Vec<usize>> {
        if params.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be at least 1".into()));
        }
        let p = image.map_or(0, |_| self.vision_cfg.num_patches());
        let needed = p + question_ids.len() + 2 + params.max_new_tokens;
        if needed > self.lm_cfg.context_len {
            return Err(Error::ContextLength {
                needed,
                max: self.lm_cfg.context_len,
            });
        }
        // Image features do not depend on generated tokens; compute them once.
        let features = match image {
            Some(img) => {
                let mut tape = Tape::new();
                let f = self.encode_image(&mut tape, img)?;
                Some(tape.value(f).clone())
            }
            None => None,
        };
        let mut out = Vec::new();
        for _ in 0..params.max_new_tokens {
            let mut tape = Tape::new();
            let f = features.clone().map(|t| tape.constant(t));
            let seq = self.fuse(&mut tape, f, question_ids)?;
            let seq = self.extend_with_tokens(&mut tape, seq, &out)?;
            let logits = self.decode(&mut tape, seq.embeddings)?;
            let v = tape.value(logits);
            let next = argmax(v.row(v.rows() - 1));
            if next == EOS {
                break;
            }
            out.push(next);
        }
        Ok(out)
    }

    /// Mean-pooled image features, `[1 × vision.embed_dim]`.
    pub fn pooled_image_features(&self, tape: &mut Tape, image: &GrayImage) -> Result<Var> {
        let f = self.encode_image(tape, image)?;
        tape.mean_rows(f)
    }
}

/// Number of answer positions that are supervised: everything up to and
/// including the first `EOS`. Anything after it must be `PAD`.
fn supervised_len(answer: &[usize]) -> Result<usize> {
    if answer.is_empty() {
        return Err(Error::EmptyObjective);
    }
    let eos = answer
        .iter()
        .position(|&t| t == EOS)
        .ok_or_else(|| Error::Contract("answer ids must terminate with EOS".into()))?;
    if answer[eos + 1..].iter().any(|&t| t != PAD) {
        return Err(Error::Contract("only PAD may follow EOS in answer ids".into()));
    }
    Ok(eos + 1)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Non-overlapping `patch × patch` tiles in row-major tile order, each
/// flattened row-major: `[P × patch²]`.
pub fn patchify(image: &GrayImage, patch: usize) -> Tensor {
    let side = image.width / patch;
    let mut data = Vec::with_capacity(image.pixels.len());
    for ty in 0..image.height / patch {
        for tx in 0..side {
            for y in 0..patch {
                for x in 0..patch {
                    data.push(image.get(tx * patch + x, ty * patch + y));
                }
            }
        }
    }
    Tensor::new(vec![side * (image.height / patch), patch * patch], data).expect("tiles cover image")
}

/// Answer text to token ids terminated by `EOS`.
pub fn answer_ids(answer: &str) -> Vec<usize> {
    let mut ids = crate::data::tokenize(answer);
    ids.push(EOS);
    ids
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lowest_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0]), 0);
    }

    #[test]
    fn patch_layout() {
        let img = GrayImage::new(4, 4, (0..16).map(|v| v as f64).collect()).unwrap();
        let p = patchify(&img, 2);
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(3), &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn answer_validation() {
        assert!(matches!(supervised_len(&[]), Err(Error::EmptyObjective)));
        assert!(supervised_len(&[1, 2]).is_err());
        assert_eq!(supervised_len(&[1, EOS, PAD, PAD]).unwrap(), 2);
        assert!(supervised_len(&[1, EOS, 5]).is_err());
    }

    #[test]
    fn default_dimensions() {
        let v = VisionConfig::default();
        assert_eq!(v.num_patches(), 16);
        assert!(VisionConfig { patch_size: 5, ..v }.validate().is_err());
    }
}
