//! Promptable segmentation network: a patch-transformer image encoder with a
//! high-resolution convolutional stem, a prompt encoder, and either a
//! prompt-conditioned mask decoder or a plain prompt-free head. Low-rank
//! adapters can be attached to every query and value projection.

mod checkpoint;
mod net;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::grid::{Image, Mask};
use crate::prompt::PromptSet;
use crate::rng::{derive_seed, seeded};
use crate::tensor::Tensor;

pub use checkpoint::{
    checkpoint_digest, load_checkpoint, read_checkpoint, save_checkpoint, weights_digest, write_checkpoint,
    CHECKPOINT_SCHEMA_VERSION,
};
pub use net::{Binder, ForwardOutput};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    PlainConvHead,
    PromptDecoder,
}

impl DecoderKind {
    pub fn name(self) -> &'static str {
        match self {
            DecoderKind::PlainConvHead => "plain_conv_head",
            DecoderKind::PromptDecoder => "prompt_decoder",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: (usize, usize),
    pub patch_size: usize,
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub attention_heads: usize,
    pub mlp_ratio: usize,
    pub decoder_kind: DecoderKind,
    pub lora_rank: usize,
    pub lora_scale: f32,
    pub binarize_threshold: f32,
    /// Channels of the full-resolution stem, including the raw normalised image.
    pub skip_channels: usize,
    /// Channels each token contributes per pixel when unpatchified.
    pub up_channels: usize,
    pub head_channels: usize,
    /// Seed of the frozen base encoder weights, shared by every model built
    /// from this config (the stand-in for a pretrained backbone).
    pub base_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: (256, 256),
            patch_size: 16,
            embed_dim: 96,
            encoder_layers: 6,
            attention_heads: 4,
            mlp_ratio: 4,
            decoder_kind: DecoderKind::PromptDecoder,
            lora_rank: 4,
            lora_scale: 1.0,
            binarize_threshold: 0.5,
            skip_channels: 8,
            up_channels: 4,
            head_channels: 8,
            base_seed: 0x5EED_BA5E,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if self.patch_size == 0 || h == 0 || w == 0 || h % self.patch_size != 0 || w % self.patch_size != 0 {
            return Err(Error::param("model.image_size", "height and width must be divisible by patch_size"));
        }
        if self.attention_heads == 0 || self.embed_dim % self.attention_heads != 0 {
            return Err(Error::param("model.embed_dim", "must be divisible by attention_heads"));
        }
        if self.embed_dim % 4 != 0 {
            return Err(Error::param("model.embed_dim", "must be divisible by 4 (positional encoding)"));
        }
        if self.skip_channels < 2 || self.up_channels == 0 || self.head_channels == 0 || self.mlp_ratio == 0 {
            return Err(Error::param("model.channels", "skip_channels >= 2, other widths >= 1"));
        }
        if !(self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0) {
            return Err(Error::param("model.binarize_threshold", "must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_size.0 / self.patch_size, self.image_size.1 / self.patch_size)
    }

    pub fn tokens(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }
}

/// Which component a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    PromptEncoder,
    Decoder,
    Lora,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub group: ParamGroup,
    pub value: Tensor,
    pub trainable: bool,
}

/// All weights of one network. Cloning deep-copies every tensor, so two
/// states never share storage.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    config: ModelConfig,
    params: BTreeMap<String, Param>,
}

/// Dense `[cells, embed_dim]` embedding plus the full-resolution stem features.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEmbedding {
    pub grid_h: usize,
    pub grid_w: usize,
    pub grid: Tensor,
    pub skip: Tensor,
}

impl ImageEmbedding {
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.grid_h, self.grid_w, self.grid.cols())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptEmbedding {
    /// `[tokens, embed_dim]`, never empty.
    pub tokens: Tensor,
}

impl PromptEmbedding {
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Pre-sigmoid scores over the full frame.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskLogits {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl MaskLogits {
    pub fn probabilities(&self) -> Vec<f64> {
        self.values.iter().map(|&v| crate::losses::sigmoid(v as f64)).collect()
    }
}

/// 1 where `sigmoid(logit) >= threshold`.
pub fn binarize(logits: &MaskLogits, threshold: f32) -> Result<Mask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::param("threshold", "must lie in (0, 1)"));
    }
    let t = threshold as f64;
    let data = logits
        .values
        .iter()
        .map(|&v| u8::from(crate::losses::sigmoid(v as f64) >= t))
        .collect();
    Mask::from_vec(logits.height, logits.width, data)
}

fn linear_init(rng: &mut rand_chacha::ChaCha8Rng, fan_in: usize, fan_out: usize, gain: f32) -> Tensor {
    Tensor::randn(&[fan_in, fan_out], gain / (fan_in as f32).sqrt(), rng)
}

impl ModelState {
    /// Fresh network. Encoder weights come from `config.base_seed`; prompt
    /// encoder and decoder weights from `init_seed`.
    pub fn new(config: ModelConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = BTreeMap::new();
        let d = config.embed_dim;
        let p2 = config.patch_size * config.patch_size;
        let hidden = d * config.mlp_ratio;
        let mut put = |name: String, group: ParamGroup, value: Tensor| {
            params.insert(name, Param { group, value, trainable: true });
        };

        let mut rng = seeded(config.base_seed);
        put("enc.patch.w".into(), ParamGroup::Encoder, linear_init(&mut rng, p2, d, 1.0));
        put("enc.patch.b".into(), ParamGroup::Encoder, Tensor::zeros(&[d]));
        put("enc.pos".into(), ParamGroup::Encoder, Tensor::randn(&[config.tokens(), d], 0.02, &mut rng));
        put(
            "enc.stem.w".into(),
            ParamGroup::Encoder,
            Tensor::randn(&[config.skip_channels - 1, 9], 1.0 / 3.0, &mut rng),
        );
        put(
            "enc.stem.b".into(),
            ParamGroup::Encoder,
            Tensor::randn(&[config.skip_channels - 1], 0.1, &mut rng),
        );
        for i in 0..config.encoder_layers {
            for ln in ["ln1", "ln2"] {
                put(format!("enc.{i}.{ln}.g"), ParamGroup::Encoder, Tensor::full(&[d], 1.0));
                put(format!("enc.{i}.{ln}.b"), ParamGroup::Encoder, Tensor::zeros(&[d]));
            }
            for proj in ["q", "k", "v", "o"] {
                put(format!("enc.{i}.attn.{proj}.w"), ParamGroup::Encoder, linear_init(&mut rng, d, d, 1.0));
                put(format!("enc.{i}.attn.{proj}.b"), ParamGroup::Encoder, Tensor::zeros(&[d]));
            }
            put(format!("enc.{i}.mlp.fc1.w"), ParamGroup::Encoder, linear_init(&mut rng, d, hidden, 1.0));
            put(format!("enc.{i}.mlp.fc1.b"), ParamGroup::Encoder, Tensor::zeros(&[hidden]));
            put(format!("enc.{i}.mlp.fc2.w"), ParamGroup::Encoder, linear_init(&mut rng, hidden, d, 0.5));
            put(format!("enc.{i}.mlp.fc2.b"), ParamGroup::Encoder, Tensor::zeros(&[d]));
        }
        put("enc.ln_out.g".into(), ParamGroup::Encoder, Tensor::full(&[d], 1.0));
        put("enc.ln_out.b".into(), ParamGroup::Encoder, Tensor::zeros(&[d]));

        let mut rng = seeded(derive_seed(init_seed, 0xDEC0));
        put(
            "prm.type".into(),
            ParamGroup::PromptEncoder,
            Tensor::randn(&[net::PROMPT_TYPES, d], 1.0, &mut rng),
        );

        let mut dec = |name: &str, value: Tensor| put(format!("dec.{name}"), ParamGroup::Decoder, value);
        if config.decoder_kind == DecoderKind::PromptDecoder {
            dec("mask_token", Tensor::randn(&[1, d], 1.0, &mut rng));
            for attn in ["t2i", "i2t", "final"] {
                for proj in ["q", "k", "v", "o"] {
                    dec(&format!("{attn}.{proj}.w"), linear_init(&mut rng, d, d, 1.0));
                    dec(&format!("{attn}.{proj}.b"), Tensor::zeros(&[d]));
                }
                dec(&format!("{attn}.ln.g"), Tensor::full(&[d], 1.0));
                dec(&format!("{attn}.ln.b"), Tensor::zeros(&[d]));
            }
            let ch = config.head_channels;
            dec("hyper.fc1.w", linear_init(&mut rng, d, d, 1.0));
            dec("hyper.fc1.b", Tensor::zeros(&[d]));
            dec("hyper.fc2.w", linear_init(&mut rng, d, ch, 0.5));
            dec("hyper.fc2.b", Tensor::zeros(&[ch]));
        }
        dec("mlp.fc1.w", linear_init(&mut rng, d, hidden, 1.0));
        dec("mlp.fc1.b", Tensor::zeros(&[hidden]));
        dec("mlp.fc2.w", linear_init(&mut rng, hidden, d, 0.5));
        dec("mlp.fc2.b", Tensor::zeros(&[d]));
        dec("ln.g", Tensor::full(&[d], 1.0));
        dec("ln.b", Tensor::zeros(&[d]));
        let up = p2 * config.up_channels;
        dec("up.w", linear_init(&mut rng, d, up, 1.0));
        dec("up.b", Tensor::zeros(&[up]));
        let c_in = config.up_channels + config.skip_channels;
        let ch = config.head_channels;
        dec("conv1.w", Tensor::randn(&[ch, c_in * 9], (2.0 / (c_in * 9) as f32).sqrt(), &mut rng));
        dec("conv1.b", Tensor::zeros(&[ch]));
        dec("conv2.w", Tensor::randn(&[ch, ch * 9], (2.0 / (ch * 9) as f32).sqrt(), &mut rng));
        dec("conv2.b", Tensor::zeros(&[ch]));
        dec("out.w", Tensor::randn(&[1, ch], (1.0 / ch as f32).sqrt(), &mut rng));
        dec("out.b", Tensor::full(&[1], -2.0));

        Ok(ModelState { config, params })
    }

    /// Fresh network that takes every tensor of `foundation` with a matching
    /// name and shape; the rest is initialised as in [`ModelState::new`].
    /// Adapters are never copied. The encoder must match completely.
    pub fn from_foundation(config: ModelConfig, foundation: &ModelState, init_seed: u64) -> Result<Self> {
        let mut state = ModelState::new(config, init_seed)?;
        for (name, p) in state.params.iter_mut() {
            match foundation.params.get(name) {
                Some(f) if f.group != ParamGroup::Lora && f.value.shape() == p.value.shape() => {
                    p.value = f.value.clone();
                }
                _ if p.group == ParamGroup::Encoder => {
                    return Err(Error::Checkpoint(format!("foundation lacks a compatible `{name}`")));
                }
                _ => {}
            }
        }
        Ok(state)
    }

    pub(crate) fn from_parts(config: ModelConfig, params: BTreeMap<String, Param>) -> Result<Self> {
        config.validate()?;
        Ok(ModelState { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Param> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Param> {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn group(&self, group: ParamGroup) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter().filter(move |(_, p)| p.group == group)
    }

    pub fn has_lora(&self) -> bool {
        self.params.values().any(|p| p.group == ParamGroup::Lora)
    }

    pub fn trainable_count(&self) -> usize {
        self.params.values().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Attach zero-initialised adapters to every query/value projection and
    /// make the base encoder immutable.
    pub fn attach_lora(&mut self, rank: usize, scale: f32, seed: u64) -> Result<()> {
        if rank == 0 {
            return Err(Error::param("lora_rank", "must be at least 1"));
        }
        if self.has_lora() {
            return Err(Error::AdaptersAlreadyAttached);
        }
        if self.config.encoder_layers == 0 {
            return Err(Error::param("encoder_layers", "no attention layers to adapt"));
        }
        let d = self.config.embed_dim;
        let mut rng = seeded(derive_seed(seed, 0x10AA));
        for i in 0..self.config.encoder_layers {
            for proj in ["q", "v"] {
                self.params.insert(
                    format!("lora.{i}.{proj}.a"),
                    Param {
                        group: ParamGroup::Lora,
                        value: Tensor::randn(&[rank, d], 1.0 / (d as f32).sqrt(), &mut rng),
                        trainable: true,
                    },
                );
                self.params.insert(
                    format!("lora.{i}.{proj}.b"),
                    Param {
                        group: ParamGroup::Lora,
                        value: Tensor::zeros(&[d, rank]),
                        trainable: true,
                    },
                );
            }
        }
        self.config.lora_rank = rank;
        self.config.lora_scale = scale;
        for p in self.params.values_mut() {
            p.trainable = p.group != ParamGroup::Encoder;
        }
        Ok(())
    }

    /// Mark the encoder adapters immutable.
    pub fn freeze_adapters(&mut self) {
        for p in self.params.values_mut() {
            if p.group == ParamGroup::Lora {
                p.trainable = false;
            }
        }
    }

    /// Mark every tensor immutable.
    pub fn freeze_all(&mut self) {
        for p in self.params.values_mut() {
            p.trainable = false;
        }
    }

    /// `W + (scale / rank) · B · A` for projection `proj` ("q" or "v") of
    /// encoder layer `layer`, in `[in, out]` layout.
    pub fn effective_projection(&self, layer: usize, proj: &str) -> Result<Tensor> {
        let w = self
            .param(&format!("enc.{layer}.attn.{proj}.w"))
            .ok_or_else(|| Error::param("layer", format!("no projection {layer}.{proj}")))?;
        let mut out = w.value.clone();
        if let (Some(a), Some(b)) = (
            self.param(&format!("lora.{layer}.{proj}.a")),
            self.param(&format!("lora.{layer}.{proj}.b")),
        ) {
            let mut delta = b.value.matmul(&a.value);
            delta.scale_assign(self.lora_factor());
            out.add_assign(&delta);
        }
        Ok(out)
    }

    pub(crate) fn lora_factor(&self) -> f32 {
        if self.config.lora_rank == 0 {
            0.0
        } else {
            self.config.lora_scale / self.config.lora_rank as f32
        }
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        if image.dims() != self.config.image_size {
            return Err(Error::shape(
                format!("{:?}", self.config.image_size),
                format!("{:?}", image.dims()),
            ));
        }
        Ok(())
    }

    pub fn encode_image(&self, image: &Image) -> Result<ImageEmbedding> {
        self.check_image(image)?;
        let mut tape = Tape::new();
        let mut b = Binder::frozen(self);
        let (grid, skip) = b.encode(&mut tape, image);
        let (gh, gw) = self.config.grid();
        Ok(ImageEmbedding {
            grid_h: gh,
            grid_w: gw,
            grid: tape.value(grid).clone(),
            skip: tape.value(skip).clone(),
        })
    }

    pub fn encode_prompts(&self, prompts: &PromptSet) -> Result<PromptEmbedding> {
        let (h, w) = self.config.image_size;
        prompts.check_bounds(h, w)?;
        let mut tape = Tape::new();
        let mut b = Binder::frozen(self);
        let tokens = b.encode_prompts(&mut tape, prompts);
        Ok(PromptEmbedding {
            tokens: tape.value(tokens).clone(),
        })
    }

    fn check_embedding(&self, z: &ImageEmbedding) -> Result<()> {
        let (gh, gw) = self.config.grid();
        let (h, w) = self.config.image_size;
        if z.shape() != (gh, gw, self.config.embed_dim)
            || z.grid.rows() != gh * gw
            || z.skip.rows() != self.config.skip_channels
            || z.skip.cols() != h * w
        {
            return Err(Error::shape(
                format!("({gh}, {gw}, {})", self.config.embed_dim),
                format!("{:?}", z.shape()),
            ));
        }
        Ok(())
    }

    pub fn decode_mask(&self, z: &ImageEmbedding, e: &PromptEmbedding) -> Result<MaskLogits> {
        if self.config.decoder_kind != DecoderKind::PromptDecoder {
            return Err(Error::WrongDecoder {
                expected: DecoderKind::PromptDecoder.name(),
                actual: self.config.decoder_kind.name(),
            });
        }
        self.check_embedding(z)?;
        if e.is_empty() || e.tokens.cols() != self.config.embed_dim {
            return Err(Error::shape(format!("[T>0, {}]", self.config.embed_dim), format!("{:?}", e.tokens.shape())));
        }
        let mut tape = Tape::new();
        let mut b = Binder::frozen(self);
        let grid = tape.constant(z.grid.clone());
        let skip = tape.constant(z.skip.clone());
        let tokens = tape.constant(e.tokens.clone());
        let logits = b.prompt_decode(&mut tape, grid, skip, tokens);
        Ok(self.logits_of(&tape, logits))
    }

    pub fn plain_decode(&self, z: &ImageEmbedding) -> Result<MaskLogits> {
        if self.config.decoder_kind != DecoderKind::PlainConvHead {
            return Err(Error::WrongDecoder {
                expected: DecoderKind::PlainConvHead.name(),
                actual: self.config.decoder_kind.name(),
            });
        }
        self.check_embedding(z)?;
        let mut tape = Tape::new();
        let mut b = Binder::frozen(self);
        let grid = tape.constant(z.grid.clone());
        let skip = tape.constant(z.skip.clone());
        let logits = b.plain_decode(&mut tape, grid, skip);
        Ok(self.logits_of(&tape, logits))
    }

    fn logits_of(&self, tape: &Tape, v: crate::autograd::Var) -> MaskLogits {
        let (h, w) = self.config.image_size;
        MaskLogits {
            height: h,
            width: w,
            values: tape.value(v).data().to_vec(),
        }
    }

    /// End-to-end inference. For the prompt decoder an empty (or absent)
    /// prompt set selects the no-prompt token.
    pub fn predict(&self, image: &Image, prompts: Option<&PromptSet>) -> Result<MaskLogits> {
        self.check_image(image)?;
        if let Some(p) = prompts {
            let (h, w) = self.config.image_size;
            p.check_bounds(h, w)?;
        }
        let mut tape = Tape::new();
        let mut b = Binder::frozen(self);
        let out = b.forward(&mut tape, image, prompts);
        Ok(self.logits_of(&tape, out.logits))
    }
}

#[cfg(test)]
mod tests;
