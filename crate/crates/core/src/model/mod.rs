//! Vision Transformer encoder, masked-token decoder and classifier head.
//!
//! Layout follows the masked-autoencoder lineage: learned positional
//! embeddings, no class token, pre-norm blocks, mean-pooled classification.
//! The reconstruction stream embeds only visible patches and adds the
//! positional embeddings gathered at their indices; the decoder re-inserts a
//! learned mask token at every masked position.

mod checkpoint;
mod params;
mod preset;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use params::{BoundParams, Init, ParamStore};
pub use preset::{backbone_preset, BackbonePreset, PRESET_NAMES, TOY_PRESETS};

use crate::autodiff::{Graph, Var};
use crate::config::{ExperimentConfig, Modality};
use crate::error::{Error, Result};
use crate::patch::{unpatchify, ImageTensor, MaskPlan, PatchSet};
use crate::rng::RngKey;
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;

/// Data-dependent sizes of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelShape {
    pub patch_size: usize,
    pub channels: usize,
    /// Tokens per sample of the full (unmasked) input.
    pub tokens: usize,
    pub num_outputs: usize,
    pub reconstruct: Vec<Modality>,
    pub shared_encoder: bool,
}

impl ModelShape {
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            patch_size: cfg.patch_size,
            channels: 3,
            tokens: cfg.tokens(),
            num_outputs: cfg.num_outputs(),
            reconstruct: cfg.triplet.reconstruct.clone(),
            shared_encoder: cfg.shared_encoder,
        }
    }
}

/// Which of the two encoder passes is running.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Classification,
    Reconstruction,
}

/// Forward mode. Training enables drop path, driven by `key`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train(RngKey),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormVars {
    pub scale: Var,
    pub shift: Var,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockVars {
    pub norm1: NormVars,
    pub q: LinearVars,
    pub k: LinearVars,
    pub v: LinearVars,
    pub proj: LinearVars,
    pub norm2: NormVars,
    pub fc1: LinearVars,
    pub fc2: LinearVars,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderVars {
    pub patch_embed: LinearVars,
    pub pos_embed: Var,
    pub blocks: Vec<BlockVars>,
    pub norm: NormVars,
    pub heads: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderVars {
    pub embed: LinearVars,
    pub mask_token: Var,
    pub pos_embed: Var,
    pub blocks: Vec<BlockVars>,
    pub norm: NormVars,
    pub heads: usize,
    pub preds: Vec<(Modality, LinearVars)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadVars {
    pub linear: LinearVars,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LssatModel {
    preset: BackbonePreset,
    shape: ModelShape,
    drop_path: f64,
    params: ParamStore,
}

fn encoder_prefix(shared: bool, stream: Stream) -> &'static str {
    match (shared, stream) {
        (false, Stream::Reconstruction) => "encoder_rec",
        _ => "encoder",
    }
}

fn register_linear(ps: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, key: RngKey) {
    ps.register(&format!("{name}.weight"), &[fan_in, fan_out], Init::XavierUniform, key);
    ps.register(&format!("{name}.bias"), &[fan_out], Init::Zeros, key);
}

fn register_norm(ps: &mut ParamStore, name: &str, dim: usize, key: RngKey) {
    ps.register(&format!("{name}.scale"), &[dim], Init::Ones, key);
    ps.register(&format!("{name}.shift"), &[dim], Init::Zeros, key);
}

fn register_block(ps: &mut ParamStore, name: &str, dim: usize, mlp_ratio: usize, key: RngKey) {
    register_norm(ps, &format!("{name}.norm1"), dim, key);
    for part in ["q", "k", "v", "proj"] {
        register_linear(ps, &format!("{name}.attn.{part}"), dim, dim, key);
    }
    register_norm(ps, &format!("{name}.norm2"), dim, key);
    register_linear(ps, &format!("{name}.mlp.fc1"), dim, dim * mlp_ratio, key);
    register_linear(ps, &format!("{name}.mlp.fc2"), dim * mlp_ratio, dim, key);
}

fn bind_linear(b: &BoundParams, name: &str) -> Result<LinearVars> {
    Ok(LinearVars {
        weight: b.var(&format!("{name}.weight"))?,
        bias: b.var(&format!("{name}.bias"))?,
    })
}

fn bind_norm(b: &BoundParams, name: &str) -> Result<NormVars> {
    Ok(NormVars {
        scale: b.var(&format!("{name}.scale"))?,
        shift: b.var(&format!("{name}.shift"))?,
    })
}

fn bind_block(b: &BoundParams, name: &str) -> Result<BlockVars> {
    Ok(BlockVars {
        norm1: bind_norm(b, &format!("{name}.norm1"))?,
        q: bind_linear(b, &format!("{name}.attn.q"))?,
        k: bind_linear(b, &format!("{name}.attn.k"))?,
        v: bind_linear(b, &format!("{name}.attn.v"))?,
        proj: bind_linear(b, &format!("{name}.attn.proj"))?,
        norm2: bind_norm(b, &format!("{name}.norm2"))?,
        fc1: bind_linear(b, &format!("{name}.mlp.fc1"))?,
        fc2: bind_linear(b, &format!("{name}.mlp.fc2"))?,
    })
}

impl LssatModel {
    /// Builds a freshly initialized model. `preset.depth` may be zero here,
    /// giving an encoder of patch embedding, positions and final norm only.
    pub fn new(preset: BackbonePreset, shape: ModelShape, drop_path: f64, seed: u64) -> Result<Self> {
        preset.validate_dims()?;
        if shape.reconstruct.is_empty() {
            return Err(Error::Config("at least one reconstruction target".into()));
        }
        let key = RngKey::new(seed).stream("init");
        let mut ps = ParamStore::new();
        let (d, dd, pd, s) = (
            preset.embed_dim,
            preset.decoder_dim,
            shape.patch_dim(),
            shape.tokens,
        );
        let prefixes: &[&str] = if shape.shared_encoder {
            &["encoder"]
        } else {
            &["encoder", "encoder_rec"]
        };
        for prefix in prefixes {
            register_linear(&mut ps, &format!("{prefix}.patch_embed"), pd, d, key);
            ps.register(&format!("{prefix}.pos_embed"), &[s, d], Init::TruncNormal(INIT_STD), key);
            for i in 0..preset.depth {
                register_block(&mut ps, &format!("{prefix}.blocks.{i}"), d, preset.mlp_ratio, key);
            }
            register_norm(&mut ps, &format!("{prefix}.norm"), d, key);
        }
        register_linear(&mut ps, "decoder.embed", d, dd, key);
        ps.register("decoder.mask_token", &[1, dd], Init::Zeros, key);
        ps.register("decoder.pos_embed", &[s, dd], Init::TruncNormal(INIT_STD), key);
        for i in 0..preset.decoder_depth {
            register_block(&mut ps, &format!("decoder.blocks.{i}"), dd, preset.mlp_ratio, key);
        }
        register_norm(&mut ps, "decoder.norm", dd, key);
        for m in &shape.reconstruct {
            register_linear(&mut ps, &pred_name(*m), dd, pd, key);
        }
        register_linear(&mut ps, "head", d, shape.num_outputs, key);
        Ok(Self {
            preset,
            shape,
            drop_path,
            params: ps,
        })
    }

    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        let preset = backbone_preset(&cfg.preset)?;
        preset.validate()?;
        Self::new(preset, ModelShape::from_config(cfg), cfg.drop_path, cfg.seed)
    }

    pub fn preset(&self) -> &BackbonePreset {
        &self.preset
    }

    pub fn shape(&self) -> &ModelShape {
        &self.shape
    }

    pub fn drop_path(&self) -> f64 {
        self.drop_path
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn encoder_vars(&self, b: &BoundParams, stream: Stream) -> Result<EncoderVars> {
        let prefix = encoder_prefix(self.shape.shared_encoder, stream);
        Ok(EncoderVars {
            patch_embed: bind_linear(b, &format!("{prefix}.patch_embed"))?,
            pos_embed: b.var(&format!("{prefix}.pos_embed"))?,
            blocks: (0..self.preset.depth)
                .map(|i| bind_block(b, &format!("{prefix}.blocks.{i}")))
                .collect::<Result<_>>()?,
            norm: bind_norm(b, &format!("{prefix}.norm"))?,
            heads: self.preset.heads,
        })
    }

    pub fn decoder_vars(&self, b: &BoundParams) -> Result<DecoderVars> {
        Ok(DecoderVars {
            embed: bind_linear(b, "decoder.embed")?,
            mask_token: b.var("decoder.mask_token")?,
            pos_embed: b.var("decoder.pos_embed")?,
            blocks: (0..self.preset.decoder_depth)
                .map(|i| bind_block(b, &format!("decoder.blocks.{i}")))
                .collect::<Result<_>>()?,
            norm: bind_norm(b, "decoder.norm")?,
            heads: self.preset.decoder_heads,
            preds: self
                .shape
                .reconstruct
                .iter()
                .map(|&m| Ok((m, bind_linear(b, &pred_name(m))?)))
                .collect::<Result<_>>()?,
        })
    }

    pub fn head_vars(&self, b: &BoundParams) -> Result<HeadVars> {
        Ok(HeadVars {
            linear: bind_linear(b, "head")?,
        })
    }

    /// Eval-mode logits for a batch of standardized images of the
    /// classification modality (see [`crate::train::standardize`]).
    pub fn predict_logits(&self, x: &ImageTensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let enc = self.encoder_vars(&bound, Stream::Classification)?;
        let head = self.head_vars(&bound)?;
        let patches = crate::patch::patchify(x, self.shape.patch_size)?;
        let tokens = g.constant(patches.to_tensor());
        let latent = encode(&mut g, &enc, tokens, None, Mode::Eval, 0.0)?;
        let logits = classify(&mut g, &head, latent)?;
        Ok(g.value(logits).clone())
    }
}

fn pred_name(m: Modality) -> String {
    match m {
        Modality::Rgb => "decoder.pred_rgb".into(),
        Modality::Ldp => "decoder.pred_ldp".into(),
    }
}

pub fn linear(g: &mut Graph, x: Var, l: &LinearVars) -> Result<Var> {
    let y = g.matmul(x, l.weight)?;
    g.add(y, l.bias)
}

fn dims3(g: &Graph, x: Var) -> Result<(usize, usize, usize)> {
    match *g.value(x).shape() {
        [b, s, d] => Ok((b, s, d)),
        ref other => Err(Error::InconsistentDims(format!(
            "expected B x S x D tokens, got {other:?}"
        ))),
    }
}

/// Multi-head self-attention over `x: [B, S, D]`.
pub fn self_attention(g: &mut Graph, x: Var, blk: &BlockVars, heads: usize) -> Result<Var> {
    let (b, s, d) = dims3(g, x)?;
    let dh = d / heads;
    let split = |g: &mut Graph, l: &LinearVars| -> Result<Var> {
        let y = linear(g, x, l)?;
        let y = g.reshape(y, vec![b, s, heads, dh])?;
        g.transpose(y, 1, 2)
    };
    let q = split(g, &blk.q)?;
    let k = split(g, &blk.k)?;
    let v = split(g, &blk.v)?;
    let kt = g.transpose(k, 2, 3)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let attn = g.softmax(scores)?;
    let out = g.matmul(attn, v)?;
    let out = g.transpose(out, 1, 2)?;
    let out = g.reshape(out, vec![b, s, d])?;
    linear(g, out, &blk.proj)
}

/// Per-sample stochastic depth on a residual branch `[B, S, D]`.
fn drop_path(g: &mut Graph, branch: Var, rate: f64, key: Option<RngKey>) -> Result<Var> {
    let Some(key) = key else { return Ok(branch) };
    if rate <= 0.0 {
        return Ok(branch);
    }
    use rand::Rng;
    let shape = g.value(branch).shape().to_vec();
    let per_sample: usize = shape[1..].iter().product();
    let mut mask = Vec::with_capacity(shape.iter().product());
    for b in 0..shape[0] {
        let keep = key.child(b as u64).rng().gen::<f64>() >= rate;
        let v = if keep { 1.0 / (1.0 - rate) } else { 0.0 };
        mask.extend(std::iter::repeat_n(v, per_sample));
    }
    let mask = g.constant(Tensor::new(shape, mask)?);
    g.mul(branch, mask)
}

/// Pre-norm transformer block.
pub fn transformer_block(
    g: &mut Graph,
    x: Var,
    blk: &BlockVars,
    heads: usize,
    rate: f64,
    key: Option<RngKey>,
) -> Result<Var> {
    let h = g.layer_norm(x, blk.norm1.scale, blk.norm1.shift)?;
    let a = self_attention(g, h, blk, heads)?;
    let a = drop_path(g, a, rate, key.map(|k| k.stream("attn")))?;
    let x = g.add(x, a)?;
    let h = g.layer_norm(x, blk.norm2.scale, blk.norm2.shift)?;
    let h = linear(g, h, &blk.fc1)?;
    let h = g.gelu(h)?;
    let m = linear(g, h, &blk.fc2)?;
    let m = drop_path(g, m, rate, key.map(|k| k.stream("mlp")))?;
    g.add(x, m)
}

/// Encodes patch tokens `[B, S', patch_dim]`.
///
/// `positions` lists, per sample, the token index of each input row (the
/// visible indices of a mask plan). `None` means the input is the full token
/// sequence in order.
pub fn encode(
    g: &mut Graph,
    enc: &EncoderVars,
    tokens: Var,
    positions: Option<&[Vec<usize>]>,
    mode: Mode,
    drop_rate: f64,
) -> Result<Var> {
    let (b, s_in, _) = dims3(g, tokens)?;
    let table_len = g.value(enc.pos_embed).shape()[0];
    let x = linear(g, tokens, &enc.patch_embed)?;
    let x = match positions {
        None => {
            if s_in != table_len {
                return Err(Error::InconsistentDims(format!(
                    "{s_in} tokens for {table_len} positions"
                )));
            }
            g.add(x, enc.pos_embed)?
        }
        Some(pos) => {
            if pos.len() != b || pos.iter().any(|r| r.len() != s_in) {
                return Err(Error::PlanMismatch(format!(
                    "positions do not describe {b}x{s_in} tokens"
                )));
            }
            let p = g.gather(enc.pos_embed, pos.to_vec(), true)?;
            g.add(x, p)?
        }
    };
    let mut x = x;
    for (i, blk) in enc.blocks.iter().enumerate() {
        let key = match mode {
            Mode::Train(k) => Some(k.child(i as u64)),
            Mode::Eval => None,
        };
        x = transformer_block(g, x, blk, enc.heads, drop_rate, key)?;
    }
    g.layer_norm(x, enc.norm.scale, enc.norm.shift)
}

/// Decodes visible-token latents into per-modality patch predictions
/// `[B, S, patch_dim]`, one per reconstruction target.
pub fn decode(
    g: &mut Graph,
    dec: &DecoderVars,
    latent: Var,
    plan: &MaskPlan,
) -> Result<Vec<(Modality, Var)>> {
    let (b, s_vis, _) = dims3(g, latent)?;
    if b != plan.batch || s_vis != plan.visible_per_sample() {
        return Err(Error::PlanMismatch(format!(
            "latent {b}x{s_vis} vs plan {}x{} visible",
            plan.batch,
            plan.visible_per_sample()
        )));
    }
    let y = linear(g, latent, &dec.embed)?;
    let mut full = g.scatter(y, plan.visible.clone(), plan.tokens)?;
    if plan.masked_per_sample() > 0 {
        let zeros = vec![vec![0usize; plan.masked_per_sample()]; b];
        let tok = g.gather(dec.mask_token, zeros, true)?;
        let tok = g.scatter(tok, plan.masked.clone(), plan.tokens)?;
        full = g.add(full, tok)?;
    }
    let mut x = g.add(full, dec.pos_embed)?;
    for blk in &dec.blocks {
        x = transformer_block(g, x, blk, dec.heads, 0.0, None)?;
    }
    let x = g.layer_norm(x, dec.norm.scale, dec.norm.shift)?;
    dec.preds
        .iter()
        .map(|(m, l)| Ok((*m, linear(g, x, l)?)))
        .collect()
}

/// Reassembles decoder patch predictions into an image tensor.
pub fn tokens_to_image(
    pred: &Tensor,
    patch_size: usize,
    channels: usize,
    dims: [usize; 5],
) -> Result<ImageTensor> {
    unpatchify(&PatchSet::from_tensor(pred, patch_size, channels)?, dims)
}

/// Mean-pools `[B, S, D]` over tokens and maps to logits.
pub fn classify(g: &mut Graph, head: &HeadVars, latent: Var) -> Result<Var> {
    let _ = dims3(g, latent)?;
    let pooled = g.mean_axis(latent, 1)?;
    linear(g, pooled, &head.linear)
}
