//! The vision-language model: a patch encoder standing in for the
//! convolutional backbone, a two-layer adapter, and a decoder-only language
//! model with cross-attention inserted after self-attention at selected
//! layers.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionBlock, AttentionConfig, AttentionRecord};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const IMAGE_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    /// Decoder layers that receive a cross-attention block.
    pub cross_attn_indices: Vec<usize>,
    /// Visual grid `[h, w]`; `h * w` visual tokens.
    pub visual_grid: [usize; 2],
    /// Image `[H, W]` in pixels.
    pub image_size: [usize; 2],
    pub patch_size: usize,
    /// Width of the encoder feature map.
    pub encoder_width: usize,
    /// Hidden width of every MLP.
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 16,
            d_model: 64,
            n_heads: 4,
            vocab_size: 64,
            cross_attn_indices: vec![2, 6, 10, 14],
            visual_grid: [8, 8],
            image_size: [32, 32],
            patch_size: 4,
            encoder_width: 64,
            d_ff: 128,
            max_seq_len: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        AttentionConfig::new(self.d_model, self.n_heads)?;
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_layers == 0 || self.vocab_size == 0 || self.max_seq_len == 0 {
            return bad("n_layers, vocab_size and max_seq_len must be positive".into());
        }
        if self.d_ff == 0 || self.encoder_width == 0 || self.patch_size == 0 {
            return bad("d_ff, encoder_width and patch_size must be positive".into());
        }
        let unique: BTreeSet<_> = self.cross_attn_indices.iter().collect();
        if unique.len() != self.cross_attn_indices.len() {
            return bad("cross_attn_indices contains duplicates".into());
        }
        if let Some(i) = self.cross_attn_indices.iter().find(|&&i| i >= self.n_layers) {
            return bad(format!(
                "cross-attention index {i} outside [0, {})",
                self.n_layers
            ));
        }
        let [ih, iw] = self.image_size;
        let [gh, gw] = self.visual_grid;
        if ih % self.patch_size != 0 || iw % self.patch_size != 0 {
            return bad(format!(
                "image {ih}x{iw} not a multiple of patch {}",
                self.patch_size
            ));
        }
        if ih / self.patch_size != gh || iw / self.patch_size != gw {
            return bad(format!(
                "visual grid {gh}x{gw} does not match image {ih}x{iw} / patch {}",
                self.patch_size
            ));
        }
        Ok(())
    }

    pub fn n_visual_tokens(&self) -> usize {
        self.visual_grid[0] * self.visual_grid[1]
    }

    pub fn patch_dim(&self) -> usize {
        IMAGE_CHANNELS * self.patch_size * self.patch_size
    }

    /// Sorted cross-attention layer indices.
    pub fn cross_layers(&self) -> Vec<usize> {
        let mut v = self.cross_attn_indices.clone();
        v.sort_unstable();
        v
    }

    /// Closed-form parameter count; see the README for the derivation.
    pub fn expected_param_count(&self) -> usize {
        let (d, f, e, v) = (self.d_model, self.d_ff, self.encoder_width, self.vocab_size);
        let (p, n, s) = (self.patch_dim(), self.n_visual_tokens(), self.max_seq_len);
        let mlp = d * f + f + f * d + d;
        let encoder = p * e + e + n * e + e * e + e;
        let adapter = e * d + d + d * d + d;
        let embed = v * d + s * d;
        let layer = 2 * (2 * d) + 4 * d * d + mlp;
        let cross = 4 * d * d + 2 * d + mlp;
        let head = 2 * d + d * v;
        encoder
            + adapter
            + embed
            + self.n_layers * layer
            + self.cross_attn_indices.len() * cross
            + head
    }
}

/// Three-channel image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    /// `[3 × H × W]`.
    pub pixels: Tensor,
}

impl ImageGrid {
    pub fn new(pixels: Tensor) -> Result<Self> {
        if pixels.rank() != 3 || pixels.shape()[0] != IMAGE_CHANNELS {
            return Err(Error::shape(format!(
                "image must be [3×H×W], got {:?}",
                pixels.shape()
            )));
        }
        if let Some(v) = pixels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("pixel value {v} outside [0,1]")));
        }
        Ok(ImageGrid { pixels })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels.data()[(c * self.height() + y) * self.width() + x]
    }

    /// Flattens non-overlapping `patch × patch` tiles in row-major tile order;
    /// each row is laid out `(channel, dy, dx)`.
    pub fn patches(&self, patch: usize) -> Result<Tensor> {
        let (h, w) = (self.height(), self.width());
        if h % patch != 0 || w % patch != 0 {
            return Err(Error::shape(format!(
                "image {h}x{w} not divisible by patch {patch}"
            )));
        }
        let (gh, gw) = (h / patch, w / patch);
        let dim = IMAGE_CHANNELS * patch * patch;
        let mut data = Vec::with_capacity(gh * gw * dim);
        for py in 0..gh {
            for px in 0..gw {
                for c in 0..IMAGE_CHANNELS {
                    for dy in 0..patch {
                        for dx in 0..patch {
                            data.push(self.get(c, py * patch + dy, px * patch + dx));
                        }
                    }
                }
            }
        }
        Tensor::new(vec![gh * gw, dim], data)
    }
}

/// Adapter output: one row per visual grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualTokens {
    /// `[h·w × d_model]`.
    pub tokens: Tensor,
    pub grid: [usize; 2],
}

impl VisualTokens {
    pub fn new(tokens: Tensor, grid: [usize; 2]) -> Result<Self> {
        if tokens.rank() != 2 || tokens.shape()[0] != grid[0] * grid[1] {
            return Err(Error::shape(format!(
                "visual tokens {:?} do not match grid {grid:?}",
                tokens.shape()
            )));
        }
        Ok(VisualTokens { tokens, grid })
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Linear {
    pub weight: usize,
    pub bias: usize,
}

impl Linear {
    fn register(
        store: &mut ParamStore,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Linear {
            weight: store.add_normal(&format!("{prefix}.weight"), &[fan_in, fan_out], std, rng),
            bias: store.add_const(&format!("{prefix}.bias"), &[fan_out], 0.0),
        }
    }

    pub fn apply(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Norm {
    gain: usize,
    bias: usize,
}

impl Norm {
    fn register(store: &mut ParamStore, prefix: &str, d: usize) -> Self {
        Norm {
            gain: store.add_const(&format!("{prefix}.gain"), &[d], 1.0),
            bias: store.add_const(&format!("{prefix}.bias"), &[d], 0.0),
        }
    }

    fn apply(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, gain, bias)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    fn apply(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.fc1.apply(g, x)?;
        let h = g.gelu(h);
        self.fc2.apply(g, h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct CrossBlock {
    attn: AttentionBlock,
    mlp_norm: Norm,
    mlp: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
struct DecoderLayer {
    index: usize,
    norm1: Norm,
    self_attn: AttentionBlock,
    cross: Option<CrossBlock>,
    norm2: Norm,
    mlp: Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Encoder {
    patch: Linear,
    pos: usize,
    /// Last linear + nonlinearity pair; partially unfrozen in stage 2.
    final_block: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Adapter {
    fc1: Linear,
    fc2: Linear,
}

/// Graph variables produced by one decoder pass.
pub struct DecoderOutput {
    /// `[T × vocab]`.
    pub logits: Var,
    /// Residual stream after the last layer, `[T × d]`.
    pub final_hidden: Var,
    /// `(layer index, per-head [T×N] weights)` in layer order.
    pub cross_weights: Vec<(usize, Vec<Var>)>,
    pub warnings: Vec<String>,
}

pub struct ForwardOutput {
    pub logits: Tensor,
    pub records: Vec<AttentionRecord>,
    pub final_hidden: Tensor,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    pub params: ParamStore,
    encoder: Encoder,
    adapter: Adapter,
    tok_embed: usize,
    pos_embed: usize,
    layers: Vec<DecoderLayer>,
    final_norm: Norm,
    lm_head: usize,
}

impl Model {
    /// Builds a freshly initialized model. Cross-attention output
    /// projections and the second layer of each cross-attention MLP start at
    /// zero, so the untrained model computes the text-only function.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, f, e) = (config.d_model, config.d_ff, config.encoder_width);
        let inv_sqrt = |n: usize| 1.0 / (n as f64).sqrt();
        let depth_scale = inv_sqrt(2 * config.n_layers);
        let attn_cfg = AttentionConfig::new(d, config.n_heads)?;

        let encoder = Encoder {
            patch: Linear::register(&mut store, "encoder.patch", config.patch_dim(), e, inv_sqrt(config.patch_dim()), &mut rng),
            pos: store.add_normal("encoder.pos", &[config.n_visual_tokens(), e], 0.5, &mut rng),
            final_block: Linear::register(&mut store, "encoder.final", e, e, inv_sqrt(e), &mut rng),
        };
        let adapter = Adapter {
            fc1: Linear::register(&mut store, "adapter.fc1", e, d, inv_sqrt(e), &mut rng),
            fc2: Linear::register(&mut store, "adapter.fc2", d, d, inv_sqrt(d), &mut rng),
        };
        let tok_embed = store.add_normal("embed.tokens", &[config.vocab_size, d], 1.0, &mut rng);
        let pos_embed = store.add_normal("embed.positions", &[config.max_seq_len, d], 0.5, &mut rng);

        let cross_at: BTreeSet<usize> = config.cross_attn_indices.iter().copied().collect();
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = format!("layers.{i}");
            let norm1 = Norm::register(&mut store, &format!("{p}.norm1"), d);
            let self_attn = AttentionBlock::register(
                &mut store,
                &format!("{p}.self_attn"),
                attn_cfg,
                inv_sqrt(d) * depth_scale,
                &mut rng,
            );
            let cross = if cross_at.contains(&i) {
                Some(CrossBlock {
                    attn: AttentionBlock::register(&mut store, &format!("{p}.cross_attn"), attn_cfg, 0.0, &mut rng),
                    mlp_norm: Norm::register(&mut store, &format!("{p}.cross_mlp_norm"), d),
                    mlp: Mlp {
                        fc1: Linear::register(&mut store, &format!("{p}.cross_mlp.fc1"), d, f, inv_sqrt(d), &mut rng),
                        fc2: Linear::register(&mut store, &format!("{p}.cross_mlp.fc2"), f, d, 0.0, &mut rng),
                    },
                })
            } else {
                None
            };
            let norm2 = Norm::register(&mut store, &format!("{p}.norm2"), d);
            let mlp = Mlp {
                fc1: Linear::register(&mut store, &format!("{p}.mlp.fc1"), d, f, inv_sqrt(d), &mut rng),
                fc2: Linear::register(&mut store, &format!("{p}.mlp.fc2"), f, d, inv_sqrt(f) * depth_scale, &mut rng),
            };
            layers.push(DecoderLayer {
                index: i,
                norm1,
                self_attn,
                cross,
                norm2,
                mlp,
            });
        }
        let final_norm = Norm::register(&mut store, "final_norm", d);
        let lm_head = store.add_normal("lm_head.weight", &[d, config.vocab_size], inv_sqrt(d), &mut rng);

        Ok(Model {
            config,
            params: store,
            encoder,
            adapter,
            tok_embed,
            pos_embed,
            layers,
            final_norm,
            lm_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn graph(&self) -> Graph<'_> {
        Graph::new(self.params.as_slice())
    }

    fn check_image(&self, img: &ImageGrid) -> Result<()> {
        let [h, w] = self.config.image_size;
        if img.height() != h || img.width() != w {
            return Err(Error::shape(format!(
                "image {}x{} does not match configured {h}x{w}",
                img.height(),
                img.width()
            )));
        }
        Ok(())
    }

    /// Raw encoder features `[N × encoder_width]` on a graph.
    pub fn encoder_graph(&self, g: &mut Graph<'_>, img: &ImageGrid) -> Result<Var> {
        self.check_image(img)?;
        let patches = g.input(img.patches(self.config.patch_size)?, false);
        let x = self.encoder.patch.apply(g, patches)?;
        let pos = g.param(self.encoder.pos);
        let x = g.add(x, pos)?;
        let x = g.gelu(x);
        let x = self.encoder.final_block.apply(g, x)?;
        Ok(g.gelu(x))
    }

    /// Two linear layers with a GELU between, mapping features to `d_model`.
    pub fn adapter_graph(&self, g: &mut Graph<'_>, features: Var) -> Result<Var> {
        let (_, width) = g.value(features).matrix_dims();
        if width != self.config.encoder_width {
            return Err(Error::shape(format!(
                "adapter expects width {}, got {width}",
                self.config.encoder_width
            )));
        }
        let h = self.adapter.fc1.apply(g, features)?;
        let h = g.gelu(h);
        self.adapter.fc2.apply(g, h)
    }

    pub fn visual_graph(&self, g: &mut Graph<'_>, img: &ImageGrid) -> Result<Var> {
        let features = self.encoder_graph(g, img)?;
        self.adapter_graph(g, features)
    }

    pub fn encode_features(&self, img: &ImageGrid) -> Result<Tensor> {
        let mut g = self.graph();
        let v = self.encoder_graph(&mut g, img)?;
        Ok(g.value(v).clone())
    }

    pub fn adapt(&self, features: &Tensor) -> Result<VisualTokens> {
        let mut g = self.graph();
        let f = g.input(features.clone(), false);
        let v = self.adapter_graph(&mut g, f)?;
        VisualTokens::new(g.value(v).clone(), self.config.visual_grid)
    }

    pub fn encode_image(&self, img: &ImageGrid) -> Result<VisualTokens> {
        let mut g = self.graph();
        let v = self.visual_graph(&mut g, img)?;
        VisualTokens::new(g.value(v).clone(), self.config.visual_grid)
    }

    /// Decoder pass. With `visual = None` every cross-attention block is
    /// skipped (identity residual) and a warning is recorded.
    pub fn decoder_graph(
        &self,
        g: &mut Graph<'_>,
        tokens: &[usize],
        visual: Option<Var>,
    ) -> Result<DecoderOutput> {
        let t = tokens.len();
        if t == 0 {
            return Err(Error::shape("empty token sequence"));
        }
        if t > self.config.max_seq_len {
            return Err(Error::shape(format!(
                "sequence of {t} tokens exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        let tok_table = g.param(self.tok_embed);
        let pos_table = g.param(self.pos_embed);
        let tok = g.gather_rows(tok_table, tokens)?;
        let positions: Vec<usize> = (0..t).collect();
        let pos = g.gather_rows(pos_table, &positions)?;
        let mut x = g.add(tok, pos)?;

        let mut cross_weights = Vec::new();
        let mut warnings = Vec::new();
        for layer in &self.layers {
            let a = layer.norm1.apply(g, x)?;
            let (sa, _) = layer.self_attn.self_attention(g, a)?;
            x = g.add(x, sa)?;
            if let Some(cross) = &layer.cross {
                match visual {
                    Some(vis) => {
                        let (ca, weights) = cross.attn.cross_attention(g, x, vis)?;
                        let h_ca = g.add(x, ca)?;
                        let n = cross.mlp_norm.apply(g, h_ca)?;
                        let m = cross.mlp.apply(g, n)?;
                        x = g.add(h_ca, m)?;
                        cross_weights.push((layer.index, weights));
                    }
                    None => warnings.push(format!(
                        "layer {}: {}; cross-attention skipped",
                        layer.index,
                        Error::EmptyVisualSequence
                    )),
                }
            }
            let n = layer.norm2.apply(g, x)?;
            let m = layer.mlp.apply(g, n)?;
            x = g.add(x, m)?;
        }
        let final_hidden = x;
        let n = self.final_norm.apply(g, x)?;
        let head = g.param(self.lm_head);
        let logits = g.matmul(n, head)?;
        Ok(DecoderOutput {
            logits,
            final_hidden,
            cross_weights,
            warnings,
        })
    }

    /// Full forward pass returning concrete tensors.
    pub fn forward(
        &self,
        tokens: &[usize],
        visual: Option<&VisualTokens>,
        collect_attention: bool,
    ) -> Result<ForwardOutput> {
        let mut g = self.graph();
        let vis = match visual {
            Some(v) => {
                if v.tokens.shape()[1] != self.config.d_model {
                    return Err(Error::shape(format!(
                        "visual width {} != d_model {}",
                        v.tokens.shape()[1],
                        self.config.d_model
                    )));
                }
                Some(g.input(v.tokens.clone(), false))
            }
            None => None,
        };
        let out = self.decoder_graph(&mut g, tokens, vis)?;
        let records = if collect_attention {
            out.cross_weights
                .iter()
                .map(|(layer, heads)| AttentionRecord::from_heads(&g, *layer, heads))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(ForwardOutput {
            logits: g.value(out.logits).clone(),
            records,
            final_hidden: g.value(out.final_hidden).clone(),
            warnings: out.warnings,
        })
    }

    /// Argmax decoding; ties go to the lowest token id. Stops after
    /// `max_new` tokens, after emitting `stop`, or at `max_seq_len`.
    pub fn generate_greedy(
        &self,
        prompt: &[usize],
        visual: Option<&VisualTokens>,
        max_new: usize,
        stop: Option<usize>,
    ) -> Result<Vec<usize>> {
        if max_new == 0 {
            return Err(Error::Config("max_new must be at least 1".into()));
        }
        let mut seq = prompt.to_vec();
        let mut out = Vec::new();
        while out.len() < max_new && seq.len() < self.config.max_seq_len {
            let fwd = self.forward(&seq, visual, false)?;
            let last = fwd.logits.row(seq.len() - 1);
            let next = argmax(last);
            seq.push(next);
            out.push(next);
            if Some(next) == stop {
                break;
            }
        }
        Ok(out)
    }

    /// Next-token logits at the last prompt position.
    pub fn next_logits(&self, prompt: &[usize], visual: Option<&VisualTokens>) -> Result<Vec<f64>> {
        let fwd = self.forward(prompt, visual, false)?;
        Ok(fwd.logits.row(prompt.len() - 1).to_vec())
    }

    /// Parameter-name prefix of the encoder's final block.
    pub const ENCODER_FINAL_PREFIX: &'static str = "encoder.final.";
}

/// Index of the maximum; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
