//! Pre-norm transformer encoder/decoder over flattened pyramid features.
//!
//! The encoder refines the flattened multi-level sequence with dense
//! self-attention; positions are described by fixed 2-D sinusoidal
//! embeddings plus a learned per-level embedding (two cells at the same
//! relative location on different levels share the sinusoid, so the level
//! embedding is what tells them apart). The decoder runs self- and
//! cross-attention over the selected queries and refines each query's box
//! additively in inverse-sigmoid space, layer by layer; refined boxes are
//! detached between layers so each refinement is trained locally, while
//! the first layer stays attached to the selection head's output. Both
//! prediction heads are shared across decoder layers.
//!
//! Residual branches (attention output projections and the last layer of
//! every FFN) start at zero, so a freshly initialized block is the
//! identity map — training begins from a stable point.

use rand_chacha::ChaCha8Rng;
use std::f64::consts::TAU;

use crate::error::{Error, Result};
use crate::init::{constant, xavier, zeros, ParamVisitor};
use crate::pyramid::FlattenedFeatures;
use crate::query::QuerySet;
use crate::tensor::{attention, Tensor};

/// Sinusoid frequency base; modest because feature maps are small.
const TEMPERATURE: f64 = 20.0;
/// Layer-norm stabilizer.
const LN_EPS: f64 = 1e-5;

/// Classification logits and boxes predicted after one decoder layer.
#[derive(Debug, Clone)]
pub struct LayerPrediction {
    /// Per-query class logits, `[k, num_classes]`.
    pub class_logits: Tensor,
    /// Per-query boxes `(cx, cy, w, h)` in (0, 1), `[k, 4]`.
    pub boxes: Tensor,
}

/// Predictions from every decoder layer; the last entry is the final
/// output, earlier entries feed auxiliary losses.
#[derive(Debug, Clone)]
pub struct DecoderOutput {
    pub layers: Vec<LayerPrediction>,
}

impl DecoderOutput {
    /// The final layer's prediction.
    pub fn final_layer(&self) -> &LayerPrediction {
        self.layers.last().expect("decoder has at least one layer")
    }
}

#[derive(Debug, Clone)]
struct LayerNormParams {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNormParams {
    fn init(d: usize) -> Result<LayerNormParams> {
        Ok(LayerNormParams { gamma: constant(&[d], 1.0)?, beta: zeros(&[d])? })
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gamma, &self.beta, LN_EPS)
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
    }
}

#[derive(Debug, Clone)]
struct MultiHeadAttention {
    wq: (Tensor, Tensor),
    wk: (Tensor, Tensor),
    wv: (Tensor, Tensor),
    wo: (Tensor, Tensor), // zero-initialized: the residual branch starts silent
    heads: usize,
}

impl MultiHeadAttention {
    fn init(d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<MultiHeadAttention> {
        Ok(MultiHeadAttention {
            wq: (xavier(&[d, d], d, d, rng)?, zeros(&[d])?),
            wk: (xavier(&[d, d], d, d, rng)?, zeros(&[d])?),
            wv: (xavier(&[d, d], d, d, rng)?, zeros(&[d])?),
            wo: (zeros(&[d, d])?, zeros(&[d])?),
            heads,
        })
    }

    /// `queries/keys` carry positional information; `values` do not.
    fn attend(&self, queries: &Tensor, keys: &Tensor, values: &Tensor) -> Result<Tensor> {
        let q = queries.linear(&self.wq.0, Some(&self.wq.1))?;
        let k = keys.linear(&self.wk.0, Some(&self.wk.1))?;
        let v = values.linear(&self.wv.0, Some(&self.wv.1))?;
        attention(&q, &k, &v, self.heads)?.linear(&self.wo.0, Some(&self.wo.1))
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (name, pair) in [
            ("q", &mut self.wq),
            ("k", &mut self.wk),
            ("v", &mut self.wv),
            ("out", &mut self.wo),
        ] {
            f(format!("{prefix}.{name}.weight"), &mut pair.0);
            f(format!("{prefix}.{name}.bias"), &mut pair.1);
        }
    }
}

#[derive(Debug, Clone)]
struct FeedForward {
    fc1: (Tensor, Tensor), // d → 4d
    fc2: (Tensor, Tensor), // 4d → d, zero-initialized
}

impl FeedForward {
    fn init(d: usize, rng: &mut ChaCha8Rng) -> Result<FeedForward> {
        let hidden = 4 * d;
        Ok(FeedForward {
            fc1: (xavier(&[hidden, d], d, hidden, rng)?, zeros(&[hidden])?),
            fc2: (zeros(&[d, hidden])?, zeros(&[d])?),
        })
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.linear(&self.fc1.0, Some(&self.fc1.1))?
            .relu()?
            .linear(&self.fc2.0, Some(&self.fc2.1))
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.fc1.weight"), &mut self.fc1.0);
        f(format!("{prefix}.fc1.bias"), &mut self.fc1.1);
        f(format!("{prefix}.fc2.weight"), &mut self.fc2.0);
        f(format!("{prefix}.fc2.bias"), &mut self.fc2.1);
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    ln1: LayerNormParams,
    ln2: LayerNormParams,
    self_attn: MultiHeadAttention,
    ffn: FeedForward,
}

impl EncoderLayer {
    fn init(d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<EncoderLayer> {
        Ok(EncoderLayer {
            ln1: LayerNormParams::init(d)?,
            ln2: LayerNormParams::init(d)?,
            self_attn: MultiHeadAttention::init(d, heads, rng)?,
            ffn: FeedForward::init(d, rng)?,
        })
    }

    fn forward(&self, x: &Tensor, pos: &Tensor) -> Result<Tensor> {
        let h = self.ln1.apply(x)?;
        let qk = h.add(pos)?;
        let x = x.add(&self.self_attn.attend(&qk, &qk, &h)?)?;
        let h = self.ln2.apply(&x)?;
        x.add(&self.ffn.apply(&h)?)
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.ln1.visit(&format!("{prefix}.ln1"), f);
        self.ln2.visit(&format!("{prefix}.ln2"), f);
        self.self_attn.visit(&format!("{prefix}.self_attn"), f);
        self.ffn.visit(&format!("{prefix}.ffn"), f);
    }
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    ln1: LayerNormParams,
    ln2: LayerNormParams,
    ln3: LayerNormParams,
    self_attn: MultiHeadAttention,
    cross_attn: MultiHeadAttention,
    ffn: FeedForward,
}

impl DecoderLayer {
    fn init(d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<DecoderLayer> {
        Ok(DecoderLayer {
            ln1: LayerNormParams::init(d)?,
            ln2: LayerNormParams::init(d)?,
            ln3: LayerNormParams::init(d)?,
            self_attn: MultiHeadAttention::init(d, heads, rng)?,
            cross_attn: MultiHeadAttention::init(d, heads, rng)?,
            ffn: FeedForward::init(d, rng)?,
        })
    }

    fn forward(
        &self,
        x: &Tensor,
        query_pos: &Tensor,
        memory: &Tensor,
        memory_pos: &Tensor,
    ) -> Result<Tensor> {
        let h = self.ln1.apply(x)?;
        let qk = h.add(query_pos)?;
        let x = x.add(&self.self_attn.attend(&qk, &qk, &h)?)?;
        let h = self.ln2.apply(&x)?;
        let q = h.add(query_pos)?;
        let k = memory.add(memory_pos)?;
        let x = x.add(&self.cross_attn.attend(&q, &k, memory)?)?;
        let h = self.ln3.apply(&x)?;
        x.add(&self.ffn.apply(&h)?)
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.ln1.visit(&format!("{prefix}.ln1"), f);
        self.ln2.visit(&format!("{prefix}.ln2"), f);
        self.ln3.visit(&format!("{prefix}.ln3"), f);
        self.self_attn.visit(&format!("{prefix}.self_attn"), f);
        self.cross_attn.visit(&format!("{prefix}.cross_attn"), f);
        self.ffn.visit(&format!("{prefix}.ffn"), f);
    }
}

/// Three-layer box head: two hidden ReLU layers and a zero-initialized
/// output, predicting a 4-vector refinement in inverse-sigmoid space.
#[derive(Debug, Clone)]
struct BoxHead {
    fc1: (Tensor, Tensor),
    fc2: (Tensor, Tensor),
    fc3: (Tensor, Tensor),
}

impl BoxHead {
    fn init(d: usize, rng: &mut ChaCha8Rng) -> Result<BoxHead> {
        Ok(BoxHead {
            fc1: (xavier(&[d, d], d, d, rng)?, zeros(&[d])?),
            fc2: (xavier(&[d, d], d, d, rng)?, zeros(&[d])?),
            fc3: (zeros(&[4, d])?, zeros(&[4])?),
        })
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.linear(&self.fc1.0, Some(&self.fc1.1))?
            .relu()?
            .linear(&self.fc2.0, Some(&self.fc2.1))?
            .relu()?
            .linear(&self.fc3.0, Some(&self.fc3.1))
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (name, pair) in [("fc1", &mut self.fc1), ("fc2", &mut self.fc2), ("fc3", &mut self.fc3)]
        {
            f(format!("{prefix}.{name}.weight"), &mut pair.0);
            f(format!("{prefix}.{name}.bias"), &mut pair.1);
        }
    }
}

/// Encoder stack plus the learned level embedding shared with the decoder's
/// cross-attention keys.
#[derive(Debug, Clone)]
pub struct Transformer {
    enc_layers: Vec<EncoderLayer>,
    enc_final_ln: LayerNormParams,
    dec_layers: Vec<DecoderLayer>,
    class_head: (Tensor, Tensor),
    box_head: BoxHead,
    level_embed: Tensor, // [num_levels, d]
    d: usize,
}

impl Transformer {
    /// Builds a transformer with `enc`/`dec` stacked layers over `d`-dim
    /// features split into `heads` attention heads, predicting
    /// `num_classes` class logits per query. `d` must be divisible by
    /// `heads` and by 4 (two sinusoid axes, sine/cosine pairs each).
    pub fn init(
        d: usize,
        heads: usize,
        enc: usize,
        dec: usize,
        num_levels: usize,
        num_classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Transformer> {
        if d == 0 || !d.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "model width {d} must be a positive multiple of 4"
            )));
        }
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("{heads} heads do not divide width {d}")));
        }
        if enc == 0 || dec == 0 {
            return Err(Error::Config("need at least one encoder and decoder layer".to_string()));
        }
        if num_levels == 0 || num_classes == 0 {
            return Err(Error::Config("need at least one level and one class".to_string()));
        }
        let enc_layers = (0..enc)
            .map(|_| EncoderLayer::init(d, heads, rng))
            .collect::<Result<Vec<_>>>()?;
        let dec_layers = (0..dec)
            .map(|_| DecoderLayer::init(d, heads, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Transformer {
            enc_layers,
            enc_final_ln: LayerNormParams::init(d)?,
            dec_layers,
            class_head: (xavier(&[num_classes, d], d, num_classes, rng)?, zeros(&[num_classes])?),
            box_head: BoxHead::init(d, rng)?,
            level_embed: xavier(&[num_levels, d], d, d, rng)?,
            d,
        })
    }

    /// Number of decoder layers (and of per-layer predictions).
    pub fn num_decoder_layers(&self) -> usize {
        self.dec_layers.len()
    }

    /// Positional embedding for every flat position: fixed 2-D sinusoid of
    /// the cell center plus the learned embedding of its level.
    fn memory_pos(&self, feats: &FlattenedFeatures) -> Result<Tensor> {
        let total = feats.total();
        let mut centers = Vec::with_capacity(total);
        let mut level_idx = Vec::with_capacity(total);
        for flat in 0..total {
            let (level, y, x) = feats.position_of(flat)?;
            let (h, w) = feats.level_dims[level];
            centers.push(((y as f64 + 0.5) / h as f64, (x as f64 + 0.5) / w as f64));
            level_idx.push(level);
        }
        let sin = Tensor::from_vec(&[total, self.d], sinusoidal_rows(&centers, self.d))?;
        let levels = self.level_embed.gather_rows(&level_idx)?;
        sin.add(&levels)
    }

    /// Runs the encoder over the flattened sequence, returning features
    /// with the same layout (final layer norm applied).
    pub fn encode(&self, feats: &FlattenedFeatures) -> Result<FlattenedFeatures> {
        if feats.seq.shape()[0] != self.d {
            return Err(Error::shape(
                "encode",
                format!("sequence width {} != model width {}", feats.seq.shape()[0], self.d),
            ));
        }
        if feats.num_levels() > self.level_embed.shape()[0] {
            return Err(Error::Config(format!(
                "{} pyramid levels exceed the {} level embeddings",
                feats.num_levels(),
                self.level_embed.shape()[0]
            )));
        }
        let pos = self.memory_pos(feats)?;
        let mut x = feats.seq.transpose2()?; // [total, d]
        for layer in &self.enc_layers {
            x = layer.forward(&x, &pos)?;
        }
        x = self.enc_final_ln.apply(&x)?;
        Ok(FlattenedFeatures {
            seq: x.transpose2()?,
            level_ranges: feats.level_ranges.clone(),
            level_dims: feats.level_dims.clone(),
        })
    }

    /// Decodes the query set against `memory`, producing one prediction per
    /// layer. Boxes are refined in inverse-sigmoid space; each layer's
    /// starting box is detached, except the first, which stays attached to
    /// the selection head's refinement.
    pub fn decode(&self, queries: &QuerySet, memory: &FlattenedFeatures) -> Result<DecoderOutput> {
        let k = queries.content.shape()[0];
        if queries.content.shape()[1] != self.d {
            return Err(Error::shape(
                "decode",
                format!("query width {} != model width {}", queries.content.shape()[1], self.d),
            ));
        }
        let memory_pos = self.memory_pos(memory)?;
        let memory_rows = memory.seq.transpose2()?;
        let mut hidden = queries.content.clone();
        let mut box_logits = queries.anchor_logits.clone();
        let mut layers = Vec::with_capacity(self.dec_layers.len());
        for layer in &self.dec_layers {
            // Query positions follow the current boxes but do not carry
            // gradient: position is treated as a descriptor, not a path
            // for box supervision.
            let centers: Vec<(f64, f64)> = box_logits
                .data()
                .chunks_exact(4)
                .map(|b| (crate::tensor::sigmoid_scalar(b[1]), crate::tensor::sigmoid_scalar(b[0])))
                .collect();
            let query_pos = Tensor::from_vec(&[k, self.d], sinusoidal_rows(&centers, self.d))?;
            hidden = layer.forward(&hidden, &query_pos, &memory_rows, &memory_pos)?;
            let class_logits = hidden.linear(&self.class_head.0, Some(&self.class_head.1))?;
            let refined = box_logits.add(&self.box_head.apply(&hidden)?)?;
            layers.push(LayerPrediction { class_logits, boxes: refined.sigmoid()? });
            box_logits = refined.detach();
        }
        Ok(DecoderOutput { layers })
    }
}

impl ParamVisitor for Transformer {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, layer) in self.enc_layers.iter_mut().enumerate() {
            layer.visit(&format!("{prefix}.encoder.{i}"), f);
        }
        self.enc_final_ln.visit(&format!("{prefix}.encoder.final_ln"), f);
        for (i, layer) in self.dec_layers.iter_mut().enumerate() {
            layer.visit(&format!("{prefix}.decoder.{i}"), f);
        }
        f(format!("{prefix}.class_head.weight"), &mut self.class_head.0);
        f(format!("{prefix}.class_head.bias"), &mut self.class_head.1);
        self.box_head.visit(&format!("{prefix}.box_head"), f);
        f(format!("{prefix}.level_embed"), &mut self.level_embed);
    }
}

/// Fixed sinusoidal embedding rows: for each `(py, px)` pair in [0, 1],
/// `d/2` interleaved sine/cosine features per axis, y-axis features first.
fn sinusoidal_rows(pairs: &[(f64, f64)], d: usize) -> Vec<f64> {
    let half = d / 2;
    let mut out = Vec::with_capacity(pairs.len() * d);
    for &(py, px) in pairs {
        for v in [py, px] {
            for i in 0..half {
                let t = TEMPERATURE.powf((2 * (i / 2)) as f64 / half as f64);
                let angle = v * TAU / t;
                out.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
            }
        }
    }
    out
}
