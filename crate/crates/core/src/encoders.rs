//! Student video and text encoders.
//!
//! Both encoders project their input features to width `z`, run a pre-norm
//! transformer over the sequence and then either project every position
//! (video) or pool the positions with a learned attention vector (text).
//! Matrices hold one position per row, so a video of `k` frames encodes to a
//! `k×z` matrix.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::compute::{Tape, Tensor, Var, LAYER_NORM_EPS};
use crate::error::{dim_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Video,
    Text,
}

/// Architecture of one encoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderShape {
    pub input_dim: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub depth: usize,
    pub max_frames: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub attn_out: Linear<T>,
    pub ln2_gain: T,
    pub ln2_bias: T,
    pub ff_in: Linear<T>,
    pub ff_out: Linear<T>,
}

/// Parameters of one encoder. `T` is [`Tensor`] for stored weights and
/// [`Var`] once bound to a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T = Tensor> {
    pub kind: EncoderKind,
    pub heads: usize,
    pub input_proj: Linear<T>,
    pub layers: Vec<LayerParams<T>>,
    /// Video only.
    pub output_proj: Option<Linear<T>>,
    /// Video only: `max_frames×z` learned table.
    pub pos_embed: Option<T>,
    /// Text only: `1×z` attention vector.
    pub attn_vector: Option<T>,
}

impl<T> Linear<T> {
    fn map<U>(&self, f: &mut impl FnMut(&str, &T) -> U, name: &str) -> Linear<U> {
        Linear {
            weight: f(&format!("{name}.weight"), &self.weight),
            bias: f(&format!("{name}.bias"), &self.bias),
        }
    }
}

impl<T> LayerParams<T> {
    fn map<U>(&self, f: &mut impl FnMut(&str, &T) -> U, name: &str) -> LayerParams<U> {
        LayerParams {
            ln1_gain: f(&format!("{name}.ln1.gain"), &self.ln1_gain),
            ln1_bias: f(&format!("{name}.ln1.bias"), &self.ln1_bias),
            query: self.query.map(f, &format!("{name}.query")),
            key: self.key.map(f, &format!("{name}.key")),
            value: self.value.map(f, &format!("{name}.value")),
            attn_out: self.attn_out.map(f, &format!("{name}.attn_out")),
            ln2_gain: f(&format!("{name}.ln2.gain"), &self.ln2_gain),
            ln2_bias: f(&format!("{name}.ln2.bias"), &self.ln2_bias),
            ff_in: self.ff_in.map(f, &format!("{name}.ff_in")),
            ff_out: self.ff_out.map(f, &format!("{name}.ff_out")),
        }
    }
}

impl<T> EncoderParams<T> {
    /// Visits every parameter in the fixed serialization order, passing its
    /// dotted name, and rebuilds the structure from the results.
    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> EncoderParams<U> {
        let input_proj = self.input_proj.map(&mut f, "input_proj");
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| l.map(&mut f, &format!("layer{i}")))
            .collect();
        let output_proj = self.output_proj.as_ref().map(|l| l.map(&mut f, "output_proj"));
        let pos_embed = self.pos_embed.as_ref().map(|t| f("pos_embed", t));
        let attn_vector = self.attn_vector.as_ref().map(|t| f("attn_vector", t));
        EncoderParams {
            kind: self.kind,
            heads: self.heads,
            input_proj,
            layers,
            output_proj,
            pos_embed,
            attn_vector,
        }
    }

    /// Parameters in serialization order.
    pub fn params(&self) -> Vec<&T> {
        let mut out: Vec<&T> = vec![&self.input_proj.weight, &self.input_proj.bias];
        for l in &self.layers {
            out.extend([&l.ln1_gain, &l.ln1_bias]);
            for lin in [&l.query, &l.key, &l.value, &l.attn_out] {
                out.extend([&lin.weight, &lin.bias]);
            }
            out.extend([&l.ln2_gain, &l.ln2_bias]);
            for lin in [&l.ff_in, &l.ff_out] {
                out.extend([&lin.weight, &lin.bias]);
            }
        }
        if let Some(lin) = &self.output_proj {
            out.extend([&lin.weight, &lin.bias]);
        }
        out.extend(self.pos_embed.iter());
        out.extend(self.attn_vector.iter());
        out
    }
}

impl EncoderParams<Tensor> {
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        let Self {
            input_proj,
            layers,
            output_proj,
            pos_embed,
            attn_vector,
            ..
        } = self;
        out.extend([&mut input_proj.weight, &mut input_proj.bias]);
        for l in layers {
            out.extend([&mut l.ln1_gain, &mut l.ln1_bias]);
            for lin in [&mut l.query, &mut l.key, &mut l.value, &mut l.attn_out] {
                out.extend([&mut lin.weight, &mut lin.bias]);
            }
            out.extend([&mut l.ln2_gain, &mut l.ln2_bias]);
            for lin in [&mut l.ff_in, &mut l.ff_out] {
                out.extend([&mut lin.weight, &mut lin.bias]);
            }
        }
        if let Some(lin) = output_proj {
            out.extend([&mut lin.weight, &mut lin.bias]);
        }
        out.extend(pos_embed.iter_mut());
        out.extend(attn_vector.iter_mut());
        out
    }

    pub fn hidden(&self) -> usize {
        self.input_proj.weight.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.input_proj.weight.rows()
    }

    pub fn max_frames(&self) -> Option<usize> {
        self.pos_embed.as_ref().map(Tensor::rows)
    }

    /// Registers every tensor as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> EncoderParams<Var> {
        self.map(|_, t| tape.param(t.clone()))
    }

    /// Registers every tensor as a constant on `tape`.
    pub fn bind_frozen(&self, tape: &mut Tape) -> EncoderParams<Var> {
        self.map(|_, t| tape.constant(t.clone()))
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }
}

/// Extra factor on the init std of the projections closing each residual
/// branch. Full-size branches drown the frame identity in attention noise
/// before training starts.
pub const RESIDUAL_INIT_SCALE: f64 = 0.1;

/// Seeded initialization: linear weights `N(0, 1/fan_in)` (residual-branch
/// outputs additionally scaled by [`RESIDUAL_INIT_SCALE`]), zero biases,
/// unit layer-norm gains, positional table `N(0, 0.02²)`.
pub fn init_params(kind: EncoderKind, seed: u64, shape: &EncoderShape) -> Result<EncoderParams> {
    let EncoderShape {
        input_dim,
        hidden: z,
        heads,
        ff_mult,
        depth,
        max_frames,
    } = *shape;
    if heads == 0 || z % heads != 0 {
        return Err(Error::Parameter(format!(
            "hidden width {z} is not divisible by {heads} heads"
        )));
    }
    if z == 0 || input_dim == 0 || ff_mult == 0 {
        return Err(Error::Parameter(format!("degenerate encoder shape {shape:?}")));
    }
    if kind == EncoderKind::Video && max_frames == 0 {
        return Err(Error::Parameter("max_frames must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |shape: &[usize], std: f64| {
        let dist = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut rng)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape")
    };
    let mut linear = |fan_in: usize, fan_out: usize, scale: f64| Linear {
        weight: normal(&[fan_in, fan_out], scale / (fan_in as f64).sqrt()),
        bias: Tensor::zeros(&[fan_out]),
    };
    let input_proj = linear(input_dim, z, 1.0);
    let layers = (0..depth)
        .map(|_| LayerParams {
            ln1_gain: Tensor::vector(vec![1.0; z]),
            ln1_bias: Tensor::zeros(&[z]),
            query: linear(z, z, 1.0),
            key: linear(z, z, 1.0),
            value: linear(z, z, 1.0),
            attn_out: linear(z, z, RESIDUAL_INIT_SCALE),
            ln2_gain: Tensor::vector(vec![1.0; z]),
            ln2_bias: Tensor::zeros(&[z]),
            ff_in: linear(z, ff_mult * z, 1.0),
            ff_out: linear(ff_mult * z, z, RESIDUAL_INIT_SCALE),
        })
        .collect();
    let (output_proj, pos_embed, attn_vector) = match kind {
        EncoderKind::Video => (
            Some(linear(z, z, 1.0)),
            Some(normal(&[max_frames, z], 0.02)),
            None,
        ),
        EncoderKind::Text => (None, None, Some(normal(&[1, z], 1.0 / (z as f64).sqrt()))),
    };
    Ok(EncoderParams {
        kind,
        heads,
        input_proj,
        layers,
        output_proj,
        pos_embed,
        attn_vector,
    })
}

fn linear_on_tape(tape: &mut Tape, x: Var, lin: &Linear<Var>) -> Result<Var> {
    let h = tape.matmul(x, lin.weight)?;
    tape.add_row(h, lin.bias)
}

/// One pre-norm transformer layer over row blocks: attention + residual, then
/// feed-forward + residual. Rows only attend within their own segment.
pub fn transformer_layer_on_tape(
    tape: &mut Tape,
    layer: &LayerParams<Var>,
    x: Var,
    segments: &[Range<usize>],
    heads: usize,
) -> Result<Var> {
    if tape.value(x).rows() == 0 {
        return Err(dim_err!("transformer layer over zero positions"));
    }
    let a = tape.layer_norm(x, layer.ln1_gain, layer.ln1_bias, LAYER_NORM_EPS)?;
    let q = linear_on_tape(tape, a, &layer.query)?;
    let k = linear_on_tape(tape, a, &layer.key)?;
    let v = linear_on_tape(tape, a, &layer.value)?;
    let att = tape.attention(q, k, v, segments, heads)?;
    let att = linear_on_tape(tape, att, &layer.attn_out)?;
    let x = tape.add(x, att)?;
    let b = tape.layer_norm(x, layer.ln2_gain, layer.ln2_bias, LAYER_NORM_EPS)?;
    let f = linear_on_tape(tape, b, &layer.ff_in)?;
    let f = tape.gelu(f);
    let f = linear_on_tape(tape, f, &layer.ff_out)?;
    tape.add(x, f)
}

/// Transformer layer applied to a single `n×z` sequence.
pub fn transformer_layer(x: &Tensor, layer: &LayerParams<Tensor>, heads: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let n = x.rows();
    if n == 0 {
        return Err(dim_err!("transformer layer over zero positions"));
    }
    let bound = layer.map(&mut |_, t: &Tensor| tape.constant(t.clone()), "layer");
    let xv = tape.constant(x.clone());
    let out = transformer_layer_on_tape(&mut tape, &bound, xv, &[0..n], heads)?;
    Ok(tape.value(out).clone())
}

/// Stacks sequences row-wise and returns the row range of each.
pub fn stack_rows(items: &[&Tensor], width: usize, what: &str) -> Result<(Tensor, Vec<Range<usize>>)> {
    let mut data = Vec::new();
    let mut segments = Vec::with_capacity(items.len());
    let mut start = 0;
    for (i, t) in items.iter().enumerate() {
        let (r, c) = t.dims2()?;
        if c != width {
            return Err(dim_err!(
                "{what} {i} has feature width {c}, encoder expects {width}"
            ));
        }
        if r == 0 {
            return Err(dim_err!("{what} {i} is empty"));
        }
        data.extend_from_slice(t.data());
        segments.push(start..start + r);
        start += r;
    }
    Ok((Tensor::matrix(start, width, data)?, segments))
}

/// Encodes a batch of videos (`k_i × input_dim` each) into one stacked
/// `Σk_i × z` frame matrix.
pub fn encode_videos_on_tape(
    tape: &mut Tape,
    params: &EncoderParams<Var>,
    videos: &[&Tensor],
) -> Result<(Var, Vec<Range<usize>>)> {
    if params.kind != EncoderKind::Video {
        return Err(Error::Contract("text encoder used on videos".into()));
    }
    let input_dim = tape.value(params.input_proj.weight).rows();
    let (stacked, segments) = stack_rows(videos, input_dim, "video")?;
    let pos = params.pos_embed.expect("video encoder has positions");
    let (max_frames, z) = tape.value(pos).dims2()?;
    let mut src = Vec::with_capacity(stacked.rows() * z);
    for seg in &segments {
        if seg.len() > max_frames {
            return Err(dim_err!(
                "video with {} frames exceeds the positional table of {}",
                seg.len(),
                max_frames
            ));
        }
        for p in 0..seg.len() {
            src.extend(p * z..(p + 1) * z);
        }
    }
    let x = tape.constant(stacked);
    let mut h = linear_on_tape(tape, x, &params.input_proj)?;
    let rows = tape.value(h).rows();
    let pe = tape.gather(pos, src, vec![rows, z])?;
    h = tape.add(h, pe)?;
    for layer in &params.layers {
        h = transformer_layer_on_tape(tape, layer, h, &segments, params.heads)?;
    }
    let out = linear_on_tape(tape, h, params.output_proj.as_ref().expect("video output"))?;
    Ok((out, segments))
}

/// Tape handles produced by the text encoder for a batch of queries.
#[derive(Clone, Debug)]
pub struct TextBatch {
    /// `Σn_i × z` contextual word features.
    pub words: Var,
    /// Attention weights, `Σn_i × 1`.
    pub weights: Var,
    /// `queries × z` sentence vectors.
    pub sentences: Var,
    pub segments: Vec<Range<usize>>,
}

pub fn encode_texts_on_tape(
    tape: &mut Tape,
    params: &EncoderParams<Var>,
    queries: &[&Tensor],
) -> Result<TextBatch> {
    if params.kind != EncoderKind::Text {
        return Err(Error::Contract("video encoder used on text".into()));
    }
    let input_dim = tape.value(params.input_proj.weight).rows();
    let (stacked, segments) = stack_rows(queries, input_dim, "query")?;
    let x = tape.constant(stacked);
    let mut h = linear_on_tape(tape, x, &params.input_proj)?;
    for layer in &params.layers {
        h = transformer_layer_on_tape(tape, layer, h, &segments, params.heads)?;
    }
    let w = params.attn_vector.expect("text encoder has attention vector");
    let logits = tape.matmul_bt(h, w)?;
    let weights = tape.segment_softmax(logits, &segments)?;
    let sentences = tape.segment_weighted_sum(h, weights, &segments)?;
    Ok(TextBatch {
        words: h,
        weights,
        sentences,
        segments,
    })
}

/// Frame features of one encoded video, `k×z`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedVideo {
    pub features: Tensor,
}

impl EncodedVideo {
    pub fn n_frames(&self) -> usize {
        self.features.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedQuery {
    /// Sentence vector, length `z`.
    pub sentence: Tensor,
    /// Contextual word features, `n_s×z`.
    pub words: Tensor,
    /// Pooling weights over the words, length `n_s`.
    pub attn_weights: Tensor,
}

fn split_rows(t: &Tensor, segments: &[Range<usize>]) -> Result<Vec<Tensor>> {
    let z = t.cols();
    segments
        .iter()
        .map(|s| Tensor::matrix(s.len(), z, t.data()[s.start * z..s.end * z].to_vec()))
        .collect()
}

pub fn encode_videos(params: &EncoderParams, videos: &[&Tensor]) -> Result<Vec<EncodedVideo>> {
    if videos.is_empty() {
        return Ok(Vec::new());
    }
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let (frames, segments) = encode_videos_on_tape(&mut tape, &bound, videos)?;
    Ok(split_rows(tape.value(frames), &segments)?
        .into_iter()
        .map(|features| EncodedVideo { features })
        .collect())
}

pub fn encode_video(params: &EncoderParams, frames: &Tensor) -> Result<EncodedVideo> {
    Ok(encode_videos(params, &[frames])?.remove(0))
}

pub fn encode_texts(params: &EncoderParams, queries: &[&Tensor]) -> Result<Vec<EncodedQuery>> {
    if queries.is_empty() {
        return Ok(Vec::new());
    }
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let batch = encode_texts_on_tape(&mut tape, &bound, queries)?;
    let words = split_rows(tape.value(batch.words), &batch.segments)?;
    let sentences = tape.value(batch.sentences);
    let weights = tape.value(batch.weights).data();
    Ok(words
        .into_iter()
        .zip(&batch.segments)
        .enumerate()
        .map(|(i, (words, seg))| EncodedQuery {
            sentence: Tensor::vector(sentences.row(i).to_vec()),
            words,
            attn_weights: Tensor::vector(weights[seg.clone()].to_vec()),
        })
        .collect())
}

pub fn encode_text(params: &EncoderParams, words: &Tensor) -> Result<EncodedQuery> {
    if words.rows() == 0 {
        return Err(dim_err!("query has no tokens"));
    }
    Ok(encode_texts(params, &[words])?.remove(0))
}
