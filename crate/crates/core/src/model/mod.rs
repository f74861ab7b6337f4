//! Toy-scale transformer models: a causal language model (encoder stack plus
//! a fully connected output head) for the pretraining stage, and an
//! encoder-decoder sequence-to-sequence model for the conversational task.
//!
//! Parameters are kept as named f64 matrices whose values are always exactly
//! representable in f32, so checkpoint round-trips are bit-exact.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint};

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat, Var};
use crate::corpus::{BOS_ID, EOS_ID, NUM_SPECIALS, PAD_ID};
use crate::error::{Error, Result};

const MASK_NEG: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ffn: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 0,
            d_model: 128,
            n_heads: 4,
            n_layers: 2,
            d_ffn: 256,
            max_len: 64,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < NUM_SPECIALS + 1 {
            return Err(Error::Config(format!(
                "vocab_size must be at least {}, got {}",
                NUM_SPECIALS + 1,
                self.vocab_size
            )));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.d_ffn == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Lm,
    Seq2Seq,
}

/// Named tensor set for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub kind: ParamKind,
    pub config: ModelConfig,
    tensors: BTreeMap<String, Mat>,
}

enum InitKind {
    Embedding,
    Xavier,
    Zero,
    One,
}

fn tensor_layout(config: &ModelConfig, kind: ParamKind) -> Vec<(String, usize, usize, InitKind)> {
    use InitKind::*;
    let (v, d, f) = (config.vocab_size, config.d_model, config.d_ffn);
    let mut layout: Vec<(String, usize, usize, InitKind)> = Vec::new();
    layout.push(("embed.tok".into(), v, d, Embedding));
    for i in 0..config.n_layers {
        for w in ["wq", "wk", "wv", "wo"] {
            layout.push((format!("enc.{i}.attn.{w}"), d, d, Xavier));
        }
        layout.push((format!("enc.{i}.ln1.gamma"), 1, d, One));
        layout.push((format!("enc.{i}.ln1.beta"), 1, d, Zero));
        layout.push((format!("enc.{i}.ln2.gamma"), 1, d, One));
        layout.push((format!("enc.{i}.ln2.beta"), 1, d, Zero));
        layout.push((format!("enc.{i}.ffn.w1"), d, f, Xavier));
        layout.push((format!("enc.{i}.ffn.b1"), 1, f, Zero));
        layout.push((format!("enc.{i}.ffn.w2"), f, d, Xavier));
        layout.push((format!("enc.{i}.ffn.b2"), 1, d, Zero));
    }
    layout.push(("enc.ln_f.gamma".into(), 1, d, One));
    layout.push(("enc.ln_f.beta".into(), 1, d, Zero));
    if kind == ParamKind::Seq2Seq {
        for i in 0..config.n_layers {
            for w in ["wq", "wk", "wv", "wo"] {
                layout.push((format!("dec.{i}.self.{w}"), d, d, Xavier));
            }
            layout.push((format!("dec.{i}.ln1.gamma"), 1, d, One));
            layout.push((format!("dec.{i}.ln1.beta"), 1, d, Zero));
            for w in ["wq", "wk", "wv", "wo"] {
                layout.push((format!("dec.{i}.cross.{w}"), d, d, Xavier));
            }
            layout.push((format!("dec.{i}.ln2.gamma"), 1, d, One));
            layout.push((format!("dec.{i}.ln2.beta"), 1, d, Zero));
            layout.push((format!("dec.{i}.ln3.gamma"), 1, d, One));
            layout.push((format!("dec.{i}.ln3.beta"), 1, d, Zero));
            layout.push((format!("dec.{i}.ffn.w1"), d, f, Xavier));
            layout.push((format!("dec.{i}.ffn.b1"), 1, f, Zero));
            layout.push((format!("dec.{i}.ffn.w2"), f, d, Xavier));
            layout.push((format!("dec.{i}.ffn.b2"), 1, d, Zero));
        }
        layout.push(("dec.ln_f.gamma".into(), 1, d, One));
        layout.push(("dec.ln_f.beta".into(), 1, d, Zero));
    }
    layout.push(("out.w".into(), d, v, Xavier));
    layout.push(("out.b".into(), 1, v, Zero));
    layout
}

/// Round to the nearest f32 and back, the precision parameters live at.
pub(crate) fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

impl ModelParameters {
    /// Deterministic scaled-random initialization.
    pub fn init(config: ModelConfig, seed: u64, kind: ParamKind) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, rows, cols, init) in tensor_layout(&config, kind) {
            let mat = match init {
                InitKind::Embedding => {
                    Mat::from_shape_fn((rows, cols), |_| round_f32(0.02 * normal(&mut rng)))
                }
                InitKind::Xavier => {
                    let a = (6.0 / (rows + cols) as f64).sqrt();
                    Mat::from_shape_fn((rows, cols), |_| round_f32(rng.random_range(-a..a)))
                }
                InitKind::Zero => Mat::zeros((rows, cols)),
                InitKind::One => Mat::from_elem((rows, cols), 1.0),
            };
            tensors.insert(name, mat);
        }
        Ok(ModelParameters {
            kind,
            config,
            tensors,
        })
    }

    pub(crate) fn from_parts(
        kind: ParamKind,
        config: ModelConfig,
        tensors: BTreeMap<String, Mat>,
    ) -> Result<Self> {
        config.validate()?;
        let layout = tensor_layout(&config, kind);
        if tensors.len() != layout.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                layout.len(),
                tensors.len()
            )));
        }
        for (name, rows, cols, _) in &layout {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.dim() != (*rows, *cols) {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected ({rows}, {cols})",
                    t.dim()
                )));
            }
            if t.iter().any(|x| !x.is_finite()) {
                return Err(Error::Checkpoint(format!("tensor {name} is not finite")));
            }
        }
        Ok(ModelParameters {
            kind,
            config,
            tensors,
        })
    }

    pub fn tensor(&self, name: &str) -> &Mat {
        &self.tensors[name]
    }

    pub fn tensor_mut(&mut self, name: &str) -> &mut Mat {
        self.tensors.get_mut(name).expect("unknown tensor name")
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller transform
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Copy the encoder side (embeddings plus encoder layers) from a pretrained
/// language model into a fresh copy of the conversational model, keeping the
/// decoder and output tensors.
pub fn transfer_encoder(
    lm: &ModelParameters,
    conv: &ModelParameters,
) -> Result<ModelParameters> {
    if lm.kind != ParamKind::Lm || conv.kind != ParamKind::Seq2Seq {
        return Err(Error::Config(
            "transfer_encoder needs an lm source and a seq2seq target".into(),
        ));
    }
    let (a, b) = (&lm.config, &conv.config);
    if a.d_model != b.d_model
        || a.n_heads != b.n_heads
        || a.n_layers != b.n_layers
        || a.d_ffn != b.d_ffn
        || a.vocab_size != b.vocab_size
    {
        return Err(Error::Config(format!(
            "encoder transfer config mismatch: lm {a:?} vs conversational {b:?}"
        )));
    }
    let mut out = conv.clone();
    for (name, tensor) in &lm.tensors {
        if name.starts_with("embed.") || name.starts_with("enc.") {
            out.tensors.insert(name.clone(), tensor.clone());
        }
    }
    Ok(out)
}

/// Sinusoidal positional encodings for `len` positions.
fn positional_encoding(len: usize, d_model: usize) -> Mat {
    let mut pe = Mat::zeros((len, d_model));
    for pos in 0..len {
        for i in 0..d_model {
            let angle = pos as f64 / 10000f64.powf((2 * (i / 2)) as f64 / d_model as f64);
            pe[[pos, i]] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

fn causal_mask(len: usize) -> Mat {
    Mat::from_shape_fn((len, len), |(i, j)| if j <= i { 0.0 } else { MASK_NEG })
}

/// Additive mask hiding pad keys from every query row.
fn key_pad_mask(query_len: usize, keys: &[usize]) -> Option<Mat> {
    if keys.iter().all(|&id| id != PAD_ID) {
        return None;
    }
    Some(Mat::from_shape_fn((query_len, keys.len()), |(_, j)| {
        if keys[j] == PAD_ID {
            MASK_NEG
        } else {
            0.0
        }
    }))
}

/// Training/inference mode for a tape build. Dropout draws come from the
/// provided generator, in construction order.
pub enum Mode<'a> {
    Eval,
    Train { rng: &'a mut ChaCha8Rng },
}

/// One taped forward pass: the graph, the logits node, and the parameter
/// leaves by tensor name.
pub struct TapeForward {
    pub graph: Graph,
    pub logits: Var,
    pub params: Vec<(String, Var)>,
}

struct Builder<'a, 'b> {
    graph: &'a mut Graph,
    vars: BTreeMap<String, Var>,
    config: ModelConfig,
    mode: Mode<'b>,
}

impl<'a, 'b> Builder<'a, 'b> {
    fn new(graph: &'a mut Graph, params: &ModelParameters, mode: Mode<'b>) -> Self {
        let mut vars = BTreeMap::new();
        for (name, tensor) in &params.tensors {
            let var = graph.leaf(tensor.clone());
            vars.insert(name.clone(), var);
        }
        Builder {
            graph,
            vars,
            config: params.config,
            mode,
        }
    }

    fn p(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown tensor {name}"))
    }

    fn dropout(&mut self, x: Var) -> Var {
        let rate = self.config.dropout;
        match &mut self.mode {
            Mode::Train { rng } if rate > 0.0 => {
                let dim = self.graph.value(x).dim();
                let keep = 1.0 - rate;
                let mask = Mat::from_shape_fn(dim, |_| {
                    if rng.random_range(0.0..1.0) < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                self.graph.mul_fixed(x, mask)
            }
            _ => x,
        }
    }

    fn embed(&mut self, ids: &[usize]) -> Var {
        let e = self.graph.gather(self.p("embed.tok"), ids);
        let scaled = self.graph.scale(e, (self.config.d_model as f64).sqrt());
        let pe = positional_encoding(ids.len(), self.config.d_model);
        let with_pe = self.graph.add_fixed(scaled, &pe);
        self.dropout(with_pe)
    }

    fn layer_norm(&mut self, x: Var, prefix: &str) -> Var {
        let gamma = self.p(&format!("{prefix}.gamma"));
        let beta = self.p(&format!("{prefix}.beta"));
        self.graph.layer_norm(x, gamma, beta)
    }

    /// Multi-head attention: queries from `x_q`, keys/values from `x_kv`.
    fn attention(&mut self, x_q: Var, x_kv: Var, prefix: &str, mask: Option<&Mat>) -> Var {
        let (d, h) = (self.config.d_model, self.config.n_heads);
        let dk = d / h;
        let q = self.graph.matmul(x_q, self.p(&format!("{prefix}.wq")));
        let k = self.graph.matmul(x_kv, self.p(&format!("{prefix}.wk")));
        let v = self.graph.matmul(x_kv, self.p(&format!("{prefix}.wv")));
        let mut heads = Vec::with_capacity(h);
        for i in 0..h {
            let qh = self.graph.slice_cols(q, i * dk, dk);
            let kh = self.graph.slice_cols(k, i * dk, dk);
            let vh = self.graph.slice_cols(v, i * dk, dk);
            let kt = self.graph.transpose(kh);
            let scores = self.graph.matmul(qh, kt);
            let scores = self.graph.scale(scores, 1.0 / (dk as f64).sqrt());
            let scores = match mask {
                Some(m) => self.graph.add_fixed(scores, m),
                None => scores,
            };
            let attn = self.graph.row_softmax(scores);
            heads.push(self.graph.matmul(attn, vh));
        }
        let merged = self.graph.concat_cols(&heads);
        let out = self.graph.matmul(merged, self.p(&format!("{prefix}.wo")));
        self.dropout(out)
    }

    fn ffn(&mut self, x: Var, prefix: &str) -> Var {
        let h = self.graph.matmul(x, self.p(&format!("{prefix}.w1")));
        let h = self.graph.add_bias(h, self.p(&format!("{prefix}.b1")));
        let h = self.graph.relu(h);
        let out = self.graph.matmul(h, self.p(&format!("{prefix}.w2")));
        let out = self.graph.add_bias(out, self.p(&format!("{prefix}.b2")));
        self.dropout(out)
    }

    /// Pre-LN encoder stack over embedded input.
    fn encoder_stack(&mut self, ids: &[usize], self_mask: Option<&Mat>) -> Var {
        let mut x = self.embed(ids);
        for i in 0..self.config.n_layers {
            let normed = self.layer_norm(x, &format!("enc.{i}.ln1"));
            let attn = self.attention(normed, normed, &format!("enc.{i}.attn"), self_mask);
            x = self.graph.add(x, attn);
            let normed = self.layer_norm(x, &format!("enc.{i}.ln2"));
            let ffn = self.ffn(normed, &format!("enc.{i}.ffn"));
            x = self.graph.add(x, ffn);
        }
        self.layer_norm(x, "enc.ln_f")
    }

    /// Pre-LN decoder stack cross-attending to `enc_out`.
    fn decoder_stack(&mut self, tgt: &[usize], enc_out: Var, src: &[usize]) -> Var {
        let causal = causal_mask(tgt.len());
        let cross_mask = key_pad_mask(tgt.len(), src);
        let mut x = self.embed(tgt);
        for i in 0..self.config.n_layers {
            let normed = self.layer_norm(x, &format!("dec.{i}.ln1"));
            let attn = self.attention(normed, normed, &format!("dec.{i}.self"), Some(&causal));
            x = self.graph.add(x, attn);
            let normed = self.layer_norm(x, &format!("dec.{i}.ln2"));
            let cross = self.attention(
                normed,
                enc_out,
                &format!("dec.{i}.cross"),
                cross_mask.as_ref(),
            );
            x = self.graph.add(x, cross);
            let normed = self.layer_norm(x, &format!("dec.{i}.ln3"));
            let ffn = self.ffn(normed, &format!("dec.{i}.ffn"));
            x = self.graph.add(x, ffn);
        }
        self.layer_norm(x, "dec.ln_f")
    }

    fn project(&mut self, x: Var) -> Var {
        let logits = self.graph.matmul(x, self.p("out.w"));
        self.graph.add_bias(logits, self.p("out.b"))
    }
}

fn check_ids(ids: &[usize], config: &ModelConfig, what: &str) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::Shape(format!("{what} sequence is empty")));
    }
    if ids.len() > config.max_len {
        return Err(Error::Shape(format!(
            "{what} length {} exceeds max_len {}",
            ids.len(),
            config.max_len
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&id| id >= config.vocab_size) {
        return Err(Error::Shape(format!(
            "{what} id {bad} out of range for vocab size {}",
            config.vocab_size
        )));
    }
    Ok(())
}

/// Next-token logits for every position of `ids` under a causal mask.
pub fn lm_forward_tape(
    params: &ModelParameters,
    ids: &[usize],
    mode: Mode<'_>,
) -> Result<TapeForward> {
    if params.kind != ParamKind::Lm {
        return Err(Error::Config("lm_forward requires lm parameters".into()));
    }
    check_ids(ids, &params.config, "input")?;
    let mut graph = Graph::new();
    let mut b = Builder::new(&mut graph, params, mode);
    let causal = causal_mask(ids.len());
    let hidden = b.encoder_stack(ids, Some(&causal));
    let logits = b.project(hidden);
    let params_vars = b.vars.into_iter().collect();
    Ok(TapeForward {
        graph,
        logits,
        params: params_vars,
    })
}

pub fn lm_forward(params: &ModelParameters, ids: &[usize]) -> Result<Mat> {
    let tape = lm_forward_tape(params, ids, Mode::Eval)?;
    Ok(tape.graph.value(tape.logits).clone())
}

/// Logits for each target-prefix position given the source sequence. Source
/// pad positions are hidden from both encoder self-attention and
/// cross-attention.
pub fn seq2seq_forward_tape(
    params: &ModelParameters,
    src: &[usize],
    tgt_prefix: &[usize],
    mode: Mode<'_>,
) -> Result<TapeForward> {
    if params.kind != ParamKind::Seq2Seq {
        return Err(Error::Config(
            "seq2seq_forward requires seq2seq parameters".into(),
        ));
    }
    check_ids(src, &params.config, "source")?;
    check_ids(tgt_prefix, &params.config, "target prefix")?;
    let mut graph = Graph::new();
    let mut b = Builder::new(&mut graph, params, mode);
    let enc_mask = key_pad_mask(src.len(), src);
    let enc_out = b.encoder_stack(src, enc_mask.as_ref());
    let hidden = b.decoder_stack(tgt_prefix, enc_out, src);
    let logits = b.project(hidden);
    let params_vars = b.vars.into_iter().collect();
    Ok(TapeForward {
        graph,
        logits,
        params: params_vars,
    })
}

pub fn seq2seq_forward(params: &ModelParameters, src: &[usize], tgt_prefix: &[usize]) -> Result<Mat> {
    let tape = seq2seq_forward_tape(params, src, tgt_prefix, Mode::Eval)?;
    Ok(tape.graph.value(tape.logits).clone())
}

/// Encoder output for one source sequence, for reuse across decode steps.
pub fn encode_source(params: &ModelParameters, src: &[usize]) -> Result<Mat> {
    if params.kind != ParamKind::Seq2Seq {
        return Err(Error::Config("encode_source requires seq2seq parameters".into()));
    }
    check_ids(src, &params.config, "source")?;
    let mut graph = Graph::new();
    let mut b = Builder::new(&mut graph, params, Mode::Eval);
    let enc_mask = key_pad_mask(src.len(), src);
    let enc_out = b.encoder_stack(src, enc_mask.as_ref());
    Ok(graph.value(enc_out).clone())
}

/// Decoder-only forward against a precomputed encoder output.
pub fn decode_logits(
    params: &ModelParameters,
    enc_out: &Mat,
    src: &[usize],
    tgt_prefix: &[usize],
) -> Result<Mat> {
    check_ids(tgt_prefix, &params.config, "target prefix")?;
    let mut graph = Graph::new();
    let mut b = Builder::new(&mut graph, params, Mode::Eval);
    let enc_var = b.graph.leaf(enc_out.clone());
    let hidden = b.decoder_stack(tgt_prefix, enc_var, src);
    let logits = b.project(hidden);
    Ok(graph.value(logits).clone())
}

/// Greedy decoding from `<bos>`: at each step take the argmax over emittable
/// tokens (ids past the specials, lowest id on ties) and stop when `<eos>`
/// strictly beats them all, or after `max_new_tokens`. The returned sequence
/// contains no specials.
pub fn greedy_decode(
    params: &ModelParameters,
    src: &[usize],
    max_new_tokens: usize,
) -> Result<Vec<usize>> {
    let enc_out = encode_source(params, src)?;
    let mut prefix = vec![BOS_ID];
    let mut out = Vec::new();
    while out.len() < max_new_tokens && prefix.len() < params.config.max_len {
        let logits = decode_logits(params, &enc_out, src, &prefix)?;
        let last = logits.row(logits.nrows() - 1);
        let mut next = NUM_SPECIALS;
        for id in NUM_SPECIALS + 1..params.config.vocab_size {
            if last[id] > last[next] {
                next = id;
            }
        }
        if last[EOS_ID] > last[next] {
            break;
        }
        out.push(next);
        prefix.push(next);
    }
    Ok(out)
}
