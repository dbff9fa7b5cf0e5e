//! Transformer sequence encoder with `[CLS]` aggregation and the cosine
//! similarity used for retrieval.
//!
//! The model is a small pre-norm transformer encoder with learned
//! positional embeddings. The aggregate representation of a sequence is the
//! final hidden state at position 0 (the `[CLS]` slot) after a closing
//! layer norm. There are no stochastic layers, so training and evaluation
//! forward passes are the same computation and evaluation is deterministic.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Param, Var, NORM_EPS};
use crate::error::{Error, Result};
use crate::tokenizer::{TokenSequence, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_len: 512,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_len < 8 {
            return Err(Error::Config(format!("max_len {} must be >= 8", self.max_len)));
        }
        if self.n_layers == 0 || self.d_ff == 0 {
            return Err(Error::Config("n_layers and d_ff must be >= 1".into()));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config("vocab_size must cover the special tokens".into()));
        }
        Ok(())
    }
}

/// Aggregate vector of a snippet or program.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl From<Vec<f64>> for Embedding {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// `aᵀb / (‖a‖‖b‖)`. Errors when either norm is at most `1e-12`.
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64> {
    cosine_slices(a.values(), b.values())
}

pub fn cosine_slices(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "cosine of vectors with dimensions {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    if !(na > NORM_EPS && nb > NORM_EPS) {
        return Err(Error::DegenerateVector(format!(
            "cosine with norms {na:e} and {nb:e}"
        )));
    }
    Ok(dot / (na * nb))
}

#[derive(Clone, Debug, PartialEq)]
struct Layer {
    ln1_g: Param,
    ln1_b: Param,
    w_qkv: Param,
    b_qkv: Param,
    w_o: Param,
    b_o: Param,
    ln2_g: Param,
    ln2_b: Param,
    w_1: Param,
    b_1: Param,
    w_2: Param,
    b_2: Param,
}

impl Layer {
    fn params(&self) -> [&Param; 12] {
        [
            &self.ln1_g, &self.ln1_b, &self.w_qkv, &self.b_qkv, &self.w_o, &self.b_o, &self.ln2_g,
            &self.ln2_b, &self.w_1, &self.b_1, &self.w_2, &self.b_2,
        ]
    }

    fn params_mut(&mut self) -> [&mut Param; 12] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.w_qkv,
            &mut self.b_qkv,
            &mut self.w_o,
            &mut self.b_o,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w_1,
            &mut self.b_1,
            &mut self.w_2,
            &mut self.b_2,
        ]
    }
}

/// The trainable sequence encoder together with its vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    vocab: Vocabulary,
    tok_emb: Param,
    pos_emb: Param,
    layers: Vec<Layer>,
    ln_g: Param,
    ln_b: Param,
}

// Small embedding init keeps untrained program embeddings apart; larger
// values make every CLS output nearly parallel.
const EMBED_STD: f64 = 0.02;
// Residual branch outputs start at twice the usual depth-scaled width.
const OUT_GAIN: f64 = 2.0;

fn normal(rng: &mut ChaCha8Rng, shape: (usize, usize), std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_simple_fn(shape, || dist.sample(rng))
}

impl Encoder {
    /// Fresh encoder with seeded random weights. `config.vocab_size` is
    /// overwritten with the vocabulary size.
    pub fn new(mut config: EncoderConfig, vocab: Vocabulary) -> Result<Self> {
        config.vocab_size = vocab.len();
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let ff = config.d_ff;
        let p = |name: String, value| Param::new(name, value);
        let ones = || Array2::ones((1, d));
        let zeros = |n| Array2::zeros((1, n));
        let in_std = (1.0 / d as f64).sqrt();
        let out_std = OUT_GAIN * in_std / (2.0 * config.n_layers as f64).sqrt();
        let tok_emb = p("encoder.tok_emb".into(), normal(&mut rng, (vocab.len(), d), EMBED_STD));
        let pos_emb = p("encoder.pos_emb".into(), normal(&mut rng, (config.max_len, d), EMBED_STD));
        let layers = (0..config.n_layers)
            .map(|l| {
                let n = |s: &str| format!("encoder.layer{l}.{s}");
                Layer {
                    ln1_g: p(n("ln1_g"), ones()),
                    ln1_b: p(n("ln1_b"), zeros(d)),
                    w_qkv: p(n("w_qkv"), normal(&mut rng, (d, 3 * d), in_std)),
                    b_qkv: p(n("b_qkv"), zeros(3 * d)),
                    w_o: p(n("w_o"), normal(&mut rng, (d, d), out_std)),
                    b_o: p(n("b_o"), zeros(d)),
                    ln2_g: p(n("ln2_g"), ones()),
                    ln2_b: p(n("ln2_b"), zeros(d)),
                    w_1: p(n("w_1"), normal(&mut rng, (d, ff), in_std)),
                    b_1: p(n("b_1"), zeros(ff)),
                    w_2: p(n("w_2"), normal(&mut rng, (ff, d), (1.0 / ff as f64).sqrt() / (2.0 * config.n_layers as f64).sqrt())),
                    b_2: p(n("b_2"), zeros(d)),
                }
            })
            .collect();
        Ok(Self {
            config,
            vocab,
            tok_emb,
            pos_emb,
            layers,
            ln_g: p("encoder.ln_g".into(), ones()),
            ln_b: p("encoder.ln_b".into(), zeros(d)),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.config.d_model
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for l in &self.layers {
            out.extend(l.params());
        }
        out.push(&self.ln_g);
        out.push(&self.ln_b);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.extend(l.params_mut());
        }
        out.push(&mut self.ln_g);
        out.push(&mut self.ln_b);
        out
    }

    pub fn tokenize(&self, text: &str) -> TokenSequence {
        self.vocab.tokenize(text, self.config.max_len)
    }

    fn check(&self, seq: &TokenSequence) -> Result<()> {
        if seq.len() < 2 || seq.len() > self.config.max_len {
            return Err(Error::Contract(format!(
                "sequence length {} outside [2, {}]",
                seq.len(),
                self.config.max_len
            )));
        }
        if let Some(bad) = seq.ids.iter().find(|&&id| id as usize >= self.vocab.len()) {
            return Err(Error::Contract(format!("token id {bad} outside vocabulary")));
        }
        Ok(())
    }

    /// Record the forward pass of one sequence on `g`; returns the `1 x d`
    /// `[CLS]` representation.
    pub fn forward(&self, g: &mut Graph, seq: &TokenSequence) -> Result<Var> {
        self.check(seq)?;
        let ids: Vec<usize> = seq.ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..ids.len()).collect();
        let tok = g.param(&self.tok_emb);
        let pos = g.param(&self.pos_emb);
        let te = g.gather(tok, &ids);
        let pe = g.gather(pos, &positions);
        let mut x = g.add(te, pe);
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            x = self.block(g, layer, x, i + 1 == n);
        }
        let ln_g = g.param(&self.ln_g);
        let ln_b = g.param(&self.ln_b);
        Ok(g.layer_norm(x, ln_g, ln_b))
    }

    /// One pre-norm block. The final block only produces the `[CLS]` row,
    /// which is all the aggregate depends on.
    fn block(&self, g: &mut Graph, layer: &Layer, x: Var, cls_only: bool) -> Var {
        let d = self.config.d_model;
        let heads = self.config.n_heads;
        let dh = d / heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();

        let (ln1_g, ln1_b) = (g.param(&layer.ln1_g), g.param(&layer.ln1_b));
        let h = g.layer_norm(x, ln1_g, ln1_b);
        let (w_qkv, b_qkv) = (g.param(&layer.w_qkv), g.param(&layer.b_qkv));
        let qkv = g.linear(h, w_qkv, b_qkv);
        let q_src = if cls_only { g.slice_rows(qkv, 0, 1) } else { qkv };
        let mut head_out = Vec::with_capacity(heads);
        for hd in 0..heads {
            let q = g.slice_cols(q_src, hd * dh, dh);
            let k = g.slice_cols(qkv, d + hd * dh, dh);
            let v = g.slice_cols(qkv, 2 * d + hd * dh, dh);
            let scores = g.matmul_t(q, k);
            let scores = g.scale(scores, inv_sqrt);
            let attn = g.softmax_rows(scores);
            head_out.push(g.matmul(attn, v));
        }
        let attn = if heads == 1 { head_out[0] } else { g.concat_cols(&head_out) };
        let (w_o, b_o) = (g.param(&layer.w_o), g.param(&layer.b_o));
        let attn = g.linear(attn, w_o, b_o);
        let resid = if cls_only { g.slice_rows(x, 0, 1) } else { x };
        let x = g.add(resid, attn);

        let (ln2_g, ln2_b) = (g.param(&layer.ln2_g), g.param(&layer.ln2_b));
        let h = g.layer_norm(x, ln2_g, ln2_b);
        let (w_1, b_1) = (g.param(&layer.w_1), g.param(&layer.b_1));
        let h = g.linear(h, w_1, b_1);
        let h = g.gelu(h);
        let (w_2, b_2) = (g.param(&layer.w_2), g.param(&layer.b_2));
        let h = g.linear(h, w_2, b_2);
        g.add(x, h)
    }

    /// Evaluation-mode embedding of a token sequence.
    pub fn encode(&self, seq: &TokenSequence) -> Result<Embedding> {
        let mut g = Graph::new();
        let v = self.forward(&mut g, seq)?;
        Ok(Embedding(g.value(v).iter().copied().collect()))
    }

    /// Tokenize and encode `text`.
    pub fn embed_text(&self, text: &str) -> Result<Embedding> {
        self.encode(&self.tokenize(text))
    }
}
