//! Sequence encoders producing one representation per position.

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;

use super::params::{Ctx, Init, ParamStore};
use crate::autograd::{Graph, Var};
use crate::config::EncoderKind;
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-8;

/// Inverted dropout driven by its own random stream.
pub struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, rng: ChaCha8Rng) -> Self {
        Self { rate, rng }
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Var {
        if self.rate <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - self.rate);
        let n = g.value(x).numel();
        let mask = (0..n).map(|_| if self.rng.gen::<f64>() < self.rate { 0.0 } else { keep }).collect();
        g.mul_const(x, mask)
    }
}

fn drop(g: &mut Graph, x: Var, dropout: &mut Option<&mut Dropout>) -> Var {
    match dropout {
        Some(d) => d.apply(g, x),
        None => x,
    }
}

/// `mask[b, i, j]`: query `i` may attend key `j` (`j ≤ i` and `j` is a real item).
pub fn causal_mask(valid: &[bool], batch: usize, len: usize) -> Vec<bool> {
    let mut mask = vec![false; batch * len * len];
    for b in 0..batch {
        for i in 0..len {
            for j in 0..=i {
                mask[(b * len + i) * len + j] = valid[b * len + j];
            }
        }
    }
    mask
}

/// Layer norm with a learned gain and bias.
pub fn layer_norm(cx: &mut Ctx, x: Var, prefix: &str) -> Var {
    let gain = cx.p(&format!("{prefix}.g"));
    let bias = cx.p(&format!("{prefix}.b"));
    let n = cx.g.layer_norm(x, LN_EPS);
    let s = cx.g.mul_row(n, gain);
    cx.g.add_row(s, bias)
}

/// Multi-head causal attention over `[B·L, d]` projections. Returns the
/// concatenated head outputs `[B·L, d]` and each head's weights `[B, L, L]`.
/// Scores are scaled by `1/√(d/heads)`.
#[allow(clippy::too_many_arguments)]
pub fn causal_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    batch: usize,
    len: usize,
    heads: usize,
    valid: &[bool],
) -> (Var, Vec<Var>) {
    let d = g.value(q).cols();
    let dh = d / heads;
    let mask = causal_mask(valid, batch, len);
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let split = |g: &mut Graph, x: Var| {
            let s = if heads == 1 { x } else { g.slice_cols(x, h * dh, dh) };
            g.reshape(s, vec![batch, len, dh])
        };
        let (qh, kh, vh) = (split(g, q), split(g, k), split(g, v));
        let scores = g.batch_matmul(qh, kh, true);
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let w = g.masked_softmax(scores, mask.clone());
        let o = g.batch_matmul(w, vh, false);
        outs.push(g.reshape(o, vec![batch * len, dh]));
        weights.push(w);
    }
    let out = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
    (out, weights)
}

pub trait SequenceEncoder: Send + Sync {
    fn kind(&self) -> EncoderKind;

    /// Adds this encoder's parameters (all prefixed `enc.`) to `store`.
    fn declare(&self, d: usize, store: &mut ParamStore, rng: &mut dyn RngCore);

    /// Maps embedded input `[B·L, d]` (zero at padded rows) to `[B, L, d]`.
    /// Position `j` of the output depends on input positions `≤ j` only, and
    /// padded positions are zero.
    fn encode(
        &self,
        cx: &mut Ctx,
        x: Var,
        valid: &[bool],
        batch: usize,
        len: usize,
        dropout: Option<&mut Dropout>,
    ) -> Var;
}

pub fn make_encoder(kind: EncoderKind, blocks: usize, heads: usize) -> Box<dyn SequenceEncoder> {
    match kind {
        EncoderKind::Attention => Box::new(AttentionEncoder { blocks, heads }),
        EncoderKind::Recurrent => Box::new(RecurrentEncoder),
    }
}

fn row_mask(valid: &[bool]) -> Vec<f64> {
    valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()
}

/// Pre-norm transformer blocks with causal multi-head self-attention.
pub struct AttentionEncoder {
    pub blocks: usize,
    pub heads: usize,
}

impl SequenceEncoder for AttentionEncoder {
    fn kind(&self) -> EncoderKind {
        EncoderKind::Attention
    }

    fn declare(&self, d: usize, store: &mut ParamStore, rng: &mut dyn RngCore) {
        for b in 0..self.blocks {
            let p = format!("enc.{b}");
            store.declare(&format!("{p}.ln1.g"), vec![d], Init::Ones, rng);
            store.declare(&format!("{p}.ln1.b"), vec![d], Init::Zeros, rng);
            for w in ["wq", "wk", "wv"] {
                store.declare(&format!("{p}.{w}"), vec![d, d], Init::Xavier, rng);
            }
            store.declare(&format!("{p}.ln2.g"), vec![d], Init::Ones, rng);
            store.declare(&format!("{p}.ln2.b"), vec![d], Init::Zeros, rng);
            store.declare(&format!("{p}.ffn.w1"), vec![d, d], Init::Xavier, rng);
            store.declare(&format!("{p}.ffn.b1"), vec![d], Init::Zeros, rng);
            store.declare(&format!("{p}.ffn.w2"), vec![d, d], Init::Xavier, rng);
            store.declare(&format!("{p}.ffn.b2"), vec![d], Init::Zeros, rng);
        }
        store.declare("enc.ln.g", vec![d], Init::Ones, rng);
        store.declare("enc.ln.b", vec![d], Init::Zeros, rng);
    }

    fn encode(
        &self,
        cx: &mut Ctx,
        x: Var,
        valid: &[bool],
        batch: usize,
        len: usize,
        mut dropout: Option<&mut Dropout>,
    ) -> Var {
        let keep = row_mask(valid);
        let mut x = x;
        for b in 0..self.blocks {
            let p = format!("enc.{b}");
            let h = layer_norm(cx, x, &format!("{p}.ln1"));
            let (wq, wk, wv) = (cx.p(&format!("{p}.wq")), cx.p(&format!("{p}.wk")), cx.p(&format!("{p}.wv")));
            let q = cx.g.matmul(h, wq, false);
            let k = cx.g.matmul(h, wk, false);
            let v = cx.g.matmul(h, wv, false);
            let (a, _) = causal_attention(&mut cx.g, q, k, v, batch, len, self.heads, valid);
            let a = drop(&mut cx.g, a, &mut dropout);
            x = cx.g.add(x, a);

            let h = layer_norm(cx, x, &format!("{p}.ln2"));
            let (w1, b1) = (cx.p(&format!("{p}.ffn.w1")), cx.p(&format!("{p}.ffn.b1")));
            let (w2, b2) = (cx.p(&format!("{p}.ffn.w2")), cx.p(&format!("{p}.ffn.b2")));
            let f = cx.g.matmul(h, w1, false);
            let f = cx.g.add_row(f, b1);
            let f = cx.g.gelu(f);
            let f = cx.g.matmul(f, w2, false);
            let f = cx.g.add_row(f, b2);
            let f = drop(&mut cx.g, f, &mut dropout);
            x = cx.g.add(x, f);
            x = cx.g.mul_rows_const(x, &keep);
        }
        let out = layer_norm(cx, x, "enc.ln");
        let out = cx.g.mul_rows_const(out, &keep);
        let d = cx.g.value(out).cols();
        cx.g.reshape(out, vec![batch, len, d])
    }
}

/// Single-layer GRU run left to right. Padded positions carry the previous
/// state forward and output zero.
pub struct RecurrentEncoder;

impl SequenceEncoder for RecurrentEncoder {
    fn kind(&self) -> EncoderKind {
        EncoderKind::Recurrent
    }

    fn declare(&self, d: usize, store: &mut ParamStore, rng: &mut dyn RngCore) {
        for gate in ["z", "r", "h"] {
            store.declare(&format!("enc.gru.w{gate}"), vec![d, d], Init::Xavier, rng);
            store.declare(&format!("enc.gru.u{gate}"), vec![d, d], Init::Xavier, rng);
            store.declare(&format!("enc.gru.b{gate}"), vec![d], Init::Zeros, rng);
        }
        store.declare("enc.ln.g", vec![d], Init::Ones, rng);
        store.declare("enc.ln.b", vec![d], Init::Zeros, rng);
    }

    fn encode(
        &self,
        cx: &mut Ctx,
        x: Var,
        valid: &[bool],
        batch: usize,
        len: usize,
        mut dropout: Option<&mut Dropout>,
    ) -> Var {
        let d = cx.g.value(x).cols();
        let mut input = Vec::new();
        for gate in ["z", "r", "h"] {
            let w = cx.p(&format!("enc.gru.w{gate}"));
            let b = cx.p(&format!("enc.gru.b{gate}"));
            let xw = cx.g.matmul(x, w, false);
            let xw = cx.g.add_row(xw, b);
            input.push(cx.g.reshape(xw, vec![batch, len, d]));
        }
        let (uz, ur, uh) = (cx.p("enc.gru.uz"), cx.p("enc.gru.ur"), cx.p("enc.gru.uh"));
        let mut h = cx.g.constant(Tensor::zeros(vec![batch, d]));
        let mut outs = Vec::with_capacity(len);
        for j in 0..len {
            let m: Vec<f64> = (0..batch).map(|b| if valid[b * len + j] { 1.0 } else { 0.0 }).collect();
            let xz = cx.g.select_time(input[0], j);
            let xr = cx.g.select_time(input[1], j);
            let xh = cx.g.select_time(input[2], j);
            let hz = cx.g.matmul(h, uz, false);
            let z = cx.g.add(xz, hz);
            let z = cx.g.sigmoid(z);
            let hr = cx.g.matmul(h, ur, false);
            let r = cx.g.add(xr, hr);
            let r = cx.g.sigmoid(r);
            let rh = cx.g.mul(r, h);
            let cand = cx.g.matmul(rh, uh, false);
            let cand = cx.g.add(xh, cand);
            let cand = cx.g.tanh(cand);
            let delta = cx.g.sub(cand, h);
            let delta = cx.g.mul(z, delta);
            let delta = cx.g.mul_rows_const(delta, &m);
            h = cx.g.add(h, delta);
            outs.push(cx.g.mul_rows_const(h, &m));
        }
        let seq = cx.g.stack_time(&outs);
        let flat = cx.g.reshape(seq, vec![batch * len, d]);
        let flat = drop(&mut cx.g, flat, &mut dropout);
        let out = layer_norm(cx, flat, "enc.ln");
        let out = cx.g.mul_rows_const(out, &row_mask(valid));
        cx.g.reshape(out, vec![batch, len, d])
    }
}
