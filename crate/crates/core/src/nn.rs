//! Shared layers built on the autograd graph.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.uniform(format!("{name}.weight"), fan_in, fan_out, fan_in, rng);
        let bias = bias.then(|| store.zeros(format!("{name}.bias"), 1, fan_out));
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn zeros(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        let weight = store.zeros(format!("{name}.weight"), fan_in, fan_out);
        let bias = bias.then(|| store.zeros(format!("{name}.bias"), 1, fan_out));
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        debug_assert_eq!(g.shape(x).1, self.fan_in, "linear input width");
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Stack of linear layers with GELU between them (none after the last).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths = [in, hidden.., out]`.
    pub fn new(store: &mut ParamStore, name: &str, widths: &[usize], rng: &mut ChaCha8Rng) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(k, w)| Linear::new(store, &format!("{name}.{k}"), w[0], w[1], true, rng))
            .collect();
        Mlp { layers }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let width = g.shape(x).1;
        if width != self.input_width() {
            return Err(Error::Shape(format!(
                "MLP expects width {}, got {width}",
                self.input_width()
            )));
        }
        let mut h = x;
        for (k, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h);
            if k + 1 < self.layers.len() {
                h = g.gelu(h);
            }
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Array2::ones((1, width))),
            bias: store.zeros(format!("{name}.bias"), 1, width),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let n = g.layer_norm_rows(x);
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        let y = g.mul_row(n, gain);
        g.add_row(y, bias)
    }
}

/// Multi-head scaled dot-product attention with separate query, key, value
/// and output projections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

pub struct AttentionOutput {
    pub output: Var,
    /// One `[n_queries × n_keys]` row-stochastic matrix per head.
    pub maps: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!(
                "width {width} is not divisible into {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            query: Linear::new(store, &format!("{name}.q"), width, width, true, rng),
            key: Linear::new(store, &format!("{name}.k"), width, width, true, rng),
            value: Linear::new(store, &format!("{name}.v"), width, width, true, rng),
            output: Linear::new(store, &format!("{name}.o"), width, width, true, rng),
            heads,
        })
    }

    /// `mask`, when given, is an additive `[n_queries × n_keys]` constant with
    /// `-inf` at disallowed positions.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        keys: Var,
        values: Var,
        mask: Option<Var>,
    ) -> AttentionOutput {
        let q = self.query.forward(g, store, queries);
        let k = self.key.forward(g, store, keys);
        let v = self.value.forward(g, store, values);
        let width = g.shape(q).1;
        let head_dim = width / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut maps = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, lo, hi),
                    g.slice_cols(k, lo, hi),
                    g.slice_cols(v, lo, hi),
                )
            };
            let scores = g.matmul_t(qh, kh);
            let mut scores = g.scale(scores, scale);
            if let Some(m) = mask {
                scores = g.add(scores, m);
            }
            let attn = g.softmax_rows(scores);
            outs.push(g.matmul(attn, vh));
            maps.push(attn);
        }
        let joined = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)
        };
        AttentionOutput {
            output: self.output.forward(g, store, joined),
            maps,
        }
    }

    /// Self-attention over row-stacked sequences. Segment `s` covers rows
    /// `segments[s].0..segments[s].1` and attends only within itself under
    /// `masks[s]`. Projections run once on the whole stack.
    pub fn forward_segments(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        segments: &[(usize, usize)],
        masks: &[Var],
    ) -> Var {
        debug_assert_eq!(segments.len(), masks.len());
        let q = self.query.forward(g, store, x);
        let k = self.key.forward(g, store, x);
        let v = self.value.forward(g, store, x);
        let head_dim = g.shape(q).1 / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut rows = Vec::with_capacity(segments.len());
        for (&(start, end), &mask) in segments.iter().zip(masks) {
            let (qs, ks, vs) = (
                g.slice_rows(q, start, end),
                g.slice_rows(k, start, end),
                g.slice_rows(v, start, end),
            );
            let mut outs = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
                let (qh, kh, vh) = if self.heads == 1 {
                    (qs, ks, vs)
                } else {
                    (
                        g.slice_cols(qs, lo, hi),
                        g.slice_cols(ks, lo, hi),
                        g.slice_cols(vs, lo, hi),
                    )
                };
                let scores = g.matmul_t(qh, kh);
                let scores = g.scale(scores, scale);
                let scores = g.add(scores, mask);
                let attn = g.softmax_rows(scores);
                outs.push(g.matmul(attn, vh));
            }
            rows.push(if outs.len() == 1 {
                outs[0]
            } else {
                g.concat_cols(&outs)
            });
        }
        let joined = if rows.len() == 1 {
            rows[0]
        } else {
            g.concat_rows(&rows)
        };
        self.output.forward(g, store, joined)
    }
}
