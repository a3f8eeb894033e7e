//! Prefix-conditioned causal language model and beam-search decoding.
//!
//! Gated pathology features (bank order) and gated anatomy features (bank
//! order) are projected by separate MLPs into one prefix position each.
//! Prefix positions attend to every prefix position; text positions attend to
//! the whole prefix and to earlier text positions only.

use std::collections::HashMap;

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::corpus::GrammarSpec;
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::params::{ParamId, ParamStore};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
const SPECIALS: [&str; 3] = ["<pad>", "<bos>", "<eos>"];

/// Report token vocabulary: the three specials followed by the grammar's
/// closed word set in sorted order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct ReportVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for ReportVocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        ReportVocab { tokens, index }
    }
}

impl From<ReportVocab> for Vec<String> {
    fn from(v: ReportVocab) -> Self {
        v.tokens
    }
}

impl ReportVocab {
    pub fn from_grammar(grammar: &GrammarSpec) -> Self {
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(grammar.vocabulary())
            .collect::<Vec<_>>();
        tokens.into()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn encode(&self, words: &[String]) -> Result<Vec<usize>> {
        words
            .iter()
            .map(|w| {
                self.id(w)
                    .filter(|&i| i >= SPECIALS.len())
                    .ok_or_else(|| Error::Data(format!("unknown report token {w:?}")))
            })
            .collect()
    }

    /// Words for `ids`, stopping at the first EOS and skipping PAD/BOS.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .filter_map(|&i| self.token(i).map(str::to_string))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Maximum number of text positions (BOS plus emitted tokens before EOS).
    pub max_len: usize,
    pub beam_size: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            d_model: 128,
            layers: 4,
            heads: 4,
            ffn_dim: 256,
            max_len: 96,
            beam_size: 3,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "generator needs layers ≥ 1 and d_model {} divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.beam_size == 0 || self.max_len < 2 {
            return Err(Error::Config(
                "beam_size must be ≥ 1 and max_len ≥ 2".into(),
            ));
        }
        Ok(())
    }
}

/// `MLP^P` and `MLP^A`, both mapping feature width `d` to `d_model`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixProjection {
    pub pathology: Mlp,
    pub anatomy: Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Block {
    attn_norm: LayerNorm,
    attn: MultiHeadAttention,
    ffn_norm: LayerNorm,
    ffn: Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportGenerator {
    pub config: GeneratorConfig,
    pub vocab_size: usize,
    pub n_prefix: usize,
    pub prefix: PrefixProjection,
    token_embedding: ParamId,
    positions: ParamId,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
    pub head: Linear,
}

/// Additive causal-with-prefix mask for `prefix` feature positions followed
/// by `text` token positions.
pub fn prefix_causal_mask(prefix: usize, text: usize) -> Array2<f64> {
    let n = prefix + text;
    Array2::from_shape_fn((n, n), |(i, j)| {
        if j < prefix || j <= i {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    })
}

/// One conditioning input: gated features and the text inputs.
pub struct Conditioned<'a> {
    pub pathology: Var,
    pub anatomy: Var,
    /// Text input ids, starting with BOS.
    pub inputs: &'a [usize],
}

impl ReportGenerator {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        config: GeneratorConfig,
        vocab_size: usize,
        feature_dim: usize,
        n_pathologies: usize,
        n_anatomies: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let n_prefix = n_pathologies + n_anatomies;
        let prefix = PrefixProjection {
            pathology: Mlp::new(store, "gen.prefix_p", &[feature_dim, d, d], rng),
            anatomy: Mlp::new(store, "gen.prefix_a", &[feature_dim, d, d], rng),
        };
        let token_embedding = store.uniform("gen.token_embedding", vocab_size, d, 1, rng);
        let positions = store.uniform("gen.positions", n_prefix + config.max_len, d, d, rng);
        let blocks = (0..config.layers)
            .map(|l| {
                let name = format!("gen.block{l}");
                Ok(Block {
                    attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), d),
                    attn: MultiHeadAttention::new(
                        store,
                        &format!("{name}.attn"),
                        d,
                        config.heads,
                        rng,
                    )?,
                    ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), d),
                    ffn: Mlp::new(store, &format!("{name}.ffn"), &[d, config.ffn_dim, d], rng),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ReportGenerator {
            config,
            vocab_size,
            n_prefix,
            prefix,
            token_embedding,
            positions,
            blocks,
            final_norm: LayerNorm::new(store, "gen.final_norm", d),
            head: Linear::zeros(store, "gen.head", d, vocab_size, true),
        })
    }

    fn project_prefix(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        pathology: Var,
        anatomy: Var,
    ) -> Result<Var> {
        let n = g.shape(pathology).0 + g.shape(anatomy).0;
        if n != self.n_prefix {
            return Err(Error::Shape(format!(
                "generator was built for {} prefix positions, got {n}",
                self.n_prefix
            )));
        }
        let p = self.prefix.pathology.forward(g, store, pathology)?;
        let a = self.prefix.anatomy.forward(g, store, anatomy)?;
        Ok(g.concat_rows(&[p, a]))
    }

    fn check_inputs(&self, inputs: &[usize]) -> Result<()> {
        if inputs.is_empty() || inputs.len() > self.config.max_len {
            return Err(Error::Data(format!(
                "text length {} outside 1..={}",
                inputs.len(),
                self.config.max_len
            )));
        }
        if let Some(&bad) = inputs.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::Data(format!(
                "token id {bad} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        Ok(())
    }

    /// Teacher-forced logits `[T_b × vocab]` at the text positions of each
    /// sample; row `t` predicts the token after `inputs[t]`.
    pub fn logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &[Conditioned],
    ) -> Result<Vec<Var>> {
        let mut seqs = Vec::with_capacity(batch.len());
        let mut segments = Vec::with_capacity(batch.len());
        let mut masks = Vec::with_capacity(batch.len());
        let mut start = 0;
        let table = g.param(store, self.token_embedding);
        let pos_table = g.param(store, self.positions);
        for item in batch {
            self.check_inputs(item.inputs)?;
            let prefix = self.project_prefix(g, store, item.pathology, item.anatomy)?;
            let tokens = g.gather(table, item.inputs);
            let seq = g.concat_rows(&[prefix, tokens]);
            let len = self.n_prefix + item.inputs.len();
            let pos: Vec<usize> = (0..len).collect();
            let pos = g.gather(pos_table, &pos);
            seqs.push(g.add(seq, pos));
            segments.push((start, start + len));
            masks.push(g.input(prefix_causal_mask(self.n_prefix, item.inputs.len())));
            start += len;
        }
        let mut x = if seqs.len() == 1 {
            seqs[0]
        } else {
            g.concat_rows(&seqs)
        };
        for block in &self.blocks {
            let h = block.attn_norm.forward(g, store, x);
            let a = block.attn.forward_segments(g, store, h, &segments, &masks);
            x = g.add(x, a);
            let h = block.ffn_norm.forward(g, store, x);
            let f = block.ffn.forward(g, store, h)?;
            x = g.add(x, f);
        }
        // only text rows reach the head
        let text: Vec<Var> = segments
            .iter()
            .map(|&(s, e)| g.slice_rows(x, s + self.n_prefix, e))
            .collect();
        let text_rows = if text.len() == 1 {
            text[0]
        } else {
            g.concat_rows(&text)
        };
        let h = self.final_norm.forward(g, store, text_rows);
        let logits = self.head.forward(g, store, h);
        let mut out = Vec::with_capacity(batch.len());
        let mut row = 0;
        for item in batch {
            out.push(g.slice_rows(logits, row, row + item.inputs.len()));
            row += item.inputs.len();
        }
        Ok(out)
    }

    /// `L_RG = −Σ_t log p(y_t | y_<t, prefix)` per sample for target
    /// sequences `y_1..y_T` (the inputs are `BOS, y_1..y_{T−1}`).
    pub fn generation_losses(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: &[(Var, Var)],
        targets: &[&[usize]],
    ) -> Result<Vec<Var>> {
        if features.len() != targets.len() {
            return Err(Error::Shape(
                "one target sequence per feature pair required".into(),
            ));
        }
        let inputs: Vec<Vec<usize>> = targets
            .iter()
            .map(|t| {
                std::iter::once(BOS)
                    .chain(t.iter().copied().take(t.len().saturating_sub(1)))
                    .collect()
            })
            .collect();
        for t in targets {
            if t.is_empty() {
                return Err(Error::Data("empty target sequence".into()));
            }
            self.check_inputs(t)?;
        }
        let batch: Vec<Conditioned> = features
            .iter()
            .zip(&inputs)
            .map(|(&(pathology, anatomy), inputs)| Conditioned {
                pathology,
                anatomy,
                inputs,
            })
            .collect();
        let logits = self.logits(g, store, &batch)?;
        Ok(logits
            .into_iter()
            .zip(targets)
            .map(|(l, t)| {
                let ce = g.cross_entropy_rows(l, t);
                g.sum_all(ce)
            })
            .collect())
    }

    pub fn generation_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        pathology: Var,
        anatomy: Var,
        targets: &[usize],
    ) -> Result<Var> {
        Ok(self.generation_losses(g, store, &[(pathology, anatomy)], &[targets])?[0])
    }

    /// Runs the prefix through the stack once and returns a decoding state
    /// positioned before BOS.
    pub fn start(
        &self,
        store: &ParamStore,
        pathology: &Array2<f64>,
        anatomy: &Array2<f64>,
    ) -> Result<DecodeState> {
        let mut g = Graph::inference();
        let (p, a) = (g.input(pathology.clone()), g.input(anatomy.clone()));
        let prefix = self.project_prefix(&mut g, store, p, a)?;
        let pos_table = g.param(store, self.positions);
        let pos = g.slice_rows(pos_table, 0, self.n_prefix);
        let x = g.add(prefix, pos);
        let mask = g.input(Array2::zeros((self.n_prefix, self.n_prefix)));
        let mut state = DecodeState {
            keys: Vec::with_capacity(self.blocks.len()),
            values: Vec::with_capacity(self.blocks.len()),
            len: 0,
        };
        self.run_rows(&mut g, store, x, mask, &mut state)?;
        Ok(state)
    }

    /// Feeds `token` at the next text position and returns next-token
    /// log-probabilities.
    pub fn step(
        &self,
        store: &ParamStore,
        state: &mut DecodeState,
        token: usize,
    ) -> Result<Array1<f64>> {
        if state.len >= self.config.max_len {
            return Err(Error::Data(format!(
                "decoding past max_len {}",
                self.config.max_len
            )));
        }
        if token >= self.vocab_size {
            return Err(Error::Data(format!("token id {token} outside vocabulary")));
        }
        let mut g = Graph::inference();
        let table = g.param(store, self.token_embedding);
        let emb = g.gather(table, &[token]);
        let pos_table = g.param(store, self.positions);
        let pos = g.gather(pos_table, &[self.n_prefix + state.len]);
        let x = g.add(emb, pos);
        let cached = self.n_prefix + state.len;
        let mask = g.input(Array2::zeros((1, cached + 1)));
        let out = self.run_rows(&mut g, store, x, mask, state)?;
        state.len += 1;
        let h = self.final_norm.forward(&mut g, store, out);
        let logits = self.head.forward(&mut g, store, h);
        Ok(log_softmax(g.value(logits).row(0)))
    }

    /// Pushes new rows through every block, appending their keys and values
    /// to the cache. Returns the final hidden rows.
    fn run_rows(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mut x: Var,
        mask: Var,
        state: &mut DecodeState,
    ) -> Result<Var> {
        let first = state.keys.is_empty();
        for (l, block) in self.blocks.iter().enumerate() {
            let h = block.attn_norm.forward(g, store, x);
            let q = block.attn.query.forward(g, store, h);
            let k = block.attn.key.forward(g, store, h);
            let v = block.attn.value.forward(g, store, h);
            let (k_all, v_all) = if first {
                state.keys.push(g.value(k).clone());
                state.values.push(g.value(v).clone());
                (k, v)
            } else {
                let kk = append_rows(&state.keys[l], g.value(k));
                let vv = append_rows(&state.values[l], g.value(v));
                state.keys[l] = kk;
                state.values[l] = vv;
                (
                    g.input(state.keys[l].clone()),
                    g.input(state.values[l].clone()),
                )
            };
            let heads = block.attn.heads;
            let hd = self.config.d_model / heads;
            let scale = 1.0 / (hd as f64).sqrt();
            let mut outs = Vec::with_capacity(heads);
            for hh in 0..heads {
                let (lo, hi) = (hh * hd, (hh + 1) * hd);
                let (qh, kh, vh) = if heads == 1 {
                    (q, k_all, v_all)
                } else {
                    (
                        g.slice_cols(q, lo, hi),
                        g.slice_cols(k_all, lo, hi),
                        g.slice_cols(v_all, lo, hi),
                    )
                };
                let s = g.matmul_t(qh, kh);
                let s = g.scale(s, scale);
                let s = g.add(s, mask);
                let p = g.softmax_rows(s);
                outs.push(g.matmul(p, vh));
            }
            let joined = if outs.len() == 1 {
                outs[0]
            } else {
                g.concat_cols(&outs)
            };
            let a = block.attn.output.forward(g, store, joined);
            x = g.add(x, a);
            let h = block.ffn_norm.forward(g, store, x);
            let f = block.ffn.forward(g, store, h)?;
            x = g.add(x, f);
        }
        Ok(x)
    }

    /// Beam-search decoding from gated features; returns emitted ids
    /// (including the final EOS when one was produced).
    pub fn decode(
        &self,
        store: &ParamStore,
        pathology: &Array2<f64>,
        anatomy: &Array2<f64>,
        beam_size: usize,
        top_k: usize,
    ) -> Result<Decoded> {
        let mut model = GeneratorSteps {
            generator: self,
            store,
            start: self.start(store, pathology, anatomy)?,
        };
        beam_search(&mut model, beam_size, self.config.max_len, top_k)
    }
}

fn append_rows(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    ndarray::concatenate(ndarray::Axis(0), &[a.view(), b.view()]).expect("matching widths")
}

pub fn log_softmax(row: ndarray::ArrayView1<f64>) -> Array1<f64> {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    row.mapv(|v| v - lse)
}

/// Key/value cache for incremental decoding.
#[derive(Debug, Clone)]
pub struct DecodeState {
    keys: Vec<Array2<f64>>,
    values: Vec<Array2<f64>>,
    /// Text positions consumed so far.
    len: usize,
}

/// A left-to-right model over a fixed vocabulary, as seen by the decoder.
pub trait StepModel {
    type State: Clone;
    fn vocab_size(&self) -> usize;
    fn eos(&self) -> usize;
    /// State before any token has been emitted, with log-probabilities of
    /// the first token.
    fn initial(&mut self) -> Result<(Self::State, Vec<f64>)>;
    /// Emits `token` and returns log-probabilities of the following token.
    fn advance(&mut self, state: &Self::State, token: usize) -> Result<(Self::State, Vec<f64>)>;
}

struct GeneratorSteps<'a> {
    generator: &'a ReportGenerator,
    store: &'a ParamStore,
    start: DecodeState,
}

impl GeneratorSteps<'_> {
    fn masked(lp: Array1<f64>) -> Vec<f64> {
        let mut v = lp.to_vec();
        v[PAD] = f64::NEG_INFINITY;
        v[BOS] = f64::NEG_INFINITY;
        v
    }
}

impl StepModel for GeneratorSteps<'_> {
    type State = DecodeState;

    fn vocab_size(&self) -> usize {
        self.generator.vocab_size
    }

    fn eos(&self) -> usize {
        EOS
    }

    fn initial(&mut self) -> Result<(DecodeState, Vec<f64>)> {
        let mut s = self.start.clone();
        let lp = self.generator.step(self.store, &mut s, BOS)?;
        Ok((s, Self::masked(lp)))
    }

    fn advance(&mut self, state: &DecodeState, token: usize) -> Result<(DecodeState, Vec<f64>)> {
        let mut s = state.clone();
        let lp = self.generator.step(self.store, &mut s, token)?;
        Ok((s, Self::masked(lp)))
    }
}

/// Result of decoding. `steps[t]` holds the `top_k` most likely tokens and
/// their log-probabilities at step `t` along the returned sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    /// Mean log-probability per emitted token.
    pub score: f64,
    pub steps: Vec<Vec<(usize, f64)>>,
}

/// Length-normalized score of a token sequence with total log-probability
/// `sum` over `len` emitted tokens.
pub fn normalized_score(sum: f64, len: usize) -> f64 {
    if len == 0 {
        f64::NEG_INFINITY
    } else {
        sum / len as f64
    }
}

fn top_k_of(lp: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut idx: Vec<usize> = (0..lp.len()).filter(|&i| lp[i].is_finite()).collect();
    idx.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
    idx.into_iter().take(k).map(|i| (i, lp[i])).collect()
}

#[derive(Clone)]
struct Hypothesis<S> {
    tokens: Vec<usize>,
    sum: f64,
    state: S,
    next: Vec<f64>,
    steps: Vec<Vec<(usize, f64)>>,
}

/// Length-normalized beam search. Each step expands every live hypothesis by
/// every finite-probability token and keeps the `beam_size` best candidates
/// by mean log-probability, ties going to the lower token id and then the
/// lower beam index. Candidates ending in EOS leave the beam as finished;
/// hypotheses reaching `max_len` tokens finish unterminated.
pub fn beam_search<M: StepModel>(
    model: &mut M,
    beam_size: usize,
    max_len: usize,
    top_k: usize,
) -> Result<Decoded> {
    if beam_size == 0 || max_len == 0 {
        return Err(Error::Config("beam_size and max_len must be ≥ 1".into()));
    }
    let eos = model.eos();
    let (state, next) = model.initial()?;
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        sum: 0.0,
        state,
        next,
        steps: Vec::new(),
    }];
    let mut finished: Vec<Decoded> = Vec::new();
    for t in 0..max_len {
        if live.is_empty() {
            break;
        }
        // (score, token, beam)
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (b, hyp) in live.iter().enumerate() {
            for (tok, &lp) in hyp.next.iter().enumerate() {
                if lp.is_finite() {
                    cands.push((normalized_score(hyp.sum + lp, t + 1), tok, b));
                }
            }
        }
        cands.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        cands.truncate(beam_size);
        let mut next_live = Vec::with_capacity(beam_size);
        for (score, tok, b) in cands {
            let hyp = &live[b];
            let lp = hyp.next[tok];
            let mut tokens = hyp.tokens.clone();
            tokens.push(tok);
            let mut steps = hyp.steps.clone();
            steps.push(top_k_of(&hyp.next, top_k));
            if tok == eos || t + 1 == max_len {
                finished.push(Decoded {
                    tokens,
                    score,
                    steps,
                });
            } else {
                let (state, next) = model.advance(&hyp.state, tok)?;
                next_live.push(Hypothesis {
                    tokens,
                    sum: hyp.sum + lp,
                    state,
                    next,
                    steps,
                });
            }
        }
        live = next_live;
    }
    // first-finished wins ties
    let mut best: Option<Decoded> = None;
    for d in finished {
        if best.as_ref().is_none_or(|b| d.score > b.score) {
            best = Some(d);
        }
    }
    best.ok_or_else(|| Error::Numerical("beam search found no finite-probability sequence".into()))
}

/// Greedy argmax decoding (lowest id on ties).
pub fn greedy<M: StepModel>(model: &mut M, max_len: usize) -> Result<Vec<usize>> {
    let eos = model.eos();
    let (mut state, mut next) = model.initial()?;
    let mut out = Vec::new();
    while out.len() < max_len {
        let tok = (0..next.len())
            .filter(|&i| next[i].is_finite())
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if next[b] >= next[i] => Some(b),
                _ => Some(i),
            })
            .ok_or_else(|| Error::Numerical("no finite-probability token".into()))?;
        out.push(tok);
        if tok == eos || out.len() == max_len {
            break;
        }
        let (s, n) = model.advance(&state, tok)?;
        state = s;
        next = n;
    }
    Ok(out)
}

impl ReportGenerator {
    pub fn greedy(
        &self,
        store: &ParamStore,
        pathology: &Array2<f64>,
        anatomy: &Array2<f64>,
    ) -> Result<Vec<usize>> {
        let mut model = GeneratorSteps {
            generator: self,
            store,
            start: self.start(store, pathology, anatomy)?,
        };
        greedy(&mut model, self.config.max_len)
    }
}
