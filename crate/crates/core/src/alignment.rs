//! Concept-query transformer decoders.
//!
//! Each concept embedding is a query; visual tokens are keys and values.
//! One decoder stack serves anatomy concepts and an architecturally identical,
//! separately parameterized stack serves pathology concepts. A bias-free
//! `d × 2` head on each aligned feature gives healthy/abnormal (anatomy) or
//! absent/present (pathology) logits; column 0 is the negative class.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::bank::ConceptEmbeddings;
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::params::{ParamId, ParamStore};
use crate::vision::VisualGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignmentConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub query_self_attention: bool,
    /// Learned per-token position embedding added to the keys.
    pub key_positions: bool,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            dim: 32,
            layers: 2,
            heads: 4,
            ffn_dim: 64,
            query_self_attention: true,
            key_positions: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DecoderLayer {
    self_attention: Option<(MultiHeadAttention, LayerNorm)>,
    cross_attention: MultiHeadAttention,
    cross_norm: LayerNorm,
    ffn: Mlp,
    ffn_norm: LayerNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptDecoder {
    config: AlignmentConfig,
    layers: Vec<DecoderLayer>,
    key_positions: Option<ParamId>,
    pub head: Linear,
}

/// Output of one decoder stack.
#[derive(Debug, Clone)]
pub struct DecoderOutput {
    pub features: Var,
    /// `attention[layer][head]` is `[n_concepts × n_tokens]`.
    pub attention: Vec<Vec<Var>>,
    pub logits: Var,
}

impl ConceptDecoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: AlignmentConfig,
        n_tokens: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if config.layers == 0 || config.heads == 0 {
            return Err(Error::Config(
                "alignment needs at least one layer and one head".into(),
            ));
        }
        let d = config.dim;
        let layers = (0..config.layers)
            .map(|l| {
                let prefix = format!("{name}.layer{l}");
                let self_attention = if config.query_self_attention {
                    Some((
                        MultiHeadAttention::new(
                            store,
                            &format!("{prefix}.self"),
                            d,
                            config.heads,
                            rng,
                        )?,
                        LayerNorm::new(store, &format!("{prefix}.self_norm"), d),
                    ))
                } else {
                    None
                };
                Ok(DecoderLayer {
                    self_attention,
                    cross_attention: MultiHeadAttention::new(
                        store,
                        &format!("{prefix}.cross"),
                        d,
                        config.heads,
                        rng,
                    )?,
                    cross_norm: LayerNorm::new(store, &format!("{prefix}.cross_norm"), d),
                    ffn: Mlp::new(
                        store,
                        &format!("{prefix}.ffn"),
                        &[d, config.ffn_dim, d],
                        rng,
                    ),
                    ffn_norm: LayerNorm::new(store, &format!("{prefix}.ffn_norm"), d),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let key_positions = config
            .key_positions
            .then(|| store.zeros(format!("{name}.key_positions"), n_tokens, d));
        let head = Linear::new(store, &format!("{name}.head"), d, 2, false, rng);
        Ok(ConceptDecoder {
            config,
            layers,
            key_positions,
            head,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        visual: Var,
    ) -> Result<DecoderOutput> {
        let d = self.config.dim;
        let (_, qd) = g.shape(queries);
        let (n_tokens, vd) = g.shape(visual);
        if qd != d || vd != d {
            return Err(Error::Shape(format!(
                "alignment width {d} but queries have {qd} and visual tokens {vd} columns"
            )));
        }
        let keys = match self.key_positions {
            Some(pos) => {
                let pos = g.param(store, pos);
                if g.shape(pos).0 != n_tokens {
                    return Err(Error::Shape(format!(
                        "decoder was built for {} visual tokens, got {n_tokens}",
                        g.shape(pos).0
                    )));
                }
                g.add(visual, pos)
            }
            None => visual,
        };
        let mut x = queries;
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            if let Some((attn, norm)) = &layer.self_attention {
                let out = attn.forward(g, store, x, x, x, None);
                let sum = g.add(x, out.output);
                x = norm.forward(g, store, sum);
            }
            let out = layer
                .cross_attention
                .forward(g, store, x, keys, visual, None);
            let sum = g.add(x, out.output);
            x = layer.cross_norm.forward(g, store, sum);
            attention.push(out.maps);
            let ff = layer.ffn.forward(g, store, x)?;
            let sum = g.add(x, ff);
            x = layer.ffn_norm.forward(g, store, sum);
        }
        let logits = self.head.forward(g, store, x);
        Ok(DecoderOutput {
            features: x,
            attention,
            logits,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptAligner {
    pub anatomy: ConceptDecoder,
    pub pathology: ConceptDecoder,
}

/// Aligned features, logits and per-layer, per-head attention maps for both
/// concept kinds.
#[derive(Debug, Clone)]
pub struct AlignmentOutput {
    /// `v''^a`, `[n_a × d]`.
    pub anatomy_features: Var,
    /// `v^p`, `[n_p × d]`.
    pub pathology_features: Var,
    pub anatomy_attention: Vec<Vec<Var>>,
    pub pathology_attention: Vec<Vec<Var>>,
    pub anatomy_logits: Var,
    pub pathology_logits: Var,
}

impl AlignmentOutput {
    pub fn final_anatomy_attention(&self) -> &[Var] {
        self.anatomy_attention.last().expect("at least one layer")
    }

    pub fn final_pathology_attention(&self) -> &[Var] {
        self.pathology_attention.last().expect("at least one layer")
    }
}

impl ConceptAligner {
    pub fn new(
        store: &mut ParamStore,
        config: AlignmentConfig,
        n_tokens: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(ConceptAligner {
            anatomy: ConceptDecoder::new(store, "align.anatomy", config, n_tokens, rng)?,
            pathology: ConceptDecoder::new(store, "align.pathology", config, n_tokens, rng)?,
        })
    }

    pub fn align(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        concepts: ConceptEmbeddings,
        grid: &VisualGrid,
    ) -> Result<AlignmentOutput> {
        let a = self
            .anatomy
            .forward(g, store, concepts.anatomy, grid.tokens)?;
        let p = self
            .pathology
            .forward(g, store, concepts.pathology, grid.tokens)?;
        Ok(AlignmentOutput {
            anatomy_features: a.features,
            pathology_features: p.features,
            anatomy_attention: a.attention,
            pathology_attention: p.attention,
            anatomy_logits: a.logits,
            pathology_logits: p.logits,
        })
    }
}

/// Mean two-class softmax cross-entropy of `[n × 2]` logits against 0/1
/// labels (label 1 selects column 1).
pub fn binary_head_loss(g: &mut Graph, logits: Var, labels: &[u8]) -> Result<Var> {
    let (n, c) = g.shape(logits);
    if c != 2 || n != labels.len() {
        return Err(Error::Shape(format!(
            "logits are {n}×{c} for {} labels; expected n×2",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::Data(format!("label {bad} is not binary")));
    }
    let targets: Vec<usize> = labels.iter().map(|&y| y as usize).collect();
    let per_row = g.cross_entropy_rows(logits, &targets);
    Ok(g.mean_all(per_row))
}

/// `(L_bce^a, L_bce^p)`.
pub fn alignment_loss(
    g: &mut Graph,
    logits_a: Var,
    y_a: &[u8],
    logits_p: Var,
    y_p: &[u8],
) -> Result<(Var, Var)> {
    Ok((
        binary_head_loss(g, logits_a, y_a)?,
        binary_head_loss(g, logits_p, y_p)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::SeedableRng;

    fn value_loss(logits: Array2<f64>, labels: &[u8]) -> f64 {
        let mut g = Graph::new();
        let l = g.input(logits);
        let loss = binary_head_loss(&mut g, l, labels).unwrap();
        g.scalar(loss)
    }

    #[test]
    fn uniform_logits_give_ln2() {
        for y in [0, 1] {
            assert!((value_loss(array![[0.0, 0.0]], &[y]) - 2f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn worked_example_both_labels() {
        // logits [1, -1]: label 1 -> ln(1 + e^2), label 0 -> ln(1 + e^-2)
        let l1 = value_loss(array![[1.0, -1.0]], &[1]);
        let l0 = value_loss(array![[1.0, -1.0]], &[0]);
        assert!((l1 - (1.0 + 2f64.exp()).ln()).abs() < 1e-12);
        assert!((l0 - (1.0 + (-2f64).exp()).ln()).abs() < 1e-12);
        assert!((l1 - 2.1269280110429727).abs() < 1e-12);
        assert!((l0 - 0.1269280110429726).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_approach_zero() {
        assert!(value_loss(array![[-40.0, 40.0]], &[1]) < 1e-30);
    }

    #[test]
    fn constant_shift_leaves_loss_unchanged() {
        let a = value_loss(array![[0.3, -0.2], [1.0, 2.0]], &[1, 0]);
        let b = value_loss(array![[5.3, 4.8], [-2.0, -1.0]], &[1, 0]);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn non_binary_labels_rejected() {
        let mut g = Graph::new();
        let l = g.input(Array2::zeros((1, 2)));
        assert!(matches!(
            binary_head_loss(&mut g, l, &[2]),
            Err(Error::Data(_))
        ));
    }

    fn decoder(self_attn: bool, positions: bool) -> (ParamStore, ConceptDecoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let cfg = AlignmentConfig {
            dim: 8,
            layers: 2,
            heads: 2,
            ffn_dim: 16,
            query_self_attention: self_attn,
            key_positions: positions,
        };
        let dec = ConceptDecoder::new(&mut store, "dec", cfg, 5, &mut rng).unwrap();
        (store, dec)
    }

    #[test]
    fn identical_tokens_give_uniform_attention() {
        let (store, dec) = decoder(true, true);
        let mut g = Graph::new();
        let q = g.input(Array2::from_shape_fn((3, 8), |(i, j)| {
            (i as f64 - j as f64) * 0.3
        }));
        let v = g.input(Array2::from_shape_fn((5, 8), |(_, j)| j as f64 * 0.1));
        let out = dec.forward(&mut g, &store, q, v).unwrap();
        for layer in &out.attention {
            for &m in layer {
                for x in g.value(m).iter() {
                    assert!((x - 0.2).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn singleton_attention_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let cfg = AlignmentConfig {
            dim: 4,
            heads: 1,
            ffn_dim: 4,
            ..AlignmentConfig::default()
        };
        let dec = ConceptDecoder::new(&mut store, "dec", cfg, 1, &mut rng).unwrap();
        let mut g = Graph::new();
        let q = g.input(array![[0.5, -0.5, 0.1, 0.2]]);
        let v = g.input(array![[1.0, 2.0, 3.0, 4.0]]);
        let out = dec.forward(&mut g, &store, q, v).unwrap();
        for layer in &out.attention {
            assert_eq!(g.value(layer[0]), &array![[1.0]]);
        }
    }

    #[test]
    fn permuting_queries_permutes_outputs() {
        let (store, dec) = decoder(true, false);
        let q0 = Array2::from_shape_fn((3, 8), |(i, j)| ((i * 5 + j * 3) % 7) as f64 * 0.2 - 0.6);
        let perm = [2, 0, 1];
        let q1 = Array2::from_shape_fn((3, 8), |(i, j)| q0[[perm[i], j]]);
        let v0 = Array2::from_shape_fn((5, 8), |(i, j)| ((i * 3 + j) % 5) as f64 * 0.25);
        let mut g = Graph::new();
        let (qa, qb, v) = (g.input(q0), g.input(q1), g.input(v0));
        let a = dec.forward(&mut g, &store, qa, v).unwrap();
        let b = dec.forward(&mut g, &store, qb, v).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            for (x, y) in g
                .value(b.features)
                .row(i)
                .iter()
                .zip(g.value(a.features).row(p))
            {
                assert!((x - y).abs() < 1e-12);
            }
            for (x, y) in g
                .value(b.logits)
                .row(i)
                .iter()
                .zip(g.value(a.logits).row(p))
            {
                assert!((x - y).abs() < 1e-12);
            }
            let (ma, mb) = (a.attention[1][0], b.attention[1][0]);
            for (x, y) in g.value(mb).row(i).iter().zip(g.value(ma).row(p)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn width_mismatch_is_a_shape_error() {
        let (store, dec) = decoder(false, false);
        let mut g = Graph::new();
        let q = g.input(Array2::zeros((2, 6)));
        let v = g.input(Array2::zeros((5, 8)));
        assert!(matches!(
            dec.forward(&mut g, &store, q, v),
            Err(Error::Shape(_))
        ));
    }
}
