//! Attention-entropy feature gating.
//!
//! A concept whose attention is spread thinly over the image gets a
//! per-concept learned gate `σ_i = sigmoid(E_i · W_g[i])` computed from its
//! per-head attention entropies `E_i`, and its feature is scaled by `σ_i`.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Tolerance on attention row sums.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;

fn check_distribution(row: ndarray::ArrayView1<f64>, what: &str) -> Result<()> {
    let sum = row.sum();
    if row.iter().any(|&a| !(a >= 0.0)) || (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
        return Err(Error::Data(format!(
            "{what} is not a probability distribution (sum {sum})"
        )));
    }
    Ok(())
}

fn entropy(row: ndarray::ArrayView1<f64>) -> f64 {
    -row.iter()
        .filter(|&&a| a > 0.0)
        .map(|&a| a * a.ln())
        .sum::<f64>()
}

/// Entropy in nats of each row of `[heads × N_v]`, with `0 ln 0 = 0`.
pub fn attention_entropy(rows: &Array2<f64>) -> Result<Array1<f64>> {
    for (h, row) in rows.outer_iter().enumerate() {
        check_distribution(row, &format!("attention row for head {h}"))?;
    }
    Ok(rows.outer_iter().map(entropy).collect())
}

/// Per-concept, per-head entropies `[n × heads]` from one map per head,
/// each `[n × N_v]`. With `detach`, no gradient reaches the attention.
pub fn entropy_matrix(g: &mut Graph, maps: &[Var], detach: bool) -> Result<Var> {
    if maps.is_empty() {
        return Err(Error::Shape(
            "gating needs at least one attention head".into(),
        ));
    }
    let shape = g.shape(maps[0]);
    let mut cols = Vec::with_capacity(maps.len());
    for (h, &m) in maps.iter().enumerate() {
        if g.shape(m) != shape {
            return Err(Error::Shape(format!(
                "head {h} map is {:?}, head 0 is {shape:?}",
                g.shape(m)
            )));
        }
        for (i, row) in g.value(m).outer_iter().enumerate() {
            check_distribution(row, &format!("attention of concept {i}, head {h}"))?;
        }
        let m = if detach { g.detach(m) } else { m };
        cols.push(g.entropy_rows(m));
    }
    Ok(if cols.len() == 1 {
        cols[0]
    } else {
        g.concat_cols(&cols)
    })
}

/// Returns `(σ_i · v_i, σ)` with `σ = sigmoid(rowsum(E ⊙ W_g))` as `[n × 1]`.
pub fn gate_features(
    g: &mut Graph,
    features: Var,
    entropies: Var,
    weights: Var,
) -> Result<(Var, Var)> {
    let (n, _) = g.shape(features);
    let (ne, heads) = g.shape(entropies);
    if ne != n || g.shape(weights) != (n, heads) {
        return Err(Error::Shape(format!(
            "gating got {n} features, entropies {:?}, weights {:?}",
            g.shape(entropies),
            g.shape(weights)
        )));
    }
    let prod = g.mul(entropies, weights);
    let logits = g.sum_cols(prod);
    let gates = g.sigmoid(logits);
    Ok((g.mul_col(features, gates), gates))
}

/// Learned gate weights for one concept kind, zero-initialized so every gate
/// starts at 0.5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGate {
    pub weight: ParamId,
}

impl FeatureGate {
    pub fn new(store: &mut ParamStore, name: &str, n_concepts: usize, heads: usize) -> Self {
        FeatureGate {
            weight: store.zeros(format!("{name}.weight"), n_concepts, heads),
        }
    }

    pub fn apply(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: Var,
        maps: &[Var],
        detach: bool,
    ) -> Result<GateOutput> {
        let entropies = entropy_matrix(g, maps, detach)?;
        let weights = g.param(store, self.weight);
        let (gated, gates) = gate_features(g, features, entropies, weights)?;
        Ok(GateOutput {
            gated,
            gates,
            entropies,
            weights,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GateOutput {
    pub gated: Var,
    pub gates: Var,
    pub entropies: Var,
    pub weights: Var,
}

/// Plain snapshot of one kind's gating for logging and inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateState {
    pub entropies: Array2<f64>,
    pub gates: Vec<f64>,
    pub weights: Array2<f64>,
}

impl GateState {
    pub fn from_output(g: &Graph, out: &GateOutput) -> Self {
        GateState {
            entropies: g.value(out.entropies).clone(),
            gates: g.value(out.gates).iter().copied().collect(),
            weights: g.value(out.weights).clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGating {
    pub pathology: FeatureGate,
    pub anatomy: FeatureGate,
}

#[derive(Debug, Clone, Copy)]
pub struct GatedFeatures {
    pub pathology: GateOutput,
    pub anatomy: GateOutput,
}

impl FeatureGating {
    pub fn new(
        store: &mut ParamStore,
        n_pathologies: usize,
        n_anatomies: usize,
        heads: usize,
    ) -> Self {
        FeatureGating {
            pathology: FeatureGate::new(store, "gate.pathology", n_pathologies, heads),
            anatomy: FeatureGate::new(store, "gate.anatomy", n_anatomies, heads),
        }
    }

    /// Gates pathology features with the final-layer pathology attention and
    /// fused anatomy features with the final-layer anatomy attention.
    #[allow(clippy::too_many_arguments)]
    pub fn gate_all(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        pathology: Var,
        pathology_maps: &[Var],
        anatomy: Var,
        anatomy_maps: &[Var],
        detach: bool,
    ) -> Result<GatedFeatures> {
        Ok(GatedFeatures {
            pathology: self
                .pathology
                .apply(g, store, pathology, pathology_maps, detach)?,
            anatomy: self
                .anatomy
                .apply(g, store, anatomy, anatomy_maps, detach)?,
        })
    }
}
