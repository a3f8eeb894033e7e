//! Anatomy contrastive transform, feature fusion, and the contrastive and
//! pathology–anatomy matching losses.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::params::ParamStore;

/// Row norms below this are treated as zero (cosine undefined).
pub const MIN_ROW_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureEnhancer {
    /// Row-wise map `v''^a → v'^a`.
    pub contrast: Mlp,
    /// Row-wise map `[v''^a ++ v'^a] → v^a`.
    pub fusion: Mlp,
}

impl FeatureEnhancer {
    pub fn new(store: &mut ParamStore, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        FeatureEnhancer {
            contrast: Mlp::new(store, "enhance.contrast", &[dim, dim, dim], rng),
            fusion: Mlp::new(store, "enhance.fusion", &[2 * dim, dim, dim], rng),
        }
    }

    pub fn contrast_transform(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        aligned: Var,
    ) -> Result<Var> {
        contrast_transform(g, store, &self.contrast, aligned)
    }

    pub fn fuse(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        aligned: Var,
        contrast: Var,
    ) -> Result<Var> {
        fuse(g, store, &self.fusion, aligned, contrast)
    }
}

pub fn contrast_transform(
    g: &mut Graph,
    store: &ParamStore,
    mlp: &Mlp,
    aligned: Var,
) -> Result<Var> {
    mlp.forward(g, store, aligned)
}

pub fn fuse(
    g: &mut Graph,
    store: &ParamStore,
    mlp: &Mlp,
    aligned: Var,
    contrast: Var,
) -> Result<Var> {
    if g.shape(aligned) != g.shape(contrast) {
        return Err(Error::Shape(format!(
            "fusion inputs differ: {:?} vs {:?}",
            g.shape(aligned),
            g.shape(contrast)
        )));
    }
    let joined = g.concat_cols(&[aligned, contrast]);
    mlp.forward(g, store, joined)
}

fn check_rows(g: &Graph, v: Var, what: &str) -> Result<()> {
    for (r, row) in g.value(v).outer_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if !norm.is_finite() || norm < MIN_ROW_NORM {
            return Err(Error::Numerical(format!(
                "{what} row {r} has norm {norm}; cosine undefined"
            )));
        }
    }
    Ok(())
}

/// Cosine similarity matrix `[n × m]` between the rows of `a` and `b`.
pub fn cosine_matrix(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    check_rows(g, a, "left feature")?;
    check_rows(g, b, "right feature")?;
    let an = g.normalize_rows(a);
    let bn = g.normalize_rows(b);
    Ok(g.matmul_t(an, bn))
}

/// Anatomy contrastive loss between the contrast features of one sample and
/// those of its paired sample. Row `j` of `own` is pulled towards row `j` of
/// `other` against all rows of `other`:
/// `-(1/n) Σ_j log softmax_j'(sim(own_j, other_j') / τ)[j]`.
pub fn contrastive_loss(g: &mut Graph, own: Var, other: Var, temperature: f64) -> Result<Var> {
    let (n, d) = g.shape(own);
    if g.shape(other) != (n, d) || n == 0 {
        return Err(Error::Shape(format!(
            "contrastive inputs must share a non-empty shape: {:?} vs {:?}",
            g.shape(own),
            g.shape(other)
        )));
    }
    if temperature <= 0.0 {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let sims = cosine_matrix(g, own, other)?;
    let logits = if temperature == 1.0 {
        sims
    } else {
        g.scale(sims, 1.0 / temperature)
    };
    let targets: Vec<usize> = (0..n).collect();
    let per_row = g.cross_entropy_rows(logits, &targets);
    Ok(g.mean_all(per_row))
}

/// Pathology–anatomy matching loss over present pathologies:
/// `(1/ΣY_p) Σ_i Y_p[i] (1/n_a) Σ_j |E_ij − max(sim(v^p_i, v^a_j), 0)|`,
/// defined as 0 when no pathology is present.
pub fn matching_loss(
    g: &mut Graph,
    pathology: Var,
    anatomy: Var,
    presence: &[Vec<u8>],
    y_p: &[u8],
) -> Result<Var> {
    let (n_p, d) = g.shape(pathology);
    let (n_a, da) = g.shape(anatomy);
    if d != da
        || presence.len() != n_p
        || y_p.len() != n_p
        || presence.iter().any(|r| r.len() != n_a)
    {
        return Err(Error::Shape(format!(
            "matching loss got features {n_p}×{d} / {n_a}×{da}, E with {} rows, Y_p of {}",
            presence.len(),
            y_p.len()
        )));
    }
    if y_p.iter().chain(presence.iter().flatten()).any(|&v| v > 1) {
        return Err(Error::Data("E and Y_p must be binary".into()));
    }
    let present = y_p.iter().filter(|&&y| y == 1).count();
    if present == 0 {
        return Ok(g.constant_scalar(0.0));
    }
    let sims = cosine_matrix(g, pathology, anatomy)?;
    let clamped = g.relu(sims);
    let e = Array2::from_shape_fn((n_p, n_a), |(i, j)| presence[i][j] as f64);
    let e = g.input(e);
    let diff = g.sub(e, clamped);
    let abs = g.abs(diff);
    // row weights Y_p[i] / (ΣY_p · n_a)
    let w = Array2::from_shape_fn((n_p, 1), |(i, _)| y_p[i] as f64 / (present * n_a) as f64);
    let w = g.input(w);
    let weighted = g.mul_col(abs, w);
    Ok(g.sum_all(weighted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    fn contrastive_value(a: Array2<f64>, b: Array2<f64>) -> f64 {
        let mut g = Graph::new();
        let (a, b) = (g.input(a), g.input(b));
        let l = contrastive_loss(&mut g, a, b, 1.0).unwrap();
        g.scalar(l)
    }

    fn matching_value(p: Array2<f64>, a: Array2<f64>, e: &[Vec<u8>], y: &[u8]) -> f64 {
        let mut g = Graph::new();
        let (p, a) = (g.input(p), g.input(a));
        let l = matching_loss(&mut g, p, a, e, y).unwrap();
        g.scalar(l)
    }

    #[test]
    fn singleton_contrastive_loss_is_zero() {
        assert_eq!(
            contrastive_value(array![[0.3, -2.0]], array![[1.0, 5.0]]),
            0.0
        );
    }

    #[test]
    fn equal_similarities_give_log_n() {
        // every pair orthogonal → all sims 0
        let a = array![[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]];
        let b = array![[0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]];
        assert!((contrastive_value(a, b) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn aligned_pairs_closed_form() {
        let a = array![[1.0, 0.0], [0.0, 1.0]];
        let l = contrastive_value(a.clone(), a);
        let want = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((l - want).abs() < 1e-12);
        assert!((l - 0.31326168751822286).abs() < 1e-12);
    }

    #[test]
    fn contrastive_decreases_with_positive_similarity() {
        let mut last = f64::INFINITY;
        for k in 0..=10 {
            let t = k as f64 / 10.0 * std::f64::consts::FRAC_PI_2;
            // own rows e1, e2; partner rows rotate from orthogonal-to-own to equal
            let own = array![[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]];
            let other = array![[t.sin(), 0.0, t.cos(), 0.0], [0.0, t.sin(), 0.0, t.cos()]];
            let l = contrastive_value(own, other);
            assert!(l <= last + 1e-15);
            last = l;
        }
    }

    #[test]
    fn zero_row_is_a_numerical_error() {
        let mut g = Graph::new();
        let a = g.input(array![[0.0, 0.0], [1.0, 0.0]]);
        let b = g.input(array![[1.0, 0.0], [0.0, 1.0]]);
        assert!(matches!(
            contrastive_loss(&mut g, a, b, 1.0),
            Err(Error::Numerical(_))
        ));
        let y = [1u8, 0];
        let e = vec![vec![1, 0], vec![0, 0]];
        assert!(matches!(
            matching_loss(&mut g, a, b, &e, &y),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn matching_loss_worked_example() {
        // sims [0.9, -0.3] against anatomies e1 and a unit vector at cos -0.3
        let p = array![[1.0, 0.0]];
        let c: f64 = 0.9;
        let s: f64 = -0.3;
        let a = array![[c, (1.0 - c * c).sqrt()], [s, (1.0 - s * s).sqrt()]];
        let l = matching_value(p, a, &[vec![1, 0]], &[1]);
        assert!((l - 0.05).abs() < 1e-12, "{l}");
    }

    #[test]
    fn no_present_pathology_gives_zero() {
        let p = array![[1.0, 0.0], [0.0, 1.0]];
        let a = array![[1.0, 1.0]];
        assert_eq!(matching_value(p, a, &[vec![0], vec![0]], &[0, 0]), 0.0);
    }

    #[test]
    fn perfect_match_gives_zero() {
        let p = array![[1.0, 0.0]];
        let a = array![[2.0, 0.0], [-1.0, 0.5], [0.0, 3.0]];
        assert!(matching_value(p, a, &[vec![1, 0, 0]], &[1]).abs() < 1e-15);
    }

    #[test]
    fn fusion_selecting_first_half_returns_aligned() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(&mut store, "fuse", &[6, 3], &mut rng);
        *store.value_mut(mlp.layers[0].weight) =
            Array2::from_shape_fn((6, 3), |(i, j)| f64::from(i == j));
        let aligned = array![[1.0, 2.0, 3.0], [-1.0, 0.5, 0.0]];
        let contrast = array![[9.0, 9.0, 9.0], [7.0, 7.0, 7.0]];
        let mut g = Graph::new();
        let (a, c) = (g.input(aligned.clone()), g.input(contrast));
        let out = fuse(&mut g, &store, &mlp, a, c).unwrap();
        assert_eq!(g.value(out), &aligned);
    }

    #[test]
    fn identity_contrast_mlp_is_identity() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(&mut store, "contrast", &[3, 3], &mut rng);
        *store.value_mut(mlp.layers[0].weight) = Array2::eye(3);
        let x = array![[0.1, -0.2, 0.3], [0.1, -0.2, 0.3]];
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let y = contrast_transform(&mut g, &store, &mlp, v).unwrap();
        assert_eq!(g.value(y), &x);
        assert_eq!(g.value(y).row(0), g.value(y).row(1));
    }
}
