//! Small random instances of every differentiable component, each reduced
//! to a scalar so its gradients can be checked numerically.

use conceptgen::alignment::{binary_head_loss, AlignmentConfig, ConceptAligner};
use conceptgen::autograd::{Graph, Var};
use conceptgen::bank::ConceptEmbeddings;
use conceptgen::enhancement::{contrastive_loss, matching_loss, FeatureEnhancer};
use conceptgen::gating::FeatureGate;
use conceptgen::generator::{GeneratorConfig, ReportGenerator};
use conceptgen::params::ParamStore;
use conceptgen::vision::{VisionConfig, VisionEncoder};
use ndarray::Array2;
use rand::Rng;

use super::{check_gradients, random_matrix, randomize, rng, GradCheck};

fn labels(rng: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<u8> {
    (0..n).map(|_| rng.gen_range(0..2u8)).collect()
}

/// Weighted sum of a matrix so every element receives a distinct gradient.
fn probe(g: &mut Graph, x: Var, weights: &Array2<f64>) -> Var {
    let w = g.input(weights.clone());
    let p = g.mul(x, w);
    g.sum_all(p)
}

fn alignment_case(seed: u64, pathology_head: bool) -> GradCheck {
    let mut r = rng(seed);
    let (n_p, n_a, d, n_v) = (r.gen_range(1..=4), r.gen_range(1..=4), 8, 6);
    let cfg = AlignmentConfig {
        dim: d,
        layers: 2,
        heads: 2,
        ffn_dim: 12,
        query_self_attention: true,
        key_positions: true,
    };
    let mut store = ParamStore::new();
    let aligner = ConceptAligner::new(&mut store, cfg, n_v, &mut r).unwrap();
    randomize(&mut store, &mut r, 0.5);
    let y_a = labels(&mut r, n_a);
    let y_p = labels(&mut r, n_p);
    let inputs = [
        random_matrix(&mut r, n_p, d, 1.0),
        random_matrix(&mut r, n_a, d, 1.0),
        random_matrix(&mut r, n_v, d, 1.0),
    ];
    check_gradients(&store, &inputs, |g, store, v| {
        let grid = conceptgen::vision::VisualGrid {
            tokens: v[2],
            rows: 2,
            cols: 3,
            patch_size: 1,
        };
        let concepts = ConceptEmbeddings {
            pathology: v[0],
            anatomy: v[1],
        };
        let out = aligner.align(g, store, concepts, &grid).unwrap();
        if pathology_head {
            binary_head_loss(g, out.pathology_logits, &y_p).unwrap()
        } else {
            binary_head_loss(g, out.anatomy_logits, &y_a).unwrap()
        }
    })
}

/// `L_bce^a` through the full anatomy alignment stack.
pub fn bce_anatomy(seed: u64) -> GradCheck {
    alignment_case(seed, false)
}

/// `L_bce^p` through the full pathology alignment stack.
pub fn bce_pathology(seed: u64) -> GradCheck {
    alignment_case(seed, true)
}

/// `L_cl^a` through the contrast transform.
pub fn contrastive(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let (n_a, d) = (r.gen_range(2..=4), 8);
    let mut store = ParamStore::new();
    let enh = FeatureEnhancer::new(&mut store, d, &mut r);
    randomize(&mut store, &mut r, 0.5);
    let t = r.gen_range(0.5..2.0);
    let inputs = [
        random_matrix(&mut r, n_a, d, 1.0),
        random_matrix(&mut r, n_a, d, 1.0),
    ];
    check_gradients(&store, &inputs, |g, store, v| {
        let own = enh.contrast_transform(g, store, v[0]).unwrap();
        let other = enh.contrast_transform(g, store, v[1]).unwrap();
        contrastive_loss(g, own, other, t).unwrap()
    })
}

/// `L_m` on pathology features and fused anatomy features.
pub fn matching(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let (n_p, n_a, d) = (r.gen_range(1..=4), r.gen_range(1..=4), 8);
    let mut store = ParamStore::new();
    let enh = FeatureEnhancer::new(&mut store, d, &mut r);
    randomize(&mut store, &mut r, 0.5);
    let mut presence: Vec<Vec<u8>> = (0..n_p).map(|_| labels(&mut r, n_a)).collect();
    presence[0][0] = 1;
    let y_p: Vec<u8> = presence
        .iter()
        .map(|row| row.iter().copied().max().unwrap_or(0))
        .collect();
    let inputs = [
        random_matrix(&mut r, n_p, d, 1.0),
        random_matrix(&mut r, n_a, d, 1.0),
    ];
    check_gradients(&store, &inputs, |g, store, v| {
        let contrast = enh.contrast_transform(g, store, v[1]).unwrap();
        let fused = enh.fuse(g, store, v[1], contrast).unwrap();
        matching_loss(g, v[0], fused, &presence, &y_p).unwrap()
    })
}

/// `L_RG` through the prefix projections and the whole generator.
pub fn generation(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let (n_p, n_a, d, vocab) = (r.gen_range(1..=4), r.gen_range(1..=4), 6, 9);
    let cfg = GeneratorConfig {
        d_model: 8,
        layers: 1,
        heads: 2,
        ffn_dim: 12,
        max_len: 8,
        beam_size: 1,
    };
    let mut store = ParamStore::new();
    let gen = ReportGenerator::new(&mut store, cfg, vocab, d, n_p, n_a, &mut r).unwrap();
    randomize(&mut store, &mut r, 0.5);
    let len = r.gen_range(1..=8);
    let targets: Vec<usize> = (0..len).map(|_| r.gen_range(2..vocab)).collect();
    let inputs = [
        random_matrix(&mut r, n_p, d, 1.0),
        random_matrix(&mut r, n_a, d, 1.0),
    ];
    check_gradients(&store, &inputs, |g, store, v| {
        gen.generation_loss(g, store, v[0], v[1], &targets).unwrap()
    })
}

/// Patch embedding plus one local mixing layer.
pub fn vision(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let cfg = VisionConfig {
        image_height: 6,
        image_width: 9,
        patch_size: 3,
        dim: 4,
        mixing_layers: 1,
        standardize: true,
    };
    let mut store = ParamStore::new();
    let enc = VisionEncoder::new(&mut store, cfg, &mut r).unwrap();
    randomize(&mut store, &mut r, 0.5);
    let image = random_matrix(&mut r, 6, 9, 1.0).mapv(f64::abs);
    let patches = enc.patchify(&image).unwrap();
    let w = random_matrix(&mut r, 6, 4, 1.0);
    check_gradients(&store, &[patches], |g, store, v| {
        let grid = enc.encode_patches(g, store, v[0]).unwrap();
        probe(g, grid.tokens, &w)
    })
}

/// Concept embedding by mean pooling over description tokens.
pub fn concept_embedding(seed: u64) -> GradCheck {
    use conceptgen::bank::{embed_concepts, ConceptBank, ConceptVocab};
    use conceptgen::corpus::GrammarSpec;
    let mut r = rng(seed);
    let grammar = GrammarSpec::default();
    let bank =
        ConceptBank::from_grammar(&grammar, &conceptgen::bank::default_descriptions()).unwrap();
    let vocab = ConceptVocab::from_bank(&bank);
    let entries: Vec<_> = bank.pathologies.iter().take(3).cloned().collect();
    let table = random_matrix(&mut r, vocab.len(), 3, 1.0);
    let w = random_matrix(&mut r, entries.len(), 3, 1.0);
    check_gradients(&ParamStore::new(), &[table], |g, _, v| {
        let t = embed_concepts(g, v[0], &vocab, &entries).unwrap();
        probe(g, t, &w)
    })
}

/// Entropy gating, with gradients flowing through the attention maps.
pub fn gating(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let (n, heads, n_v, d) = (3, 2, 5, 4);
    let mut store = ParamStore::new();
    let gate = FeatureGate::new(&mut store, "gate", n, heads);
    randomize(&mut store, &mut r, 0.5);
    let w = random_matrix(&mut r, n, d, 1.0);
    let mut inputs = vec![random_matrix(&mut r, n, d, 1.0)];
    inputs.extend((0..heads).map(|_| random_matrix(&mut r, n, n_v, 2.0)));
    check_gradients(&store, &inputs, |g, store, v| {
        let maps: Vec<Var> = v[1..].iter().map(|&s| g.softmax_rows(s)).collect();
        let out = gate.apply(g, store, v[0], &maps, false).unwrap();
        probe(g, out.gated, &w)
    })
}

/// Instance seeds for the loss checks. Seed 0 draws a matching instance
/// whose cosines all clamp to zero, a flat region with no gradient to check.
pub const LOSS_SEEDS: [u64; 3] = [1, 2, 3];

/// Named cases for the losses that enter the training objective.
pub fn loss_cases() -> Vec<(&'static str, fn(u64) -> GradCheck)> {
    vec![
        ("L_bce^a", bce_anatomy),
        ("L_bce^p", bce_pathology),
        ("L_cl^a", contrastive),
        ("L_m", matching),
        ("L_RG", generation),
    ]
}
