mod common;

use common::{random_matrix, rng};
use conceptgen::alignment::{binary_head_loss, AlignmentConfig, ConceptDecoder};
use conceptgen::analysis::{localization_score, region_token_weights};
use conceptgen::autograd::Graph;
use conceptgen::bank::{default_descriptions, embed_concepts, ConceptBank, ConceptVocab};
use conceptgen::corpus::{generate_sample, parse_report, GrammarSpec, RegionBox};
use conceptgen::enhancement::{contrastive_loss, matching_loss};
use conceptgen::gating::{attention_entropy, gate_features};
use conceptgen::metrics::{bleu, ce_metrics, rouge_l};
use conceptgen::params::ParamStore;
use conceptgen::vision::{VisionConfig, VisionEncoder};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 48,
        ..ProptestConfig::default()
    }
}

fn close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) -> bool {
    a.dim() == b.dim() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn permute_rows(x: &Array2<f64>, perm: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn(x.dim(), |(i, j)| x[[perm[i], j]])
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn generated_reports_parse_back_to_their_triplets(seed in any::<u64>()) {
        let grammar = GrammarSpec::default();
        let s = generate_sample(&grammar, seed).unwrap();
        prop_assert_eq!(parse_report(&grammar, &s.report).unwrap(), s.triplets.clone());
    }

    #[test]
    fn lesions_lie_inside_their_anatomy(seed in any::<u64>()) {
        let grammar = GrammarSpec::default();
        let s = generate_sample(&grammar, seed).unwrap();
        let w = grammar.image_width;
        for m in &s.lesion_masks {
            prop_assert!(s.triplets.get(m.pathology, m.anatomy));
            let region = grammar.anatomies[m.anatomy].region;
            for (k, _) in m.pixels.iter().enumerate().filter(|(_, &p)| p) {
                prop_assert!(region.contains(k / w, k % w));
            }
        }
    }

    #[test]
    fn labels_follow_the_triplet_matrix(seed in any::<u64>()) {
        let grammar = GrammarSpec::default();
        let t = generate_sample(&grammar, seed).unwrap().triplets;
        let rows = t.rows();
        let y_p = t.pathology_labels();
        let y_a = t.anatomy_labels();
        for (i, row) in rows.iter().enumerate() {
            prop_assert_eq!(y_p[i], row.iter().copied().max().unwrap_or(0));
        }
        for j in 0..t.n_anatomies() {
            prop_assert_eq!(y_a[j], rows.iter().map(|r| r[j]).max().unwrap_or(0));
        }
    }

    #[test]
    fn sample_generation_is_deterministic(seed in any::<u64>()) {
        let grammar = GrammarSpec::default();
        let a = generate_sample(&grammar, seed).unwrap();
        let b = generate_sample(&grammar, seed).unwrap();
        prop_assert_eq!(a.image, b.image);
        prop_assert_eq!(a.report, b.report);
    }

    #[test]
    fn encoder_shape_contract(rows in 1usize..5, cols in 1usize..5, p in 1usize..5, dim in 1usize..6) {
        let cfg = VisionConfig {
            image_height: rows * p,
            image_width: cols * p,
            patch_size: p,
            dim,
            mixing_layers: 1,
            standardize: true,
        };
        let mut store = ParamStore::new();
        let enc = VisionEncoder::new(&mut store, cfg, &mut rng(0)).unwrap();
        let mut g = Graph::new();
        let image = random_matrix(&mut rng(1), rows * p, cols * p, 1.0);
        let grid = enc.encode(&mut g, &store, &image).unwrap();
        prop_assert_eq!((grid.rows, grid.cols), (rows, cols));
        prop_assert_eq!(g.shape(grid.tokens), (rows * cols, dim));
        prop_assert!(g.value(grid.tokens).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn attention_rows_are_distributions(seed in any::<u64>(), n in 1usize..5, heads in 1usize..4) {
        let mut r = rng(seed);
        let cfg = AlignmentConfig { dim: 4 * heads, layers: 2, heads, ffn_dim: 8, ..AlignmentConfig::default() };
        let mut store = ParamStore::new();
        let dec = ConceptDecoder::new(&mut store, "d", cfg, 7, &mut r).unwrap();
        common::randomize(&mut store, &mut r, 1.0);
        let mut g = Graph::new();
        let q = g.input(random_matrix(&mut r, n, cfg.dim, 2.0));
        let v = g.input(random_matrix(&mut r, 7, cfg.dim, 2.0));
        let out = dec.forward(&mut g, &store, q, v).unwrap();
        for layer in &out.attention {
            for &m in layer {
                for row in g.value(m).outer_iter() {
                    prop_assert!(row.iter().all(|&x| x >= 0.0));
                    prop_assert!((row.sum() - 1.0).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn concept_permutation_is_equivariant(seed in any::<u64>(), self_attention in any::<bool>()) {
        let mut r = rng(seed);
        let n = 4;
        let cfg = AlignmentConfig { dim: 8, layers: 2, heads: 2, ffn_dim: 8, query_self_attention: self_attention, key_positions: true };
        let mut store = ParamStore::new();
        let dec = ConceptDecoder::new(&mut store, "d", cfg, 5, &mut r).unwrap();
        common::randomize(&mut store, &mut r, 1.0);
        let queries = random_matrix(&mut r, n, 8, 1.0);
        let visual = random_matrix(&mut r, 5, 8, 1.0);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let run = |q: Array2<f64>| {
            let mut g = Graph::new();
            let (q, v) = (g.input(q), g.input(visual.clone()));
            let out = dec.forward(&mut g, &store, q, v).unwrap();
            let maps: Vec<Array2<f64>> = out.attention.iter().flatten().map(|&m| g.value(m).clone()).collect();
            (g.value(out.features).clone(), g.value(out.logits).clone(), maps)
        };
        let (f, l, m) = run(queries.clone());
        let (fp, lp, mp) = run(permute_rows(&queries, &perm));
        prop_assert!(close(&permute_rows(&f, &perm), &fp, 1e-10));
        prop_assert!(close(&permute_rows(&l, &perm), &lp, 1e-10));
        for (a, b) in m.iter().zip(&mp) {
            prop_assert!(close(&permute_rows(a, &perm), b, 1e-10));
        }
    }

    #[test]
    fn binary_loss_ignores_a_shared_logit_shift(seed in any::<u64>(), shift in -5.0f64..5.0) {
        let mut r = rng(seed);
        let logits = random_matrix(&mut r, 4, 2, 3.0);
        let labels: Vec<u8> = (0..4).map(|_| r.gen_range(0..2)).collect();
        let eval = |x: Array2<f64>| {
            let mut g = Graph::new();
            let v = g.input(x);
            let l = binary_head_loss(&mut g, v, &labels).unwrap();
            g.scalar(l)
        };
        let base = eval(logits.clone());
        prop_assert!(base >= 0.0);
        prop_assert!((eval(logits.mapv(|v| v + shift)) - base).abs() < 1e-12);
    }

    #[test]
    fn enhancement_losses_are_scale_invariant_and_bounded(seed in any::<u64>(), c in 0.1f64..10.0) {
        let mut r = rng(seed);
        let (n_p, n_a, d) = (3, 4, 5);
        let p = random_matrix(&mut r, n_p, d, 1.0);
        let a = random_matrix(&mut r, n_a, d, 1.0);
        let b = random_matrix(&mut r, n_a, d, 1.0);
        let presence: Vec<Vec<u8>> = (0..n_p).map(|_| (0..n_a).map(|_| r.gen_range(0..2)).collect()).collect();
        let y_p: Vec<u8> = presence.iter().map(|row| *row.iter().max().unwrap()).collect();
        let row = r.gen_range(0..n_a);
        let scaled = |x: &Array2<f64>, k: usize| {
            let mut y = x.clone();
            y.row_mut(k).mapv_inplace(|v| v * c);
            y
        };
        let losses = |p: Array2<f64>, a: Array2<f64>, b: Array2<f64>| {
            let mut g = Graph::new();
            let (p, a, b) = (g.input(p), g.input(a), g.input(b));
            let cl = contrastive_loss(&mut g, a, b, 1.0).unwrap();
            let m = matching_loss(&mut g, p, a, &presence, &y_p).unwrap();
            (g.scalar(cl), g.scalar(m))
        };
        let (cl, m) = losses(p.clone(), a.clone(), b.clone());
        let (cl2, m2) = losses(scaled(&p, 0), scaled(&a, row), scaled(&b, row));
        prop_assert!(cl >= 0.0);
        prop_assert!((0.0..=1.0).contains(&m));
        prop_assert!((cl - cl2).abs() < 1e-10);
        prop_assert!((m - m2).abs() < 1e-10);
    }

    #[test]
    fn entropy_is_bounded_and_permutation_invariant(seed in any::<u64>(), n_v in 1usize..12) {
        let mut r = rng(seed);
        let raw = random_matrix(&mut r, 3, n_v, 3.0).mapv(f64::exp);
        let rows = &raw / &raw.sum_axis(ndarray::Axis(1)).insert_axis(ndarray::Axis(1));
        let h = attention_entropy(&rows).unwrap();
        let mut cols: Vec<usize> = (0..n_v).collect();
        cols.shuffle(&mut r);
        let shuffled = Array2::from_shape_fn(rows.dim(), |(i, j)| rows[[i, cols[j]]]);
        let h2 = attention_entropy(&shuffled).unwrap();
        for (a, b) in h.iter().zip(&h2) {
            prop_assert!(*a >= -1e-12 && *a <= (n_v as f64).ln() + 1e-12);
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gates_are_open_interval_and_homogeneous(seed in any::<u64>(), c in -4.0f64..4.0) {
        let mut r = rng(seed);
        let (n, heads, d) = (3, 2, 4);
        let features = random_matrix(&mut r, n, d, 1.0);
        let entropies = random_matrix(&mut r, n, heads, 1.0).mapv(f64::abs);
        let weights = random_matrix(&mut r, n, heads, 3.0);
        let run = |x: Array2<f64>| {
            let mut g = Graph::new();
            let (x, e, w) = (g.input(x), g.input(entropies.clone()), g.input(weights.clone()));
            let (gated, gates) = gate_features(&mut g, x, e, w).unwrap();
            (g.value(gated).clone(), g.value(gates).clone())
        };
        let (v, s) = run(features.clone());
        let (vc, _) = run(features.mapv(|x| c * x));
        prop_assert!(s.iter().all(|&x| x > 0.0 && x < 1.0));
        prop_assert!(close(&v.mapv(|x| c * x), &vc, 1e-12));
    }

    #[test]
    fn self_scores_are_one_and_all_scores_bounded(
        a in proptest::collection::vec(0u8..5, 1..20),
        b in proptest::collection::vec(0u8..5, 0..20),
    ) {
        let a: Vec<String> = a.iter().map(|t| format!("t{t}")).collect();
        let b: Vec<String> = b.iter().map(|t| format!("t{t}")).collect();
        prop_assert_eq!(rouge_l(&a, &a).unwrap(), 1.0);
        for n in 1..=4 {
            if a.len() >= n {
                prop_assert!((bleu(&a, &a, n).unwrap() - 1.0).abs() < 1e-12);
            }
            let s = bleu(&b, &a, n).unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
            prop_assert_eq!(s, bleu(&b, &a, n).unwrap());
        }
        let r = rouge_l(&b, &a).unwrap();
        prop_assert!((0.0..=1.0).contains(&r));
    }

    #[test]
    fn uniform_attention_localizes_to_one(top in 0usize..60, left in 0usize..60, h in 1usize..40, w in 1usize..40) {
        let region = RegionBox::new(top, left, h.min(64 - top), w.min(64 - left));
        let weights = region_token_weights(&region, (16, 16), 4);
        let uniform = vec![1.0 / 256.0; 256];
        prop_assert!((localization_score(&uniform, &weights).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ce_metrics_are_pure_and_bounded(seed in any::<u64>()) {
        let mut r = rng(seed);
        let names: Vec<String> = (0..4).map(|i| format!("c{i}")).collect();
        let labels = |r: &mut rand_chacha::ChaCha8Rng| -> Vec<Vec<u8>> {
            (0..10).map(|_| (0..4).map(|_| r.gen_range(0..2)).collect()).collect()
        };
        let pred = labels(&mut r);
        let refs = labels(&mut r);
        let a = ce_metrics(&pred, &refs, &names).unwrap();
        let b = ce_metrics(&pred, &refs, &names).unwrap();
        prop_assert_eq!(&a, &b);
        for s in [a.example, a.macro_avg] {
            for v in [s.precision, s.recall, s.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}

#[test]
fn bank_json_round_trips_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let bank = ConceptBank::from_grammar(&GrammarSpec::default(), &default_descriptions()).unwrap();
    let path = dir.path().join("bank.json");
    bank.save(&path).unwrap();
    let first = std::fs::read(&path).unwrap();
    let loaded = ConceptBank::load(&path).unwrap();
    assert_eq!(loaded, bank);
    loaded.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);
}

#[test]
fn mean_pooling_ignores_description_token_order() {
    let bank = ConceptBank::from_grammar(&GrammarSpec::default(), &default_descriptions()).unwrap();
    let vocab = ConceptVocab::from_bank(&bank);
    let mut r = rng(3);
    let mut shuffled = bank.pathologies.clone();
    for e in &mut shuffled {
        let mut words: Vec<&str> = e.description.split_whitespace().collect();
        words.shuffle(&mut r);
        e.description = words.join(" ");
    }
    let table = random_matrix(&mut r, vocab.len(), 6, 1.0);
    let mut g = Graph::new();
    let t = g.input(table);
    let a = embed_concepts(&mut g, t, &vocab, &bank.pathologies).unwrap();
    let b = embed_concepts(&mut g, t, &vocab, &shuffled).unwrap();
    assert!(close(g.value(a), g.value(b), 1e-12));
    assert_eq!(g.shape(a), (bank.n_pathologies(), 6));
}

#[test]
fn entropy_equality_cases() {
    let one_hot = Array2::from_shape_vec((1, 4), vec![0.0, 1.0, 0.0, 0.0]).unwrap();
    let uniform = Array2::from_elem((1, 4), 0.25);
    assert_eq!(
        attention_entropy(&one_hot).unwrap(),
        Array1::from(vec![0.0])
    );
    assert!((attention_entropy(&uniform).unwrap()[0] - 4f64.ln()).abs() < 1e-15);
}
