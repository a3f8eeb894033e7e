//! Helpers shared by the integration test targets: a central-difference
//! gradient checker, brute-force metric oracles and small fixtures.

#![allow(dead_code)]

pub mod fixtures;
pub mod toy;

use std::collections::HashMap;

use conceptgen::autograd::{Graph, Var};
use conceptgen::params::ParamStore;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-scale..scale))
}

/// Replaces every parameter with uniform noise so no gradient path is cut by
/// a zero initialization.
pub fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store
            .value_mut(id)
            .mapv_inplace(|_| rng.gen_range(-scale..scale));
    }
}

/// Result of comparing analytic and numerical gradients.
#[derive(Debug)]
pub struct GradCheck {
    /// Largest per-tensor relative error `‖a − n‖ / max(‖a‖, ‖n‖, NORM_FLOOR)`.
    pub max_rel_error: f64,
    pub worst: String,
    /// Squared norm of all analytic gradients, to rule out a vacuous pass.
    pub grad_norm2: f64,
    pub checked: usize,
}

const STEP: f64 = 1e-5;

/// Gradients that vanish structurally (a key bias under softmax, say) leave
/// only rounding noise of order 1e-11; the floor keeps that from reading as a
/// relative error of 1.
pub const NORM_FLOOR: f64 = 1e-5;

fn rel_error(a: &Array2<f64>, n: &Array2<f64>) -> f64 {
    let diff = (a - n).mapv(|x| x * x).sum().sqrt();
    let scale = a
        .mapv(|x| x * x)
        .sum()
        .sqrt()
        .max(n.mapv(|x| x * x).sum().sqrt());
    diff / scale.max(NORM_FLOOR)
}

/// Checks d loss / d (every parameter in `store` and every input) against
/// central differences. `f` builds the scalar loss from the input vars.
pub fn check_gradients<F>(store: &ParamStore, inputs: &[Array2<f64>], f: F) -> GradCheck
where
    F: Fn(&mut Graph, &ParamStore, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.variable(x.clone())).collect();
    let loss = f(&mut g, store, &vars);
    let grads = g.backward(loss);

    let eval = |store: &ParamStore, inputs: &[Array2<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.variable(x.clone())).collect();
        let l = f(&mut g, store, &vars);
        g.scalar(l)
    };

    let mut out = GradCheck {
        max_rel_error: 0.0,
        worst: String::new(),
        grad_norm2: 0.0,
        checked: 0,
    };
    let record =
        |name: String, analytic: &Array2<f64>, numeric: &Array2<f64>, out: &mut GradCheck| {
            let e = rel_error(analytic, numeric);
            out.grad_norm2 += analytic.mapv(|x| x * x).sum();
            out.checked += analytic.len();
            if e > out.max_rel_error || out.worst.is_empty() {
                out.max_rel_error = e.max(out.max_rel_error);
                out.worst = name;
            }
        };

    for id in store.ids() {
        let shape = store.value(id).dim();
        let analytic = grads
            .param(id)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(shape));
        let mut numeric = Array2::zeros(shape);
        let mut s = store.clone();
        for idx in ndarray::indices(shape) {
            let orig = s.value(id)[idx];
            s.value_mut(id)[idx] = orig + STEP;
            let up = eval(&s, inputs);
            s.value_mut(id)[idx] = orig - STEP;
            let down = eval(&s, inputs);
            s.value_mut(id)[idx] = orig;
            numeric[idx] = (up - down) / (2.0 * STEP);
        }
        record(store.name(id).to_string(), &analytic, &numeric, &mut out);
    }
    for (k, (x, v)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads
            .wrt(*v)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(x.dim()));
        let mut numeric = Array2::zeros(x.dim());
        let mut xs = inputs.to_vec();
        for idx in ndarray::indices(x.dim()) {
            let orig = xs[k][idx];
            xs[k][idx] = orig + STEP;
            let up = eval(store, &xs);
            xs[k][idx] = orig - STEP;
            let down = eval(store, &xs);
            xs[k][idx] = orig;
            numeric[idx] = (up - down) / (2.0 * STEP);
        }
        record(format!("input {k}"), &analytic, &numeric, &mut out);
    }
    out
}

/// Clipped n-gram precision counts computed by direct enumeration.
pub fn oracle_ngram_counts(cand: &[String], reference: &[String], n: usize) -> (usize, usize) {
    if cand.len() < n {
        return (0, 0);
    }
    let grams = |s: &[String]| -> Vec<Vec<String>> { s.windows(n).map(|w| w.to_vec()).collect() };
    let c = grams(cand);
    let r = grams(reference);
    let mut matched = 0;
    let mut seen: Vec<&Vec<String>> = Vec::new();
    for gram in &c {
        if seen.contains(&gram) {
            continue;
        }
        seen.push(gram);
        let in_c = c.iter().filter(|x| *x == gram).count();
        let in_r = r.iter().filter(|x| *x == gram).count();
        matched += in_c.min(in_r);
    }
    (matched, c.len())
}

/// Sentence BLEU-n: geometric mean of clipped precisions times the brevity
/// penalty, 0 when any precision is 0.
pub fn oracle_bleu(cand: &[String], reference: &[String], n: usize) -> f64 {
    oracle_corpus_bleu(&[(cand.to_vec(), reference.to_vec())], n)
}

pub fn oracle_corpus_bleu(pairs: &[(Vec<String>, Vec<String>)], n: usize) -> f64 {
    let mut log_p = 0.0;
    for k in 1..=n {
        let (mut m, mut t) = (0, 0);
        for (c, r) in pairs {
            let (a, b) = oracle_ngram_counts(c, r, k);
            m += a;
            t += b;
        }
        if m == 0 || t == 0 {
            return 0.0;
        }
        log_p += (m as f64 / t as f64).ln() / n as f64;
    }
    let c: usize = pairs.iter().map(|p| p.0.len()).sum();
    let r: usize = pairs.iter().map(|p| p.1.len()).sum();
    let bp = if c >= r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    bp * log_p.exp()
}

/// Longest common subsequence by exhaustive recursion with memoization on
/// suffix pairs.
pub fn oracle_lcs(a: &[String], b: &[String]) -> usize {
    fn go(
        a: &[String],
        b: &[String],
        i: usize,
        j: usize,
        memo: &mut HashMap<(usize, usize), usize>,
    ) -> usize {
        if i == a.len() || j == b.len() {
            return 0;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let v = if a[i] == b[j] {
            1 + go(a, b, i + 1, j + 1, memo)
        } else {
            go(a, b, i + 1, j, memo).max(go(a, b, i, j + 1, memo))
        };
        memo.insert((i, j), v);
        v
    }
    go(a, b, 0, 0, &mut HashMap::new())
}

pub fn oracle_rouge_l(cand: &[String], reference: &[String]) -> f64 {
    if cand.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = oracle_lcs(cand, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / cand.len() as f64;
    let r = l / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Confusion counts for one class over all samples.
pub fn oracle_confusion(
    pred: &[Vec<u8>],
    reference: &[Vec<u8>],
    class: usize,
) -> (usize, usize, usize) {
    let mut tp = 0;
    let mut fp = 0;
    let mut fn_ = 0;
    for (p, r) in pred.iter().zip(reference) {
        match (p[class], r[class]) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fn_ += 1,
            _ => {}
        }
    }
    (tp, fp, fn_)
}

/// Random whitespace-free token sequence over a small alphabet so n-grams
/// repeat often.
pub fn random_tokens(rng: &mut ChaCha8Rng, max_len: usize, alphabet: usize) -> Vec<String> {
    let len = rng.gen_range(0..=max_len);
    (0..len)
        .map(|_| format!("w{}", rng.gen_range(0..alphabet)))
        .collect()
}

pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

/// Clinical-efficacy scores recomputed from label sets: `(example P, R, F1)`
/// averaged over samples and `(macro P, R, F1)` averaged over the classes
/// where each score has a nonzero denominator.
pub struct OracleCe {
    pub example: (f64, f64, f64),
    pub macro_avg: (f64, f64, f64),
}

pub fn oracle_ce(pred: &[Vec<u8>], reference: &[Vec<u8>]) -> OracleCe {
    use std::collections::BTreeSet;
    let set = |v: &Vec<u8>| -> BTreeSet<usize> {
        v.iter()
            .enumerate()
            .filter(|(_, &x)| x == 1)
            .map(|(i, _)| i)
            .collect()
    };
    let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
    for (a, b) in pred.iter().zip(reference) {
        let (sa, sb) = (set(a), set(b));
        let both = sa.intersection(&sb).count() as f64;
        p += if sa.is_empty() {
            f64::from(u8::from(sb.is_empty()))
        } else {
            both / sa.len() as f64
        };
        r += if sb.is_empty() {
            f64::from(u8::from(sa.is_empty()))
        } else {
            both / sb.len() as f64
        };
        f += if sa.is_empty() && sb.is_empty() {
            1.0
        } else {
            2.0 * both / (sa.len() + sb.len()) as f64
        };
    }
    let n = pred.len() as f64;
    let classes = pred.first().map_or(0, Vec::len);
    let (mut ps, mut rs, mut fs) = (Vec::new(), Vec::new(), Vec::new());
    for c in 0..classes {
        let (tp, fp, fn_) = oracle_confusion(pred, reference, c);
        if tp + fp > 0 {
            ps.push(tp as f64 / (tp + fp) as f64);
        }
        if tp + fn_ > 0 {
            rs.push(tp as f64 / (tp + fn_) as f64);
        }
        if tp + fp + fn_ > 0 {
            fs.push(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64);
        }
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    OracleCe {
        example: (p / n, r / n, f / n),
        macro_avg: (mean(&ps), mean(&rs), mean(&fs)),
    }
}

/// Random binary label vectors; `density` is the chance of each positive.
pub fn random_labels(
    rng: &mut ChaCha8Rng,
    samples: usize,
    classes: usize,
    density: f64,
) -> Vec<Vec<u8>> {
    (0..samples)
        .map(|_| {
            (0..classes)
                .map(|_| u8::from(rng.gen_bool(density)))
                .collect()
        })
        .collect()
}
