//! A table-driven next-token model whose optimum is known by enumeration.

use std::collections::HashMap;

use conceptgen::error::Result;
use conceptgen::generator::{normalized_score, StepModel};
use rand::Rng;

pub const EOS: usize = 0;

/// Next-token distributions keyed by the emitted prefix; unlisted prefixes
/// get a uniform distribution.
#[derive(Clone)]
pub struct TableModel {
    pub vocab: usize,
    pub table: HashMap<Vec<usize>, Vec<f64>>,
}

impl TableModel {
    pub fn log_probs(&self, prefix: &[usize]) -> Vec<f64> {
        match self.table.get(prefix) {
            Some(p) => p.iter().map(|x| x.ln()).collect(),
            None => vec![-(self.vocab as f64).ln(); self.vocab],
        }
    }
}

impl StepModel for TableModel {
    type State = Vec<usize>;

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn eos(&self) -> usize {
        EOS
    }

    fn initial(&mut self) -> Result<(Vec<usize>, Vec<f64>)> {
        Ok((Vec::new(), self.log_probs(&[])))
    }

    fn advance(&mut self, state: &Vec<usize>, token: usize) -> Result<(Vec<usize>, Vec<f64>)> {
        let mut s = state.clone();
        s.push(token);
        let lp = self.log_probs(&s);
        Ok((s, lp))
    }
}

/// Tokens: 0 = EOS, then a, b, c. Greedy commits to `a`; the best sequence
/// `c c EOS` starts with the third most likely token, so a beam of 3 is the
/// smallest that finds it.
pub fn toy() -> TableModel {
    let mut table = HashMap::new();
    table.insert(vec![], vec![0.05, 0.5, 0.3, 0.15]);
    table.insert(vec![1], vec![0.3, 0.25, 0.25, 0.2]);
    table.insert(vec![2], vec![0.1, 0.3, 0.3, 0.3]);
    table.insert(vec![3], vec![0.02, 0.02, 0.02, 0.94]);
    table.insert(vec![3, 3], vec![0.98, 0.01, 0.005, 0.005]);
    TableModel { vocab: 4, table }
}

/// Best score over every sequence that either ends in EOS or reaches
/// `max_len`, together with all sequences attaining it.
pub fn exhaustive(model: &TableModel, max_len: usize) -> (f64, Vec<Vec<usize>>) {
    fn walk(
        m: &TableModel,
        max_len: usize,
        seq: &mut Vec<usize>,
        sum: f64,
        out: &mut Vec<(f64, Vec<usize>)>,
    ) {
        let lp = m.log_probs(seq);
        for (tok, &l) in lp.iter().enumerate() {
            if !l.is_finite() {
                continue;
            }
            seq.push(tok);
            if tok == EOS || seq.len() == max_len {
                out.push((normalized_score(sum + l, seq.len()), seq.clone()));
            } else {
                walk(m, max_len, seq, sum + l, out);
            }
            seq.pop();
        }
    }
    let mut all = Vec::new();
    walk(model, max_len, &mut Vec::new(), 0.0, &mut all);
    let best = all.iter().map(|x| x.0).fold(f64::NEG_INFINITY, f64::max);
    let argmax = all
        .into_iter()
        .filter(|x| x.0 == best)
        .map(|x| x.1)
        .collect();
    (best, argmax)
}

pub fn random_table(seed: u64, vocab: usize, max_len: usize) -> TableModel {
    let mut rng = super::rng(seed);
    let mut table = HashMap::new();
    let mut frontier = vec![Vec::<usize>::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for prefix in frontier {
            let w: Vec<f64> = (0..vocab).map(|_| rng.gen_range(0.05..1.0)).collect();
            let z: f64 = w.iter().sum();
            table.insert(prefix.clone(), w.iter().map(|x| x / z).collect());
            for t in 1..vocab {
                let mut p = prefix.clone();
                p.push(t);
                next.push(p);
            }
        }
        frontier = next;
    }
    TableModel { vocab, table }
}
