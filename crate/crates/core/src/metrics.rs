//! Text-overlap and clinical-efficacy metrics.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::bank::ConceptMap;
use crate::corpus::{parse_report_lenient, GrammarSpec};
use crate::error::{Error, Result};

fn ngram_counts<T: Eq + Hash>(tokens: &[T], k: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= k {
        for w in tokens.windows(k) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped matches and total candidate k-grams.
fn clipped_matches<T: Eq + Hash>(candidate: &[T], reference: &[T], k: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, k);
    let refs = ngram_counts(reference, k);
    let matched = cand
        .iter()
        .map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, candidate.len().saturating_sub(k - 1))
}

fn check_order(n: usize) -> Result<()> {
    if !(1..=4).contains(&n) {
        return Err(Error::Config(format!("BLEU order must be 1..=4, got {n}")));
    }
    Ok(())
}

fn combine(matches: &[usize], totals: &[usize], cand_len: usize, ref_len: usize) -> f64 {
    if cand_len == 0 || matches.iter().zip(totals).any(|(&m, &t)| m == 0 || t == 0) {
        return 0.0;
    }
    let log_p: f64 = matches
        .iter()
        .zip(totals)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / matches.len() as f64;
    let bp = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    bp * log_p.exp()
}

/// Sentence BLEU-n with uniform weights, brevity penalty and no smoothing.
pub fn bleu<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> Result<f64> {
    check_order(n)?;
    if reference.is_empty() {
        return Err(Error::Data("BLEU needs a non-empty reference".into()));
    }
    let (matches, totals): (Vec<_>, Vec<_>) = (1..=n)
        .map(|k| clipped_matches(candidate, reference, k))
        .unzip();
    Ok(combine(&matches, &totals, candidate.len(), reference.len()))
}

/// Corpus BLEU-n: clipped counts, candidate totals and lengths are pooled
/// over all pairs before combining.
pub fn corpus_bleu<T: Eq + Hash>(pairs: &[(&[T], &[T])], n: usize) -> Result<f64> {
    check_order(n)?;
    let mut matches = vec![0; n];
    let mut totals = vec![0; n];
    let (mut c, mut r) = (0, 0);
    for (cand, reference) in pairs {
        if reference.is_empty() {
            return Err(Error::Data("BLEU needs non-empty references".into()));
        }
        for k in 1..=n {
            let (m, t) = clipped_matches(cand, reference, k);
            matches[k - 1] += m;
            totals[k - 1] += t;
        }
        c += cand.len();
        r += reference.len();
    }
    Ok(combine(&matches, &totals, c, r))
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 over the longest common subsequence.
pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Data("ROUGE-L needs a non-empty reference".into()));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let lcs = lcs_len(candidate, reference);
    if lcs == 0 {
        return Ok(0.0);
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

/// BLEU-1..4 and ROUGE-L over a set of (candidate, reference) pairs. BLEU is
/// corpus-level; ROUGE-L is the mean of per-pair scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NlgScores {
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    pub rouge_l: f64,
}

impl NlgScores {
    pub fn compute<T: Eq + Hash>(pairs: &[(&[T], &[T])]) -> Result<Self> {
        let rouge = if pairs.is_empty() {
            0.0
        } else {
            pairs
                .iter()
                .map(|(c, r)| rouge_l(c, r))
                .sum::<Result<f64>>()?
                / pairs.len() as f64
        };
        Ok(NlgScores {
            bleu_1: corpus_bleu(pairs, 1)?,
            bleu_2: corpus_bleu(pairs, 2)?,
            bleu_3: corpus_bleu(pairs, 3)?,
            bleu_4: corpus_bleu(pairs, 4)?,
            rouge_l: rouge,
        })
    }

    pub fn mean(&self) -> f64 {
        (self.bleu_1 + self.bleu_2 + self.bleu_3 + self.bleu_4 + self.rouge_l) / 5.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Per-class counts and scores; a score is `None` when its denominator is 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub name: String,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CeMetrics {
    pub example: Prf,
    pub macro_avg: Prf,
    pub per_class: Vec<ClassScore>,
    /// Classes left out of the macro F1 mean (no predicted and no reference positives).
    pub excluded_from_macro_f1: Vec<String>,
    /// Samples with neither reference nor predicted positives, scored 1.
    pub empty_samples: usize,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn mean_defined(xs: impl Iterator<Item = Option<f64>>) -> f64 {
    let vals: Vec<f64> = xs.flatten().collect();
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// Clinical-efficacy scores from binary label vectors.
///
/// Example-based scores are averaged over samples. Per sample, an undefined
/// precision (nothing predicted) or recall (nothing to find) is 1 when the
/// other side is also empty and 0 otherwise; F1 is `2tp / (2tp + fp + fn)`,
/// 1 for an empty sample. Macro scores average each per-class score over the
/// classes where it is defined.
pub fn ce_metrics(
    predicted: &[Vec<u8>],
    reference: &[Vec<u8>],
    class_names: &[String],
) -> Result<CeMetrics> {
    if predicted.len() != reference.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} references",
            predicted.len(),
            reference.len()
        )));
    }
    let k = class_names.len();
    if let Some(bad) = predicted.iter().chain(reference).find(|v| v.len() != k) {
        return Err(Error::Shape(format!(
            "label vector of length {} for {k} classes",
            bad.len()
        )));
    }
    if predicted.iter().chain(reference).flatten().any(|&v| v > 1) {
        return Err(Error::Data("labels must be binary".into()));
    }
    let mut counts = vec![(0usize, 0usize, 0usize); k];
    let (mut sp, mut sr, mut sf) = (0.0, 0.0, 0.0);
    let mut empty_samples = 0;
    for (pred, gold) in predicted.iter().zip(reference) {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for c in 0..k {
            match (pred[c], gold[c]) {
                (1, 1) => {
                    tp += 1;
                    counts[c].0 += 1;
                }
                (1, 0) => {
                    fp += 1;
                    counts[c].1 += 1;
                }
                (0, 1) => {
                    fn_ += 1;
                    counts[c].2 += 1;
                }
                _ => {}
            }
        }
        if tp + fp + fn_ == 0 {
            empty_samples += 1;
        }
        sp += ratio(tp, tp + fp).unwrap_or(if fn_ == 0 { 1.0 } else { 0.0 });
        sr += ratio(tp, tp + fn_).unwrap_or(if fp == 0 { 1.0 } else { 0.0 });
        sf += ratio(2 * tp, 2 * tp + fp + fn_).unwrap_or(1.0);
    }
    let n = predicted.len().max(1) as f64;
    let per_class: Vec<ClassScore> = counts
        .iter()
        .zip(class_names)
        .map(|(&(tp, fp, fn_), name)| ClassScore {
            name: name.clone(),
            tp,
            fp,
            fn_,
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            f1: ratio(2 * tp, 2 * tp + fp + fn_),
        })
        .collect();
    let macro_avg = Prf {
        precision: mean_defined(per_class.iter().map(|c| c.precision)),
        recall: mean_defined(per_class.iter().map(|c| c.recall)),
        f1: mean_defined(per_class.iter().map(|c| c.f1)),
    };
    Ok(CeMetrics {
        example: Prf {
            precision: sp / n,
            recall: sr / n,
            f1: sf / n,
        },
        macro_avg,
        excluded_from_macro_f1: per_class
            .iter()
            .filter(|c| c.f1.is_none())
            .map(|c| c.name.clone())
            .collect(),
        per_class,
        empty_samples,
    })
}

/// Pathology-presence labels in bank order extracted from report tokens with
/// the lenient parser; also returns the number of unparsed sentences.
pub fn report_labels(
    grammar: &GrammarSpec,
    map: &ConceptMap,
    report: &[String],
) -> (Vec<u8>, usize) {
    let parsed = parse_report_lenient(grammar, report);
    (
        map.project(&parsed.triplets).pathology_labels(),
        parsed.unparsed_sentences,
    )
}
