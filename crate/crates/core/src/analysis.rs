//! Held-out evaluation and the analysis procedures: inter-class feature
//! distance, attention localization and the ablation table.

use std::fmt::Write as _;
use std::time::Instant;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::bank::ConceptBank;
use crate::corpus::{generate_single_finding, sample_seed, Corpus, GrammarSpec, RegionBox, Sample};
use crate::error::{Error, Result};
use crate::gating::GateState;
use crate::metrics::{ce_metrics, report_labels, CeMetrics, NlgScores};
use crate::params::ParamStore;
use crate::train::{train, Checkpoint, ForwardFlags, Model, TrainConfig};

/// Mean and extremes of gate values per concept over an evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateSummary {
    pub concept: String,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub generated: String,
    pub reference: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub n_samples: usize,
    pub beam_size: usize,
    pub nlg: NlgScores,
    pub ce: CeMetrics,
    /// Generated sentences the grammar parser could not read.
    pub unparsed_sentences: usize,
    pub localization: LocalizationReport,
    pub pathology_gates: Vec<GateSummary>,
    pub anatomy_gates: Vec<GateSummary>,
    pub predictions: Vec<Prediction>,
}

fn summarize_gates(names: &[String], states: &[GateState]) -> Vec<GateSummary> {
    if states.is_empty() {
        return Vec::new();
    }
    names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let vals: Vec<f64> = states.iter().map(|s| s.gates[i]).collect();
            GateSummary {
                concept: name.clone(),
                mean: vals.iter().sum::<f64>() / vals.len() as f64,
                min: vals.iter().copied().fold(f64::INFINITY, f64::min),
                max: vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect()
}

/// Decodes every sample of `samples` and scores the reports.
pub fn evaluate_samples(
    model: &Model,
    store: &ParamStore,
    flags: ForwardFlags,
    grammar: &GrammarSpec,
    samples: &[Sample],
    beam_size: usize,
    split: &str,
) -> Result<EvalReport> {
    let map = model.bank.concept_map(grammar)?;
    let mut generated = Vec::with_capacity(samples.len());
    let mut predicted = Vec::with_capacity(samples.len());
    let mut reference = Vec::with_capacity(samples.len());
    let mut unparsed = 0;
    let mut gates_p = Vec::new();
    let mut gates_a = Vec::new();
    let mut loc = LocalizationAccumulator::new(&model.bank);
    for s in samples {
        let inf = model.infer(store, &s.image, flags)?;
        let decoded = model.generate(store, &inf, beam_size, 0)?;
        let words = model.vocab.decode(&decoded.tokens);
        let (labels, bad) = report_labels(grammar, &map, &words);
        unparsed += bad;
        predicted.push(labels);
        reference.push(map.project(&s.triplets).pathology_labels());
        if let Some((p, a)) = inf.gates.clone() {
            gates_p.push(p);
            gates_a.push(a);
        }
        loc.add(grammar, &map, s, &inf.pathology_attention, inf.grid_shape)?;
        generated.push(words);
    }
    let pairs: Vec<(&[String], &[String])> = generated
        .iter()
        .zip(samples)
        .map(|(g, s)| (g.as_slice(), s.report.as_slice()))
        .collect();
    Ok(EvalReport {
        split: split.to_string(),
        n_samples: samples.len(),
        beam_size,
        nlg: NlgScores::compute(&pairs)?,
        ce: ce_metrics(&predicted, &reference, &model.bank.pathology_names())?,
        unparsed_sentences: unparsed,
        localization: loc.finish(),
        pathology_gates: summarize_gates(&model.bank.pathology_names(), &gates_p),
        anatomy_gates: summarize_gates(&model.bank.anatomy_names(), &gates_a),
        predictions: generated
            .iter()
            .zip(samples)
            .map(|(g, s)| Prediction {
                id: s.id.clone(),
                generated: g.join(" "),
                reference: s.report.join(" "),
            })
            .collect(),
    })
}

pub fn evaluate(
    ckpt: &Checkpoint,
    corpus: &Corpus,
    split: &str,
    beam_size: usize,
) -> Result<EvalReport> {
    ckpt.check_grammar(&corpus.grammar)?;
    evaluate_samples(
        &ckpt.model,
        &ckpt.store,
        ckpt.flags(),
        &corpus.grammar,
        corpus.split(split)?,
        beam_size,
        split,
    )
}

/// Cosine similarities between class centroids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterclassReport {
    pub classes: Vec<String>,
    pub similarity: Array2<f64>,
    pub mean_off_diagonal: f64,
}

/// Centroid of each class's feature vectors and the cosine-similarity matrix
/// between centroids.
pub fn centroid_similarity(
    classes: &[String],
    features: &[Vec<Array1<f64>>],
) -> Result<InterclassReport> {
    if classes.len() != features.len() || classes.len() < 2 {
        return Err(Error::Config(
            "inter-class distance needs at least two named classes".into(),
        ));
    }
    let mut centroids = Vec::with_capacity(features.len());
    for (name, feats) in classes.iter().zip(features) {
        let first = feats
            .first()
            .ok_or_else(|| Error::Data(format!("class {name:?} has no samples")))?;
        let mut c = Array1::zeros(first.len());
        for f in feats {
            c += f;
        }
        c /= feats.len() as f64;
        let norm = c.dot(&c).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Numerical(format!(
                "centroid of class {name:?} has norm {norm}"
            )));
        }
        centroids.push(c / norm);
    }
    let k = centroids.len();
    let similarity = Array2::from_shape_fn((k, k), |(i, j)| centroids[i].dot(&centroids[j]));
    let off: f64 = (0..k)
        .flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| similarity[[i, j]])
        .sum();
    Ok(InterclassReport {
        classes: classes.to_vec(),
        similarity,
        mean_off_diagonal: off / (k * (k - 1)) as f64,
    })
}

/// Five pathologies used for the inter-class analysis by default.
pub const DEFAULT_DISTANCE_CLASSES: [&str; 5] =
    ["atelectasis", "edema", "effusion", "pneumonia", "opacity"];

/// `per_class` single-finding samples for each named pathology.
pub fn single_finding_subset(
    grammar: &GrammarSpec,
    classes: &[String],
    per_class: usize,
    seed: u64,
) -> Result<Vec<Vec<Sample>>> {
    classes
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let p = grammar
                .pathology_index(name)
                .ok_or_else(|| Error::Config(format!("unknown pathology {name:?}")))?;
            (0..per_class)
                .map(|k| {
                    generate_single_finding(
                        grammar,
                        sample_seed(seed, (c * per_class + k) as u64),
                        p,
                    )
                })
                .collect()
        })
        .collect()
}

/// For each class, the pathology feature `v^p` row of that class's concept
/// per sample; returns the centroid similarity matrix.
pub fn interclass_distance(
    model: &Model,
    store: &ParamStore,
    flags: ForwardFlags,
    classes: &[String],
    subsets: &[Vec<Sample>],
) -> Result<InterclassReport> {
    let mut features = Vec::with_capacity(classes.len());
    for (name, samples) in classes.iter().zip(subsets) {
        let row = model
            .bank
            .pathologies
            .iter()
            .position(|e| &e.name == name)
            .ok_or_else(|| Error::Config(format!("pathology {name:?} not in the bank")))?;
        let feats = samples
            .iter()
            .map(|s| {
                Ok(model
                    .infer(store, &s.image, flags)?
                    .pathology_features
                    .row(row)
                    .to_owned())
            })
            .collect::<Result<Vec<_>>>()?;
        features.push(feats);
    }
    centroid_similarity(classes, &features)
}

/// Fraction of each visual token's patch covered by `region`, row-major.
pub fn region_token_weights(region: &RegionBox, grid: (usize, usize), patch: usize) -> Vec<f64> {
    let (rows, cols) = grid;
    let overlap = |start: usize, len: usize, lo: usize, hi: usize| {
        let (a, b) = (start.max(lo), (start + len).min(hi));
        b.saturating_sub(a)
    };
    (0..rows * cols)
        .map(|k| {
            let (r, c) = (k / cols, k % cols);
            let h = overlap(r * patch, patch, region.top, region.top + region.height);
            let w = overlap(c * patch, patch, region.left, region.left + region.width);
            (h * w) as f64 / (patch * patch) as f64
        })
        .collect()
}

/// Head-averaged attention of one concept row, upsampled to image size and
/// scaled so the peak is 1.
pub fn attention_heatmap(
    maps: &[Array2<f64>],
    row: usize,
    grid: (usize, usize),
    patch: usize,
) -> Result<Array2<f64>> {
    let (rows, cols) = grid;
    if maps.is_empty()
        || maps
            .iter()
            .any(|m| row >= m.nrows() || m.ncols() != rows * cols)
    {
        return Err(Error::Shape(format!(
            "attention maps do not cover row {row} of a {rows}x{cols} grid"
        )));
    }
    let mut avg = vec![0.0; rows * cols];
    for m in maps {
        for (a, v) in avg.iter_mut().zip(m.row(row)) {
            *a += v / maps.len() as f64;
        }
    }
    let peak = avg.iter().copied().fold(0.0, f64::max);
    let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
    Ok(Array2::from_shape_fn(
        (rows * patch, cols * patch),
        |(y, x)| avg[(y / patch) * cols + x / patch] * scale,
    ))
}

/// Attention mass inside a region divided by the region's share of the
/// tokens. A uniform distribution scores 1.
pub fn localization_score(attention: &[f64], weights: &[f64]) -> Result<f64> {
    if attention.len() != weights.len() || attention.is_empty() {
        return Err(Error::Shape(
            "attention and region weights differ in length".into(),
        ));
    }
    let area: f64 = weights.iter().sum();
    if area <= 0.0 {
        return Err(Error::Data("region covers no tokens".into()));
    }
    let mass: f64 = attention.iter().zip(weights).map(|(a, w)| a * w).sum();
    Ok(mass * attention.len() as f64 / area)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathologyLocalization {
    pub pathology: String,
    pub mean: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    /// Mean over all scored present pathologies.
    pub mean: f64,
    pub count: usize,
    pub per_pathology: Vec<PathologyLocalization>,
    /// Present findings skipped because their lesion mask was empty.
    pub skipped: usize,
}

struct LocalizationAccumulator {
    names: Vec<String>,
    sums: Vec<f64>,
    counts: Vec<usize>,
    skipped: usize,
}

impl LocalizationAccumulator {
    fn new(bank: &ConceptBank) -> Self {
        let n = bank.n_pathologies();
        LocalizationAccumulator {
            names: bank.pathology_names(),
            sums: vec![0.0; n],
            counts: vec![0; n],
            skipped: 0,
        }
    }

    fn add(
        &mut self,
        grammar: &GrammarSpec,
        map: &crate::bank::ConceptMap,
        sample: &Sample,
        attention: &[Vec<Array2<f64>>],
        grid: (usize, usize),
    ) -> Result<()> {
        let last = attention
            .last()
            .ok_or_else(|| Error::Shape("no attention layers".into()))?;
        let heads = last.len() as f64;
        let patch = grammar.image_height / grid.0;
        for mask in &sample.lesion_masks {
            if mask.area() == 0 {
                self.skipped += 1;
                continue;
            }
            let Some(row) = map.pathology.iter().position(|&g| g == mask.pathology) else {
                continue;
            };
            let region = &grammar.anatomies[mask.anatomy].region;
            let weights = region_token_weights(region, grid, patch);
            let n_tokens = grid.0 * grid.1;
            let mut avg = vec![0.0; n_tokens];
            for m in last {
                for (a, v) in avg.iter_mut().zip(m.row(row)) {
                    *a += v / heads;
                }
            }
            self.sums[row] += localization_score(&avg, &weights)?;
            self.counts[row] += 1;
        }
        Ok(())
    }

    fn finish(self) -> LocalizationReport {
        let count: usize = self.counts.iter().sum();
        let total: f64 = self.sums.iter().sum();
        LocalizationReport {
            mean: if count == 0 {
                0.0
            } else {
                total / count as f64
            },
            count,
            per_pathology: self
                .names
                .into_iter()
                .zip(self.sums.iter().zip(&self.counts))
                .filter(|(_, (_, &c))| c > 0)
                .map(|(pathology, (&s, &c))| PathologyLocalization {
                    pathology,
                    mean: s / c as f64,
                    count: c,
                })
                .collect(),
            skipped: self.skipped,
        }
    }
}

/// Mean localization score over the present findings of `samples`.
pub fn attention_localization(
    model: &Model,
    store: &ParamStore,
    flags: ForwardFlags,
    grammar: &GrammarSpec,
    samples: &[Sample],
) -> Result<LocalizationReport> {
    let map = model.bank.concept_map(grammar)?;
    let mut acc = LocalizationAccumulator::new(&model.bank);
    for s in samples {
        let inf = model.infer(store, &s.image, flags)?;
        acc.add(grammar, &map, s, &inf.pathology_attention, inf.grid_shape)?;
    }
    Ok(acc.finish())
}

/// One row of the ablation grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSetting {
    pub name: String,
    pub use_bce: bool,
    pub use_cl: bool,
    pub use_m: bool,
    pub use_fg: bool,
}

impl AblationSetting {
    pub fn new(name: &str, use_bce: bool, use_cl: bool, use_m: bool, use_fg: bool) -> Self {
        AblationSetting {
            name: name.to_string(),
            use_bce,
            use_cl,
            use_m,
            use_fg,
        }
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            use_bce: self.use_bce,
            use_cl: self.use_cl,
            use_m: self.use_m,
            use_fg: self.use_fg,
            ..base.clone()
        }
    }
}

/// The six-row grid: no auxiliary loss, BCE, BCE+CL, BCE+M, BCE+CL+M, and
/// everything with gating. The first row is the baseline.
pub fn default_grid() -> Vec<AblationSetting> {
    vec![
        AblationSetting::new("baseline", false, false, false, false),
        AblationSetting::new("bce", true, false, false, false),
        AblationSetting::new("bce+cl", true, true, false, false),
        AblationSetting::new("bce+m", true, false, true, false),
        AblationSetting::new("bce+cl+m", true, true, true, false),
        AblationSetting::new("full", true, true, true, true),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub setting: String,
    pub seed: u64,
    pub nlg: NlgScores,
    pub macro_f1: f64,
    /// Mean off-diagonal centroid similarity, when the distance analysis ran.
    pub interclass: Option<f64>,
    pub localization: f64,
    pub untrained_localization: f64,
    /// Validation `L_RG` before the first and after the last step.
    pub val_rg_start: f64,
    pub val_rg_end: f64,
    /// Wall-clock seconds for training and evaluating this run.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: AblationSetting,
    pub mean_nlg: NlgScores,
    pub mean_macro_f1: f64,
    /// Mean relative change of the NLG metrics over the baseline row, in
    /// percent (0 for the baseline itself).
    pub avg_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub runs: Vec<AblationRun>,
    pub rows: Vec<AblationRow>,
}

fn nlg_values(n: &NlgScores) -> [f64; 5] {
    [n.bleu_1, n.bleu_2, n.bleu_3, n.bleu_4, n.rouge_l]
}

/// Mean relative improvement of `x` over `base` across the NLG metrics, in
/// percent; metrics with a zero baseline are skipped.
pub fn avg_delta(x: &NlgScores, base: &NlgScores) -> f64 {
    let rel: Vec<f64> = nlg_values(x)
        .iter()
        .zip(nlg_values(base))
        .filter(|(_, b)| *b > 0.0)
        .map(|(a, b)| (a - b) / b * 100.0)
        .collect();
    if rel.is_empty() {
        0.0
    } else {
        rel.iter().sum::<f64>() / rel.len() as f64
    }
}

fn mean_nlg(runs: &[&AblationRun]) -> NlgScores {
    let n = runs.len().max(1) as f64;
    let mut acc = [0.0; 5];
    for r in runs {
        for (a, v) in acc.iter_mut().zip(nlg_values(&r.nlg)) {
            *a += v / n;
        }
    }
    NlgScores {
        bleu_1: acc[0],
        bleu_2: acc[1],
        bleu_3: acc[2],
        bleu_4: acc[3],
        rouge_l: acc[4],
    }
}

impl AblationTable {
    /// Aggregates per-run results into one row per setting, in grid order.
    pub fn from_runs(
        grid: &[AblationSetting],
        seeds: &[u64],
        runs: Vec<AblationRun>,
    ) -> Result<Self> {
        let base_name = &grid
            .first()
            .ok_or_else(|| Error::Config("empty ablation grid".into()))?
            .name;
        let of = |name: &str| {
            runs.iter()
                .filter(|r| r.setting == name)
                .collect::<Vec<_>>()
        };
        let base = mean_nlg(&of(base_name));
        let rows = grid
            .iter()
            .map(|s| {
                let rs = of(&s.name);
                let mean = mean_nlg(&rs);
                AblationRow {
                    setting: s.clone(),
                    avg_delta: if &s.name == base_name {
                        0.0
                    } else {
                        avg_delta(&mean, &base)
                    },
                    mean_macro_f1: rs.iter().map(|r| r.macro_f1).sum::<f64>()
                        / rs.len().max(1) as f64,
                    mean_nlg: mean,
                }
            })
            .collect();
        Ok(AblationTable {
            seeds: seeds.to_vec(),
            runs,
            rows,
        })
    }

    pub fn run(&self, setting: &str, seed: u64) -> Option<&AblationRun> {
        self.runs
            .iter()
            .find(|r| r.setting == setting && r.seed == seed)
    }

    /// Plain-text table, one line per setting and one per run.
    pub fn render(&self) -> String {
        let mark = |b: bool| if b { "x" } else { "." };
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<10} bce cl m fg  {:>6} {:>6} {:>6} {:>6} {:>6} {:>8} {:>6}",
            "setting", "BL-1", "BL-2", "BL-3", "BL-4", "RG-L", "AVG.D", "F1"
        );
        for r in &self.rows {
            let s = &r.setting;
            let n = &r.mean_nlg;
            let delta = if r.avg_delta == 0.0 && Some(s) == self.rows.first().map(|b| &b.setting) {
                "-".to_string()
            } else {
                format!("{:+.1}%", r.avg_delta)
            };
            let _ = writeln!(
                out,
                "{:<10}  {}  {}  {}  {}  {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>8} {:>6.3}",
                s.name,
                mark(s.use_bce),
                mark(s.use_cl),
                mark(s.use_m),
                mark(s.use_fg),
                n.bleu_1,
                n.bleu_2,
                n.bleu_3,
                n.bleu_4,
                n.rouge_l,
                delta,
                r.mean_macro_f1
            );
        }
        let _ = writeln!(out, "\nper seed:");
        for run in &self.runs {
            let _ =
                writeln!(
                out,
                "{:<10} seed {:<4} BL-4 {:.3} RG-L {:.3} F1 {:.3} loc {:.2} (untrained {:.2}){}",
                run.setting,
                run.seed,
                run.nlg.bleu_4,
                run.nlg.rouge_l,
                run.macro_f1,
                run.localization,
                run.untrained_localization,
                run.interclass.map(|d| format!(" interclass {d:.3}")).unwrap_or_default()
            );
        }
        out
    }
}

/// Options for [`run_ablation_suite`].
#[derive(Debug, Clone)]
pub struct AblationOptions {
    pub seeds: Vec<u64>,
    pub split: String,
    pub beam_size: usize,
    /// Samples per class for the inter-class analysis (0 skips it).
    pub distance_per_class: usize,
    pub distance_classes: Vec<String>,
}

impl Default for AblationOptions {
    fn default() -> Self {
        AblationOptions {
            seeds: vec![0, 1, 2, 3, 4],
            split: "test".into(),
            beam_size: 3,
            distance_per_class: 200,
            distance_classes: DEFAULT_DISTANCE_CLASSES
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

/// Trains every setting for every seed and evaluates on the held-out split.
/// `progress` is called after each run.
pub fn run_ablation_suite(
    grid: &[AblationSetting],
    base: &TrainConfig,
    corpus: &Corpus,
    bank: &ConceptBank,
    options: &AblationOptions,
    mut progress: impl FnMut(&AblationRun),
) -> Result<AblationTable> {
    let samples = corpus.split(&options.split)?;
    let subsets = if options.distance_per_class > 0 {
        Some(single_finding_subset(
            &corpus.grammar,
            &options.distance_classes,
            options.distance_per_class,
            corpus.manifest.seed ^ 0x5EED,
        )?)
    } else {
        None
    };
    let mut runs = Vec::new();
    for &seed in &options.seeds {
        for setting in grid {
            let mut config = setting.apply(base);
            config.seed = seed;
            let clock = Instant::now();
            let outcome = train(&config, corpus, bank, None)?;
            let ckpt = &outcome.best;
            let flags = ckpt.flags();
            let report = evaluate_samples(
                &ckpt.model,
                &ckpt.store,
                flags,
                &corpus.grammar,
                samples,
                options.beam_size,
                &options.split,
            )?;
            let initial = crate::train::Trainer::new(config.clone(), &corpus.grammar, bank)?;
            let untrained = attention_localization(
                &initial.model,
                &initial.store,
                flags,
                &corpus.grammar,
                samples,
            )?;
            let interclass = match &subsets {
                Some(s) => Some(
                    interclass_distance(
                        &ckpt.model,
                        &ckpt.store,
                        flags,
                        &options.distance_classes,
                        s,
                    )?
                    .mean_off_diagonal,
                ),
                None => None,
            };
            let run = AblationRun {
                setting: setting.name.clone(),
                seed,
                nlg: report.nlg,
                macro_f1: report.ce.macro_avg.f1,
                interclass,
                localization: report.localization.mean,
                untrained_localization: untrained.mean,
                val_rg_start: outcome.validations.first().map_or(f64::NAN, |v| v.val_rg),
                val_rg_end: outcome.validations.last().map_or(f64::NAN, |v| v.val_rg),
                seconds: clock.elapsed().as_secs_f64(),
            };
            progress(&run);
            runs.push(run);
        }
    }
    AblationTable::from_runs(grid, &options.seeds, runs)
}
