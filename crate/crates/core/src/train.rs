//! Combined objective, optimization loop and checkpoints.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::{alignment_loss, AlignmentConfig, AlignmentOutput, ConceptAligner};
use crate::autograd::{Graph, Var};
use crate::bank::{ConceptBank, ConceptEmbedder, ConceptEmbeddings, ConceptMap, ConceptVocab};
use crate::corpus::{Corpus, GrammarSpec, Sample};
use crate::enhancement::{contrastive_loss, matching_loss, FeatureEnhancer};
use crate::error::{Error, Result};
use crate::gating::{FeatureGating, GateState, GatedFeatures};
use crate::generator::{GeneratorConfig, ReportGenerator, ReportVocab, EOS};
use crate::metrics::{ce_metrics, report_labels};
use crate::params::{Adam, AdamConfig, ParamStore};
use crate::vision::{VisionConfig, VisionEncoder, VisualGrid};

pub const CONFIG_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;

/// How `L_RG` reduces over the tokens of one report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub version: u32,
    pub seed: u64,
    pub beta0: f64,
    pub beta1: f64,
    pub use_bce: bool,
    pub use_cl: bool,
    pub use_m: bool,
    pub use_fg: bool,
    /// Stop gradients from the gates into the attention maps.
    pub detach_gate_entropy: bool,
    pub contrastive_temperature: f64,
    pub generation_reduction: Reduction,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many optimizer steps regardless of `epochs`.
    pub max_steps: Option<usize>,
    pub optimizer: AdamConfig,
    pub vision: VisionConfig,
    pub alignment: AlignmentConfig,
    pub generator: GeneratorConfig,
    /// Validation samples used per check (0 = whole split).
    pub validation_samples: usize,
    /// Beam width used when decoding during validation.
    pub validation_beam: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            version: CONFIG_VERSION,
            seed: 0,
            beta0: 0.5,
            beta1: 0.3,
            use_bce: true,
            use_cl: true,
            use_m: true,
            use_fg: true,
            detach_gate_entropy: false,
            contrastive_temperature: 1.0,
            generation_reduction: Reduction::Mean,
            epochs: 8,
            batch_size: 16,
            max_steps: None,
            optimizer: AdamConfig {
                learning_rate: 3e-3,
                ..AdamConfig::default()
            },
            vision: VisionConfig::default(),
            alignment: AlignmentConfig::default(),
            generator: GeneratorConfig::default(),
            validation_samples: 100,
            validation_beam: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if !(self.beta0 >= 0.0 && self.beta1 >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got beta0 {} beta1 {}",
                self.beta0, self.beta1
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if self.use_cl && self.batch_size < 2 {
            return Err(Error::Config(
                "the contrastive loss pairs samples and needs batch_size ≥ 2".into(),
            ));
        }
        if self.contrastive_temperature <= 0.0 {
            return Err(Error::Config(
                "contrastive_temperature must be positive".into(),
            ));
        }
        if self.vision.dim != self.alignment.dim {
            return Err(Error::Config(format!(
                "vision.dim {} must equal alignment.dim {}",
                self.vision.dim, self.alignment.dim
            )));
        }
        if self.validation_beam == 0 {
            return Err(Error::Config("validation_beam must be ≥ 1".into()));
        }
        self.generator.validate()
    }

    /// Short hex digest of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: TrainConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// All trainable modules plus the bank and vocabulary they were built for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub bank: ConceptBank,
    pub vocab: ReportVocab,
    pub embedder: ConceptEmbedder,
    pub vision: VisionEncoder,
    pub aligner: ConceptAligner,
    pub enhancer: FeatureEnhancer,
    pub gating: FeatureGating,
    pub generator: ReportGenerator,
}

/// Switches that change the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardFlags {
    pub use_fg: bool,
    pub detach_gate_entropy: bool,
}

impl From<&TrainConfig> for ForwardFlags {
    fn from(c: &TrainConfig) -> Self {
        ForwardFlags {
            use_fg: c.use_fg,
            detach_gate_entropy: c.detach_gate_entropy,
        }
    }
}

/// Every intermediate feature of one sample's forward pass.
#[derive(Debug, Clone)]
pub struct FeatureBundle {
    pub grid: VisualGrid,
    pub alignment: AlignmentOutput,
    /// `v'^a`
    pub contrast: Var,
    /// `v^a`
    pub fused: Var,
    /// `v^p`
    pub pathology: Var,
    pub gated_pathology: Var,
    pub gated_anatomy: Var,
    pub gates: Option<GatedFeatures>,
}

impl Model {
    pub fn new(
        config: &TrainConfig,
        bank: &ConceptBank,
        grammar: &GrammarSpec,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        bank.concept_map(grammar)?;
        let dim = config.alignment.dim;
        let vocab = ReportVocab::from_grammar(grammar);
        let embedder = ConceptEmbedder::new(store, bank, ConceptVocab::from_bank(bank), dim, rng)?;
        let vision = VisionEncoder::new(store, config.vision, rng)?;
        let n_tokens = config.vision.num_tokens()?;
        let aligner = ConceptAligner::new(store, config.alignment, n_tokens, rng)?;
        let enhancer = FeatureEnhancer::new(store, dim, rng);
        let gating = FeatureGating::new(
            store,
            bank.n_pathologies(),
            bank.n_anatomies(),
            config.alignment.heads,
        );
        let generator = ReportGenerator::new(
            store,
            config.generator,
            vocab.len(),
            dim,
            bank.n_pathologies(),
            bank.n_anatomies(),
            rng,
        )?;
        Ok(Model {
            bank: bank.clone(),
            vocab,
            embedder,
            vision,
            aligner,
            enhancer,
            gating,
            generator,
        })
    }

    pub fn concepts(&self, g: &mut Graph, store: &ParamStore) -> ConceptEmbeddings {
        self.embedder.embed(g, store)
    }

    pub fn features(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        concepts: ConceptEmbeddings,
        image: &Array2<f64>,
        flags: ForwardFlags,
    ) -> Result<FeatureBundle> {
        let grid = self.vision.encode(g, store, image)?;
        let alignment = self.aligner.align(g, store, concepts, &grid)?;
        let contrast = self
            .enhancer
            .contrast_transform(g, store, alignment.anatomy_features)?;
        let fused = self
            .enhancer
            .fuse(g, store, alignment.anatomy_features, contrast)?;
        let pathology = alignment.pathology_features;
        let (gated_pathology, gated_anatomy, gates) = if flags.use_fg {
            let gates = self.gating.gate_all(
                g,
                store,
                pathology,
                alignment.final_pathology_attention(),
                fused,
                alignment.final_anatomy_attention(),
                flags.detach_gate_entropy,
            )?;
            (gates.pathology.gated, gates.anatomy.gated, Some(gates))
        } else {
            (pathology, fused, None)
        };
        Ok(FeatureBundle {
            grid,
            alignment,
            contrast,
            fused,
            pathology,
            gated_pathology,
            gated_anatomy,
            gates,
        })
    }

    /// Forward pass without gradient tracking, returning plain arrays.
    pub fn infer(
        &self,
        store: &ParamStore,
        image: &Array2<f64>,
        flags: ForwardFlags,
    ) -> Result<Inference> {
        let mut g = Graph::inference();
        let concepts = self.concepts(&mut g, store);
        let f = self.features(&mut g, store, concepts, image, flags)?;
        let maps = |g: &Graph, layers: &[Vec<Var>]| -> Vec<Vec<Array2<f64>>> {
            layers
                .iter()
                .map(|l| l.iter().map(|&m| g.value(m).clone()).collect())
                .collect()
        };
        Ok(Inference {
            pathology_features: g.value(f.pathology).clone(),
            anatomy_features: g.value(f.fused).clone(),
            gated_pathology: g.value(f.gated_pathology).clone(),
            gated_anatomy: g.value(f.gated_anatomy).clone(),
            pathology_logits: g.value(f.alignment.pathology_logits).clone(),
            anatomy_logits: g.value(f.alignment.anatomy_logits).clone(),
            pathology_attention: maps(&g, &f.alignment.pathology_attention),
            anatomy_attention: maps(&g, &f.alignment.anatomy_attention),
            gates: f.gates.map(|gs| {
                (
                    GateState::from_output(&g, &gs.pathology),
                    GateState::from_output(&g, &gs.anatomy),
                )
            }),
            grid_shape: (f.grid.rows, f.grid.cols),
        })
    }

    pub fn generate(
        &self,
        store: &ParamStore,
        inference: &Inference,
        beam_size: usize,
        top_k: usize,
    ) -> Result<crate::generator::Decoded> {
        self.generator.decode(
            store,
            &inference.gated_pathology,
            &inference.gated_anatomy,
            beam_size,
            top_k,
        )
    }
}

/// Plain-array results of [`Model::infer`].
#[derive(Debug, Clone)]
pub struct Inference {
    pub pathology_features: Array2<f64>,
    pub anatomy_features: Array2<f64>,
    pub gated_pathology: Array2<f64>,
    pub gated_anatomy: Array2<f64>,
    pub pathology_logits: Array2<f64>,
    pub anatomy_logits: Array2<f64>,
    /// `[layer][head]` maps, `[n_p × N_v]`.
    pub pathology_attention: Vec<Vec<Array2<f64>>>,
    pub anatomy_attention: Vec<Vec<Array2<f64>>>,
    /// `(pathology, anatomy)` gate states when gating is enabled.
    pub gates: Option<(GateState, GateState)>,
    pub grid_shape: (usize, usize),
}

/// Supervision for one sample in bank order.
#[derive(Debug, Clone, PartialEq)]
pub struct Labels {
    pub y_a: Vec<u8>,
    pub y_p: Vec<u8>,
    pub e: Vec<Vec<u8>>,
    /// Report token ids followed by EOS.
    pub targets: Vec<usize>,
}

impl Labels {
    pub fn new(model: &Model, map: &ConceptMap, sample: &Sample) -> Result<Self> {
        let t = map.project(&sample.triplets);
        let mut targets = model.vocab.encode(&sample.report)?;
        targets.push(EOS);
        Ok(Labels {
            y_a: t.anatomy_labels(),
            y_p: t.pathology_labels(),
            e: t.rows(),
            targets,
        })
    }
}

/// A sample paired with its labels.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub image: &'a Array2<f64>,
    pub labels: &'a Labels,
}

/// Batch-mean loss components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    #[serde(rename = "L")]
    pub total: f64,
    #[serde(rename = "L_bce_a")]
    pub bce_a: f64,
    #[serde(rename = "L_bce_p")]
    pub bce_p: f64,
    #[serde(rename = "L_cl")]
    pub cl: f64,
    #[serde(rename = "L_m")]
    pub m: f64,
    #[serde(rename = "L_RG")]
    pub rg: f64,
}

impl LossComponents {
    /// `β0 (L_bce^a + L_bce^p) + β1 (L_m + L_cl^a) + L_RG`, evaluated in the
    /// same order as the graph.
    pub fn recombine(&self, beta0: f64, beta1: f64) -> f64 {
        combine(
            self.bce_a, self.bce_p, self.cl, self.m, self.rg, beta0, beta1,
        )
    }
}

fn combine(bce_a: f64, bce_p: f64, cl: f64, m: f64, rg: f64, beta0: f64, beta1: f64) -> f64 {
    (bce_a + bce_p) * beta0 + (m + cl) * beta1 + rg
}

/// Graph handles of the objective and its parts.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: Var,
    pub bce_a: Var,
    pub bce_p: Var,
    pub cl: Var,
    pub m: Var,
    pub rg: Var,
    pub features: Vec<FeatureBundle>,
}

impl LossOutput {
    pub fn components(&self, g: &Graph) -> LossComponents {
        LossComponents {
            total: g.scalar(self.total),
            bce_a: g.scalar(self.bce_a),
            bce_p: g.scalar(self.bce_p),
            cl: g.scalar(self.cl),
            m: g.scalar(self.m),
            rg: g.scalar(self.rg),
        }
    }
}

fn batch_mean(g: &mut Graph, terms: &[Var]) -> Var {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    g.scale(acc, 1.0 / terms.len() as f64)
}

/// The combined objective over a batch. Disabled losses are not evaluated
/// and contribute an exact zero.
pub fn total_loss(
    g: &mut Graph,
    model: &Model,
    store: &ParamStore,
    config: &TrainConfig,
    batch: &[Example],
) -> Result<LossOutput> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    if config.use_cl && batch.len() < 2 {
        return Err(Error::Config(
            "the contrastive loss needs at least two samples per batch".into(),
        ));
    }
    let flags = ForwardFlags::from(config);
    let concepts = model.concepts(g, store);
    let features = batch
        .iter()
        .map(|ex| model.features(g, store, concepts, ex.image, flags))
        .collect::<Result<Vec<_>>>()?;

    let zero = g.constant_scalar(0.0);
    let (bce_a, bce_p) = if config.use_bce {
        let mut la = Vec::with_capacity(batch.len());
        let mut lp = Vec::with_capacity(batch.len());
        for (f, ex) in features.iter().zip(batch) {
            let (a, p) = alignment_loss(
                g,
                f.alignment.anatomy_logits,
                &ex.labels.y_a,
                f.alignment.pathology_logits,
                &ex.labels.y_p,
            )?;
            la.push(a);
            lp.push(p);
        }
        (batch_mean(g, &la), batch_mean(g, &lp))
    } else {
        (zero, zero)
    };
    let cl = if config.use_cl {
        let n = features.len();
        let terms = (0..n)
            .map(|b| {
                contrastive_loss(
                    g,
                    features[b].contrast,
                    features[(b + 1) % n].contrast,
                    config.contrastive_temperature,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        batch_mean(g, &terms)
    } else {
        zero
    };
    let m = if config.use_m {
        let terms = features
            .iter()
            .zip(batch)
            .map(|(f, ex)| matching_loss(g, f.pathology, f.fused, &ex.labels.e, &ex.labels.y_p))
            .collect::<Result<Vec<_>>>()?;
        batch_mean(g, &terms)
    } else {
        zero
    };
    let pairs: Vec<(Var, Var)> = features
        .iter()
        .map(|f| (f.gated_pathology, f.gated_anatomy))
        .collect();
    let targets: Vec<&[usize]> = batch
        .iter()
        .map(|ex| ex.labels.targets.as_slice())
        .collect();
    let mut rg_terms = model
        .generator
        .generation_losses(g, store, &pairs, &targets)?;
    if config.generation_reduction == Reduction::Mean {
        for (t, tg) in rg_terms.iter_mut().zip(&targets) {
            *t = g.scale(*t, 1.0 / tg.len() as f64);
        }
    }
    let rg = batch_mean(g, &rg_terms);

    let bce = g.add(bce_a, bce_p);
    let bce = g.scale(bce, config.beta0);
    let enh = g.add(m, cl);
    let enh = g.scale(enh, config.beta1);
    let total = g.add(bce, enh);
    let total = g.add(total, rg);
    Ok(LossOutput {
        total,
        bce_a,
        bce_p,
        cl,
        m,
        rg,
        features,
    })
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    #[serde(flatten)]
    pub losses: LossComponents,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub step: usize,
    pub epoch: usize,
    /// Mean teacher-forced `L_RG` per validation sample.
    pub val_rg: f64,
    pub val_macro_f1: f64,
    pub val_example_f1: f64,
    pub unparsed_sentences: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub config_hash: String,
    pub grammar_hash: String,
    pub step: usize,
    pub epoch: usize,
    pub model: Model,
    pub store: ParamStore,
    pub optimizer: Adam,
    pub rng: ChaCha8Rng,
    pub validation: Option<ValidationRecord>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        if ckpt.config.hash() != ckpt.config_hash {
            return Err(Error::Data(
                "checkpoint config hash does not match its config".into(),
            ));
        }
        Ok(ckpt)
    }

    pub fn flags(&self) -> ForwardFlags {
        ForwardFlags::from(&self.config)
    }

    /// Errors unless the checkpoint was trained on `grammar`.
    pub fn check_grammar(&self, grammar: &GrammarSpec) -> Result<()> {
        let h = grammar.hash();
        if h != self.grammar_hash {
            return Err(Error::Data(format!(
                "checkpoint grammar hash {} does not match corpus grammar {h}",
                self.grammar_hash
            )));
        }
        Ok(())
    }
}

fn stream(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;

/// Optimizer state around a model; one instance owns the parameters.
pub struct Trainer {
    pub config: TrainConfig,
    pub grammar_hash: String,
    pub model: Model,
    pub store: ParamStore,
    pub optimizer: Adam,
    pub rng: ChaCha8Rng,
    pub step: usize,
    pub epoch: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, grammar: &GrammarSpec, bank: &ConceptBank) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = stream(config.seed, INIT_STREAM);
        let model = Model::new(&config, bank, grammar, &mut store, &mut init)?;
        let optimizer = Adam::new(config.optimizer, &store);
        Ok(Trainer {
            rng: stream(config.seed, SHUFFLE_STREAM),
            grammar_hash: grammar.hash(),
            config,
            model,
            store,
            optimizer,
            step: 0,
            epoch: 0,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Self {
        Trainer {
            config: ckpt.config,
            grammar_hash: ckpt.grammar_hash,
            model: ckpt.model,
            store: ckpt.store,
            optimizer: ckpt.optimizer,
            rng: ckpt.rng,
            step: ckpt.step,
            epoch: ckpt.epoch,
        }
    }

    pub fn checkpoint(&self, validation: Option<ValidationRecord>) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            config_hash: self.config.hash(),
            grammar_hash: self.grammar_hash.clone(),
            step: self.step,
            epoch: self.epoch,
            model: self.model.clone(),
            store: self.store.clone(),
            optimizer: self.optimizer.clone(),
            rng: self.rng.clone(),
            validation,
        }
    }

    pub fn train_step(&mut self, batch: &[Example]) -> Result<LossComponents> {
        let mut g = Graph::new();
        let out = total_loss(&mut g, &self.model, &self.store, &self.config, batch)?;
        let losses = out.components(&g);
        if !losses.total.is_finite() {
            return Err(Error::Numerical(format!(
                "loss became {} at step {}",
                losses.total, self.step
            )));
        }
        let grads = g.backward(out.total);
        self.optimizer.step(&mut self.store, grads.params())?;
        self.step += 1;
        Ok(losses)
    }

    /// Shuffled batches for one epoch. A trailing batch of one sample is
    /// merged into the previous batch so every batch can be paired.
    pub fn epoch_batches(&mut self, n: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        let mut batches: Vec<Vec<usize>> = order
            .chunks(self.config.batch_size)
            .map(<[usize]>::to_vec)
            .collect();
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
            let last = batches.pop().expect("non-empty");
            batches.last_mut().expect("non-empty").extend(last);
        }
        batches
    }
}

/// Labels for each sample of `samples`.
pub fn prepare_labels(
    model: &Model,
    grammar: &GrammarSpec,
    samples: &[Sample],
) -> Result<Vec<Labels>> {
    let map = model.bank.concept_map(grammar)?;
    samples
        .iter()
        .map(|s| Labels::new(model, &map, s))
        .collect()
}

/// Mean teacher-forced `L_RG` and decoded CE scores on `samples`.
pub fn validate(
    model: &Model,
    store: &ParamStore,
    config: &TrainConfig,
    grammar: &GrammarSpec,
    samples: &[Sample],
    labels: &[Labels],
) -> Result<(f64, f64, f64, usize)> {
    let map = model.bank.concept_map(grammar)?;
    let flags = ForwardFlags::from(config);
    let mut rg = 0.0;
    let mut predicted = Vec::with_capacity(samples.len());
    let mut reference = Vec::with_capacity(samples.len());
    let mut unparsed = 0;
    for (s, l) in samples.iter().zip(labels) {
        let mut g = Graph::inference();
        let concepts = model.concepts(&mut g, store);
        let f = model.features(&mut g, store, concepts, &s.image, flags)?;
        let loss = model.generator.generation_loss(
            &mut g,
            store,
            f.gated_pathology,
            f.gated_anatomy,
            &l.targets,
        )?;
        rg += g.scalar(loss);
        let decoded = model.generator.decode(
            store,
            g.value(f.gated_pathology),
            g.value(f.gated_anatomy),
            config.validation_beam,
            0,
        )?;
        let words = model.vocab.decode(&decoded.tokens);
        let (labels_pred, bad) = report_labels(grammar, &map, &words);
        unparsed += bad;
        predicted.push(labels_pred);
        reference.push(l.y_p.clone());
    }
    let ce = ce_metrics(&predicted, &reference, &model.bank.pathology_names())?;
    Ok((
        rg / samples.len().max(1) as f64,
        ce.macro_avg.f1,
        ce.example.f1,
        unparsed,
    ))
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    pub best: Checkpoint,
    pub steps: Vec<StepRecord>,
    pub validations: Vec<ValidationRecord>,
}

/// Trains on the corpus train split, validating after every epoch. When
/// `out` is given, writes `config.json`, `metrics.jsonl`, `best.json` and
/// `last.json` there.
pub fn train(
    config: &TrainConfig,
    corpus: &Corpus,
    bank: &ConceptBank,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    let grammar = &corpus.grammar;
    if bank.vocab_hash != grammar.hash() {
        return Err(Error::Data(format!(
            "bank vocab hash {} does not match corpus grammar {}",
            bank.vocab_hash,
            grammar.hash()
        )));
    }
    let mut trainer = Trainer::new(config.clone(), grammar, bank)?;
    let train_samples = corpus.split("train")?;
    let val_all = corpus.split("val")?;
    let val_samples = if config.validation_samples == 0 {
        val_all
    } else {
        &val_all[..config.validation_samples.min(val_all.len())]
    };
    if train_samples.is_empty() {
        return Err(Error::Data("train split is empty".into()));
    }
    if config.use_cl && train_samples.len() < 2 {
        return Err(Error::Config(
            "the contrastive loss needs at least two training samples".into(),
        ));
    }
    let longest = corpus
        .samples
        .iter()
        .map(|s| s.report.len())
        .max()
        .unwrap_or(0);
    if longest + 2 > config.generator.max_len {
        return Err(Error::Config(format!(
            "generator.max_len {} cannot hold the longest report ({longest} tokens plus BOS and EOS)",
            config.generator.max_len
        )));
    }
    let train_labels = prepare_labels(&trainer.model, grammar, train_samples)?;
    let val_labels = prepare_labels(&trainer.model, grammar, val_samples)?;

    let mut log = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            config.save(&dir.join("config.json"))?;
            let path = dir.join("metrics.jsonl");
            Some((
                fs::File::create(&path).map_err(|e| Error::io(&path, e))?,
                path,
            ))
        }
        None => None,
    };
    let mut write_line = |line: String| -> Result<()> {
        if let Some((file, path)) = log.as_mut() {
            writeln!(file, "{line}").map_err(|e| Error::io(path.clone(), e))?;
        }
        Ok(())
    };

    let run_validation = |trainer: &Trainer| -> Result<ValidationRecord> {
        let (val_rg, macro_f1, example_f1, unparsed) = if val_samples.is_empty() {
            (0.0, 0.0, 0.0, 0)
        } else {
            validate(
                &trainer.model,
                &trainer.store,
                &trainer.config,
                grammar,
                val_samples,
                &val_labels,
            )?
        };
        Ok(ValidationRecord {
            step: trainer.step,
            epoch: trainer.epoch,
            val_rg,
            val_macro_f1: macro_f1,
            val_example_f1: example_f1,
            unparsed_sentences: unparsed,
        })
    };

    let mut steps = Vec::new();
    let mut validations = Vec::new();
    let first = run_validation(&trainer)?;
    write_line(serde_json::to_string(
        &serde_json::json!({ "step": 0, "epoch": 0, "val": first }),
    )?)?;
    let mut best = trainer.checkpoint(Some(first.clone()));
    validations.push(first);
    let limit = config.max_steps.unwrap_or(usize::MAX);

    'epochs: for _ in 0..config.epochs {
        if trainer.step >= limit {
            break;
        }
        let batches = trainer.epoch_batches(train_samples.len());
        for idx in batches {
            if trainer.step >= limit {
                break 'epochs;
            }
            let batch: Vec<Example> = idx
                .iter()
                .map(|&i| Example {
                    image: &train_samples[i].image,
                    labels: &train_labels[i],
                })
                .collect();
            let losses = trainer.train_step(&batch)?;
            let record = StepRecord {
                step: trainer.step,
                epoch: trainer.epoch,
                losses,
            };
            write_line(serde_json::to_string(&record)?)?;
            steps.push(record);
        }
        trainer.epoch += 1;
        let v = run_validation(&trainer)?;
        write_line(serde_json::to_string(
            &serde_json::json!({ "step": v.step, "epoch": v.epoch, "val": v }),
        )?)?;
        if v.val_macro_f1
            > best
                .validation
                .as_ref()
                .map_or(f64::NEG_INFINITY, |b| b.val_macro_f1)
        {
            best = trainer.checkpoint(Some(v.clone()));
        }
        validations.push(v);
    }
    if validations.last().is_some_and(|v| v.step != trainer.step) {
        // stopped mid-epoch by max_steps: validate the final state too
        let v = run_validation(&trainer)?;
        write_line(serde_json::to_string(
            &serde_json::json!({ "step": v.step, "epoch": v.epoch, "val": v }),
        )?)?;
        if v.val_macro_f1
            > best
                .validation
                .as_ref()
                .map_or(f64::NEG_INFINITY, |b| b.val_macro_f1)
        {
            best = trainer.checkpoint(Some(v.clone()));
        }
        validations.push(v);
    }
    let last = trainer.checkpoint(validations.last().cloned());
    if let Some(dir) = out {
        best.save(&dir.join("best.json"))?;
        last.save(&dir.join("last.json"))?;
    }
    Ok(TrainOutcome {
        last,
        best,
        steps,
        validations,
    })
}
