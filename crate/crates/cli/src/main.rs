use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use conceptgen::analysis::{
    attention_heatmap, default_grid, evaluate, run_ablation_suite, AblationOptions,
    DEFAULT_DISTANCE_CLASSES,
};
use conceptgen::bank::{build_bank, default_descriptions, load_descriptions, ConceptBank};
use conceptgen::corpus::{
    load_grayscale, read_json, save_grayscale, write_corpus, Corpus, GrammarSpec,
};
use conceptgen::train::{train, Checkpoint, TrainConfig};
use conceptgen::{Error, Result};

/// Environment variable naming the directory searched for default config
/// files (`grammar.json`, `train.json`).
const CONFIG_DIR_ENV: &str = "CONCEPTGEN_CONFIG_DIR";

#[derive(Parser)]
#[command(
    name = "conceptgen",
    version,
    about = "Concept-aligned report generation on synthetic chest images"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic image/report corpus.
    GenData(GenData),
    /// Build the concept bank from a corpus's reports.
    BuildBank(BuildBank),
    /// Train a model and write checkpoints and metrics.
    Train(Train),
    /// Evaluate a checkpoint on a corpus split.
    Eval(Eval),
    /// Generate a report for one sample or image.
    Generate(Generate),
    /// Export attention maps and gate values for one sample.
    InspectAttn(InspectAttn),
    /// Train and evaluate the six-row ablation grid over several seeds.
    Ablate(Ablate),
}

#[derive(Args)]
struct GenData {
    /// Grammar file (JSON). Defaults to `$CONCEPTGEN_CONFIG_DIR/grammar.json`, then the built-in grammar.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "data")]
    out: PathBuf,
    /// Number of samples.
    #[arg(long, default_value_t = 2000)]
    n: usize,
    /// Corpus seed.
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct BuildBank {
    /// Corpus directory.
    #[arg(long, default_value = "data")]
    corpus: PathBuf,
    /// Concept descriptions file (JSON name → text). Defaults to the bundled descriptions.
    #[arg(long)]
    desc: Option<PathBuf>,
    /// Minimum number of training reports mentioning a concept.
    #[arg(long, default_value_t = 1)]
    min_freq: usize,
    /// Output bank file.
    #[arg(long, default_value = "bank.json")]
    out: PathBuf,
}

/// Training settings that override the config file.
#[derive(Args)]
struct TrainOverrides {
    /// Training config (JSON). Defaults to `$CONCEPTGEN_CONFIG_DIR/train.json`, then built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Validation samples decoded after each epoch.
    #[arg(long)]
    validation_samples: Option<usize>,
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    overrides: TrainOverrides,
    /// Corpus directory.
    #[arg(long, default_value = "data")]
    corpus: PathBuf,
    /// Concept bank file.
    #[arg(long, default_value = "bank.json")]
    bank: PathBuf,
    /// Output directory for checkpoints, metrics and the resolved config.
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "data")]
    corpus: PathBuf,
    /// Split name: train, val or test.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 3)]
    beam: usize,
    /// Report file (JSON).
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
}

#[derive(Args)]
struct Generate {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sample id from `--corpus`, or a path to a grayscale PGM image.
    #[arg(long)]
    input: String,
    #[arg(long, default_value = "data")]
    corpus: PathBuf,
    #[arg(long, default_value_t = 3)]
    beam: usize,
    /// Alternatives recorded per decoding step.
    #[arg(long, default_value_t = 5)]
    top_k: usize,
    /// Sidecar file with per-step token log-probabilities.
    #[arg(long, default_value = "generation.json")]
    out: PathBuf,
}

#[derive(Args)]
struct InspectAttn {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    sample: String,
    #[arg(long, default_value = "data")]
    corpus: PathBuf,
    /// Output directory for heatmaps and arrays.
    #[arg(long, default_value = "attention")]
    out: PathBuf,
}

#[derive(Args)]
struct Ablate {
    #[command(flatten)]
    overrides: TrainOverrides,
    #[arg(long, default_value = "data")]
    corpus: PathBuf,
    #[arg(long, default_value = "bank.json")]
    bank: PathBuf,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 3)]
    beam: usize,
    /// Samples per class for the inter-class distance analysis (0 disables it).
    #[arg(long, default_value_t = 200)]
    distance_per_class: usize,
    /// Output directory for the table and per-run results.
    #[arg(long, default_value = "ablation")]
    out: PathBuf,
}

fn default_config(explicit: &Option<PathBuf>, file: &str) -> Option<PathBuf> {
    explicit.clone().or_else(|| {
        let dir = std::env::var_os(CONFIG_DIR_ENV)?;
        let path = Path::new(&dir).join(file);
        path.exists().then_some(path)
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn resolve_train_config(o: &TrainOverrides) -> Result<TrainConfig> {
    let mut config = match default_config(&o.config, "train.json") {
        Some(path) => TrainConfig::load(&path)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = o.seed {
        config.seed = v;
    }
    if let Some(v) = o.epochs {
        config.epochs = v;
    }
    if let Some(v) = o.max_steps {
        config.max_steps = Some(v);
    }
    if let Some(v) = o.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = o.learning_rate {
        config.optimizer.learning_rate = v;
    }
    if let Some(v) = o.validation_samples {
        config.validation_samples = v;
    }
    config.validate()?;
    Ok(config)
}

fn gen_data(a: GenData) -> Result<()> {
    let grammar = match default_config(&a.config, "grammar.json") {
        Some(path) => read_json::<GrammarSpec>(&path)?,
        None => GrammarSpec::default(),
    };
    grammar.validate()?;
    let manifest = write_corpus(&grammar, a.n, a.seed, &a.out)?;
    println!(
        "wrote {} samples to {} (grammar {})",
        manifest.n_samples,
        a.out.display(),
        manifest.grammar_hash
    );
    Ok(())
}

fn build_bank_cmd(a: BuildBank) -> Result<()> {
    let corpus = Corpus::load(&a.corpus)?;
    let descriptions = match &a.desc {
        Some(path) => load_descriptions(path)?,
        None => default_descriptions(),
    };
    let reports = corpus.split("train")?.iter().map(|s| s.report.as_slice());
    let bank = build_bank(&corpus.grammar, reports, &descriptions, a.min_freq)?;
    bank.save(&a.out)?;
    println!(
        "bank with {} pathologies and {} anatomies written to {}",
        bank.n_pathologies(),
        bank.n_anatomies(),
        a.out.display()
    );
    Ok(())
}

fn train_cmd(a: Train) -> Result<()> {
    let config = resolve_train_config(&a.overrides)?;
    let corpus = Corpus::load(&a.corpus)?;
    let bank = ConceptBank::load(&a.bank)?;
    println!("{}", serde_json::to_string_pretty(&config)?);
    let outcome = train(&config, &corpus, &bank, Some(&a.out))?;
    if let Some(v) = outcome.validations.last() {
        println!(
            "trained {} steps; last validation: macro F1 {:.4}, example F1 {:.4}, L_RG {:.4}",
            outcome.steps.len(),
            v.val_macro_f1,
            v.val_example_f1,
            v.val_rg
        );
    }
    println!("checkpoints in {}", a.out.display());
    Ok(())
}

fn eval_cmd(a: Eval) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let corpus = Corpus::load(&a.corpus)?;
    let report = evaluate(&ckpt, &corpus, &a.split, a.beam)?;
    write_json(&a.out, &report)?;
    let n = &report.nlg;
    println!(
        "BL-1 {:.4} BL-2 {:.4} BL-3 {:.4} BL-4 {:.4} RG-L {:.4}",
        n.bleu_1, n.bleu_2, n.bleu_3, n.bleu_4, n.rouge_l
    );
    let (e, m) = (&report.ce.example, &report.ce.macro_avg);
    println!(
        "example P {:.4} R {:.4} F1 {:.4}",
        e.precision, e.recall, e.f1
    );
    println!(
        "macro   P {:.4} R {:.4} F1 {:.4}",
        m.precision, m.recall, m.f1
    );
    println!(
        "localization {:.3} over {} findings; unparsed sentences {}",
        report.localization.mean, report.localization.count, report.unparsed_sentences
    );
    Ok(())
}

fn load_input(input: &str, corpus_dir: &Path) -> Result<ndarray::Array2<f64>> {
    let path = Path::new(input);
    if path.is_file() {
        return load_grayscale(path);
    }
    let corpus = Corpus::load(corpus_dir)?;
    corpus
        .find(input)
        .map(|s| s.image.clone())
        .ok_or_else(|| Error::Data(format!("no sample {input:?} in {}", corpus_dir.display())))
}

#[derive(Serialize)]
struct Alternative {
    token: String,
    log_prob: f64,
}

#[derive(Serialize)]
struct GenerationSidecar {
    input: String,
    beam_size: usize,
    report: String,
    score: f64,
    steps: Vec<Vec<Alternative>>,
}

fn generate_cmd(a: Generate) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let image = load_input(&a.input, &a.corpus)?;
    let inference = ckpt.model.infer(&ckpt.store, &image, ckpt.flags())?;
    let decoded = ckpt
        .model
        .generate(&ckpt.store, &inference, a.beam, a.top_k)?;
    let vocab = &ckpt.model.vocab;
    let report = vocab.decode(&decoded.tokens).join(" ");
    println!("{report}");
    let sidecar = GenerationSidecar {
        input: a.input,
        beam_size: a.beam,
        report,
        score: decoded.score,
        steps: decoded
            .steps
            .iter()
            .map(|step| {
                step.iter()
                    .map(|&(id, log_prob)| Alternative {
                        token: vocab.token(id).unwrap_or("<unk>").to_string(),
                        log_prob,
                    })
                    .collect()
            })
            .collect(),
    };
    write_json(&a.out, &sidecar)
}

#[derive(Serialize)]
struct ConceptAttention {
    concept: String,
    kind: &'static str,
    gate: Option<f64>,
    heatmap: String,
    /// `[layer][head][token]`.
    maps: Vec<Vec<Vec<f64>>>,
}

#[derive(Serialize)]
struct AttentionExport {
    sample: String,
    grid: (usize, usize),
    patch_size: usize,
    concepts: Vec<ConceptAttention>,
}

fn inspect_attn(a: InspectAttn) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let corpus = Corpus::load(&a.corpus)?;
    ckpt.check_grammar(&corpus.grammar)?;
    let sample = corpus.find(&a.sample).ok_or_else(|| {
        Error::Data(format!(
            "no sample {:?} in {}",
            a.sample,
            a.corpus.display()
        ))
    })?;
    let inf = ckpt.model.infer(&ckpt.store, &sample.image, ckpt.flags())?;
    create_dir(&a.out)?;
    save_grayscale(&a.out.join("image.pgm"), &sample.image)?;
    let patch = ckpt.config.vision.patch_size;
    let bank = &ckpt.model.bank;
    let mut concepts = Vec::new();
    let groups = [
        (
            "pathology",
            bank.pathology_names(),
            &inf.pathology_attention,
            inf.gates.as_ref().map(|g| &g.0),
        ),
        (
            "anatomy",
            bank.anatomy_names(),
            &inf.anatomy_attention,
            inf.gates.as_ref().map(|g| &g.1),
        ),
    ];
    for (kind, names, attention, gates) in groups {
        let last = attention
            .last()
            .ok_or_else(|| Error::Shape("model has no alignment layers".into()))?;
        for (row, name) in names.iter().enumerate() {
            let file = format!("{kind}_{}.pgm", name.replace(' ', "_"));
            save_grayscale(
                &a.out.join(&file),
                &attention_heatmap(last, row, inf.grid_shape, patch)?,
            )?;
            concepts.push(ConceptAttention {
                concept: name.clone(),
                kind,
                gate: gates.map(|g| g.gates[row]),
                heatmap: file,
                maps: attention
                    .iter()
                    .map(|layer| layer.iter().map(|m| m.row(row).to_vec()).collect())
                    .collect(),
            });
        }
    }
    let export = AttentionExport {
        sample: sample.id.clone(),
        grid: inf.grid_shape,
        patch_size: patch,
        concepts,
    };
    write_json(&a.out.join("attention.json"), &export)?;
    println!(
        "{} heatmaps written to {}",
        export.concepts.len(),
        a.out.display()
    );
    Ok(())
}

fn ablate(a: Ablate) -> Result<()> {
    let config = resolve_train_config(&a.overrides)?;
    let corpus = Corpus::load(&a.corpus)?;
    let bank = ConceptBank::load(&a.bank)?;
    create_dir(&a.out)?;
    config.save(&a.out.join("config.json"))?;
    let options = AblationOptions {
        seeds: a.seeds,
        split: a.split,
        beam_size: a.beam,
        distance_per_class: a.distance_per_class,
        distance_classes: DEFAULT_DISTANCE_CLASSES
            .iter()
            .map(|s| s.to_string())
            .collect(),
    };
    let table = run_ablation_suite(&default_grid(), &config, &corpus, &bank, &options, |run| {
        println!(
            "{} seed {}: macro F1 {:.4}, BL-4 {:.4}",
            run.setting, run.seed, run.macro_f1, run.nlg.bleu_4
        );
    })?;
    let text = table.render();
    print!("{text}");
    write_text(&a.out.join("table.txt"), &text)?;
    write_json(&a.out.join("table.json"), &table)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::BuildBank(a) => build_bank_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Generate(a) => generate_cmd(a),
        Command::InspectAttn(a) => inspect_attn(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors and 0 for --help.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.category().as_str());
            ExitCode::from(1)
        }
    }
}
