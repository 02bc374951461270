//! Subcommands. Every command validates its flags and inputs, then claims
//! its output directory, writes `run_config.json`, and only then computes.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use attnalign_core::alignment::{
    analyze_corpus, corpus_aer, hard_alignments, layer_table, scoring_pair, soft_alignment, AerResult, AlignOptions,
    HeadWeights, LayerTable, Setting, WeightingMode,
};
use attnalign_core::attribution::{attribute, finalizing_mass_and_target_share, AttributionParts, PerturbationConfig};
use attnalign_core::corpus::{
    format_links, format_pharaoh, generate_corpus, parse_pharaoh, CorpusSpec, GoldAlignment, IndexBase, ParallelExample, Vocab,
};
use attnalign_core::model::{ModelConfig, ModelParams};
use attnalign_core::probes::{
    cosine_aggregates, encoder_cosine, finalizing_attention_rate, min_norm_summary, output_norm_vs_finalizing_mass,
    probe,
};
use attnalign_core::seed::derive_seed;
use attnalign_core::stats::{mean, spearman};
use attnalign_core::train::{resume, train, Control, EpochMetrics, TrainConfig};
use attnalign_core::{Sequential, Tensor};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::analysis::{analyze, AnalysisOptions};
use crate::checkpoint::{peek_header, Checkpoint, Header, TrainingState};
use crate::corpus_io::{load_generated, load_text, read_spec, write_generated, LoadedCorpus, TextCorpus};
use crate::error::{CliError, PathContext, Result};
use crate::exec::Rayon;
use crate::lock::OutputLock;
use crate::metrics::{read_json, to_json_string, write_json, JsonLines};
use crate::run_config::write_run_config;
use crate::svg::{BarChart, ColorScale, Heatmap};

/// Default output root when `--out` is absent.
pub const OUT_ENV: &str = "ATTNALIGN_OUT";

#[derive(Debug, Parser)]
#[command(name = "attnalign", version, about = "Word alignments from transformer encoder-decoder attention")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic parallel corpus with gold alignments.
    GenCorpus(GenCorpusArgs),
    /// Train a model on a corpus.
    Train(TrainArgs),
    /// Extract hard alignments from attention.
    Align(AlignArgs),
    /// Score a Pharaoh hypothesis file against gold.
    EvalAer(EvalAerArgs),
    /// Source and target-prefix attributions.
    Attrib(AttribArgs),
    /// Value-norm, output-norm and encoder-similarity probes.
    Probe(ProbeArgs),
    /// Full analysis report with figures.
    Report(ReportArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenCorpus(_) => "gen-corpus",
            Command::Train(_) => "train",
            Command::Align(_) => "align",
            Command::EvalAer(_) => "eval-aer",
            Command::Attrib(_) => "attrib",
            Command::Probe(_) => "probe",
            Command::Report(_) => "report",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
pub enum Base {
    #[value(name = "0")]
    Zero,
    #[value(name = "1")]
    One,
}

impl From<Base> for IndexBase {
    fn from(b: Base) -> Self {
        match b {
            Base::Zero => IndexBase::Zero,
            Base::One => IndexBase::One,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    /// The checkpoint's development sentences (all sentences when it has none).
    Dev,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Avg,
    HeadImportance,
    CorpusHeadImportance,
}

impl From<Mode> for WeightingMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Avg => WeightingMode::Average,
            Mode::HeadImportance => WeightingMode::HeadImportance,
            Mode::CorpusHeadImportance => WeightingMode::CorpusHeadImportance,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SettingArg {
    /// Rows from the positions that predict each target token.
    Output,
    /// Rows from the positions that consume each target token.
    Input,
}

impl From<SettingArg> for Setting {
    fn from(s: SettingArg) -> Self {
        match s {
            SettingArg::Output => Setting::DecoderOutput,
            SettingArg::Input => Setting::DecoderInput,
        }
    }
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct OutArgs {
    /// Output directory [default: $ATTNALIGN_OUT/<subcommand>, else ./attnalign-out/<subcommand>].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// A generated corpus directory or plain text files.
#[derive(Clone, Debug, Args, Serialize)]
pub struct CorpusInput {
    /// Directory written by gen-corpus.
    #[arg(long, conflicts_with_all = ["source", "target"])]
    pub corpus: Option<PathBuf>,
    /// Whitespace-tokenized source text, one sentence per line.
    #[arg(long, requires = "target")]
    pub source: Option<PathBuf>,
    #[arg(long, requires = "source")]
    pub target: Option<PathBuf>,
    /// Pharaoh gold for the text files.
    #[arg(long, requires = "source")]
    pub gold: Option<PathBuf>,
    /// Index base of the gold file.
    #[arg(long, value_enum, default_value = "0")]
    pub base: Base,
}

impl CorpusInput {
    fn validate(&self) -> Result<()> {
        if self.corpus.is_none() && self.source.is_none() {
            return Err(CliError::usage("give --corpus DIR or --source and --target"));
        }
        Ok(())
    }

    fn load(&self, vocabs: Option<(&Vocab, &Vocab)>) -> Result<LoadedCorpus> {
        match &self.corpus {
            Some(dir) => {
                let c = load_generated(dir)?;
                if let Some((s, t)) = vocabs {
                    if *s != c.source_vocab || *t != c.target_vocab {
                        return Err(CliError::data(format!(
                            "{}: vocabularies differ from the checkpoint's",
                            dir.display()
                        )));
                    }
                }
                Ok(c)
            }
            None => load_text(
                &TextCorpus {
                    source: self.source.clone().expect("validated"),
                    target: self.target.clone().expect("validated"),
                    gold: self.gold.clone(),
                    base: self.base.into(),
                },
                vocabs,
            ),
        }
    }
}

/// Model checkpoint plus the sentences to analyze.
#[derive(Clone, Debug, Args, Serialize)]
pub struct ModelInput {
    /// Checkpoint written by train.
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub corpus: CorpusInput,
    #[arg(long, value_enum, default_value = "dev")]
    pub split: Split,
    /// Keep only the first N selected sentences.
    #[arg(long)]
    pub limit: Option<usize>,
}

struct Loaded {
    checkpoint: Checkpoint,
    corpus: LoadedCorpus,
    examples: Vec<ParallelExample>,
}

impl ModelInput {
    fn validate(&self) -> Result<Header> {
        self.corpus.validate()?;
        if self.limit == Some(0) {
            return Err(CliError::usage("--limit must be positive"));
        }
        peek_header(&self.model)
    }

    fn load(&self) -> Result<Loaded> {
        let checkpoint = Checkpoint::load(&self.model)?;
        let corpus = self.corpus.load(Some((&checkpoint.source_vocab, &checkpoint.target_vocab)))?;
        let dev_size = match (self.split, &checkpoint.training) {
            (Split::Dev, Some(t)) if t.config.dev_size > 0 && t.config.dev_size < corpus.examples.len() => {
                t.config.dev_size
            }
            _ => corpus.examples.len(),
        };
        let start = corpus.examples.len() - dev_size;
        let end = self.limit.map_or(corpus.examples.len(), |n| (start + n).min(corpus.examples.len()));
        let examples = corpus.examples[start..end].to_vec();
        if examples.is_empty() {
            return Err(CliError::data("no sentences selected"));
        }
        Ok(Loaded { checkpoint, corpus, examples })
    }
}

fn has_gold(examples: &[ParallelExample]) -> bool {
    examples.iter().any(|e| !e.gold.is_empty())
}

fn is_trained(header: &Header) -> bool {
    header.training.as_ref().is_some_and(|t| t.epochs > 0)
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct GenCorpusArgs {
    /// Corpus specification (JSON); unspecified fields take defaults.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub sentences: Option<usize>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub corpus: CorpusInput,
    /// Training configuration (JSON); flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub dev_size: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Stop after the first epoch reaching this dev token accuracy.
    #[arg(long)]
    pub target_accuracy: Option<f64>,
    #[arg(long, default_value_t = 2)]
    pub encoder_layers: usize,
    #[arg(long, default_value_t = 2)]
    pub decoder_layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 128)]
    pub d_ff: usize,
    #[arg(long, default_value_t = 64)]
    pub max_len: usize,
    /// Continue from this checkpoint (model flags are then ignored).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct AlignArgs {
    #[command(flatten)]
    pub input: ModelInput,
    /// Decoder layer, or `auto` for the lowest-AER layer (needs gold).
    #[arg(long, default_value = "auto")]
    pub layer: String,
    #[arg(long, value_enum, default_value = "avg")]
    pub mode: Mode,
    /// Exclude finalizing source tokens from the argmax.
    #[arg(long)]
    pub mask: bool,
    #[arg(long, value_enum, default_value = "output")]
    pub setting: SettingArg,
    /// Merge subword pieces into words before writing and scoring.
    #[arg(long)]
    pub word_level: bool,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct EvalAerArgs {
    /// Hypothesis links in Pharaoh format.
    #[arg(long)]
    pub hyp: PathBuf,
    #[arg(long)]
    pub gold: PathBuf,
    /// Index base of both files.
    #[arg(long, value_enum, default_value = "0")]
    pub base: Base,
    /// Also write aer.json here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct PerturbationArgs {
    /// Noise scale relative to each embedding norm.
    #[arg(long, default_value_t = 0.01)]
    pub lambda: f64,
    /// Noisy samples per estimate.
    #[arg(long, default_value_t = 30)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl PerturbationArgs {
    fn config(&self) -> PerturbationConfig {
        PerturbationConfig { lambda: self.lambda, samples: self.samples, seed: self.seed }
    }
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct AttribArgs {
    #[command(flatten)]
    pub input: ModelInput,
    #[command(flatten)]
    pub perturbation: PerturbationArgs,
    /// Also compute prefix saliency.
    #[arg(long)]
    pub psi: bool,
    /// Also compute source saliency.
    #[arg(long)]
    pub saliency: bool,
    /// Layer whose attention is correlated with the attributions.
    #[arg(long, default_value = "auto")]
    pub layer: String,
    /// Emit figures for the first N sentences.
    #[arg(long, default_value_t = 0)]
    pub svg: usize,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub input: ModelInput,
    /// Decoder layer for the layer-level probes (`auto`: lowest AER).
    #[arg(long, default_value = "auto")]
    pub layer: String,
    /// Head for the value-norm probe (`auto`: best single head).
    #[arg(long, default_value = "auto")]
    pub head: String,
    /// Finalizing-mass threshold of the attention-rate table.
    #[arg(long, default_value_t = 0.3)]
    pub threshold: f64,
    #[arg(long, default_value_t = 0)]
    pub svg: usize,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct ReportArgs {
    #[command(flatten)]
    pub input: ModelInput,
    #[command(flatten)]
    pub perturbation: PerturbationArgs,
    /// Sentences used for the attribution correlation.
    #[arg(long, default_value_t = 100)]
    pub attrib_sentences: usize,
    #[arg(long, default_value_t = 0.3)]
    pub threshold: f64,
    #[arg(long, default_value_t = 3)]
    pub svg: usize,
    #[command(flatten)]
    pub out: OutArgs,
}

fn out_dir(out: &Option<PathBuf>, name: &str) -> PathBuf {
    match out {
        Some(p) => p.clone(),
        None => {
            let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("attnalign-out"));
            root.join(name)
        }
    }
}

/// `auto` or a layer index below `layers`.
fn parse_layer(s: &str, layers: usize, what: &str) -> Result<Option<usize>> {
    if s == "auto" {
        return Ok(None);
    }
    let l: usize = s.parse().map_err(|_| CliError::usage(format!("--{what} must be `auto` or an index, got {s:?}")))?;
    if l >= layers {
        return Err(CliError::usage(format!("--{what} {l} out of range (model has {layers})")));
    }
    Ok(Some(l))
}

fn check_threshold(t: f64) -> Result<()> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(CliError::usage(format!("--threshold must lie in (0, 1), got {t}")))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).at(path)
}

fn labels(ids: &[usize], vocab: &Vocab) -> Vec<String> {
    ids.iter().map(|&i| vocab.text(i).to_string()).collect()
}

fn svg_dir(out: &Path) -> Result<PathBuf> {
    let dir = out.join("figures");
    fs::create_dir_all(&dir).at(&dir)?;
    Ok(dir)
}

/// Entry point: parses `args`, runs, prints errors as one JSON line, and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let message = e.to_string();
            let first = message.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            let err = CliError::usage(first.trim_start_matches("error: ").to_string());
            eprintln!("{}", err.to_json_line());
            return err.kind.exit_code();
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            e.kind.exit_code()
        }
    }
}

pub fn execute(command: &Command) -> Result<()> {
    let name = command.name();
    match command {
        Command::GenCorpus(a) => gen_corpus(a, name),
        Command::Train(a) => train_cmd(a, name),
        Command::Align(a) => align(a, name),
        Command::EvalAer(a) => eval_aer(a, name),
        Command::Attrib(a) => attrib(a, name),
        Command::Probe(a) => probe_cmd(a, name),
        Command::Report(a) => report(a, name),
    }
}

fn gen_corpus(a: &GenCorpusArgs, name: &str) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => read_spec(p).map_err(|e| CliError::usage(e.message))?,
        None => CorpusSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(n) = a.sentences {
        spec.sentences = n;
    }
    spec.validate()?;
    let out = out_dir(&a.out.out, name);
    let _lock = OutputLock::acquire(&out)?;
    write_run_config(&out, name, &json!({ "args": a, "spec": spec }))?;
    let corpus = generate_corpus(&spec)?;
    write_generated(&out, &corpus)?;
    println!("{}", serde_json::to_string(&json!({ "out": out, "stats": corpus.stats })).expect("summary serializes"));
    Ok(())
}

fn train_cmd(a: &TrainArgs, name: &str) -> Result<()> {
    a.corpus.validate()?;
    let previous = match &a.resume {
        Some(p) => Some(Checkpoint::load(p)?),
        None => None,
    };
    // flags override the config file, which overrides the resumed run's settings
    let mut config = match (&a.config, previous.as_ref().and_then(|c| c.training.as_ref())) {
        (Some(p), _) => read_json::<TrainConfig>(p).map_err(|e| CliError::usage(e.message))?,
        (None, Some(t)) => t.config.clone(),
        (None, None) => TrainConfig::default(),
    };
    if let Some(v) = a.seed {
        config.seed = v;
    }
    if let Some(v) = a.epochs {
        config.max_epochs = v;
    }
    if let Some(v) = a.learning_rate {
        config.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = a.dev_size {
        config.dev_size = v;
    }
    if let Some(v) = a.dropout {
        config.dropout = v;
    }
    if a.target_accuracy.is_some() {
        config.target_accuracy = a.target_accuracy;
    }
    if let Some(t) = config.target_accuracy {
        if !(t > 0.0 && t <= 1.0) {
            return Err(CliError::usage(format!("target accuracy must lie in (0, 1], got {t}")));
        }
    }
    let corpus = a.corpus.load(previous.as_ref().map(|c| (&c.source_vocab, &c.target_vocab)))?;
    config.validate(corpus.examples.len())?;
    let model = match &previous {
        Some(c) => c.params.config.clone(),
        None => ModelConfig {
            encoder_layers: a.encoder_layers,
            decoder_layers: a.decoder_layers,
            heads: a.heads,
            d_model: a.d_model,
            d_ff: a.d_ff,
            max_len: a.max_len,
            dropout: config.dropout,
            ..ModelConfig::desk(corpus.source_vocab.len(), corpus.target_vocab.len())
        },
    };
    model.validate()?;
    let too_long = corpus.examples.iter().position(|e| e.source.len() > model.max_len || e.target.len() + 2 > model.max_len);
    if let Some(i) = too_long {
        return Err(CliError::usage(format!("sentence {} exceeds --max-len {}", i + 1, model.max_len)));
    }

    let out = out_dir(&a.out.out, name);
    let _lock = OutputLock::acquire(&out)?;
    write_run_config(&out, name, &json!({ "args": a, "train": config, "model": model }))?;
    let mut metrics = JsonLines::create(&out.join("metrics.jsonl"))?;
    let epochs_before = previous.as_ref().and_then(|c| c.training.as_ref()).map_or(0, |t| t.epochs);
    let seen_before = previous.as_ref().and_then(|c| c.training.as_ref()).map_or(0, |t| t.sentences_seen);
    let (sv, tv) = (corpus.source_vocab.clone(), corpus.target_vocab.clone());
    let snapshot = |params: &ModelParams, opt: Option<attnalign_core::train::AdamState>, m: &EpochMetrics| Checkpoint {
        params: params.clone(),
        optimizer: opt,
        source_vocab: sv.clone(),
        target_vocab: tv.clone(),
        training: Some(TrainingState {
            config: config.clone(),
            epochs: epochs_before + m.epoch,
            sentences_seen: seen_before + m.sentences_seen,
            optimizer_step: m.steps,
            dev_token_accuracy: m.dev_token_accuracy,
        }),
    };
    let mut failure: Option<CliError> = None;
    let mut last_metrics: Option<EpochMetrics> = None;
    let on_epoch = |m: &EpochMetrics, params: &ModelParams, state: &attnalign_core::train::AdamState| {
        let mut step = || -> Result<()> {
            metrics.write(m)?;
            snapshot(params, Some(state.clone()), m).save(&out.join("last.ckpt"))?;
            if m.best {
                snapshot(params, None, m).save(&out.join("best.ckpt"))?;
            }
            Ok(())
        };
        last_metrics = Some(m.clone());
        match step() {
            Ok(()) => Control::Continue,
            Err(e) => {
                failure = Some(e);
                Control::Stop
            }
        }
    };
    let result = match previous {
        Some(c) => resume(c.params, c.optimizer, &config, &corpus.examples, &Rayon, on_epoch),
        None => train(model, &config, &corpus.examples, &Rayon, on_epoch),
    };
    if let Some(e) = failure {
        return Err(e);
    }
    match result {
        Ok(outcome) => {
            let summary = json!({
                "epochs": outcome.log.len(),
                "final": outcome.log.last(),
                "parameters": outcome.last.parameter_count(),
            });
            write_text(&out.join("train_summary.json"), &to_json_string(&summary))?;
            println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
            Ok(())
        }
        Err(f) => {
            if let Some(p) = f.last_good {
                let m = last_metrics.unwrap_or(EpochMetrics {
                    epoch: 0,
                    steps: 0,
                    sentences_seen: 0,
                    train_loss: f64::NAN,
                    train_accuracy: 0.0,
                    dev_cross_entropy: f64::NAN,
                    dev_token_accuracy: 0.0,
                    learning_rate: 0.0,
                    best: false,
                });
                snapshot(&p, None, &m).save(&out.join("last_good.ckpt"))?;
            }
            Err(f.error.into())
        }
    }
}

/// Layer table of the plain-average extraction, used by `auto` selectors.
fn baseline_table(
    analyzed: &[attnalign_core::alignment::AnalyzedExample],
    examples: &[ParallelExample],
    setting: Setting,
) -> Result<LayerTable> {
    Ok(layer_table(analyzed, examples, &AlignOptions { setting, ..AlignOptions::default() })?)
}

fn align(a: &AlignArgs, name: &str) -> Result<()> {
    let header = a.input.validate()?;
    let layer = parse_layer(&a.layer, header.model.decoder_layers, "layer")?;
    let weighting: WeightingMode = a.mode.into();
    if weighting != WeightingMode::Average && !is_trained(&header) {
        return Err(CliError::usage(format!(
            "--mode {} needs a trained checkpoint; {} records no training",
            serde_json::to_value(a.mode).expect("mode serializes").as_str().unwrap_or("?"),
            a.input.model.display()
        )));
    }
    let loaded = a.input.load()?;
    let gold = has_gold(&loaded.examples);
    if layer.is_none() && !gold {
        return Err(CliError::usage("--layer auto needs gold alignments; give a layer index"));
    }
    let options = AlignOptions { weighting, mask: a.mask, setting: a.setting.into(), word_level: a.word_level };

    let out = out_dir(&a.out.out, name);
    let _lock = OutputLock::acquire(&out)?;
    write_run_config(&out, name, &json!({ "args": a, "options": options }))?;
    let params = &loaded.checkpoint.params;
    let analyzed = analyze_corpus(params, &loaded.examples, weighting != WeightingMode::Average, &Rayon)?;
    let table = if gold { Some(layer_table(&analyzed, &loaded.examples, &options)?) } else { None };
    let layer = layer.unwrap_or_else(|| table.as_ref().expect("gold present").best_layer);
    let corpus_weights = match (&table, weighting) {
        (Some(t), _) => t.corpus_weights.clone(),
        (None, WeightingMode::CorpusHeadImportance) => {
            let c: Vec<_> = analyzed.iter().filter_map(|x| x.contributions.as_ref()).collect();
            Some(attnalign_core::alignment::corpus_head_weights(&c))
        }
        _ => None,
    };
    let hard = hard_alignments(&analyzed, &loaded.examples, layer, &options, corpus_weights.as_deref())?;
    let mut pharaoh = String::new();
    let mut pairs = Vec::with_capacity(hard.len());
    for (h, ex) in hard.iter().zip(&loaded.examples) {
        let (links, g) = scoring_pair(h, ex, a.word_level);
        pharaoh.push_str(&format_links(&links));
        pharaoh.push('\n');
        pairs.push((links, g));
    }
    write_text(&out.join("alignments.pharaoh"), &pharaoh)?;
    if gold {
        // gold of exactly the aligned sentences, in the same unit
        let g: Vec<GoldAlignment> = pairs.iter().map(|(_, g)| g.clone()).collect();
        write_text(&out.join("gold.pharaoh"), &format_pharaoh(&g))?;
    }
    let aer = gold.then(|| corpus_aer(pairs.iter().map(|(h, g)| (h, g))));
    let provenance: Vec<_> = hard.iter().map(|h| &h.provenance).collect();
    write_json(
        &out.join("provenance.json"),
        &json!({
            "options": options,
            "layer": layer,
            "sentences": loaded.examples.len(),
            "aer": aer.as_ref().map(|r| json!({ "aer": r.aer, "counts": r.counts })),
            "layer_aers": table.as_ref().map(LayerTable::aers),
            "per_sentence": provenance,
        }),
    )?;
    println!(
        "{}",
        serde_json::to_string(&json!({ "layer": layer, "sentences": loaded.examples.len(), "aer": aer.map(|r| r.aer) }))
            .expect("summary serializes")
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct AerReport {
    aer: f64,
    sentences: usize,
    hypothesis: usize,
    sure: usize,
    hyp_and_sure: usize,
    hyp_and_possible: usize,
    empty: bool,
}

fn eval_aer(a: &EvalAerArgs, name: &str) -> Result<()> {
    let base: IndexBase = a.base.into();
    let hyp_text = fs::read_to_string(&a.hyp).at(&a.hyp)?;
    let gold_text = fs::read_to_string(&a.gold).at(&a.gold)?;
    let in_file = |p: &Path, e: attnalign_core::Error| CliError::data(format!("{}: {e}", p.display()));
    let hyp = parse_pharaoh(&hyp_text, base, None).map_err(|e| in_file(&a.hyp, e))?;
    let gold: Vec<GoldAlignment> = parse_pharaoh(&gold_text, base, None).map_err(|e| in_file(&a.gold, e))?;
    if hyp.len() != gold.len() {
        return Err(CliError::data(format!("hypothesis has {} lines but gold has {}", hyp.len(), gold.len())));
    }
    // every hypothesis link counts, whatever its marker
    let hyp_links: Vec<_> = hyp.iter().map(|h| h.possible().clone()).collect();
    let r: AerResult = corpus_aer(hyp_links.iter().zip(&gold));
    let report = AerReport {
        aer: r.aer,
        sentences: gold.len(),
        hypothesis: r.counts.hypothesis,
        sure: r.counts.sure,
        hyp_and_sure: r.counts.hyp_and_sure,
        hyp_and_possible: r.counts.hyp_and_possible,
        empty: r.empty,
    };
    if let Some(out) = &a.out {
        let _lock = OutputLock::acquire(out)?;
        write_run_config(out, name, a)?;
        write_json(&out.join("aer.json"), &report)?;
    }
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}

/// Resolves an `auto` layer to the best plain-average layer, else the last.
fn resolve_layer(
    requested: Option<usize>,
    analyzed: &[attnalign_core::alignment::AnalyzedExample],
    examples: &[ParallelExample],
    layers: usize,
) -> Result<usize> {
    match requested {
        Some(l) => Ok(l),
        None if has_gold(examples) => Ok(baseline_table(analyzed, examples, Setting::DecoderOutput)?.best_layer),
        None => Ok(layers - 1),
    }
}

fn attrib(a: &AttribArgs, name: &str) -> Result<()> {
    let header = a.input.validate()?;
    let layer = parse_layer(&a.layer, header.model.decoder_layers, "layer")?;
    let cfg = a.perturbation.config();
    cfg.validate()?;
    let loaded = a.input.load()?;

    let out = out_dir(&a.out.out, name);
    let _lock = OutputLock::acquire(&out)?;
    write_run_config(&out, name, &json!({ "args": a, "perturbation": cfg }))?;
    let params = &loaded.checkpoint.params;
    let analyzed = analyze_corpus(params, &loaded.examples, false, &Rayon)?;
    let layer = resolve_layer(layer, &analyzed, &loaded.examples, header.model.decoder_layers)?;
    let parts = AttributionParts { psi: a.psi, source_saliency: a.saliency };
    let items: Vec<(usize, &ParallelExample)> = loaded.examples.iter().enumerate().collect();
    let reports = Rayon.map(items, |(i, ex)| {
        let c = PerturbationConfig { seed: derive_seed(&[cfg.seed, i as u64]), ..cfg };
        attribute(params, ex, &c, parts, &Sequential)
    });
    let mut lines = JsonLines::create(&out.join("attribution.jsonl"))?;
    let (mut xs, mut ys, mut shares) = (Vec::new(), Vec::new(), Vec::new());
    let figures = if a.svg > 0 { Some(svg_dir(&out)?) } else { None };
    for (i, ((r, ex), an)) in reports.into_iter().zip(&loaded.examples).zip(&analyzed).enumerate() {
        let r = r?;
        let soft = soft_alignment(&an.record, layer, &HeadWeights::Uniform, Setting::DecoderOutput)?;
        for (m, s) in finalizing_mass_and_target_share(&soft, &r, ex) {
            xs.push(m);
            ys.push(s);
        }
        let target_shares = r.target_shares();
        shares.extend(target_shares.iter().flatten().copied());
        lines.write(&json!({ "sentence": i, "target_share": target_shares, "report": r }))?;
        if let (Some(dir), true) = (&figures, i < a.svg) {
            let tgt_labels = labels(&ex.framed_target(loaded.checkpoint.params.config.eos_id), &loaded.checkpoint.target_vocab);
            let steps: Vec<String> = (1..=r.target_contribution.len()).map(|t| format!("{t}:{}", tgt_labels[t])).collect();
            let bars = BarChart {
                title: format!("sentence {i}: target-prefix share per step"),
                labels: steps.clone(),
                values: target_shares.iter().map(|s| s.unwrap_or(f64::NAN)).collect(),
            };
            write_text(&dir.join(format!("target_share_{i}.svg")), &bars.render()?)?;
            if let Some(psi) = &r.psi {
                write_text(&dir.join(format!("psi_{i}.svg")), &row_scaled_heatmap(format!("sentence {i}: prefix saliency"), psi, &tgt_labels, &tgt_labels)?)?;
            }
            if let Some(sal) = &r.source_saliency {
                let src_labels = labels(&ex.source, &loaded.checkpoint.source_vocab);
                // stored [source, step]; draw steps as rows
                let t = transpose(sal);
                write_text(
                    &dir.join(format!("source_saliency_{i}.svg")),
                    &row_scaled_heatmap(format!("sentence {i}: source saliency"), &t, &tgt_labels, &src_labels)?,
                )?;
            }
        }
    }
    let summary = json!({
        "sentences": loaded.examples.len(),
        "layer": layer,
        "mean_target_share": if shares.is_empty() { None } else { Some(mean(&shares)) },
        "finalizing_mass_vs_target_share": { "points": xs.len(), "spearman": spearman(&xs, &ys) },
    });
    write_json(&out.join("summary.json"), &summary)?;
    println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
    Ok(())
}

fn transpose(t: &Tensor) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    let data = (0..c).flat_map(|j| (0..r).map(move |i| t.get2(i, j))).collect();
    Tensor::matrix(c, r, data).expect("transpose keeps size")
}

/// Heatmap of a matrix whose rows are rescaled to a maximum of 1.
fn row_scaled_heatmap(title: String, m: &Tensor, row_labels: &[String], col_labels: &[String]) -> Result<String> {
    let values: Vec<Vec<f64>> = m
        .to_rows()
        .into_iter()
        .map(|r| {
            let max = r.iter().cloned().fold(0.0f64, f64::max);
            r.iter().map(|v| if max > 0.0 { v / max } else { 0.0 }).collect()
        })
        .collect();
    Heatmap {
        title,
        values,
        row_labels: row_labels[..m.rows()].to_vec(),
        col_labels: col_labels[..m.cols()].to_vec(),
        scale: ColorScale::Sequential,
    }
    .render()
}

fn probe_cmd(a: &ProbeArgs, name: &str) -> Result<()> {
    let header = a.input.validate()?;
    let layer = parse_layer(&a.layer, header.model.decoder_layers, "layer")?;
    let head = parse_layer(&a.head, header.model.heads, "head")?;
    check_threshold(a.threshold)?;
    let loaded = a.input.load()?;
    if head.is_none() && !has_gold(&loaded.examples) {
        return Err(CliError::usage("--head auto needs gold alignments; give --layer and --head"));
    }
    if head.is_some() && layer.is_none() {
        return Err(CliError::usage("--head needs an explicit --layer"));
    }

    let out = out_dir(&a.out.out, name);
    let _lock = OutputLock::acquire(&out)?;
    write_run_config(&out, name, a)?;
    let params = &loaded.checkpoint.params;
    let examples = &loaded.examples;
    let analyzed = analyze_corpus(params, examples, false, &Rayon)?;
    let (probe_layer, probe_head, best) = match head {
        Some(h) => (layer.expect("checked"), h, None),
        None => {
            let b = attnalign_core::alignment::best_head(&analyzed, examples, Setting::DecoderOutput)?;
            (b.layer, b.head, Some(b))
        }
    };
    let layer = resolve_layer(layer, &analyzed, examples, header.model.decoder_layers)?;
    let pairs = || analyzed.iter().map(|x| &x.record).zip(examples);
    let min_norm = min_norm_summary(pairs(), probe_layer, probe_head)?;
    let by_head = (0..header.model.decoder_layers)
        .map(|l| (0..header.model.heads).map(|h| min_norm_summary(pairs(), l, h)).collect::<attnalign_core::Result<Vec<_>>>())
        .collect::<attnalign_core::Result<Vec<_>>>()?;
    let softs = analyzed
        .iter()
        .map(|x| soft_alignment(&x.record, layer, &HeadWeights::Uniform, Setting::DecoderOutput))
        .collect::<attnalign_core::Result<Vec<_>>>()?;
    let rates = finalizing_attention_rate(softs.iter().zip(examples), a.threshold)?;
    let cosines: Vec<_> = analyzed.iter().map(|x| encoder_cosine(&x.record)).collect();
    let cos = cosine_aggregates(cosines.iter().zip(examples).map(|(c, ex)| (c, ex.source_tags.as_slice())));
    let summary = json!({
        "sentences": examples.len(),
        "layer": layer,
        "best_head": best,
        "min_norm": min_norm,
        "min_norm_by_head": by_head,
        "finalizing_attention_rate": rates,
        "output_norm_vs_finalizing_mass": output_norm_vs_finalizing_mass(pairs(), layer)?,
        "encoder_cosine": cos,
    });
    write_json(&out.join("probes.json"), &summary)?;
    let mut lines = JsonLines::create(&out.join("probes.jsonl"))?;
    for (i, x) in analyzed.iter().enumerate() {
        lines.write(&json!({ "sentence": i, "probe": probe(&x.record) }))?;
    }
    if a.svg > 0 {
        let dir = svg_dir(&out)?;
        for (i, (x, ex)) in analyzed.iter().zip(examples).enumerate().take(a.svg) {
            let src = labels(&ex.source, &loaded.checkpoint.source_vocab);
            cosine_figure(&dir, i, &cosines[i], &src)?;
            let bars = BarChart {
                title: format!("sentence {i}: value norms, layer {probe_layer} head {probe_head}"),
                labels: src,
                values: x.record.layers[probe_layer].value_norms[probe_head].clone(),
            };
            write_text(&dir.join(format!("value_norms_{i}.svg")), &bars.render()?)?;
        }
        let mut hl = Vec::new();
        let mut hv = Vec::new();
        for row in &by_head {
            for s in row {
                hl.push(format!("L{}H{}", s.layer, s.head));
                hv.push(s.share());
            }
        }
        let bars = BarChart { title: "share of sentences whose min-norm token is finalizing".into(), labels: hl, values: hv };
        write_text(&dir.join("min_norm_finalizing.svg"), &bars.render()?)?;
        rate_figure(&dir, &rates)?;
    }
    println!("{}", serde_json::to_string(&json!({ "sentences": examples.len(), "min_norm": min_norm })).expect("summary serializes"));
    Ok(())
}

fn cosine_figure(dir: &Path, i: usize, c: &attnalign_core::probes::CosineMatrix, src: &[String]) -> Result<()> {
    let h = Heatmap {
        title: format!("sentence {i}: encoder output cosine"),
        values: c.matrix.to_rows(),
        row_labels: src.to_vec(),
        col_labels: src.to_vec(),
        scale: ColorScale::Diverging,
    };
    write_text(&dir.join(format!("cosine_{i}.svg")), &h.render()?)
}

fn rate_figure(dir: &Path, rates: &std::collections::BTreeMap<String, attnalign_core::probes::RateEntry>) -> Result<()> {
    let bars = BarChart {
        title: "share of target tokens attending mostly to finalizing tokens".into(),
        labels: rates.keys().cloned().collect(),
        values: rates.values().map(|r| r.rate).collect(),
    };
    write_text(&dir.join("finalizing_rate.svg"), &bars.render()?)
}

fn report(a: &ReportArgs, name: &str) -> Result<()> {
    a.input.validate()?;
    check_threshold(a.threshold)?;
    let opts = AnalysisOptions {
        threshold: a.threshold,
        attribution_sentences: a.attrib_sentences,
        perturbation: a.perturbation.config(),
    };
    if opts.attribution_sentences > 0 {
        opts.perturbation.validate()?;
    }
    let loaded = a.input.load()?;
    if !has_gold(&loaded.examples) {
        return Err(CliError::usage("report needs gold alignments"));
    }

    let out = out_dir(&a.out.out, name);
    let _lock = OutputLock::acquire(&out)?;
    write_run_config(&out, name, &json!({ "args": a, "analysis": opts }))?;
    let params = &loaded.checkpoint.params;
    let (analyzed, analysis) = analyze(params, &loaded.examples, &opts, &Rayon)?;
    write_json(
        &out.join("report.json"),
        &json!({ "training": loaded.checkpoint.training, "model": params.config, "analysis": analysis }),
    )?;
    if a.svg > 0 || !analysis.variants.is_empty() {
        let dir = svg_dir(&out)?;
        let bars = BarChart {
            title: "best-layer AER by extraction variant".into(),
            labels: analysis
                .variants
                .iter()
                .map(|v| {
                    let s = serde_json::to_value(v.setting).expect("setting serializes");
                    let w = serde_json::to_value(v.weighting).expect("weighting serializes");
                    format!("{} {}{}", s.as_str().unwrap_or("?"), w.as_str().unwrap_or("?"), if v.mask { " mask" } else { "" })
                })
                .collect(),
            values: analysis.variants.iter().map(|v| v.best_aer).collect(),
        };
        write_text(&dir.join("aer_variants.svg"), &bars.render()?)?;
        let counts = analysis.error_categories.counts;
        let bars = BarChart {
            title: "alignment errors by category".into(),
            labels: (1..=5).map(|k| format!("category {k}")).collect(),
            values: counts.iter().map(|&c| c as f64).collect(),
        };
        write_text(&dir.join("error_categories.svg"), &bars.render()?)?;
        rate_figure(&dir, &analysis.finalizing_rates)?;
        let layer = analysis.variants[0].best_layer;
        for (i, (x, ex)) in analyzed.iter().zip(&loaded.examples).enumerate().take(a.svg) {
            let src = labels(&ex.source, &loaded.checkpoint.source_vocab);
            let tgt = labels(&ex.target, &loaded.checkpoint.target_vocab);
            let soft = soft_alignment(&x.record, layer, &HeadWeights::Uniform, Setting::DecoderOutput)?;
            let h = Heatmap {
                title: format!("sentence {i}: attention, layer {layer}"),
                values: soft.matrix.to_rows(),
                row_labels: tgt,
                col_labels: src.clone(),
                scale: ColorScale::Sequential,
            };
            write_text(&dir.join(format!("attention_{i}.svg")), &h.render()?)?;
            cosine_figure(&dir, i, &encoder_cosine(&x.record), &src)?;
        }
    }
    let corpus_sentences = loaded.corpus.examples.len();
    println!(
        "{}",
        serde_json::to_string(&json!({
            "corpus_sentences": corpus_sentences,
            "sentences": analysis.sentences,
            "best_aer": analysis.variants[0].best_aer,
            "spearman": analysis.correlation.spearman,
        }))
        .expect("summary serializes")
    );
    Ok(())
}

use attnalign_core::Executor as _;
