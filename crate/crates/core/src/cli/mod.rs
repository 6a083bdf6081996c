//! The `pivot-distill` experiment runner.
//!
//! Each subcommand is also a library function so experiments can be driven
//! from Rust. Exit codes: 0 success, 2 usage error, 3 data or configuration
//! error, 4 numeric failure.

mod commands;
mod config;
mod metrics;
mod run;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::builder::PossibleValuesParser;
use clap::{Args, Parser, Subcommand};

pub use commands::{
    decode_file, evaluate_files, gen_corpus, kl_estimators, kl_table, peakedness_file, verify_kl, DecodeReport, KlRow,
    KlTable,
};
pub use config::{
    read_train_config, write_json, Direction, ModelSize, Provenance, RunManifest, TrainConfig, TransferConfig,
};
pub use metrics::{read_metrics, truncate_metrics, MetricsRecord, MetricsWriter};
pub use run::{
    checkpoint_path, initial_params, list_checkpoints, load_run_data, param_mask, train_run, LoadedModel, RunData,
    RunSummary, CHECKPOINT_DIR, CONFIG_FILE, METRICS_FILE, MODEL_FILE, RUN_MANIFEST_FILE, SRC_VOCAB_FILE, STATE_DIR,
    TGT_VOCAB_FILE,
};

use crate::corpus::GeneratorConfig;
use crate::error::{Error, Result};
use crate::model::ParamGroup;
use crate::objectives::{TeachingMethod, DEFAULT_BEAM, DEFAULT_KBEST_ALPHA};
use crate::transfer::FreezePlan;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Numeric(_) | Error::Domain { .. } => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "pivot-distill",
    version,
    about = "Teacher-student training for zero-resource translation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic trilingual corpus and its manifest.
    GenCorpus(GenCorpusArgs),
    /// Train a teacher, a source-pivot model or a taught student.
    Train(Box<TrainArgs>),
    /// Translate a file directly or through a pivot model.
    Decode(DecodeArgs),
    /// Tabulate sentence- and word-level KL estimates across checkpoints.
    VerifyKl(VerifyKlArgs),
    /// Corpus BLEU of a hypothesis file against a reference file.
    Evaluate(EvaluateArgs),
    /// Mean probability of the argmax word along greedy decodes.
    Peakedness(PeakednessArgs),
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Generator config JSON; missing fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Cut the source-pivot training corpus to one eighth.
    #[arg(long)]
    pub small: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run config or run manifest JSON; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub run: Option<String>,
    #[arg(long, value_parser = PossibleValuesParser::new(Direction::NAMES))]
    pub direction: Option<String>,
    #[arg(long, value_parser = PossibleValuesParser::new(TeachingMethod::NAMES))]
    pub method: Option<String>,
    /// Beam width of sent-beam, sent-kbest and word-beam.
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub kbest_alpha: Option<f64>,
    /// Teacher run directory.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub eval_interval: Option<u64>,
    #[arg(long)]
    pub max_updates: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub init_seed: Option<u64>,
    #[arg(long)]
    pub shuffle_seed: Option<u64>,
    #[arg(long)]
    pub sampling_seed: Option<u64>,
    #[arg(long)]
    pub emb: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Initialize from the teacher with the default freeze plan.
    #[arg(long)]
    pub transfer: bool,
    /// Comma-separated frozen groups (implies --transfer); `none` freezes
    /// nothing.
    #[arg(long)]
    pub freeze: Option<String>,
    #[arg(long)]
    pub src_vocab: Option<PathBuf>,
    #[arg(long)]
    pub tgt_vocab: Option<PathBuf>,
    #[arg(long)]
    pub dev_limit: Option<usize>,
    /// Continue the interrupted run in --out from its saved state.
    #[arg(long)]
    pub resume: bool,
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// Run directory or checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Pivot-target model; --model is then the source-pivot model.
    #[arg(long)]
    pub via_pivot: Option<PathBuf>,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Intermediate pivot sentences; defaults to `<output>.pivot`.
    #[arg(long)]
    pub pivot_output: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BEAM)]
    pub k: usize,
    /// Write timing and beam-search counts as JSON.
    #[arg(long)]
    pub timing: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyKlArgs {
    #[arg(long)]
    pub teacher: PathBuf,
    /// Student run directory; all of its checkpoints become columns.
    #[arg(long)]
    pub student: Option<PathBuf>,
    /// Explicit checkpoint files, in column order.
    #[arg(long, num_args = 1..)]
    pub checkpoints: Vec<PathBuf>,
    /// Corpus directory holding `dev.x` and `dev.z`.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub limit: Option<usize>,
    /// Add the teacher, reading pivots, as a final column.
    #[arg(long)]
    pub teacher_column: bool,
    #[arg(long, default_value_t = DEFAULT_BEAM)]
    pub beam: usize,
    #[arg(long, default_value_t = 1)]
    pub sampling_seed: u64,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub hyp: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub lowercase: bool,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct PeakednessArgs {
    /// Run directory or checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Append the value to this metrics file.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Run id of the record; defaults to the model's run.
    #[arg(long)]
    pub run: Option<String>,
}

fn parse_freeze(spec: &str) -> Result<FreezePlan> {
    let mut plan = FreezePlan::none();
    if spec == "none" {
        return Ok(plan);
    }
    for name in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let g =
            ParamGroup::from_name(name).ok_or_else(|| Error::Config(format!("unknown parameter group {name:?}")))?;
        plan = plan.with(g, true);
    }
    Ok(plan)
}

/// Applies command-line overrides to a config.
pub fn apply_train_overrides(mut c: TrainConfig, a: &TrainArgs) -> Result<TrainConfig> {
    macro_rules! set {
        ($field:expr, $value:expr) => {
            if let Some(v) = $value.clone() {
                $field = v;
            }
        };
    }
    set!(c.corpus_dir, a.corpus);
    set!(c.out_dir, a.out);
    set!(c.run, a.run);
    if let Some(d) = &a.direction {
        c.direction = d.parse()?;
    }
    if a.method.is_some() || a.beam.is_some() || a.kbest_alpha.is_some() {
        let name = a.method.as_deref().unwrap_or(c.method.name());
        let k = a.beam.or(c.method.beam_width()).unwrap_or(DEFAULT_BEAM);
        let alpha = match c.method {
            TeachingMethod::SentKBest { alpha, .. } => a.kbest_alpha.unwrap_or(alpha),
            _ => a.kbest_alpha.unwrap_or(DEFAULT_KBEST_ALPHA),
        };
        c.method = TeachingMethod::with_options(name, k, alpha)?;
    }
    if a.teacher.is_some() {
        c.teacher = a.teacher.clone();
    }
    set!(c.schedule.epochs, a.epochs);
    set!(c.schedule.batch_size, a.batch_size);
    set!(c.schedule.eval_interval, a.eval_interval);
    set!(c.schedule.optimizer.lr, a.lr);
    set!(c.init_seed, a.init_seed);
    set!(c.schedule.shuffle_seed, a.shuffle_seed);
    set!(c.schedule.sampling_seed, a.sampling_seed);
    set!(c.model.emb, a.emb);
    set!(c.model.hidden, a.hidden);
    if a.max_updates.is_some() {
        c.schedule.max_updates = a.max_updates;
    }
    if a.transfer && c.transfer.is_none() {
        c.transfer = Some(TransferConfig::default());
    }
    if let Some(spec) = &a.freeze {
        let mut t = c.transfer.take().unwrap_or_default();
        t.freeze = parse_freeze(spec)?;
        c.transfer = Some(t);
    }
    if a.src_vocab.is_some() {
        c.src_vocab = a.src_vocab.clone();
    }
    if a.tgt_vocab.is_some() {
        c.tgt_vocab = a.tgt_vocab.clone();
    }
    if a.dev_limit.is_some() {
        c.dev_limit = a.dev_limit;
    }
    Ok(c)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let (config, expected) = if a.resume {
        let out = a
            .out
            .as_ref()
            .ok_or_else(|| Error::Config("--resume needs --out <run directory>".into()))?;
        let (mut c, _) = read_train_config(&out.join(CONFIG_FILE))?;
        c.schedule.max_updates = a.max_updates;
        c.out_dir = out.clone();
        (c, None)
    } else {
        let (base, expected) = match &a.config {
            Some(p) => read_train_config(p)?,
            None => (TrainConfig::default(), None),
        };
        (apply_train_overrides(base, a)?, expected)
    };
    let summary = train_run(&config, expected.as_ref(), a.resume, !a.quiet)?;
    if !summary.finished {
        eprintln!("stopped at update {}; continue with --resume", summary.update);
    }
    println!("{}", summary.final_model.display());
    Ok(())
}

fn cmd_gen_corpus(a: &GenCorpusArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text)?
        }
        None if a.small => GeneratorConfig::small_source_pivot(),
        None => GeneratorConfig::default(),
    };
    if a.config.is_some() && a.small {
        cfg.train_xz /= 8;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let manifest = gen_corpus(&cfg, &a.out)?;
    for f in &manifest.files {
        println!("{:<12} {:>6} {}", f.name, f.lines, f.sha256);
    }
    Ok(())
}

fn cmd_decode(a: &DecodeArgs) -> Result<()> {
    let model = LoadedModel::open(&a.model)?;
    let second = a.via_pivot.as_deref().map(LoadedModel::open).transpose()?;
    let report = decode_file(
        &model,
        second.as_ref(),
        &a.input,
        &a.output,
        a.pivot_output.as_deref(),
        a.k,
    )?;
    eprintln!(
        "{} sentences, {} beam searches, {:.6} s/sentence",
        report.stats.sentences, report.stats.beam_searches, report.seconds_per_sentence
    );
    if let Some(p) = &a.timing {
        write_json(p, &report)?;
    }
    Ok(())
}

fn cmd_verify_kl(a: &VerifyKlArgs) -> Result<()> {
    let teacher = LoadedModel::open(&a.teacher)?;
    let mut checkpoints = a.checkpoints.clone();
    if let Some(s) = &a.student {
        checkpoints.extend(list_checkpoints(s)?);
    }
    let table = verify_kl(
        &teacher,
        &checkpoints,
        &a.corpus.join("dev.x"),
        &a.corpus.join("dev.z"),
        a.limit,
        a.teacher_column,
        a.beam,
        a.sampling_seed,
    )?;
    print!("{}", table.render());
    if let Some(p) = &a.json {
        write_json(p, &table)?;
    }
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let report = evaluate_files(&a.hyp, &a.reference, a.lowercase)?;
    if a.json {
        println!("{}", serde_json::to_string(&report)?);
    } else {
        println!("{report}");
    }
    Ok(())
}

fn cmd_peakedness(a: &PeakednessArgs) -> Result<()> {
    let model = LoadedModel::open(&a.model)?;
    let value = peakedness_file(&model, &a.input)?;
    println!("{value:.6}");
    if let Some(path) = &a.metrics {
        let run_dir = model.path.parent().unwrap_or(&model.path);
        let config = read_train_config(&run_dir.join(CONFIG_FILE)).ok().map(|(c, _)| c);
        let record = MetricsRecord {
            run: a
                .run
                .clone()
                .or_else(|| config.as_ref().map(TrainConfig::run_name))
                .unwrap_or_else(|| "model".into()),
            update: 0,
            t: 0.0,
            metric: "peakedness".into(),
            value,
            method: config.map_or_else(|| "unknown".into(), |c| c.method.name().to_string()),
        };
        MetricsWriter::append(path)?.write(&record)?;
    }
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenCorpus(a) => cmd_gen_corpus(a),
        Command::Train(a) => cmd_train(a),
        Command::Decode(a) => cmd_decode(a),
        Command::VerifyKl(a) => cmd_verify_kl(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Peakedness(a) => cmd_peakedness(a),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> std::result::Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("pivot-distill").chain(args.iter().copied()))
    }

    #[test]
    fn invalid_method_is_usage_error_listing_methods() {
        let err = parse(&["train", "--method", "word-magic"]).unwrap_err();
        let text = err.to_string();
        assert!(text.contains("word-sampling") && text.contains("sent-kbest"), "{text}");
        assert_eq!(
            main_with_args(["pivot-distill", "train", "--method", "word-magic"]),
            EXIT_USAGE
        );
    }

    #[test]
    fn overrides_apply() {
        let cli = parse(&[
            "train",
            "--direction",
            "x-y",
            "--method",
            "sent-beam",
            "--beam",
            "3",
            "--teacher",
            "t",
            "--epochs",
            "2",
            "--lr",
            "0.003",
            "--freeze",
            "encoder,decoder",
        ])
        .unwrap();
        let Command::Train(a) = cli.command else { panic!() };
        let c = apply_train_overrides(TrainConfig::default(), &a).unwrap();
        assert_eq!(c.method, TeachingMethod::SentBeam { k: 3 });
        assert_eq!(c.direction, Direction::SourceTarget);
        assert_eq!(c.schedule.epochs, 2);
        assert_eq!(c.schedule.optimizer.lr, 0.003);
        let t = c.transfer.unwrap();
        assert!(t.init_from_teacher);
        assert_eq!(t.freeze.frozen_groups(), vec![ParamGroup::Encoder, ParamGroup::Decoder]);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Numeric("nan".into())), EXIT_NUMERIC);
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_DATA);
        assert_eq!(
            exit_code(&Error::Capacity {
                requested: 2,
                available: 1
            }),
            EXIT_DATA
        );
    }
}
