//! `nam` — corpus generation, training, sampling and evaluation for
//! attribute-grammar sequence models.
//!
//! Exit codes: 0 success, 2 validation failure, 3 data error, 4 numeric
//! failure. Errors print as one `error: <kind>: <detail>` line on stderr.
//! `NAM_LOG` controls log verbosity (error/warn/info/debug/trace).

mod config;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nam_core::corpus::{self, CorpusError};
use nam_core::engine::{
    self, Checkpoint, EngineError, GenReport, Sampler, Variant,
};
use nam_core::eval::{self, EvalError, EvalInput};
use nam_core::grammar::loader::{self, LoadError};
use nam_core::grammar::validate::validate_grammar;
use nam_core::grammar::ConstraintId;
use nam_core::neural::NeuralError;

#[derive(Parser)]
#[command(name = "nam", version, about = "attribute-grammar sequence-model workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a grammar file and print its validation report.
    CheckGrammar { grammar: PathBuf },
    /// Generate a synthetic corpus directory from a spec file.
    GenCorpus {
        /// `key = value` file: grammar, programs, mean_*, holdout, seed.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec file's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model variant; continues from --out if it already exists.
    Train {
        #[arg(long)]
        grammar: PathBuf,
        /// Corpus directory from gen-corpus.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_parser = parse_constraint)]
        constraint: ConstraintId,
        #[arg(long, value_parser = parse_variant)]
        variant: Variant,
        /// Optional `key = value` file; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint path to write (and resume from).
        #[arg(long)]
        out: PathBuf,
        /// Override one configuration key, e.g. --set seed=7 (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Sample trees from a checkpoint into a generation report.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Abandon a tree beyond this many nodes.
        #[arg(long, default_value_t = 2000)]
        node_cap: usize,
    },
    /// Score checkpoints against their sampled batches and a corpus.
    Eval {
        /// One per model, paired with --samples in order (repeatable).
        #[arg(long = "ckpt", required = true)]
        ckpts: Vec<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        /// Generation reports from sample, one per --ckpt (repeatable).
        #[arg(long = "samples", required = true)]
        samples: Vec<PathBuf>,
        /// Comparison table (machine-readable form) to write.
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_constraint(s: &str) -> Result<ConstraintId, String> {
    ConstraintId::from_str(s).ok_or_else(|| format!("unknown constraint `{s}` (cd or ct)"))
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::from_flag(s)
        .ok_or_else(|| format!("unknown variant `{s}` (vanilla, loss, context, both or sgwc)"))
}

// ---------------------------------------------------------------------------
// Error-to-exit-code mapping

struct CliError {
    code: u8,
    kind: &'static str,
    detail: String,
}

impl CliError {
    fn validation(detail: impl fmt::Display) -> CliError {
        CliError { code: 2, kind: "validation", detail: detail.to_string() }
    }
    fn data(detail: impl fmt::Display) -> CliError {
        CliError { code: 3, kind: "data", detail: detail.to_string() }
    }
    fn numeric(detail: impl fmt::Display) -> CliError {
        CliError { code: 4, kind: "numeric", detail: detail.to_string() }
    }
}

impl From<LoadError> for CliError {
    fn from(e: LoadError) -> CliError {
        match e {
            LoadError::Io { .. } => CliError::data(e),
            LoadError::Parse { .. } => CliError::validation(e),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> CliError {
        match e {
            CorpusError::SpecInfeasible(_) => CliError::validation(e),
            CorpusError::Io { .. } | CorpusError::BadFile { .. } => CliError::data(e),
            CorpusError::Internal(_) => CliError::numeric(e),
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> CliError {
        match &e {
            EngineError::Neural(n) => match n {
                NeuralError::ShapeMismatch(_) => CliError::validation(e),
                NeuralError::NonFiniteGradient(_) => CliError::numeric(e),
                NeuralError::IllegalTruth(_) => CliError::data(e),
            },
            EngineError::Machine(_)
            | EngineError::Sgwc(_)
            | EngineError::Stream(_)
            | EngineError::Io { .. }
            | EngineError::BadCheckpoint { .. }
            | EngineError::BadReport { .. }
            | EngineError::CorpusGrammarMismatch(_) => CliError::data(e),
            EngineError::Invalid(_) => CliError::validation(e),
            EngineError::Invariant(_) => CliError::numeric(e),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> CliError {
        match e {
            EvalError::Engine(inner) => inner.into(),
            EvalError::EmptyBatch | EvalError::Io { .. } | EvalError::BadFile { .. } => {
                CliError::data(e)
            }
            EvalError::Invalid(_) => CliError::validation(e),
        }
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

/// `<path>.manifest.txt` next to a run artifact.
fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.txt");
    PathBuf::from(s)
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("NAM_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.kind, e.detail.replace('\n', "; "));
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::CheckGrammar { grammar } => check_grammar(&grammar),
        Command::GenCorpus { spec, out, seed } => gen_corpus(&spec, &out, seed),
        Command::Train { grammar, corpus, constraint, variant, config, out, sets } => {
            train(&grammar, &corpus, constraint, variant, config.as_deref(), &out, &sets)
        }
        Command::Sample { ckpt, count, seed, out, node_cap } => {
            sample(&ckpt, count, seed, &out, node_cap)
        }
        Command::Eval { ckpts, corpus, samples, out } => eval_cmd(&ckpts, &corpus, &samples, &out),
    }
}

fn check_grammar(path: &Path) -> Result<(), CliError> {
    let g = loader::load_path(path)?;
    let report = validate_grammar(&g);
    print!("{report}");
    if report.is_empty() {
        println!(
            "{}: {} nonterminals, {} productions, hash {}",
            path.display(),
            g.num_nonterminals(),
            g.num_productions(),
            g.source_hash()
        );
        Ok(())
    } else {
        Err(CliError::validation(format!(
            "{}: {} validation issues",
            path.display(),
            report.issues.len()
        )))
    }
}

fn gen_corpus(spec_path: &Path, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let text = read_text(spec_path)?;
    let parsed = config::parse_corpus_spec(&text)
        .map_err(|e| CliError::validation(format!("{}: {e}", spec_path.display())))?;
    let mut spec = parsed.spec;
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let grammar_path = if parsed.grammar.is_relative() {
        spec_path.parent().unwrap_or(Path::new(".")).join(&parsed.grammar)
    } else {
        parsed.grammar
    };
    let g = loader::load_path(&grammar_path)?;
    let corpus = corpus::generate_corpus(&g, &spec)?;
    corpus::write_corpus(out, &g, &corpus, &spec)?;
    println!(
        "wrote {} train + {} test programs to {}",
        corpus.train.len(),
        corpus.test.len(),
        out.display()
    );
    Ok(())
}

fn train(
    grammar_path: &Path,
    corpus_dir: &Path,
    constraint: ConstraintId,
    variant: Variant,
    config_path: Option<&Path>,
    out: &Path,
    sets: &[String],
) -> Result<(), CliError> {
    let grammar_source = read_text(grammar_path)?;
    let g = loader::parse(&grammar_source)?;
    let report = validate_grammar(&g);
    if !report.is_empty() {
        return Err(CliError::validation(format!(
            "{}: {} validation issues (run check-grammar)",
            grammar_path.display(),
            report.issues.len()
        )));
    }
    let corpus = corpus::read_corpus(corpus_dir, &g)?;

    let mut cfg = config::TrainConfig::default();
    if let Some(path) = config_path {
        let text = read_text(path)?;
        let pairs = config::parse_kv(&text)
            .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
        cfg.apply_all(&pairs)
            .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
    }
    for s in sets {
        let Some((k, v)) = s.split_once('=') else {
            return Err(CliError::validation(format!("--set expects KEY=VALUE, got `{s}`")));
        };
        cfg.apply(k.trim(), v.trim()).map_err(CliError::validation)?;
    }

    let resume = match out.exists() {
        true => {
            let ck = Checkpoint::read(out)?;
            log::info!("resuming {} from epoch {}", out.display(), ck.epoch);
            Some(ck)
        }
        false => None,
    };
    let outcome = engine::train(
        &g,
        &grammar_source,
        &corpus,
        constraint,
        variant,
        cfg.model,
        &cfg.settings,
        resume,
    )?;
    let ck = &outcome.checkpoint;
    ck.write(out)?;
    if variant == Variant::Sgwc {
        // The count table also ships as a plain sorted text file.
        let mut table = out.as_os_str().to_owned();
        table.push(".table.txt");
        write_text(&PathBuf::from(table), &ck.table_text)?;
    }

    let mut manifest = ck.manifest();
    manifest.push_str(&format!("grammar = {}\n", grammar_path.display()));
    manifest.push_str(&format!("corpus = {}\n", corpus_dir.display()));
    if variant != Variant::Sgwc {
        manifest.push_str(&cfg.settings_lines());
    }
    write_text(&manifest_path(out), &manifest)?;

    match variant {
        Variant::Sgwc => println!(
            "fitted {} on {} programs ({} context cells); wrote {}",
            variant,
            corpus.train.len(),
            ck.table_text.lines().count(),
            out.display()
        ),
        _ => {
            let best = if ck.best_metric >= 0.0 { ck.best_metric } else { 0.0 };
            println!(
                "trained {}/{}: {} epochs, best legal rate {:.2}; wrote {}",
                variant,
                constraint.short(),
                ck.epoch,
                best,
                out.display()
            );
        }
    }
    Ok(())
}

fn sample(
    ckpt_path: &Path,
    count: usize,
    seed: u64,
    out: &Path,
    node_cap: usize,
) -> Result<(), CliError> {
    let ck = Checkpoint::read(ckpt_path)?;
    let g = ck.grammar()?;
    let sampler = Sampler::from_checkpoint(&ck, &g)?;
    let report =
        engine::sample_batch(&sampler, &g, ck.constraint, ck.variant, count, seed, node_cap)?;
    engine::write_gen_report(out, &report)?;

    let mut manifest = String::new();
    manifest.push_str("kind = generation\n");
    manifest.push_str(&format!("tool_version = {}\n", env!("CARGO_PKG_VERSION")));
    manifest.push_str(&format!("checkpoint = {}\n", ckpt_path.display()));
    manifest.push_str(&format!("grammar_hash = {}\n", ck.grammar_hash));
    manifest.push_str(&format!("variant = {}\n", ck.variant));
    manifest.push_str(&format!("constraint = {}\n", ck.constraint.short()));
    manifest.push_str(&format!("count = {count}\n"));
    manifest.push_str(&format!("seed = {seed}\n"));
    manifest.push_str(&format!("node_cap = {node_cap}\n"));
    write_text(&manifest_path(out), &manifest)?;

    println!(
        "sampled {} trees: {} legal, {} violations, {} incomplete; wrote {}",
        report.lines.len(),
        report.legal_count(),
        report.total_violations(),
        report.incomplete_count(),
        out.display()
    );
    Ok(())
}

fn eval_cmd(
    ckpt_paths: &[PathBuf],
    corpus_dir: &Path,
    sample_paths: &[PathBuf],
    out: &Path,
) -> Result<(), CliError> {
    if ckpt_paths.len() != sample_paths.len() {
        return Err(CliError::validation(format!(
            "{} checkpoints but {} sample reports; pass one --samples per --ckpt, in order",
            ckpt_paths.len(),
            sample_paths.len()
        )));
    }
    let checkpoints: Vec<Checkpoint> =
        ckpt_paths.iter().map(|p| Checkpoint::read(p)).collect::<Result<_, _>>()?;
    let g = checkpoints[0].grammar()?;
    let corpus = corpus::read_corpus(corpus_dir, &g)?;
    let reports: Vec<GenReport> =
        sample_paths.iter().map(|p| engine::read_gen_report(p)).collect::<Result<_, _>>()?;
    let inputs: Vec<EvalInput> = checkpoints
        .iter()
        .zip(&reports)
        .map(|(checkpoint, report)| EvalInput { checkpoint, report })
        .collect();
    let table = eval::build_report(&g, &corpus, &inputs)?;
    eval::write_report(out, &table)?;
    print!("{}", eval::render_text(&table));

    let mut manifest = String::new();
    manifest.push_str("kind = evaluation\n");
    manifest.push_str(&format!("tool_version = {}\n", env!("CARGO_PKG_VERSION")));
    manifest.push_str(&format!("grammar_hash = {}\n", g.source_hash()));
    manifest.push_str(&format!("constraint = {}\n", table.constraint.short()));
    manifest.push_str(&format!("batch = {}\n", table.batch));
    manifest.push_str(&format!("corpus = {}\n", corpus_dir.display()));
    for (c, s) in ckpt_paths.iter().zip(sample_paths) {
        manifest.push_str(&format!("model = {} {}\n", c.display(), s.display()));
    }
    write_text(&manifest_path(out), &manifest)?;
    Ok(())
}
