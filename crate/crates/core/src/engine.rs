//! Training and constrained generation.
//!
//! The prediction protocol, shared by training, likelihood evaluation and
//! generation: the model predicts the production at every Step, the root
//! included. Its input at each position is the encoding of the *previous*
//! token — a one-hot of the expanded nonterminal for a Step, a flag for a
//! Pop, plus (for context variants) the machine's context vector after that
//! token — and an all-zero vector before anything has been consumed. Pops
//! are input only; the model never predicts them.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::corpus::{self, Corpus};
use crate::grammar::eval::{check_tree, evaluate_attributes};
use crate::grammar::{loader, ConstraintId, Grammar, ProdId};
use crate::machine::{init_context, layout, MachineError, QueryCounts};
use crate::neural::adam::Adam;
use crate::neural::{
    tbptt_step, Model, ModelConfig, NeuralError, WindowStep,
};
use crate::sgwc::{self, CountTable, SgwcError};
use crate::stream::{linearize, StreamError, Token};
use crate::tree::Tree;

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Machine(#[from] MachineError),
    #[error(transparent)]
    Sgwc(#[from] SgwcError),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad checkpoint {path}: {msg}")]
    BadCheckpoint { path: PathBuf, msg: String },
    #[error("bad report {path} line {line}: {msg}")]
    BadReport { path: PathBuf, line: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error("corpus does not match grammar: {0}")]
    CorpusGrammarMismatch(String),
    #[error("internal invariant broken: {0}")]
    Invariant(String),
}

// ---------------------------------------------------------------------------
// Model variants

/// The five trained/fitted model flavours the workbench compares.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, PartialOrd, Ord)]
pub enum Variant {
    Vanilla,
    Loss,
    Context,
    Both,
    Sgwc,
}

impl Variant {
    pub const ALL: [Variant; 5] =
        [Variant::Vanilla, Variant::Loss, Variant::Context, Variant::Both, Variant::Sgwc];

    /// Row label in evaluation tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Variant::Vanilla => "Vanilla RNN",
            Variant::Loss => "NAM w/ 3-level loss",
            Variant::Context => "NAM w/ context",
            Variant::Both => "NAM w/ both",
            Variant::Sgwc => "SGWC",
        }
    }

    /// Short form used on the command line and in file headers.
    pub fn flag(self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::Loss => "loss",
            Variant::Context => "context",
            Variant::Both => "both",
            Variant::Sgwc => "sgwc",
        }
    }

    pub fn from_flag(s: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.flag() == s)
    }

    /// Context vector appended to the model input?
    pub fn use_context(self) -> bool {
        matches!(self, Variant::Context | Variant::Both)
    }

    /// Legality penalty added to the objective?
    pub fn use_three_level(self) -> bool {
        matches!(self, Variant::Loss | Variant::Both)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.flag())
    }
}

// ---------------------------------------------------------------------------
// Token encoding

/// Model input width: one-hot over nonterminals, a Pop flag, and (for
/// context variants) the constraint's context vector.
pub fn input_width(g: &Grammar, constraint: ConstraintId, use_context: bool) -> usize {
    g.num_nonterminals() + 1 + if use_context { layout(g).context_len(constraint) } else { 0 }
}

/// Teacher-forced encoding of one tree: per position the model input and,
/// at Step positions, the true production with its legality mask. Trailing
/// no-prediction positions are dropped. Returns the machine query counters
/// so callers can prove which variants consulted it.
pub fn build_windows(
    g: &Grammar,
    tree: &Tree,
    constraint: ConstraintId,
    use_context: bool,
    use_three_level: bool,
) -> Result<(Vec<WindowStep>, QueryCounts), EngineError> {
    let tokens = linearize(tree);
    let n_nt = g.num_nonterminals();
    let width = input_width(g, constraint, use_context);
    let mut machine =
        (use_context || use_three_level).then(|| init_context(g, constraint));

    let mut steps: Vec<WindowStep> = Vec::with_capacity(tokens.len());
    // Nothing consumed yet: the all-zero vector (a fresh context is zero too).
    let mut input = vec![0.0; width];
    for &tok in &tokens {
        let target = match tok {
            Token::Step(p) => {
                let mask = if use_three_level {
                    let m = machine.as_mut().unwrap();
                    let hole = m.hole().ok_or_else(|| {
                        EngineError::CorpusGrammarMismatch(
                            "tree stream continues past a complete derivation".into(),
                        )
                    })?;
                    let mut mask = vec![false; g.num_productions()];
                    for l in m.legal_productions(hole)? {
                        mask[l.0 as usize] = true;
                    }
                    mask
                } else {
                    vec![true; g.num_productions()]
                };
                Some((p.0 as usize, mask))
            }
            Token::Pop => None,
        };
        steps.push(WindowStep { input: std::mem::take(&mut input), target });

        if let Some(m) = machine.as_mut() {
            m.update_context(tok)?;
        }
        let mut next = vec![0.0; width];
        match tok {
            Token::Step(p) => {
                let rank = g.nt_rank(g.production(p).lhs).unwrap();
                next[rank] = 1.0;
            }
            Token::Pop => next[n_nt] = 1.0,
        }
        if use_context {
            let ctx = machine.as_mut().unwrap().context_vector();
            next[n_nt + 1..].copy_from_slice(&ctx);
        }
        input = next;
    }
    while steps.last().is_some_and(|s| s.target.is_none()) {
        steps.pop();
    }
    let queries = machine.map(|m| m.queries()).unwrap_or_default();
    Ok((steps, queries))
}

/// Split a position sequence into backpropagation windows of at most
/// `max_targets` predictions each; no-prediction positions ride along.
pub fn chunk_by_targets(windows: &[WindowStep], max_targets: usize) -> Vec<&[WindowStep]> {
    assert!(max_targets > 0, "window must hold at least one prediction");
    let mut out = Vec::new();
    let mut start = 0;
    let mut targets = 0;
    for (i, w) in windows.iter().enumerate() {
        if w.target.is_some() {
            targets += 1;
            if targets == max_targets {
                out.push(&windows[start..=i]);
                start = i + 1;
                targets = 0;
            }
        }
    }
    if start < windows.len() {
        out.push(&windows[start..]);
    }
    out
}

/// Teacher-forced mean negative log-likelihood of the true production over
/// all prediction steps of `trees` (dropout off).
pub fn model_nll(
    model: &Model,
    g: &Grammar,
    trees: &[Tree],
    constraint: ConstraintId,
) -> Result<f64, EngineError> {
    let mut sum = 0.0;
    let mut n = 0u64;
    for tree in trees {
        let (windows, _) = build_windows(g, tree, constraint, model.config.use_context, false)?;
        let mut state = model.state0();
        for w in &windows {
            let (dist, next) = model.forward_step(&w.input, &state)?;
            state = next;
            if let Some((t, _)) = &w.target {
                sum -= dist[*t].max(f64::MIN_POSITIVE).ln();
                n += 1;
            }
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

// ---------------------------------------------------------------------------
// Checkpoints

const CKPT_MAGIC: &[u8; 8] = b"NAMCKPT\x01";
const CKPT_VERSION: u32 = 1;

/// Everything needed to resume training or to sample: the grammar source,
/// the full configuration, current and best parameters, optimizer moments
/// and the training RNG position. SGWC checkpoints carry the count table
/// instead of parameters. No timestamps — identical runs write identical
/// bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub constraint: ConstraintId,
    pub variant: Variant,
    pub grammar_source: String,
    pub grammar_hash: String,
    pub config: ModelConfig,
    pub input_width: usize,
    pub output_width: usize,
    /// Completed training epochs.
    pub epoch: u64,
    /// Best legal-tree rate seen at an epoch boundary.
    pub best_metric: f64,
    /// Epochs since the metric last improved.
    pub stall: u64,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
    /// Current parameters (training continues from these).
    pub params: Vec<f64>,
    /// Parameters at the best metric (sampling uses these); empty until the
    /// first epoch completes.
    pub best_params: Vec<f64>,
    pub adam_t: u64,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    /// Count-table smoothing weight (SGWC only).
    pub alpha: f64,
    /// Serialized count table (SGWC only, empty otherwise).
    pub table_text: String,
}

struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, v: &str) {
        self.u64(v.len() as u64);
        self.buf.extend_from_slice(v.as_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for &x in v {
            self.f64(x);
        }
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    fn bad(&self, msg: impl Into<String>) -> EngineError {
        EngineError::BadCheckpoint { path: self.path.to_path_buf(), msg: msg.into() }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], EngineError> {
        if self.buf.len() - self.pos < n {
            return Err(self.bad(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, EngineError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, EngineError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, EngineError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u128(&mut self) -> Result<u128, EngineError> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, EngineError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self, unit: usize) -> Result<usize, EngineError> {
        let n = self.u64()? as usize;
        if n.checked_mul(unit).is_none_or(|bytes| bytes > self.buf.len() - self.pos) {
            return Err(self.bad(format!("length {n} exceeds file size")));
        }
        Ok(n)
    }
    fn str(&mut self) -> Result<String, EngineError> {
        let n = self.len(1)?;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.bad("string is not UTF-8"))
    }
    fn f64s(&mut self) -> Result<Vec<f64>, EngineError> {
        let n = self.len(8)?;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64()?);
        }
        Ok(out)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter { buf: Vec::new() };
        w.buf.extend_from_slice(CKPT_MAGIC);
        w.u32(CKPT_VERSION);
        w.u8(match self.constraint {
            ConstraintId::DeclaredVariable => 0,
            ConstraintId::TypesafeVariable => 1,
        });
        w.u8(self.variant as u8);
        w.str(&self.grammar_source);
        w.str(&self.grammar_hash);
        let c = &self.config;
        w.u64(c.hidden as u64);
        w.u64(c.layers as u64);
        w.u64(c.truncation as u64);
        w.f64(c.learning_rate);
        w.f64(c.dropout_keep);
        w.f64(c.lambda_l1);
        w.f64(c.lambda_l2);
        w.f64(c.lambda_c);
        w.u8(c.use_context as u8);
        w.u8(c.use_three_level_loss as u8);
        w.u64(c.seed);
        w.u64(self.input_width as u64);
        w.u64(self.output_width as u64);
        w.u64(self.epoch);
        w.f64(self.best_metric);
        w.u64(self.stall);
        w.buf.extend_from_slice(&self.rng_seed);
        w.u64(self.rng_stream);
        w.u128(self.rng_word_pos);
        w.f64s(&self.params);
        w.f64s(&self.best_params);
        w.u64(self.adam_t);
        w.f64s(&self.adam_m);
        w.f64s(&self.adam_v);
        w.f64(self.alpha);
        w.str(&self.table_text);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint, EngineError> {
        let mut r = ByteReader { buf: bytes, pos: 0, path };
        if r.take(8)? != CKPT_MAGIC {
            return Err(r.bad("not a checkpoint file (bad magic)"));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(r.bad(format!("unsupported version {version}")));
        }
        let constraint = match r.u8()? {
            0 => ConstraintId::DeclaredVariable,
            1 => ConstraintId::TypesafeVariable,
            v => return Err(r.bad(format!("unknown constraint code {v}"))),
        };
        let variant = match r.u8()? {
            0 => Variant::Vanilla,
            1 => Variant::Loss,
            2 => Variant::Context,
            3 => Variant::Both,
            4 => Variant::Sgwc,
            v => return Err(r.bad(format!("unknown variant code {v}"))),
        };
        let grammar_source = r.str()?;
        let grammar_hash = r.str()?;
        let config = ModelConfig {
            hidden: r.u64()? as usize,
            layers: r.u64()? as usize,
            truncation: r.u64()? as usize,
            learning_rate: r.f64()?,
            dropout_keep: r.f64()?,
            lambda_l1: r.f64()?,
            lambda_l2: r.f64()?,
            lambda_c: r.f64()?,
            use_context: r.u8()? != 0,
            use_three_level_loss: r.u8()? != 0,
            seed: r.u64()?,
        };
        let input_width = r.u64()? as usize;
        let output_width = r.u64()? as usize;
        let epoch = r.u64()?;
        let best_metric = r.f64()?;
        let stall = r.u64()?;
        let rng_seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let rng_stream = r.u64()?;
        let rng_word_pos = r.u128()?;
        let params = r.f64s()?;
        let best_params = r.f64s()?;
        let adam_t = r.u64()?;
        let adam_m = r.f64s()?;
        let adam_v = r.f64s()?;
        let alpha = r.f64()?;
        let table_text = r.str()?;
        if r.pos != bytes.len() {
            return Err(r.bad(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let ck = Checkpoint {
            constraint,
            variant,
            grammar_source,
            grammar_hash,
            config,
            input_width,
            output_width,
            epoch,
            best_metric,
            stall,
            rng_seed,
            rng_stream,
            rng_word_pos,
            params,
            best_params,
            adam_t,
            adam_m,
            adam_v,
            alpha,
            table_text,
        };
        if variant != Variant::Sgwc {
            if ck.config.use_context != variant.use_context()
                || ck.config.use_three_level_loss != variant.use_three_level()
            {
                return Err(EngineError::BadCheckpoint {
                    path: path.to_path_buf(),
                    msg: format!("config flags disagree with variant `{variant}`"),
                });
            }
            ck.config.validate()?;
        }
        Ok(ck)
    }

    pub fn write(&self, path: &Path) -> Result<(), EngineError> {
        fs::write(path, self.to_bytes())
            .map_err(|source| EngineError::Io { path: path.to_path_buf(), source })
    }

    pub fn read(path: &Path) -> Result<Checkpoint, EngineError> {
        let bytes = fs::read(path)
            .map_err(|source| EngineError::Io { path: path.to_path_buf(), source })?;
        Checkpoint::from_bytes(&bytes, path)
    }

    /// Parse the embedded grammar and confirm it still hashes to the value
    /// recorded at training time.
    pub fn grammar(&self) -> Result<Grammar, EngineError> {
        let bad = |msg: String| EngineError::BadCheckpoint {
            path: PathBuf::from("<embedded grammar>"),
            msg,
        };
        let g = loader::parse(&self.grammar_source).map_err(|e| bad(e.to_string()))?;
        if g.source_hash() != self.grammar_hash {
            return Err(bad("embedded grammar does not hash to the recorded value".into()));
        }
        Ok(g)
    }

    /// Human-readable `key = value` summary (deterministic, no timestamps).
    pub fn manifest(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("kind", "checkpoint".into());
        kv("tool_version", env!("CARGO_PKG_VERSION").into());
        kv("variant", self.variant.flag().into());
        kv("constraint", self.constraint.short().into());
        kv("grammar_hash", self.grammar_hash.clone());
        if self.variant == Variant::Sgwc {
            kv("alpha", format!("{}", self.alpha));
            kv("table_lines", format!("{}", self.table_text.lines().count()));
        } else {
            let c = &self.config;
            kv("hidden", format!("{}", c.hidden));
            kv("layers", format!("{}", c.layers));
            kv("truncation", format!("{}", c.truncation));
            kv("learning_rate", format!("{}", c.learning_rate));
            kv("dropout_keep", format!("{}", c.dropout_keep));
            kv("lambda_l1", format!("{}", c.lambda_l1));
            kv("lambda_l2", format!("{}", c.lambda_l2));
            kv("lambda_c", format!("{}", c.lambda_c));
            kv("use_context", format!("{}", c.use_context));
            kv("use_three_level_loss", format!("{}", c.use_three_level_loss));
            kv("seed", format!("{}", c.seed));
            kv("input_width", format!("{}", self.input_width));
            kv("output_width", format!("{}", self.output_width));
            kv("parameters", format!("{}", self.params.len()));
            kv("epochs_completed", format!("{}", self.epoch));
            kv("best_legal_rate", format!("{}", self.best_metric));
            kv("stall", format!("{}", self.stall));
        }
        s
    }
}

// ---------------------------------------------------------------------------
// Training

/// Loop controls orthogonal to the model configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainSettings {
    pub max_epochs: usize,
    /// Stop after this many consecutive epochs without improvement.
    pub patience: usize,
    /// Trees generated per epoch to measure the legal-tree rate.
    pub es_samples: usize,
    /// Generation abandons a tree beyond this many nodes.
    pub node_cap: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings { max_epochs: 30, patience: 3, es_samples: 100, node_cap: 2000 }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EpochStats {
    /// 1-based epoch number.
    pub epoch: u64,
    /// Mean total loss over all prediction steps of the epoch.
    pub mean_loss: f64,
    /// Legal-tree rate among the epoch's sampled trees.
    pub legal_rate: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Stats for the epochs run in *this* call (a resumed run reports only
    /// its continuation).
    pub history: Vec<EpochStats>,
    /// Machine queries made while encoding training inputs and targets —
    /// zero proves a variant trained without consulting the machine.
    pub data_queries: QueryCounts,
}

// RNG stream discipline (all ChaCha20 on the model seed): stream 0 is
// parameter init, 1 is the training loop (shuffle + dropout), 2+e measures
// epoch e. Derived streams keep the measurement from moving the training
// stream, so a resumed run replays identically.
const TRAIN_STREAM: u64 = 1;
const MEASURE_STREAM_BASE: u64 = 2;

fn train_rng_at(config: &ModelConfig, ck: Option<&Checkpoint>) -> ChaCha20Rng {
    match ck {
        None => {
            let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
            rng.set_stream(TRAIN_STREAM);
            rng
        }
        Some(ck) => {
            let mut rng = ChaCha20Rng::from_seed(ck.rng_seed);
            rng.set_stream(ck.rng_stream);
            rng.set_word_pos(ck.rng_word_pos);
            rng
        }
    }
}

/// Train `variant` on the corpus, or fit the count table for [`Variant::Sgwc`].
/// `config`'s context/loss flags are overwritten from the variant. Training
/// stops at `max_epochs` or once the sampled legal-tree rate has not improved
/// for `patience` consecutive epochs; the best parameters are kept alongside
/// the current ones. Pass a checkpoint from an earlier call to continue it —
/// a resumed run is bit-identical to an uninterrupted one.
pub fn train(
    g: &Grammar,
    grammar_source: &str,
    corpus: &Corpus,
    constraint: ConstraintId,
    variant: Variant,
    mut config: ModelConfig,
    settings: &TrainSettings,
    resume: Option<Checkpoint>,
) -> Result<TrainOutcome, EngineError> {
    if corpus.train.is_empty() {
        return Err(EngineError::Invalid("training split is empty".into()));
    }
    for tree in corpus.train.iter().chain(&corpus.test) {
        tree.check_shape(g).map_err(|e| EngineError::CorpusGrammarMismatch(e.to_string()))?;
    }
    let grammar_hash = {
        let parsed = loader::parse(grammar_source)
            .map_err(|e| EngineError::Invalid(format!("grammar source: {e}")))?;
        if parsed.source_hash() != g.source_hash() {
            return Err(EngineError::Invalid(
                "grammar source text does not match the loaded grammar".into(),
            ));
        }
        g.source_hash().to_string()
    };

    if variant == Variant::Sgwc {
        if let Some(ck) = resume {
            return Ok(TrainOutcome {
                checkpoint: ck,
                history: Vec::new(),
                data_queries: QueryCounts::default(),
            });
        }
        let alpha = 1.0;
        let table = sgwc::fit(g, &corpus.train, constraint, alpha)?;
        let checkpoint = Checkpoint {
            constraint,
            variant,
            grammar_source: grammar_source.to_string(),
            grammar_hash,
            config,
            input_width: 0,
            output_width: g.num_productions(),
            epoch: 0,
            best_metric: 0.0,
            stall: 0,
            rng_seed: [0; 32],
            rng_stream: 0,
            rng_word_pos: 0,
            params: Vec::new(),
            best_params: Vec::new(),
            adam_t: 0,
            adam_m: Vec::new(),
            adam_v: Vec::new(),
            alpha,
            table_text: sgwc::render_table(g, &table),
        };
        return Ok(TrainOutcome {
            checkpoint,
            history: Vec::new(),
            data_queries: QueryCounts::default(),
        });
    }

    config.use_context = variant.use_context();
    config.use_three_level_loss = variant.use_three_level();
    config.validate()?;
    let in_w = input_width(g, constraint, config.use_context);
    let out_w = g.num_productions();

    let (mut model, mut adam, mut epoch, mut best_metric, mut stall, mut best_params) =
        match &resume {
            None => {
                let model = Model::new(config, in_w, out_w);
                let adam = Adam::new(config.learning_rate, model.param_count());
                (model, adam, 0u64, f64::NEG_INFINITY, 0u64, Vec::new())
            }
            Some(ck) => {
                if ck.variant != variant || ck.constraint != constraint {
                    return Err(EngineError::Invalid(format!(
                        "checkpoint is for {}/{}, asked to continue {}/{}",
                        ck.variant,
                        ck.constraint.short(),
                        variant,
                        constraint.short()
                    )));
                }
                if ck.grammar_hash != g.source_hash() {
                    return Err(EngineError::Invalid(
                        "checkpoint was trained on a different grammar".into(),
                    ));
                }
                if ck.config != config {
                    return Err(EngineError::Invalid(
                        "checkpoint configuration differs from the requested one".into(),
                    ));
                }
                let mut model = Model::zeros(config, ck.input_width, ck.output_width);
                model.load_flat(&ck.params)?;
                let mut adam = Adam::new(config.learning_rate, model.param_count());
                if ck.adam_m.len() != adam.m.len() || ck.adam_v.len() != adam.v.len() {
                    return Err(EngineError::Invalid(
                        "checkpoint optimizer state does not fit the model".into(),
                    ));
                }
                adam.t = ck.adam_t;
                adam.m = ck.adam_m.clone();
                adam.v = ck.adam_v.clone();
                (model, adam, ck.epoch, ck.best_metric, ck.stall, ck.best_params.clone())
            }
        };
    let mut train_rng = train_rng_at(&config, resume.as_ref());

    let mut history = Vec::new();
    let mut data_queries = QueryCounts::default();
    while epoch < settings.max_epochs as u64 && stall < settings.patience as u64 {
        let mut order: Vec<usize> = (0..corpus.train.len()).collect();
        order.shuffle(&mut train_rng);

        let mut loss_sum = 0.0;
        let mut loss_n = 0u64;
        for &i in &order {
            let (windows, q) = build_windows(
                g,
                &corpus.train[i],
                constraint,
                config.use_context,
                config.use_three_level_loss,
            )?;
            data_queries.context_vector += q.context_vector;
            data_queries.legal_productions += q.legal_productions;
            let mut state = model.state0();
            for chunk in chunk_by_targets(&windows, config.truncation) {
                let (outcome, next) =
                    tbptt_step(&mut model, &mut adam, chunk, state, Some(&mut train_rng))?;
                state = next;
                loss_sum += outcome.mean_total * outcome.losses.len() as f64;
                loss_n += outcome.losses.len() as u64;
            }
        }

        let mut measure_rng = ChaCha20Rng::seed_from_u64(config.seed);
        measure_rng.set_stream(MEASURE_STREAM_BASE + epoch);
        let sampler = Sampler::Neural(model.clone());
        let mut legal = 0usize;
        for _ in 0..settings.es_samples {
            let gen = generate_tree(&sampler, g, constraint, &mut measure_rng, settings.node_cap)?;
            if gen.tree.is_some() && gen.violations == 0 {
                legal += 1;
            }
        }
        let rate = legal as f64 / settings.es_samples.max(1) as f64;

        epoch += 1;
        let mean_loss = loss_sum / loss_n.max(1) as f64;
        history.push(EpochStats { epoch, mean_loss, legal_rate: rate });
        log::info!(
            "epoch {epoch}: loss {mean_loss:.4}, legal rate {rate:.2} ({}/{})",
            legal,
            settings.es_samples
        );
        if rate > best_metric {
            best_metric = rate;
            best_params = model.flatten();
            stall = 0;
        } else {
            stall += 1;
        }
    }

    let checkpoint = Checkpoint {
        constraint,
        variant,
        grammar_source: grammar_source.to_string(),
        grammar_hash,
        config,
        input_width: in_w,
        output_width: out_w,
        epoch,
        best_metric,
        stall,
        rng_seed: train_rng.get_seed(),
        rng_stream: train_rng.get_stream(),
        rng_word_pos: train_rng.get_word_pos(),
        params: model.flatten(),
        best_params,
        adam_t: adam.t,
        adam_m: adam.m,
        adam_v: adam.v,
        alpha: 0.0,
        table_text: String::new(),
    };
    Ok(TrainOutcome { checkpoint, history, data_queries })
}

// ---------------------------------------------------------------------------
// Generation

/// A checkpoint made runnable: a neural model on its best parameters, or a
/// count table.
pub enum Sampler {
    Neural(Model),
    Sgwc(CountTable),
}

impl Sampler {
    pub fn from_checkpoint(ck: &Checkpoint, g: &Grammar) -> Result<Sampler, EngineError> {
        if ck.grammar_hash != g.source_hash() {
            return Err(EngineError::Invalid(
                "checkpoint was trained on a different grammar".into(),
            ));
        }
        match ck.variant {
            Variant::Sgwc => {
                let table = sgwc::parse_table(
                    &ck.table_text,
                    g,
                    ck.constraint,
                    ck.alpha,
                    Path::new("<checkpoint table>"),
                )?;
                Ok(Sampler::Sgwc(table))
            }
            _ => {
                let mut model = Model::zeros(ck.config, ck.input_width, ck.output_width);
                let params = if ck.best_params.is_empty() { &ck.params } else { &ck.best_params };
                model.load_flat(params)?;
                Ok(Sampler::Neural(model))
            }
        }
    }
}

/// One generated derivation: the tree if it completed under the node cap,
/// the number of sampling steps that fell outside the legal set, and the
/// number of nodes created.
#[derive(Debug)]
pub struct GenTree {
    pub tree: Option<Tree>,
    pub violations: u64,
    pub nodes: u64,
}

struct BuildFrame {
    production: ProdId,
    children: Vec<Tree>,
}

/// Grow one tree root-down. At every hole the sampler's distribution is
/// renormalized over the hole's candidate productions and sampled; a draw
/// outside the machine's legal set counts as a violation but is kept.
/// Completed nodes emit Pop into the machine (and the model input) without
/// a prediction. Returns no tree if the node cap is hit with holes open, or
/// if the sampler puts zero mass on every candidate (a count-table dead
/// end).
pub fn generate_tree(
    sampler: &Sampler,
    g: &Grammar,
    constraint: ConstraintId,
    rng: &mut ChaCha20Rng,
    node_cap: usize,
) -> Result<GenTree, EngineError> {
    if let Sampler::Neural(m) = sampler {
        let want = input_width(g, constraint, m.config.use_context);
        if m.input_width != want {
            return Err(EngineError::Invalid(format!(
                "model input width {} does not fit this grammar/constraint ({want})",
                m.input_width
            )));
        }
        if m.output_width != g.num_productions() {
            return Err(EngineError::Invalid(format!(
                "model output width {} for a grammar of {} productions",
                m.output_width,
                g.num_productions()
            )));
        }
    }
    if let Sampler::Sgwc(t) = sampler {
        if t.constraint != constraint {
            return Err(EngineError::Invalid(format!(
                "count table is for {}, asked to sample under {}",
                t.constraint.short(),
                constraint.short()
            )));
        }
    }

    let n_nt = g.num_nonterminals();
    let mut machine = init_context(g, constraint);
    let mut stack: Vec<BuildFrame> = Vec::new();
    let mut root: Option<Tree> = None;
    let mut violations = 0u64;
    let mut nodes = 0u64;

    let mut model_state = match sampler {
        Sampler::Neural(m) => Some(m.state0()),
        Sampler::Sgwc(_) => None,
    };
    // Encoding of the last consumed token; all zeros before the first.
    let mut pending = match sampler {
        Sampler::Neural(m) => vec![0.0; m.input_width],
        Sampler::Sgwc(_) => Vec::new(),
    };

    while !machine.is_done() {
        match machine.hole() {
            None => {
                // The top node is complete: Pop is forced, no prediction,
                // but the model still consumes the position.
                if let Sampler::Neural(m) = sampler {
                    let state = model_state.as_ref().unwrap();
                    let (_, next) = m.forward_step(&pending, state)?;
                    model_state = Some(next);
                }
                machine.update_context(Token::Pop)?;
                let frame = stack.pop().ok_or_else(|| {
                    EngineError::Invariant("pop with no open node".into())
                })?;
                let done = Tree::new(frame.production, frame.children);
                match stack.last_mut() {
                    Some(parent) => parent.children.push(done),
                    None => root = Some(done),
                }
                if let Sampler::Neural(m) = sampler {
                    pending = vec![0.0; m.input_width];
                    pending[n_nt] = 1.0;
                    if m.config.use_context {
                        pending[n_nt + 1..].copy_from_slice(&machine.context_vector());
                    }
                }
            }
            Some(hole) => {
                if nodes >= node_cap as u64 {
                    return Ok(GenTree { tree: None, violations, nodes });
                }
                let dist = match sampler {
                    Sampler::Neural(m) => {
                        let state = model_state.as_ref().unwrap();
                        let (dist, next) = m.forward_step(&pending, state)?;
                        model_state = Some(next);
                        dist
                    }
                    Sampler::Sgwc(t) => sgwc::predict(t, g, hole, &mut machine)?,
                };
                let candidates = g.prods_of(hole);
                let mass: f64 = candidates.iter().map(|p| dist[p.0 as usize]).sum();
                if mass <= 0.0 {
                    // Count-table dead end: no production has support.
                    return Ok(GenTree { tree: None, violations, nodes });
                }
                let draw = rng.gen::<f64>() * mass;
                let mut acc = 0.0;
                let mut chosen = *candidates.last().unwrap();
                for &p in candidates {
                    acc += dist[p.0 as usize];
                    if draw < acc {
                        chosen = p;
                        break;
                    }
                }
                if !machine.legal_productions(hole)?.contains(&chosen) {
                    violations += 1;
                }
                machine.update_context(Token::Step(chosen))?;
                nodes += 1;
                stack.push(BuildFrame { production: chosen, children: Vec::new() });
                if let Sampler::Neural(m) = sampler {
                    pending = vec![0.0; m.input_width];
                    pending[g.nt_rank(g.production(chosen).lhs).unwrap()] = 1.0;
                    if m.config.use_context {
                        pending[n_nt + 1..].copy_from_slice(&machine.context_vector());
                    }
                }
            }
        }
    }
    if !stack.is_empty() || root.is_none() {
        return Err(EngineError::Invariant("machine finished with open nodes".into()));
    }
    Ok(GenTree { tree: root, violations, nodes })
}

// ---------------------------------------------------------------------------
// Batch generation and its report file

/// One line of a generation report. `vars`/`procs` are absent for trees
/// that never completed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GenLine {
    /// RNG stream of this tree (the batch seed selects the generator).
    pub seed: u64,
    pub nodes: u64,
    pub violations: u64,
    pub legal: bool,
    pub vars: Option<u64>,
    pub procs: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenReport {
    pub constraint: ConstraintId,
    pub variant: Variant,
    pub seed: u64,
    pub node_cap: u64,
    pub lines: Vec<GenLine>,
}

impl GenReport {
    pub fn total_violations(&self) -> u64 {
        self.lines.iter().map(|l| l.violations).sum()
    }
    pub fn legal_count(&self) -> u64 {
        self.lines.iter().filter(|l| l.legal).count() as u64
    }
    pub fn incomplete_count(&self) -> u64 {
        self.lines.iter().filter(|l| l.vars.is_none()).count() as u64
    }
    pub fn complete_count(&self) -> u64 {
        self.lines.len() as u64 - self.incomplete_count()
    }
    /// Mean distinct variables over completed trees.
    pub fn avg_vars(&self) -> Option<f64> {
        let vs: Vec<u64> = self.lines.iter().filter_map(|l| l.vars).collect();
        (!vs.is_empty()).then(|| vs.iter().sum::<u64>() as f64 / vs.len() as f64)
    }
    /// Mean procedure count over completed trees.
    pub fn avg_procs(&self) -> Option<f64> {
        let vs: Vec<u64> = self.lines.iter().filter_map(|l| l.procs).collect();
        (!vs.is_empty()).then(|| vs.iter().sum::<u64>() as f64 / vs.len() as f64)
    }
}

/// Generate `count` trees, one RNG stream per tree, and double-check every
/// completed tree against the post-hoc attribute checker: generation-time
/// violation counting and the checker must agree on legality.
pub fn sample_batch(
    sampler: &Sampler,
    g: &Grammar,
    constraint: ConstraintId,
    variant: Variant,
    count: usize,
    seed: u64,
    node_cap: usize,
) -> Result<GenReport, EngineError> {
    let mut lines = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let gen = generate_tree(sampler, g, constraint, &mut rng, node_cap)?;
        let line = match &gen.tree {
            Some(tree) => {
                let attributed = evaluate_attributes(g, tree)
                    .map_err(|e| EngineError::Invariant(format!("generated tree: {e}")))?;
                let checker_ok = check_tree(g, &attributed, constraint).is_empty();
                let legal = gen.violations == 0;
                if checker_ok != legal {
                    return Err(EngineError::Invariant(format!(
                        "tree {i}: {} violations at generation, checker says {}",
                        gen.violations,
                        if checker_ok { "legal" } else { "illegal" }
                    )));
                }
                let stats = corpus::tree_stats(g, tree);
                GenLine {
                    seed: i as u64,
                    nodes: gen.nodes,
                    violations: gen.violations,
                    legal,
                    vars: Some(stats.unique_vars as u64),
                    procs: Some(stats.procs as u64),
                }
            }
            None => GenLine {
                seed: i as u64,
                nodes: gen.nodes,
                violations: gen.violations,
                legal: false,
                vars: None,
                procs: None,
            },
        };
        lines.push(line);
    }
    Ok(GenReport { constraint, variant, seed, node_cap: node_cap as u64, lines })
}

/// Report file: `#`-prefixed header, one line per tree
/// (`seed nodes violations legal vars procs`, `-` for stats of incomplete
/// trees), and an aggregate footer.
pub fn render_gen_report(report: &GenReport) -> String {
    let mut s = String::new();
    s.push_str("# generated trees\n");
    s.push_str(&format!("# constraint = {}\n", report.constraint.short()));
    s.push_str(&format!("# variant = {}\n", report.variant.flag()));
    s.push_str(&format!("# seed = {}\n", report.seed));
    s.push_str(&format!("# node_cap = {}\n", report.node_cap));
    s.push_str("# columns: seed nodes violations legal vars procs\n");
    for l in &report.lines {
        let opt = |v: Option<u64>| v.map_or("-".to_string(), |v| v.to_string());
        s.push_str(&format!(
            "{} {} {} {} {} {}\n",
            l.seed,
            l.nodes,
            l.violations,
            l.legal as u8,
            opt(l.vars),
            opt(l.procs)
        ));
    }
    s.push_str(&format!(
        "total trees={} violations={} legal={} incomplete={}\n",
        report.lines.len(),
        report.total_violations(),
        report.legal_count(),
        report.incomplete_count()
    ));
    s
}

pub fn write_gen_report(path: &Path, report: &GenReport) -> Result<(), EngineError> {
    fs::write(path, render_gen_report(report))
        .map_err(|source| EngineError::Io { path: path.to_path_buf(), source })
}

pub fn parse_gen_report(text: &str, path: &Path) -> Result<GenReport, EngineError> {
    let bad = |line: usize, msg: String| EngineError::BadReport {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut constraint = None;
    let mut variant = None;
    let mut seed = None;
    let mut node_cap = None;
    let mut lines = Vec::new();
    let mut footer: Option<(u64, u64, u64, u64)> = None;
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.split_once('=') {
                let (k, v) = (k.trim(), v.trim());
                match k {
                    "constraint" => {
                        constraint = Some(ConstraintId::from_str(v).ok_or_else(|| {
                            bad(lineno, format!("unknown constraint `{v}`"))
                        })?);
                    }
                    "variant" => {
                        variant = Some(Variant::from_flag(v).ok_or_else(|| {
                            bad(lineno, format!("unknown variant `{v}`"))
                        })?);
                    }
                    "seed" => {
                        seed = Some(v.parse::<u64>().map_err(|_| {
                            bad(lineno, format!("malformed seed `{v}`"))
                        })?);
                    }
                    "node_cap" => {
                        node_cap = Some(v.parse::<u64>().map_err(|_| {
                            bad(lineno, format!("malformed node cap `{v}`"))
                        })?);
                    }
                    _ => {}
                }
            }
            continue;
        }
        if footer.is_some() {
            return Err(bad(lineno, "content after the footer".into()));
        }
        if let Some(rest) = line.strip_prefix("total ") {
            let mut totals = (None, None, None, None);
            for field in rest.split_whitespace() {
                let (k, v) = field
                    .split_once('=')
                    .ok_or_else(|| bad(lineno, format!("malformed footer field `{field}`")))?;
                let v: u64 = v
                    .parse()
                    .map_err(|_| bad(lineno, format!("malformed footer value `{v}`")))?;
                match k {
                    "trees" => totals.0 = Some(v),
                    "violations" => totals.1 = Some(v),
                    "legal" => totals.2 = Some(v),
                    "incomplete" => totals.3 = Some(v),
                    _ => return Err(bad(lineno, format!("unknown footer field `{k}`"))),
                }
            }
            match totals {
                (Some(a), Some(b), Some(c), Some(d)) => footer = Some((a, b, c, d)),
                _ => return Err(bad(lineno, "incomplete footer".into())),
            }
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [s, n, v, legal, vars, procs] = fields.as_slice() else {
            return Err(bad(lineno, format!("expected 6 fields, found {}", fields.len())));
        };
        let num = |x: &str| -> Result<u64, EngineError> {
            x.parse().map_err(|_| bad(lineno, format!("malformed number `{x}`")))
        };
        let opt = |x: &str| -> Result<Option<u64>, EngineError> {
            if x == "-" { Ok(None) } else { num(x).map(Some) }
        };
        let legal = match *legal {
            "0" => false,
            "1" => true,
            other => return Err(bad(lineno, format!("malformed legal flag `{other}`"))),
        };
        let (vars, procs) = (opt(vars)?, opt(procs)?);
        if vars.is_none() != procs.is_none() {
            return Err(bad(lineno, "vars and procs must be absent together".into()));
        }
        if legal && vars.is_none() {
            return Err(bad(lineno, "an incomplete tree cannot be legal".into()));
        }
        lines.push(GenLine {
            seed: num(s)?,
            nodes: num(n)?,
            violations: num(v)?,
            legal,
            vars,
            procs,
        });
    }
    let report = GenReport {
        constraint: constraint.ok_or_else(|| bad(0, "missing `# constraint =` header".into()))?,
        variant: variant.ok_or_else(|| bad(0, "missing `# variant =` header".into()))?,
        seed: seed.ok_or_else(|| bad(0, "missing `# seed =` header".into()))?,
        node_cap: node_cap.ok_or_else(|| bad(0, "missing `# node_cap =` header".into()))?,
        lines,
    };
    let (trees, violations, legal, incomplete) =
        footer.ok_or_else(|| bad(0, "missing footer".into()))?;
    if trees != report.lines.len() as u64
        || violations != report.total_violations()
        || legal != report.legal_count()
        || incomplete != report.incomplete_count()
    {
        return Err(bad(0, "footer totals disagree with the per-tree lines".into()));
    }
    Ok(report)
}

pub fn read_gen_report(path: &Path) -> Result<GenReport, EngineError> {
    let text = fs::read_to_string(path)
        .map_err(|source| EngineError::Io { path: path.to_path_buf(), source })?;
    parse_gen_report(&text, path)
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusSpec};
    use crate::neural::window_gradients;

    fn mini_c() -> (Grammar, String) {
        let text = std::fs::read_to_string(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/../../grammars/mini_c.ag"
        ))
        .unwrap();
        (loader::parse(&text).unwrap(), text)
    }

    fn numeral() -> (Grammar, String) {
        let text = std::fs::read_to_string(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/../../grammars/binary_numeral.ag"
        ))
        .unwrap();
        (loader::parse(&text).unwrap(), text)
    }

    fn tiny_corpus(g: &Grammar, programs: usize, seed: u64) -> Corpus {
        generate_corpus(
            g,
            &CorpusSpec {
                programs,
                mean_vars: 2.0,
                mean_types: 2.0,
                mean_procs: 1.2,
                mean_stmts: 4.0,
                holdout: 0.0,
                seed,
            },
        )
        .unwrap()
    }

    fn small_config(seed: u64) -> ModelConfig {
        ModelConfig { hidden: 8, layers: 2, truncation: 50, seed, ..ModelConfig::default() }
    }

    const CD: ConstraintId = ConstraintId::DeclaredVariable;
    const CT: ConstraintId = ConstraintId::TypesafeVariable;

    #[test]
    fn variant_flags_round_trip() {
        for v in Variant::ALL {
            assert_eq!(Variant::from_flag(v.flag()), Some(v));
        }
        assert_eq!(Variant::from_flag("nope"), None);
        assert!(Variant::Both.use_context() && Variant::Both.use_three_level());
        assert!(!Variant::Vanilla.use_context() && !Variant::Vanilla.use_three_level());
        assert!(!Variant::Loss.use_context() && Variant::Loss.use_three_level());
        assert!(Variant::Context.use_context() && !Variant::Context.use_three_level());
    }

    #[test]
    fn windows_follow_the_prediction_protocol() {
        let (g, _) = mini_c();
        let corpus = tiny_corpus(&g, 1, 7);
        let tree = &corpus.train[0];
        let tokens = linearize(tree);
        let n_nt = g.num_nonterminals();

        for (use_ctx, use_3ll) in [(false, false), (false, true), (true, false), (true, true)] {
            let (windows, queries) = build_windows(&g, tree, CD, use_ctx, use_3ll).unwrap();
            let width = input_width(&g, CD, use_ctx);
            assert!(windows.iter().all(|w| w.input.len() == width));

            // Position 0 carries no consumed token.
            assert!(windows[0].input.iter().all(|&x| x == 0.0));
            // Every prediction sits where the stream has a Step, in order.
            let targets: Vec<usize> =
                windows.iter().filter_map(|w| w.target.as_ref().map(|(t, _)| *t)).collect();
            let steps: Vec<usize> = tokens
                .iter()
                .filter_map(|t| match t {
                    Token::Step(p) => Some(p.0 as usize),
                    Token::Pop => None,
                })
                .collect();
            assert_eq!(targets, steps);
            assert_eq!(targets.len(), tree.node_count());
            // The true production is always inside its mask.
            for w in &windows {
                if let Some((t, mask)) = &w.target {
                    assert!(mask[*t]);
                }
            }
            // Inputs past position 0 encode the preceding token one-hot.
            for (w, tok) in windows.iter().skip(1).zip(&tokens) {
                let head = &w.input[..n_nt + 1];
                assert_eq!(head.iter().filter(|&&x| x == 1.0).count(), 1);
                match tok {
                    Token::Step(p) => {
                        assert_eq!(head[g.nt_rank(g.production(*p).lhs).unwrap()], 1.0)
                    }
                    Token::Pop => assert_eq!(head[n_nt], 1.0),
                }
            }
            // No trailing positions without a prediction.
            assert!(windows.last().unwrap().target.is_some());

            // The machine is consulted exactly when a variant needs it.
            assert_eq!(queries.context_vector > 0, use_ctx);
            assert_eq!(queries.legal_productions > 0, use_3ll);
        }
    }

    #[test]
    fn chunking_respects_the_target_budget() {
        let (g, _) = mini_c();
        let corpus = tiny_corpus(&g, 1, 3);
        let (windows, _) = build_windows(&g, &corpus.train[0], CD, false, false).unwrap();
        let total: usize = windows.iter().filter(|w| w.target.is_some()).count();
        assert!(total > 7, "fixture too small: {total} targets");
        let chunks = chunk_by_targets(&windows, 7);
        let counts: Vec<usize> = chunks
            .iter()
            .map(|c| c.iter().filter(|w| w.target.is_some()).count())
            .collect();
        assert!(counts.iter().all(|&c| c <= 7));
        assert_eq!(counts.iter().sum::<usize>(), total);
        assert_eq!(chunks.iter().map(|c| c.len()).sum::<usize>(), windows.len());
        // Rebuilding the original order proves the chunks tile the sequence.
        let flat: Vec<&WindowStep> = chunks.into_iter().flatten().collect();
        for (a, b) in flat.iter().zip(&windows) {
            assert_eq!(a.input, b.input);
        }
    }

    #[test]
    fn teacher_forced_nll_matches_the_training_data_term() {
        let (g, _) = mini_c();
        let corpus = tiny_corpus(&g, 4, 11);
        let config = small_config(5);
        let model = Model::new(
            ModelConfig { use_context: true, use_three_level_loss: false, ..config },
            input_width(&g, CD, true),
            g.num_productions(),
        );
        let nll = model_nll(&model, &g, &corpus.train, CD).unwrap();

        let mut sum = 0.0;
        let mut n = 0u64;
        for tree in &corpus.train {
            let (windows, _) = build_windows(&g, tree, CD, true, false).unwrap();
            let (outcome, _, _) = window_gradients(&model, &windows, model.state0()).unwrap();
            for l in &outcome.losses {
                sum += l.l_xe;
                n += 1;
            }
        }
        assert!((nll - sum / n as f64).abs() < 1e-9, "{nll} vs {}", sum / n as f64);
    }

    #[test]
    fn training_loss_halves_on_a_toy_corpus() {
        let (g, src) = mini_c();
        let corpus = tiny_corpus(&g, 20, 1);
        let config = ModelConfig { learning_rate: 0.03, ..small_config(2) };
        // Teacher-forced mean total loss on fixed parameters.
        let data_term = |model: &Model| {
            let mut sum = 0.0;
            let mut n = 0u64;
            for tree in &corpus.train {
                let (windows, _) = build_windows(&g, tree, CD, true, true).unwrap();
                let (outcome, _, _) = window_gradients(model, &windows, model.state0()).unwrap();
                sum += outcome.mean_total * outcome.losses.len() as f64;
                n += outcome.losses.len() as u64;
            }
            sum / n as f64
        };
        let flags =
            ModelConfig { use_context: true, use_three_level_loss: true, ..config };
        let fresh = Model::new(flags, input_width(&g, CD, true), g.num_productions());
        let before = data_term(&fresh);

        // 20 trees, one window each: 10 epochs = 200 optimization steps.
        let settings =
            TrainSettings { max_epochs: 10, patience: 100, es_samples: 2, node_cap: 300 };
        let out =
            train(&g, &src, &corpus, CD, Variant::Both, config, &settings, None).unwrap();
        assert_eq!(out.history.len(), 10);
        let mut trained = Model::zeros(flags, fresh.input_width, fresh.output_width);
        trained.load_flat(&out.checkpoint.params).unwrap();
        let after = data_term(&trained);
        assert!(after <= 0.5 * before, "loss {before:.4} -> {after:.4} after 200 steps");
    }

    #[test]
    fn vanilla_training_never_consults_the_machine() {
        let (g, src) = mini_c();
        let corpus = tiny_corpus(&g, 5, 9);
        let settings = TrainSettings { max_epochs: 2, patience: 100, es_samples: 1, node_cap: 300 };
        let out = train(&g, &src, &corpus, CD, Variant::Vanilla, small_config(3), &settings, None)
            .unwrap();
        assert_eq!(out.data_queries, QueryCounts::default());

        // The counter itself is live: context variants do consult it.
        let out = train(&g, &src, &corpus, CD, Variant::Both, small_config(3), &settings, None)
            .unwrap();
        assert!(out.data_queries.context_vector > 0);
        assert!(out.data_queries.legal_productions > 0);
    }

    #[test]
    fn identical_runs_write_identical_checkpoints() {
        let (g, src) = mini_c();
        let corpus = tiny_corpus(&g, 6, 21);
        let settings = TrainSettings { max_epochs: 2, patience: 100, es_samples: 3, node_cap: 300 };
        let run = || {
            train(&g, &src, &corpus, CT, Variant::Context, small_config(4), &settings, None)
                .unwrap()
                .checkpoint
                .to_bytes()
        };
        assert_eq!(run(), run());

        let other =
            train(&g, &src, &corpus, CT, Variant::Context, small_config(5), &settings, None)
                .unwrap()
                .checkpoint
                .to_bytes();
        assert_ne!(run(), other, "seed must reach the parameters");
    }

    #[test]
    fn resumed_training_is_bit_identical_to_an_uninterrupted_run() {
        let (g, src) = mini_c();
        let corpus = tiny_corpus(&g, 6, 22);
        let config = small_config(6);
        let long = TrainSettings { max_epochs: 4, patience: 100, es_samples: 3, node_cap: 300 };
        let short = TrainSettings { max_epochs: 2, ..long };

        let straight =
            train(&g, &src, &corpus, CD, Variant::Loss, config, &long, None).unwrap().checkpoint;
        let half =
            train(&g, &src, &corpus, CD, Variant::Loss, config, &short, None).unwrap().checkpoint;
        assert_eq!(half.epoch, 2);
        let resumed =
            train(&g, &src, &corpus, CD, Variant::Loss, config, &long, Some(half)).unwrap();
        assert_eq!(resumed.history.len(), 2, "continues after the stored epochs");
        assert_eq!(resumed.checkpoint.to_bytes(), straight.to_bytes());
    }

    #[test]
    fn resume_rejects_mismatched_requests() {
        let (g, src) = mini_c();
        let corpus = tiny_corpus(&g, 4, 23);
        let config = small_config(7);
        let settings = TrainSettings { max_epochs: 1, patience: 100, es_samples: 1, node_cap: 300 };
        let ck = train(&g, &src, &corpus, CD, Variant::Loss, config, &settings, None)
            .unwrap()
            .checkpoint;

        let wrong_variant =
            train(&g, &src, &corpus, CD, Variant::Both, config, &settings, Some(ck.clone()));
        assert!(matches!(wrong_variant, Err(EngineError::Invalid(_))));

        let other_config = ModelConfig { hidden: 16, ..config };
        let wrong_config =
            train(&g, &src, &corpus, CD, Variant::Loss, other_config, &settings, Some(ck.clone()));
        assert!(matches!(wrong_config, Err(EngineError::Invalid(_))));

        let (num_g, num_src) = numeral();
        let tree = Tree::new(
            num_g.prod_by_name("Numeral").unwrap(),
            vec![Tree::leaf(num_g.prod_by_name("Zero").unwrap())],
        );
        let num_corpus = Corpus { train: vec![tree], test: vec![] };
        let wrong_grammar = train(
            &num_g,
            &num_src,
            &num_corpus,
            CD,
            Variant::Loss,
            config,
            &settings,
            Some(ck),
        );
        assert!(matches!(wrong_grammar, Err(EngineError::Invalid(_))));
    }

    #[test]
    fn checkpoints_round_trip_and_reject_corruption() {
        let (g, src) = mini_c();
        let corpus = tiny_corpus(&g, 4, 31);
        let settings = TrainSettings { max_epochs: 1, patience: 100, es_samples: 1, node_cap: 300 };
        let ck = train(&g, &src, &corpus, CT, Variant::Both, small_config(8), &settings, None)
            .unwrap()
            .checkpoint;

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ck.write(&path).unwrap();
        let back = Checkpoint::read(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.grammar().unwrap().source_hash(), g.source_hash());

        let bytes = ck.to_bytes();
        let p = Path::new("<memory>");
        let mut bad_magic = bytes.clone();
        bad_magic[0] ^= 0xff;
        assert!(Checkpoint::from_bytes(&bad_magic, p).is_err());

        let mut bad_version = bytes.clone();
        bad_version[8] = 99;
        assert!(Checkpoint::from_bytes(&bad_version, p).is_err());

        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], p).is_err());

        let mut huge_len = bytes.clone();
        // The grammar-source length field sits right after magic+version+2.
        huge_len[14..22].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(Checkpoint::from_bytes(&huge_len, p).is_err());

        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(Checkpoint::from_bytes(&trailing, p).is_err());
    }

    #[test]
    fn rigged_output_bias_forces_the_minimal_derivation() {
        let (g, _) = numeral();
        let config = ModelConfig {
            hidden: 4,
            layers: 1,
            use_context: false,
            use_three_level_loss: false,
            ..ModelConfig::default()
        };
        let mut model =
            Model::zeros(config, input_width(&g, CD, false), g.num_productions());
        model.b_out[g.prod_by_name("Numeral").unwrap().0 as usize] = 50.0;
        model.b_out[g.prod_by_name("Zero").unwrap().0 as usize] = 50.0;
        let sampler = Sampler::Neural(model);
        for stream in 0..10 {
            let mut rng = ChaCha20Rng::seed_from_u64(40);
            rng.set_stream(stream);
            let gen = generate_tree(&sampler, &g, CD, &mut rng, 100).unwrap();
            let tree = gen.tree.expect("derivation completes");
            assert_eq!(tree.node_count(), 2, "Numeral wrapping a single Zero leaf");
            assert_eq!(gen.violations, 0);
            assert_eq!(gen.nodes, 2);
        }
    }

    #[test]
    fn node_cap_reports_an_incomplete_tree() {
        let (g, _) = numeral();
        let config = ModelConfig {
            hidden: 4,
            layers: 1,
            use_context: false,
            use_three_level_loss: false,
            ..ModelConfig::default()
        };
        let mut model =
            Model::zeros(config, input_width(&g, CD, false), g.num_productions());
        // All mass on the recursive production: the tree can never finish.
        model.b_out[g.prod_by_name("Pair").unwrap().0 as usize] = 50.0;
        model.b_out[g.prod_by_name("Numeral").unwrap().0 as usize] = 25.0;
        let sampler = Sampler::Neural(model);
        let mut rng = ChaCha20Rng::seed_from_u64(41);
        let gen = generate_tree(&sampler, &g, CD, &mut rng, 50).unwrap();
        assert!(gen.tree.is_none());
        assert_eq!(gen.nodes, 50);
    }

    #[test]
    fn count_table_generation_never_violates() {
        let (g, src) = mini_c();
        let corpus = tiny_corpus(&g, 40, 51);
        for constraint in [CD, CT] {
            let ck = train(
                &g,
                &src,
                &corpus,
                constraint,
                Variant::Sgwc,
                small_config(0),
                &TrainSettings::default(),
                None,
            )
            .unwrap()
            .checkpoint;
            let sampler = Sampler::from_checkpoint(&ck, &g).unwrap();
            let report =
                sample_batch(&sampler, &g, constraint, Variant::Sgwc, 50, 99, 2000).unwrap();
            assert_eq!(report.lines.len(), 50);
            assert_eq!(report.total_violations(), 0);
            // Complete trees are all legal; the rest are incomplete.
            assert_eq!(report.legal_count() + report.incomplete_count(), 50);
            assert!(report.legal_count() > 0, "some trees complete");
            assert!(report.avg_vars().is_some());
        }
    }

    #[test]
    fn generation_legality_agrees_with_the_checker() {
        let (g, _) = mini_c();
        // An untrained model violates freely; sample_batch cross-checks every
        // completed tree against the attribute checker and errors on any
        // disagreement.
        let config = ModelConfig { use_context: false, ..small_config(12) };
        let model = Model::new(config, input_width(&g, CD, false), g.num_productions());
        let report =
            sample_batch(&Sampler::Neural(model), &g, CD, Variant::Vanilla, 30, 7, 400).unwrap();
        assert_eq!(report.lines.len(), 30);
        assert!(
            report.total_violations() > 0,
            "an untrained model should violate the constraint somewhere"
        );
    }

    #[test]
    fn sgwc_checkpoints_embed_a_working_table() {
        let (g, src) = mini_c();
        let corpus = tiny_corpus(&g, 10, 61);
        let ck = train(
            &g,
            &src,
            &corpus,
            CD,
            Variant::Sgwc,
            small_config(0),
            &TrainSettings::default(),
            None,
        )
        .unwrap()
        .checkpoint;
        let direct = sgwc::fit(&g, &corpus.train, CD, 1.0).unwrap();
        assert_eq!(ck.table_text, sgwc::render_table(&g, &direct));

        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("<memory>")).unwrap();
        let Sampler::Sgwc(table) = Sampler::from_checkpoint(&back, &g).unwrap() else {
            panic!("sgwc checkpoint must yield a count-table sampler");
        };
        assert_eq!(table, direct);
    }

    #[test]
    fn gen_reports_round_trip_and_validate() {
        let (g, src) = mini_c();
        let corpus = tiny_corpus(&g, 10, 71);
        let ck = train(
            &g,
            &src,
            &corpus,
            CD,
            Variant::Sgwc,
            small_config(0),
            &TrainSettings::default(),
            None,
        )
        .unwrap()
        .checkpoint;
        let sampler = Sampler::from_checkpoint(&ck, &g).unwrap();
        let report = sample_batch(&sampler, &g, CD, Variant::Sgwc, 20, 5, 500).unwrap();

        let text = render_gen_report(&report);
        let back = parse_gen_report(&text, Path::new("<memory>")).unwrap();
        assert_eq!(back, report);

        let p = Path::new("<memory>");
        let no_footer = text.lines().filter(|l| !l.starts_with("total")).collect::<Vec<_>>();
        assert!(parse_gen_report(&no_footer.join("\n"), p).is_err());

        let cooked = text.replacen("violations=", "violations=9", 1);
        assert!(parse_gen_report(&cooked, p).is_err(), "footer must match the lines");

        let short_line = text.replacen(" 0 ", " ", 1);
        assert!(parse_gen_report(&short_line, p).is_err());
    }

    #[test]
    fn sampling_rejects_mismatched_grammar_or_constraint() {
        let (g, src) = mini_c();
        let corpus = tiny_corpus(&g, 5, 81);
        let settings = TrainSettings { max_epochs: 1, patience: 100, es_samples: 1, node_cap: 300 };
        let ck = train(&g, &src, &corpus, CD, Variant::Both, small_config(9), &settings, None)
            .unwrap()
            .checkpoint;

        let (num_g, _) = numeral();
        assert!(matches!(
            Sampler::from_checkpoint(&ck, &num_g),
            Err(EngineError::Invalid(_))
        ));

        // A context model trained under cd has the wrong width for ct.
        let sampler = Sampler::from_checkpoint(&ck, &g).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        assert!(matches!(
            generate_tree(&sampler, &g, CT, &mut rng, 100),
            Err(EngineError::Invalid(_))
        ));
    }
}
