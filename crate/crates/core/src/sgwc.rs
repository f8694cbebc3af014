//! The stochastic-grammar-with-context baseline: production probabilities
//! estimated by counting, conditioned on (nonterminal, exact context
//! vector), with add-α smoothing spread over the legal set only. Mass on
//! illegal productions is zero by construction, so sampling from this model
//! can never violate the constraint.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use crate::grammar::{ConstraintId, Grammar, ProdId, Sym};
use crate::machine::{init_context, vector_bits_string, ContextState, MachineError};
use crate::stream::{linearize, Token};
use crate::tree::Tree;

#[derive(Debug, thiserror::Error)]
pub enum SgwcError {
    #[error(transparent)]
    Machine(#[from] MachineError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path} line {line}: {msg}")]
    BadFile { path: PathBuf, line: usize, msg: String },
}

/// Per-(nonterminal, context) production counts.
#[derive(Clone, Debug, PartialEq)]
pub struct CountTable {
    pub constraint: ConstraintId,
    pub alpha: f64,
    counts: BTreeMap<(Sym, String), BTreeMap<ProdId, u64>>,
}

impl CountTable {
    pub fn new(constraint: ConstraintId, alpha: f64) -> CountTable {
        CountTable { constraint, alpha, counts: BTreeMap::new() }
    }

    pub fn keys(&self) -> usize {
        self.counts.len()
    }

    pub fn total_count(&self) -> u64 {
        self.counts.values().flat_map(|c| c.values()).sum()
    }
}

/// Replay every tree through the logical machine, counting the true
/// production at each prediction step (the root included; Pops carry no
/// prediction).
pub fn fit(
    g: &Grammar,
    trees: &[Tree],
    constraint: ConstraintId,
    alpha: f64,
) -> Result<CountTable, SgwcError> {
    let mut table = CountTable::new(constraint, alpha);
    for tree in trees {
        let mut state = init_context(g, constraint);
        for token in linearize(tree) {
            if let Token::Step(p) = token {
                let hole = state
                    .hole()
                    .ok_or_else(|| MachineError::InconsistentStream("step with no hole".into()))?;
                let key = (hole, vector_bits_string(&state.context_vector()));
                *table.counts.entry(key).or_default().entry(p).or_insert(0) += 1;
            }
            state.update_context(token)?;
        }
    }
    Ok(table)
}

/// Distribution over the full production axis at nonterminal `n` in the
/// machine's current context: (count + α) normalized over P_c, exact zeros
/// elsewhere. An unseen (n, context) key is uniform over P_c. If P_c is
/// empty the result is all zeros — the degenerate no-legal-move case the
/// caller must handle (generation reports the tree incomplete).
pub fn predict(
    table: &CountTable,
    g: &Grammar,
    n: Sym,
    state: &mut ContextState,
) -> Result<Vec<f64>, SgwcError> {
    let legal = state.legal_productions(n)?;
    let mut dist = vec![0.0; g.num_productions()];
    if legal.is_empty() {
        return Ok(dist);
    }
    let key = (n, vector_bits_string(&state.context_vector()));
    match table.counts.get(&key) {
        None => {
            let u = 1.0 / legal.len() as f64;
            for p in legal {
                dist[p.0 as usize] = u;
            }
        }
        Some(cell) => {
            let count = |p: ProdId| cell.get(&p).copied().unwrap_or(0) as f64;
            let total: f64 =
                legal.iter().map(|&p| count(p) + table.alpha).sum();
            for p in legal {
                dist[p.0 as usize] = (count(p) + table.alpha) / total;
            }
        }
    }
    Ok(dist)
}

/// Mean per-prediction negative log-likelihood of a split, natural log,
/// Pops excluded.
pub fn nll(
    table: &CountTable,
    g: &Grammar,
    trees: &[Tree],
) -> Result<f64, SgwcError> {
    let mut sum = 0.0;
    let mut steps = 0u64;
    for tree in trees {
        let mut state = init_context(g, table.constraint);
        for token in linearize(tree) {
            if let Token::Step(p) = token {
                let hole = state
                    .hole()
                    .ok_or_else(|| MachineError::InconsistentStream("step with no hole".into()))?;
                let dist = predict(table, g, hole, &mut state)?;
                sum += -dist[p.0 as usize].max(f64::MIN_POSITIVE).ln();
                steps += 1;
            }
            state.update_context(token)?;
        }
    }
    Ok(if steps == 0 { 0.0 } else { sum / steps as f64 })
}

/// Sorted `<nonterminal> <bitstring> <prod-id> <count>` lines. A context of
/// length zero is written as `-`.
pub fn render_table(g: &Grammar, table: &CountTable) -> String {
    let mut lines: Vec<String> = Vec::new();
    for ((n, bits), cell) in &table.counts {
        let bits = if bits.is_empty() { "-" } else { bits };
        for (p, count) in cell {
            lines.push(format!("{} {} {} {}", g.sym_name(*n), bits, p.0, count));
        }
    }
    lines.sort();
    let mut text = lines.join("\n");
    text.push('\n');
    text
}

pub fn parse_table(
    text: &str,
    g: &Grammar,
    constraint: ConstraintId,
    alpha: f64,
    path: &Path,
) -> Result<CountTable, SgwcError> {
    let mut table = CountTable::new(constraint, alpha);
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| SgwcError::BadFile { path: path.to_path_buf(), line: i + 1, msg };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [n, bits, p, count] = fields.as_slice() else {
            return Err(bad(format!("expected 4 fields, found {}", fields.len())));
        };
        let n = g
            .sym(n)
            .filter(|&s| g.is_nonterminal(s))
            .ok_or_else(|| bad(format!("unknown nonterminal `{n}`")))?;
        let bits = if *bits == "-" { String::new() } else { (*bits).to_string() };
        if !bits.chars().all(|c| c == '0' || c == '1') {
            return Err(bad(format!("malformed context bits `{bits}`")));
        }
        let p: u16 = p.parse().map_err(|_| bad(format!("malformed production id `{p}`")))?;
        if p as usize >= g.num_productions() {
            return Err(bad(format!("production id {p} out of range")));
        }
        let count: u64 = count.parse().map_err(|_| bad(format!("malformed count `{count}`")))?;
        *table.counts.entry((n, bits)).or_default().entry(ProdId(p)).or_insert(0) += count;
    }
    Ok(table)
}

pub fn write_table(path: &Path, g: &Grammar, table: &CountTable) -> Result<(), SgwcError> {
    fs::write(path, render_table(g, table))
        .map_err(|source| SgwcError::Io { path: path.to_path_buf(), source })
}

pub fn read_table(
    path: &Path,
    g: &Grammar,
    constraint: ConstraintId,
    alpha: f64,
) -> Result<CountTable, SgwcError> {
    let text = fs::read_to_string(path)
        .map_err(|source| SgwcError::Io { path: path.to_path_buf(), source })?;
    parse_table(&text, g, constraint, alpha, path)
}
