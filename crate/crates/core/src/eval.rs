//! Model comparison: likelihoods, generation quality aggregates, and the
//! report table in human and machine-readable forms.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use crate::corpus::{self, Corpus};
use crate::engine::{model_nll, Checkpoint, EngineError, GenReport, Sampler, Variant};
use crate::grammar::{ConstraintId, Grammar};
use crate::sgwc;
use crate::tree::Tree;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path} line {line}: {msg}")]
    BadFile { path: PathBuf, line: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
}

/// Teacher-forced mean negative log-likelihood of the true production over
/// all prediction steps (natural log; Pops carry no prediction).
pub fn avg_nll(
    sampler: &Sampler,
    g: &Grammar,
    trees: &[Tree],
    constraint: ConstraintId,
) -> Result<f64, EvalError> {
    match sampler {
        Sampler::Neural(model) => Ok(model_nll(model, g, trees, constraint)?),
        Sampler::Sgwc(table) => Ok(sgwc::nll(table, g, trees).map_err(EngineError::from)?),
    }
}

/// Total constraint violations across a generation batch.
pub fn count_violations(report: &GenReport) -> u64 {
    report.total_violations()
}

/// Trees generated without a single violation (incomplete trees are never
/// legal).
pub fn count_legal(report: &GenReport) -> u64 {
    report.legal_count()
}

/// Mean distinct variables and mean procedure count over complete trees.
pub fn tree_stats(g: &Grammar, trees: &[Tree]) -> Result<(f64, f64), EvalError> {
    if trees.is_empty() {
        return Err(EvalError::EmptyBatch);
    }
    let mut vars = 0u64;
    let mut procs = 0u64;
    for t in trees {
        let s = corpus::tree_stats(g, t);
        vars += s.unique_vars as u64;
        procs += s.procs as u64;
    }
    let n = trees.len() as f64;
    Ok((vars as f64 / n, procs as f64 / n))
}

/// One comparison row. The shape averages cover complete trees only and are
/// absent when a batch completed none.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRow {
    pub variant: Variant,
    pub seed: u64,
    pub avg_vars: Option<f64>,
    pub avg_procs: Option<f64>,
    pub violations: u64,
    pub legal_trees: u64,
    pub incomplete: u64,
    pub nll_train: f64,
    pub nll_test: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub constraint: ConstraintId,
    /// Trees sampled per model.
    pub batch: u64,
    pub rows: Vec<EvalRow>,
}

/// A trained model paired with its generation batch.
pub struct EvalInput<'a> {
    pub checkpoint: &'a Checkpoint,
    pub report: &'a GenReport,
}

fn variant_rank(v: Variant) -> usize {
    Variant::ALL.iter().position(|&x| x == v).unwrap()
}

/// Score each model on its batch and likelihoods, in the fixed row order.
pub fn build_report(
    g: &Grammar,
    corpus: &Corpus,
    inputs: &[EvalInput<'_>],
) -> Result<EvalReport, EvalError> {
    let Some(first) = inputs.first() else {
        return Err(EvalError::Invalid("no models to evaluate".into()));
    };
    let constraint = first.report.constraint;
    let batch = first.report.lines.len() as u64;
    let mut rows = Vec::with_capacity(inputs.len());
    for input in inputs {
        let (ck, report) = (input.checkpoint, input.report);
        if report.constraint != constraint {
            return Err(EvalError::Invalid(format!(
                "mixed constraints: {} and {}",
                constraint.short(),
                report.constraint.short()
            )));
        }
        if report.lines.len() as u64 != batch {
            return Err(EvalError::Invalid(format!(
                "mixed batch sizes: {batch} and {}",
                report.lines.len()
            )));
        }
        if ck.variant != report.variant {
            return Err(EvalError::Invalid(format!(
                "checkpoint is {}, report is {}",
                ck.variant, report.variant
            )));
        }
        let sampler = Sampler::from_checkpoint(ck, g)?;
        rows.push(EvalRow {
            variant: report.variant,
            seed: report.seed,
            avg_vars: report.avg_vars(),
            avg_procs: report.avg_procs(),
            violations: count_violations(report),
            legal_trees: count_legal(report),
            incomplete: report.incomplete_count(),
            nll_train: avg_nll(&sampler, g, &corpus.train, constraint)?,
            nll_test: avg_nll(&sampler, g, &corpus.test, constraint)?,
        });
    }
    rows.sort_by_key(|r| variant_rank(r.variant));
    Ok(EvalReport { constraint, batch, rows })
}

pub const TABLE_COLUMNS: [&str; 7] = [
    "Model",
    "Avg. Vars.",
    "Avg. Procs.",
    "Constraint Violations",
    "Legal Trees",
    "NLL train",
    "NLL test",
];

/// Aligned text table for humans.
pub fn render_text(report: &EvalReport) -> String {
    let mut grid: Vec<[String; 7]> = Vec::with_capacity(report.rows.len() + 1);
    grid.push(TABLE_COLUMNS.map(str::to_string));
    let f2 = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2}"));
    for r in &report.rows {
        grid.push([
            r.variant.display_name().to_string(),
            f2(r.avg_vars),
            f2(r.avg_procs),
            r.violations.to_string(),
            r.legal_trees.to_string(),
            format!("{:.3}", r.nll_train),
            format!("{:.3}", r.nll_test),
        ]);
    }
    let widths: Vec<usize> =
        (0..7).map(|c| grid.iter().map(|row| row[c].len()).max().unwrap()).collect();
    let mut s = format!(
        "constraint {}: {} trees per model\n",
        report.constraint.short(),
        report.batch
    );
    for (i, row) in grid.iter().enumerate() {
        let cells: Vec<String> =
            row.iter().zip(&widths).map(|(cell, w)| format!("{cell:<w$}")).collect();
        s.push_str(cells.join(" | ").trim_end());
        s.push('\n');
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            s.push_str(&rule.join("-|-"));
            s.push('\n');
        }
    }
    s
}

const CSV_HEADER: &str =
    "model,seed,avg_vars,avg_procs,violations,legal_trees,incomplete,nll_train,nll_test";

/// Machine-readable form; numbers print in shortest round-trip notation so
/// parsing recovers the exact report.
pub fn render_csv(report: &EvalReport) -> String {
    let mut s = format!(
        "# constraint = {}\n# batch = {}\n{CSV_HEADER}\n",
        report.constraint.short(),
        report.batch
    );
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v}"));
    for r in &report.rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.variant.flag(),
            r.seed,
            opt(r.avg_vars),
            opt(r.avg_procs),
            r.violations,
            r.legal_trees,
            r.incomplete,
            r.nll_train,
            r.nll_test
        ));
    }
    s
}

pub fn parse_csv(text: &str, path: &Path) -> Result<EvalReport, EvalError> {
    let bad = |line: usize, msg: String| EvalError::BadFile {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut constraint = None;
    let mut batch = None;
    let mut saw_header = false;
    let mut rows = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.split_once('=') {
                match k.trim() {
                    "constraint" => {
                        let v = v.trim();
                        constraint = Some(ConstraintId::from_str(v).ok_or_else(|| {
                            bad(lineno, format!("unknown constraint `{v}`"))
                        })?);
                    }
                    "batch" => {
                        batch = Some(v.trim().parse::<u64>().map_err(|_| {
                            bad(lineno, format!("malformed batch `{}`", v.trim()))
                        })?);
                    }
                    _ => {}
                }
            }
            continue;
        }
        if !saw_header {
            if line != CSV_HEADER {
                return Err(bad(lineno, format!("expected header `{CSV_HEADER}`")));
            }
            saw_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let [model, seed, avg_vars, avg_procs, violations, legal, incomplete, nll_train, nll_test] =
            fields.as_slice()
        else {
            return Err(bad(lineno, format!("expected 9 fields, found {}", fields.len())));
        };
        let variant = Variant::from_flag(model)
            .ok_or_else(|| bad(lineno, format!("unknown model `{model}`")))?;
        let int = |x: &str| -> Result<u64, EvalError> {
            x.parse().map_err(|_| bad(lineno, format!("malformed integer `{x}`")))
        };
        let num = |x: &str| -> Result<f64, EvalError> {
            let v: f64 =
                x.parse().map_err(|_| bad(lineno, format!("malformed number `{x}`")))?;
            if !v.is_finite() {
                return Err(bad(lineno, format!("non-finite number `{x}`")));
            }
            Ok(v)
        };
        let opt = |x: &str| -> Result<Option<f64>, EvalError> {
            if x == "-" { Ok(None) } else { num(x).map(Some) }
        };
        let (nll_train, nll_test) = (num(nll_train)?, num(nll_test)?);
        if nll_train < 0.0 || nll_test < 0.0 {
            return Err(bad(lineno, "negative log-likelihood cannot be negative".into()));
        }
        rows.push(EvalRow {
            variant,
            seed: int(seed)?,
            avg_vars: opt(avg_vars)?,
            avg_procs: opt(avg_procs)?,
            violations: int(violations)?,
            legal_trees: int(legal)?,
            incomplete: int(incomplete)?,
            nll_train,
            nll_test,
        });
    }
    if !saw_header {
        return Err(bad(0, "missing column header".into()));
    }
    let report = EvalReport {
        constraint: constraint.ok_or_else(|| bad(0, "missing `# constraint =` line".into()))?,
        batch: batch.ok_or_else(|| bad(0, "missing `# batch =` line".into()))?,
        rows,
    };
    for r in &report.rows {
        if r.legal_trees + r.incomplete > report.batch {
            return Err(bad(0, format!("row {} counts exceed the batch", r.variant)));
        }
    }
    Ok(report)
}

pub fn write_report(dir_or_file: &Path, report: &EvalReport) -> Result<(), EvalError> {
    fs::write(dir_or_file, render_csv(report))
        .map_err(|source| EvalError::Io { path: dir_or_file.to_path_buf(), source })
}

pub fn read_report(path: &Path) -> Result<EvalReport, EvalError> {
    let text = fs::read_to_string(path)
        .map_err(|source| EvalError::Io { path: path.to_path_buf(), source })?;
    parse_csv(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusSpec};
    use crate::engine::{
        build_windows, input_width, sample_batch, train, GenLine, TrainSettings,
    };
    use crate::grammar::loader;
    use crate::neural::window_gradients;
    use crate::neural::{Model, ModelConfig};
    use crate::tree::Tree;

    fn mini_c() -> (Grammar, String) {
        let text = std::fs::read_to_string(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/../../grammars/mini_c.ag"
        ))
        .unwrap();
        (loader::parse(&text).unwrap(), text)
    }

    fn numeral() -> Grammar {
        let text = std::fs::read_to_string(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/../../grammars/binary_numeral.ag"
        ))
        .unwrap();
        loader::parse(&text).unwrap()
    }

    const CD: ConstraintId = ConstraintId::DeclaredVariable;

    fn tiny_corpus(g: &Grammar, programs: usize, seed: u64) -> Corpus {
        generate_corpus(
            g,
            &CorpusSpec {
                programs,
                mean_vars: 2.0,
                mean_types: 2.0,
                mean_procs: 1.2,
                mean_stmts: 4.0,
                holdout: 0.25,
                seed,
            },
        )
        .unwrap()
    }

    #[test]
    fn empty_batches_are_rejected() {
        let (g, _) = mini_c();
        assert!(matches!(tree_stats(&g, &[]), Err(EvalError::EmptyBatch)));
    }

    #[test]
    fn minimal_program_scores_one_var_one_proc() {
        let (g, _) = mini_c();
        let corpus = generate_corpus(
            &g,
            &CorpusSpec {
                programs: 1,
                mean_vars: 1.0,
                mean_types: 1.0,
                mean_procs: 1.0,
                mean_stmts: 2.0,
                holdout: 0.0,
                seed: 4,
            },
        )
        .unwrap();
        let (vars, procs) = tree_stats(&g, &corpus.train).unwrap();
        assert_eq!((vars, procs), (1.0, 1.0));
    }

    #[test]
    fn uniform_model_nll_is_log_production_count() {
        let (g, _) = mini_c();
        let corpus = tiny_corpus(&g, 3, 8);
        let config = ModelConfig {
            hidden: 8,
            layers: 2,
            use_context: false,
            use_three_level_loss: false,
            ..ModelConfig::default()
        };
        // All-zero parameters put the same logit on every production.
        let model = Model::zeros(config, input_width(&g, CD, false), g.num_productions());
        let nll = avg_nll(&Sampler::Neural(model), &g, &corpus.train, CD).unwrap();
        let expect = (g.num_productions() as f64).ln();
        assert!((nll - expect).abs() < 1e-12, "{nll} vs ln|P| = {expect}");
    }

    #[test]
    fn deterministic_count_table_has_zero_nll() {
        // With α = 0 and a single observed tree, every (nonterminal, context)
        // cell puts mass 1 on its observed production.
        let g = numeral();
        let tree = Tree::new(
            g.prod_by_name("Numeral").unwrap(),
            vec![Tree::leaf(g.prod_by_name("Zero").unwrap())],
        );
        let trees = vec![tree];
        let table = sgwc::fit(&g, &trees, CD, 0.0).unwrap();
        let nll = avg_nll(&Sampler::Sgwc(table), &g, &trees, CD).unwrap();
        assert_eq!(nll, 0.0);
    }

    #[test]
    fn evaluator_nll_equals_the_trainer_data_term() {
        let (g, _) = mini_c();
        let corpus = tiny_corpus(&g, 4, 17);
        let config = ModelConfig {
            hidden: 8,
            layers: 2,
            seed: 2,
            use_context: true,
            use_three_level_loss: false,
            ..ModelConfig::default()
        };
        let model = Model::new(config, input_width(&g, CD, true), g.num_productions());

        let mut sum = 0.0;
        let mut n = 0u64;
        for tree in &corpus.test {
            let (windows, _) = build_windows(&g, tree, CD, true, false).unwrap();
            let (outcome, _, _) = window_gradients(&model, &windows, model.state0()).unwrap();
            sum += outcome.losses.iter().map(|l| l.l_xe).sum::<f64>();
            n += outcome.losses.len() as u64;
        }
        let trainer = sum / n as f64;
        let eval = avg_nll(&Sampler::Neural(model), &g, &corpus.test, CD).unwrap();
        assert!((eval - trainer).abs() < 1e-9, "{eval} vs {trainer}");
    }

    #[test]
    fn violation_and_legality_counts_follow_the_lines() {
        let line = |violations: u64| GenLine {
            seed: 0,
            nodes: 10,
            violations,
            legal: violations == 0,
            vars: Some(1),
            procs: Some(1),
        };
        let report = GenReport {
            constraint: CD,
            variant: Variant::Vanilla,
            seed: 0,
            node_cap: 100,
            lines: vec![line(0), line(0), line(3), line(1), line(0)],
        };
        assert_eq!(count_violations(&report), 4);
        assert_eq!(count_legal(&report), 3);

        // Incomplete trees are not legal even without violations.
        let mut incomplete = line(0);
        incomplete.legal = false;
        incomplete.vars = None;
        incomplete.procs = None;
        let report = GenReport { lines: vec![line(0), incomplete], ..report };
        assert_eq!(count_legal(&report), 1);
        assert_eq!(report.incomplete_count(), 1);
    }

    #[test]
    fn report_rows_sort_into_the_fixed_order() {
        let (g, src) = mini_c();
        let corpus = tiny_corpus(&g, 8, 30);
        let settings = TrainSettings { max_epochs: 1, patience: 9, es_samples: 1, node_cap: 300 };
        let config = ModelConfig { hidden: 8, layers: 1, seed: 5, ..ModelConfig::default() };

        // Build in scrambled order; expect the canonical one back.
        let scrambled = [Variant::Sgwc, Variant::Vanilla, Variant::Both];
        let trained: Vec<_> = scrambled
            .iter()
            .map(|&v| {
                train(&g, &src, &corpus, CD, v, config, &settings, None).unwrap().checkpoint
            })
            .collect();
        let reports: Vec<_> = trained
            .iter()
            .map(|ck| {
                let sampler = Sampler::from_checkpoint(ck, &g).unwrap();
                sample_batch(&sampler, &g, CD, ck.variant, 10, 3, 400).unwrap()
            })
            .collect();
        let inputs: Vec<EvalInput> = trained
            .iter()
            .zip(&reports)
            .map(|(checkpoint, report)| EvalInput { checkpoint, report })
            .collect();
        let report = build_report(&g, &corpus, &inputs).unwrap();
        let order: Vec<Variant> = report.rows.iter().map(|r| r.variant).collect();
        assert_eq!(order, vec![Variant::Vanilla, Variant::Both, Variant::Sgwc]);
        assert_eq!(report.batch, 10);
        for row in &report.rows {
            assert!(row.legal_trees + row.incomplete <= report.batch);
            assert!(row.nll_train >= 0.0 && row.nll_test >= 0.0);
        }
        // The count table never violates; the untrained nets rarely stay legal.
        let sgwc_row = report.rows.iter().find(|r| r.variant == Variant::Sgwc).unwrap();
        assert_eq!(sgwc_row.violations, 0);
    }

    #[test]
    fn text_table_has_the_exact_columns_in_order() {
        let report = EvalReport { constraint: CD, batch: 5, rows: vec![] };
        let text = render_text(&report);
        let header = text.lines().nth(1).unwrap();
        let cells: Vec<&str> = header.split('|').map(str::trim).collect();
        assert_eq!(cells, TABLE_COLUMNS.to_vec());
        assert_eq!(text.lines().count(), 3, "header-only table for an empty row set");

        let row = EvalRow {
            variant: Variant::Loss,
            seed: 7,
            avg_vars: Some(3.25),
            avg_procs: Some(1.5),
            violations: 12,
            legal_trees: 3,
            incomplete: 1,
            nll_train: 0.5,
            nll_test: 0.75,
        };
        let report = EvalReport { constraint: CD, batch: 5, rows: vec![row] };
        let text = render_text(&report);
        let data = text.lines().nth(3).unwrap();
        assert!(data.starts_with("NAM w/ 3-level loss"));
        assert!(data.contains("3.25") && data.contains("12") && data.contains("0.500"));
    }

    #[test]
    fn csv_round_trips_losslessly() {
        let rows = vec![
            EvalRow {
                variant: Variant::Vanilla,
                seed: 42,
                avg_vars: Some(6.910000000000001),
                avg_procs: Some(5.2),
                violations: 801,
                legal_trees: 61,
                incomplete: 2,
                nll_train: 0.23123456789,
                nll_test: 0.25300000000000003,
            },
            EvalRow {
                variant: Variant::Sgwc,
                seed: 42,
                avg_vars: None,
                avg_procs: None,
                violations: 0,
                legal_trees: 0,
                incomplete: 100,
                nll_train: 2.5,
                nll_test: 2.625,
            },
        ];
        let report = EvalReport { constraint: CD, batch: 100, rows };
        let text = render_csv(&report);
        let back = parse_csv(&text, Path::new("<memory>")).unwrap();
        assert_eq!(back, report);

        let empty = EvalReport { constraint: CD, batch: 0, rows: vec![] };
        let back = parse_csv(&render_csv(&empty), Path::new("<memory>")).unwrap();
        assert_eq!(back, empty);
    }

    #[test]
    fn malformed_csv_is_rejected() {
        let p = Path::new("<memory>");
        let good = render_csv(&EvalReport {
            constraint: CD,
            batch: 10,
            rows: vec![EvalRow {
                variant: Variant::Both,
                seed: 1,
                avg_vars: Some(2.0),
                avg_procs: Some(1.0),
                violations: 0,
                legal_trees: 10,
                incomplete: 0,
                nll_train: 1.0,
                nll_test: 1.0,
            }],
        });
        assert!(parse_csv(&good, p).is_ok());

        for (broken, why) in [
            (good.replace("# constraint = cd\n", ""), "missing constraint"),
            (good.replace("# batch = 10", "# batch = x"), "bad batch"),
            (good.replace("model,seed", "model;seed"), "wrong header"),
            (good.replace("both,", "bogus,"), "unknown model"),
            (good.replace(",1,1\n", ",1\n"), "missing field"),
            (good.replace(",0,10,", ",0,11,"), "legal exceeds batch"),
            (good.replace(",1,1\n", ",1,-1\n"), "negative NLL"),
        ] {
            assert!(parse_csv(&broken, p).is_err(), "accepted: {why}");
        }
    }
}
