//! Synthetic program corpus over the mini-C grammar.
//!
//! The generator builds each program top-down while replaying its own tokens
//! through two [`ContextState`] machines (one per constraint) and only ever
//! emits productions that both machines report legal — generated programs
//! satisfy both constraints by construction, which an independent checker
//! re-verifies in tests.
//!
//! Program shape follows per-program counts drawn from geometric
//! distributions whose parameters are solved so that the *truncated* means
//! land on the spec targets: distinct variables, distinct types, procedures,
//! and a statement count standing in for lines of code (declaration lines
//! plus statement nodes). Variables are emitted directly in order-of-use
//! aliased form: fresh names take the next free index in preorder, so
//! `alias_variables` is the identity on corpus trees.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::grammar::{Arg, ConstraintId, Func, Grammar, ProdId, Sym, TagId, Value};
use crate::machine::{init_context, layout, ContextState, Layout};
use crate::stream::{linearize, parse_stream, render_stream, Token};
use crate::tree::Tree;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorpusSpec {
    pub programs: usize,
    /// Target mean distinct variables per program.
    pub mean_vars: f64,
    /// Target mean distinct types per program.
    pub mean_types: f64,
    /// Target mean procedures per program.
    pub mean_procs: f64,
    /// Target mean statement-line count per program (declarations count).
    pub mean_stmts: f64,
    /// Fraction of programs held out as the test split.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            programs: 1500,
            mean_vars: 7.01,
            mean_types: 3.29,
            mean_procs: 6.47,
            mean_stmts: 101.82,
            holdout: 0.15,
            seed: 0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("infeasible corpus spec: {0}")]
    SpecInfeasible(String),
    #[error("corpus generator bug: {0}")]
    Internal(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path} line {line}: {msg}")]
    BadFile { path: PathBuf, line: usize, msg: String },
}

#[derive(Debug)]
pub struct Corpus {
    pub train: Vec<Tree>,
    pub test: Vec<Tree>,
}

/// Per-tree shape summary in the units the corpus targets use.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct TreeStats {
    /// Distinct variable names among *use* occurrences (the constrained
    /// name family).
    pub unique_vars: usize,
    /// Distinct type keywords appearing in the tree.
    pub unique_types: usize,
    pub procs: usize,
    /// Statement nodes plus declaration-list entries — the lines-of-code
    /// stand-in.
    pub stmts: usize,
}

pub fn tree_stats(g: &Grammar, tree: &Tree) -> TreeStats {
    let l = layout(g);
    let proc_sym = g.sym("proc");
    let stmt_sym = g.sym("stmt");
    let decl_sym = g.sym("decl");
    let mut vars = [false; crate::grammar::MAX_VARS];
    let mut tags = [false; 256];
    let mut procs = 0;
    let mut stmts = 0;
    tree.walk(|n, _| {
        let p = g.production(n.production);
        if let Some((_, idx)) = l.var_index(n.production) {
            if !p.constraints.is_empty() {
                vars[idx] = true;
            }
        }
        if let Some(tag) = type_keyword_tag(g, n.production) {
            tags[tag.0 as usize] = true;
        }
        if Some(p.lhs) == proc_sym {
            procs += 1;
        }
        if Some(p.lhs) == stmt_sym || Some(p.lhs) == decl_sym {
            stmts += 1;
        }
    });
    TreeStats {
        unique_vars: vars.iter().filter(|&&b| b).count(),
        unique_types: tags.iter().filter(|&&b| b).count(),
        procs,
        stmts,
    }
}

/// The type tag a nullary keyword production introduces, if it is one
/// (single equation `x.a := const(<tag>)`).
fn type_keyword_tag(g: &Grammar, p: ProdId) -> Option<TagId> {
    let prod = g.production(p);
    if !prod.rhs.is_empty() || prod.equations.len() != 1 {
        return None;
    }
    let eq = &prod.equations[0];
    match (eq.func, eq.args.as_slice()) {
        (Func::Const, [Arg::Lit(Value::Type(Some(tag)))]) => Some(*tag),
        _ => None,
    }
}

/// Means and variances of the four targeted quantities over a tree set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorpusStats {
    pub programs: usize,
    pub mean_vars: f64,
    pub mean_types: f64,
    pub mean_procs: f64,
    pub mean_stmts: f64,
    pub var_vars: f64,
    pub var_types: f64,
    pub var_procs: f64,
    pub var_stmts: f64,
}

pub fn corpus_stats(g: &Grammar, trees: &[Tree]) -> CorpusStats {
    let n = trees.len().max(1) as f64;
    let mut sums = [0.0f64; 4];
    let mut sqs = [0.0f64; 4];
    for t in trees {
        let s = tree_stats(g, t);
        let xs = [s.unique_vars as f64, s.unique_types as f64, s.procs as f64, s.stmts as f64];
        for (i, x) in xs.into_iter().enumerate() {
            sums[i] += x;
            sqs[i] += x * x;
        }
    }
    let mean = |i: usize| sums[i] / n;
    let var = |i: usize| (sqs[i] / n - mean(i) * mean(i)).max(0.0);
    CorpusStats {
        programs: trees.len(),
        mean_vars: mean(0),
        mean_types: mean(1),
        mean_procs: mean(2),
        mean_stmts: mean(3),
        var_vars: var(0),
        var_types: var(1),
        var_procs: var(2),
        var_stmts: var(3),
    }
}

/// Geometric sample on {0,1,2,…} with the given mean, by inverse CDF.
fn geom(rng: &mut ChaCha20Rng, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    let q = mean / (1.0 + mean); // success-run parameter
    let u: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    (u.ln() / q.ln()).floor() as usize
}

/// Mean parameter μ such that E[min(Geom(μ), cap)] = target. Uses the closed
/// form E[min(G, c)] = μ·(1 − q^c), q = μ/(1+μ), via fixed-point iteration.
fn geom_mean_for_truncated(target: f64, cap: usize) -> f64 {
    if target <= 0.0 {
        return 0.0;
    }
    let c = cap as f64;
    let mut mu = target;
    for _ in 0..32 {
        let q = mu / (1.0 + mu);
        let shrink = 1.0 - q.powf(c);
        mu = (target / shrink).min(1e6);
    }
    mu
}

fn sample_trunc(rng: &mut ChaCha20Rng, target: f64, cap: usize) -> usize {
    if target >= cap as f64 {
        return cap;
    }
    geom(rng, geom_mean_for_truncated(target, cap)).min(cap)
}

struct Plan {
    /// Distinct variables, in declaration (= index) order: their types.
    var_types: Vec<TagId>,
    /// How many of them are globals (indices 0..globals).
    globals: usize,
    /// Per procedure: statement budget.
    proc_budget: Vec<usize>,
    /// Per procedure: fresh locals to declare, ascending indices.
    proc_locals: Vec<Vec<usize>>,
    /// Per procedure: global indices to shadow, with the new type.
    proc_shadows: Vec<Vec<(usize, TagId)>>,
}

fn make_plan(g: &Grammar, spec: &CorpusSpec, l: &Layout, rng: &mut ChaCha20Rng) -> Plan {
    let v_cap = l.v_max();
    let t_cap = g.num_tags();

    let n_vars = 1 + sample_trunc(rng, spec.mean_vars - 1.0, v_cap - 1);
    let skipped_types = sample_trunc(rng, t_cap as f64 - spec.mean_types, t_cap - 1);
    let n_types = t_cap - skipped_types;
    let n_procs = 1 + sample_trunc(rng, spec.mean_procs - 1.0, 15);
    let n_stmts = 1 + sample_trunc(rng, spec.mean_stmts - 1.0, 349);

    // Which types participate, then a type per variable; the first variables
    // cover the pool so "distinct types" is exact.
    let mut pool: Vec<TagId> = (0..t_cap as u8).map(TagId).collect();
    for i in (1..pool.len()).rev() {
        pool.swap(i, rng.gen_range(0..=i));
    }
    pool.truncate(n_types);
    let var_types: Vec<TagId> = (0..n_vars)
        .map(|i| if i < n_types { pool[i] } else { pool[rng.gen_range(0..pool.len())] })
        .collect();

    let globals = (1 + geom(rng, 0.9)).min(n_vars);

    let mut proc_budget = vec![0usize; n_procs];
    for _ in 0..n_stmts.saturating_sub(globals) {
        proc_budget[rng.gen_range(0..n_procs)] += 1;
    }
    let mut proc_locals = vec![Vec::new(); n_procs];
    for idx in globals..n_vars {
        proc_locals[rng.gen_range(0..n_procs)].push(idx);
    }
    // Fresh locals must appear in index order to keep names in order of use:
    // reassign indices by procedure position.
    let mut next = globals;
    for locals in proc_locals.iter_mut() {
        for slot in locals.iter_mut() {
            *slot = next;
            next += 1;
        }
    }
    let mut proc_shadows = vec![Vec::new(); n_procs];
    // Pool types beyond the variable count still get declared, by shadowing
    // a global under the missing type.
    for &tag in pool.iter().skip(n_vars) {
        proc_shadows[rng.gen_range(0..n_procs)].push((rng.gen_range(0..globals), tag));
    }
    for (p, shadows) in proc_shadows.iter_mut().enumerate() {
        if globals > 0 && proc_budget[p] >= 2 && rng.gen::<f64>() < 0.3 {
            shadows.push((rng.gen_range(0..globals), pool[rng.gen_range(0..pool.len())]));
        }
    }
    // A procedure must at least fit its declarations.
    for p in 0..n_procs {
        let need = proc_locals[p].len() + proc_shadows[p].len();
        proc_budget[p] = proc_budget[p].max(need);
    }
    Plan { var_types, globals, proc_budget, proc_locals, proc_shadows }
}

/// One declaration a statement run still owes: which name, which type.
#[derive(Clone, Copy)]
struct DeclPlan {
    index: usize,
    tag: TagId,
}

struct Gen<'g> {
    g: &'g Grammar,
    rng: ChaCha20Rng,
    cd: ContextState<'g>,
    ct: ContextState<'g>,
    var_sym: Sym,
    /// use-name family (constrained) and declaration-name family.
    use_family: usize,
    decl_family: usize,
    /// type tag → keyword production.
    tag_prods: Vec<ProdId>,
    used: [bool; crate::grammar::MAX_VARS],
}

macro_rules! prods {
    ($name:ident, $($f:ident),+) => {
        #[allow(non_snake_case)]
        struct $name { $($f: ProdId),+ }
        impl $name {
            fn resolve(g: &Grammar) -> Result<$name, CorpusError> {
                Ok($name { $($f: g.prod_by_name(stringify!($f)).ok_or_else(|| {
                    CorpusError::Internal(format!("grammar lacks production `{}`", stringify!($f)))
                })?),+ })
            }
        }
    };
}

prods!(
    P,
    Program,
    DNil,
    DCons,
    Decl,
    PNil,
    PCons,
    Proc,
    SNil,
    SCons,
    SDecl,
    Assign,
    If,
    While,
    Ret,
    Call,
    CmpEq,
    CmpNz,
    EVar,
    EConst,
    EAdd,
    EMul
);

impl<'g> Gen<'g> {
    fn new(g: &'g Grammar, rng: ChaCha20Rng) -> Result<Self, CorpusError> {
        let l = layout(g);
        let var_sym =
            g.sym("var").ok_or_else(|| CorpusError::Internal("grammar lacks `var`".into()))?;
        let fam = |constrained: bool| {
            l.families()
                .iter()
                .position(|f| {
                    !g.production(f.member(0)).constraints.is_empty() == constrained
                })
                .ok_or_else(|| {
                    CorpusError::Internal(format!(
                        "grammar lacks a{} name family",
                        if constrained { " constrained" } else { "n unconstrained" }
                    ))
                })
        };
        let mut tag_prods = vec![None; g.num_tags()];
        for (pid, _) in g.productions() {
            if let Some(tag) = type_keyword_tag(g, pid) {
                tag_prods[tag.0 as usize].get_or_insert(pid);
            }
        }
        let tag_prods: Vec<ProdId> = tag_prods
            .into_iter()
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| CorpusError::Internal("grammar lacks a keyword per type".into()))?;
        Ok(Gen {
            g,
            rng,
            cd: init_context(g, ConstraintId::DeclaredVariable),
            ct: init_context(g, ConstraintId::TypesafeVariable),
            var_sym,
            use_family: fam(true)?,
            decl_family: fam(false)?,
            tag_prods,
            used: [false; crate::grammar::MAX_VARS],
        })
    }

    /// Emit one Step after checking it against both machines' legal sets —
    /// the generator's core guarantee.
    fn step(&mut self, p: ProdId) -> Result<(), CorpusError> {
        let hole = self
            .cd
            .hole()
            .ok_or_else(|| CorpusError::Internal("step emitted with no hole".into()))?;
        for st in [&mut self.cd, &mut self.ct] {
            let legal = st
                .legal_productions(hole)
                .map_err(|e| CorpusError::Internal(e.to_string()))?;
            if !legal.contains(&p) {
                return Err(CorpusError::Internal(format!(
                    "`{}` is illegal under {} here",
                    self.g.production(p).name,
                    st.constraint().name()
                )));
            }
            st.update_context(Token::Step(p)).map_err(|e| CorpusError::Internal(e.to_string()))?;
        }
        Ok(())
    }

    fn pop(&mut self) -> Result<(), CorpusError> {
        for st in [&mut self.cd, &mut self.ct] {
            st.update_context(Token::Pop).map_err(|e| CorpusError::Internal(e.to_string()))?;
        }
        Ok(())
    }

    /// A childless node.
    fn leaf(&mut self, p: ProdId) -> Result<Tree, CorpusError> {
        self.step(p)?;
        self.pop()?;
        Ok(Tree::leaf(p))
    }

    /// Variable indices currently usable at a `var` hole under both
    /// machines (declared, and type-matching where an expectation applies).
    fn legal_var_indices(&mut self) -> Result<Vec<usize>, CorpusError> {
        let l = layout(self.g);
        let a = self.cd.legal_productions(self.var_sym);
        let b = self.ct.legal_productions(self.var_sym);
        let (a, b) = (
            a.map_err(|e| CorpusError::Internal(e.to_string()))?,
            b.map_err(|e| CorpusError::Internal(e.to_string()))?,
        );
        Ok(a.into_iter()
            .filter(|p| b.contains(p))
            .filter_map(|p| l.var_index(p).map(|(_, idx)| idx))
            .collect())
    }

    fn use_var(&mut self, index: usize) -> Result<Tree, CorpusError> {
        let p = layout(self.g).families()[self.use_family].member(index);
        self.used[index] = true;
        self.leaf(p)
    }

    fn decl_var(&mut self, index: usize) -> Result<Tree, CorpusError> {
        let p = layout(self.g).families()[self.decl_family].member(index);
        self.leaf(p)
    }
}

pub fn generate_program(
    g: &Grammar,
    spec: &CorpusSpec,
    rng: &mut ChaCha20Rng,
) -> Result<Tree, CorpusError> {
    check_spec(g, spec)?;
    let l = layout(g);
    let plan = make_plan(g, spec, l, rng);
    let mut gen = Gen::new(g, rng.clone())?;
    let p = P::resolve(g)?;
    let tree = build_program(&mut gen, &p, &plan)?;
    *rng = gen.rng; // hand the advanced stream back to the caller
    if !gen.cd.is_done() || !gen.ct.is_done() {
        return Err(CorpusError::Internal("program closed with machines mid-stream".into()));
    }
    Ok(tree)
}

fn check_spec(g: &Grammar, spec: &CorpusSpec) -> Result<(), CorpusError> {
    let l = layout(g);
    let fail = |msg: String| Err(CorpusError::SpecInfeasible(msg));
    if spec.programs == 0 {
        return fail("program count is zero".into());
    }
    if !(0.0..1.0).contains(&spec.holdout) {
        return fail(format!("holdout fraction {} outside [0,1)", spec.holdout));
    }
    if spec.mean_vars < 1.0 || spec.mean_vars > l.v_max() as f64 {
        return fail(format!(
            "target of {} distinct variables outside 1..={} names",
            spec.mean_vars,
            l.v_max()
        ));
    }
    if spec.mean_types < 1.0 || spec.mean_types > g.num_tags() as f64 {
        return fail(format!(
            "target of {} distinct types outside 1..={} tags",
            spec.mean_types,
            g.num_tags()
        ));
    }
    if spec.mean_procs < 1.0 || spec.mean_stmts < 1.0 {
        return fail("procedure and statement targets must be at least 1".into());
    }
    Ok(())
}

fn build_program(gen: &mut Gen, p: &P, plan: &Plan) -> Result<Tree, CorpusError> {
    gen.step(p.Program)?;

    // Global declaration list.
    let mut decl_nodes = Vec::new();
    for idx in 0..plan.globals {
        gen.step(p.DCons)?;
        gen.step(p.Decl)?;
        let ty = gen.leaf(gen.tag_prods[plan.var_types[idx].0 as usize])?;
        let dv = gen.decl_var(idx)?;
        gen.pop()?; // Decl
        decl_nodes.push(Tree::new(p.Decl, vec![ty, dv]));
    }
    let mut decls = gen.leaf(p.DNil)?;
    for d in decl_nodes.into_iter().rev() {
        decls = Tree::new(p.DCons, vec![d, decls]);
        gen.pop()?; // the matching DCons
    }

    // Procedures.
    let n_procs = plan.proc_budget.len();
    let mut proc_nodes = Vec::new();
    for i in 0..n_procs {
        gen.step(p.PCons)?;
        proc_nodes.push(build_proc(gen, p, plan, i, i == n_procs - 1)?);
    }
    let mut procs = gen.leaf(p.PNil)?;
    for pr in proc_nodes.into_iter().rev() {
        procs = Tree::new(p.PCons, vec![pr, procs]);
        gen.pop()?;
    }

    gen.pop()?; // Program
    Ok(Tree::new(p.Program, vec![decls, procs]))
}

fn build_proc(
    gen: &mut Gen,
    p: &P,
    plan: &Plan,
    proc: usize,
    last: bool,
) -> Result<Tree, CorpusError> {
    gen.step(p.Proc)?;
    let head = gen.leaf(p.DNil)?;

    let mut pending: VecDeque<DeclPlan> = plan.proc_locals[proc]
        .iter()
        .map(|&index| DeclPlan { index, tag: plan.var_types[index] })
        .collect();
    // Shadows re-declare a visible global under a (possibly) new type.
    for &(index, tag) in &plan.proc_shadows[proc] {
        let at = gen.rng.gen_range(0..=pending.len());
        pending.insert(at, DeclPlan { index, tag });
    }

    let mut budget = plan.proc_budget[proc];
    let mut stmt_nodes = build_stmt_run(gen, p, &mut pending, &mut budget, 0)?;

    // Nested bodies can eat the budget before every declaration lands;
    // declarations are mandatory, so flush the remainder.
    while let Some(d) = pending.pop_front() {
        gen.step(p.SCons)?;
        gen.step(p.SDecl)?;
        let ty = gen.leaf(gen.tag_prods[d.tag.0 as usize])?;
        let dv = gen.decl_var(d.index)?;
        gen.pop()?;
        stmt_nodes.push(Tree::new(p.SDecl, vec![ty, dv]));
    }

    // Coverage: every variable this procedure is responsible for gets used.
    let locals = &plan.proc_locals[proc];
    let mut owed: Vec<usize> = locals.iter().copied().filter(|&v| !gen.used[v]).collect();
    if last {
        owed.extend((0..plan.globals).filter(|&v| !gen.used[v]));
    }
    for v in owed {
        stmt_nodes.push(build_self_assign(gen, p, v)?);
    }

    let mut stmts = gen.leaf(p.SNil)?;
    for s in stmt_nodes.into_iter().rev() {
        stmts = Tree::new(p.SCons, vec![s, stmts]);
        gen.pop()?;
    }
    gen.pop()?; // Proc
    Ok(Tree::new(p.Proc, vec![head, stmts]))
}

/// `v = v`, the minimal legal use of a declared variable.
fn build_self_assign(gen: &mut Gen, p: &P, v: usize) -> Result<Tree, CorpusError> {
    gen.step(p.SCons)?;
    gen.step(p.Assign)?;
    let lhs = gen.use_var(v)?;
    gen.step(p.EVar)?;
    let rhs_var = gen.use_var(v)?;
    gen.pop()?; // EVar
    gen.pop()?; // Assign
    Ok(Tree::new(p.Assign, vec![lhs, Tree::new(p.EVar, vec![rhs_var])]))
}

/// A run of statements: opens one SCons per statement, leaves the matching
/// Pops to the caller (which closes the run with SNil).
fn build_stmt_run(
    gen: &mut Gen,
    p: &P,
    pending: &mut VecDeque<DeclPlan>,
    budget: &mut usize,
    depth: usize,
) -> Result<Vec<Tree>, CorpusError> {
    let mut out = Vec::new();
    while *budget > 0 {
        *budget -= 1;
        gen.step(p.SCons)?;
        out.push(build_stmt(gen, p, pending, budget, depth)?);
    }
    Ok(out)
}

fn build_stmt(
    gen: &mut Gen,
    p: &P,
    pending: &mut VecDeque<DeclPlan>,
    budget: &mut usize,
    depth: usize,
) -> Result<Tree, CorpusError> {
    // Declarations must all fit into the remaining slots (this one included).
    let forced_decl = !pending.is_empty() && pending.len() > *budget;
    let have_vars = !gen.legal_var_indices()?.is_empty();

    let kind = if forced_decl {
        0
    } else {
        let w = [
            if pending.is_empty() { 0.0 } else { 2.5 },                  // SDecl
            if have_vars { 3.5 } else { 0.0 },                           // Assign
            if have_vars && *budget >= 2 && depth < 2 { 1.2 } else { 0.0 }, // If
            if have_vars && *budget >= 2 && depth < 2 { 1.2 } else { 0.0 }, // While
            0.7,                                                         // Ret
            0.7,                                                         // Call
        ];
        pick_weighted(&mut gen.rng, &w)
    };

    match kind {
        0 => {
            let d = pending.pop_front().expect("kind 0 requires a pending declaration");
            gen.step(p.SDecl)?;
            let ty = gen.leaf(gen.tag_prods[d.tag.0 as usize])?;
            let dv = gen.decl_var(d.index)?;
            gen.pop()?;
            Ok(Tree::new(p.SDecl, vec![ty, dv]))
        }
        1 => {
            gen.step(p.Assign)?;
            let lhs = gen.pick_lvalue()?;
            let rhs = build_expr(gen, p, 0)?;
            gen.pop()?;
            Ok(Tree::new(p.Assign, vec![lhs, rhs]))
        }
        k @ (2 | 3) => {
            let prod = if k == 2 { p.If } else { p.While };
            gen.step(prod)?;
            let cond = build_cond(gen, p)?;
            let inner = (1 + geom(&mut gen.rng, 2.0)).min(*budget);
            let mut inner_budget = inner;
            *budget -= inner;
            let body_nodes = build_stmt_run(gen, p, pending, &mut inner_budget, depth + 1)?;
            let mut body = gen.leaf(p.SNil)?;
            for s in body_nodes.into_iter().rev() {
                body = Tree::new(p.SCons, vec![s, body]);
                gen.pop()?;
            }
            gen.pop()?;
            Ok(Tree::new(prod, vec![cond, body]))
        }
        4 => {
            gen.step(p.Ret)?;
            let e = build_expr(gen, p, 0)?;
            gen.pop()?;
            Ok(Tree::new(p.Ret, vec![e]))
        }
        _ => gen.leaf(p.Call),
    }
}

impl<'g> Gen<'g> {
    /// Assignment target: prefer a declared-but-unused variable so the
    /// distinct-variable target is met, otherwise any visible one.
    fn pick_lvalue(&mut self) -> Result<Tree, CorpusError> {
        let legal = self.legal_var_indices()?;
        if legal.is_empty() {
            return Err(CorpusError::Internal("no legal variable at an lvalue".into()));
        }
        let unused: Vec<usize> = legal.iter().copied().filter(|&v| !self.used[v]).collect();
        let from = if unused.is_empty() { &legal } else { &unused };
        let v = from[self.rng.gen_range(0..from.len())];
        self.use_var(v)
    }
}

fn build_cond(gen: &mut Gen, p: &P) -> Result<Tree, CorpusError> {
    if gen.rng.gen::<f64>() < 0.6 {
        gen.step(p.CmpNz)?;
        let legal = gen.legal_var_indices()?;
        let v = legal[gen.rng.gen_range(0..legal.len())];
        let var = gen.use_var(v)?;
        gen.pop()?;
        Ok(Tree::new(p.CmpNz, vec![var]))
    } else {
        gen.step(p.CmpEq)?;
        let legal = gen.legal_var_indices()?;
        let v = legal[gen.rng.gen_range(0..legal.len())];
        let a = gen.use_var(v)?;
        // The second operand must match the first's type; the machine's
        // legal set now encodes exactly that.
        let legal = gen.legal_var_indices()?;
        let w = legal[gen.rng.gen_range(0..legal.len())];
        let b = gen.use_var(w)?;
        gen.pop()?;
        Ok(Tree::new(p.CmpEq, vec![a, b]))
    }
}

fn build_expr(gen: &mut Gen, p: &P, depth: usize) -> Result<Tree, CorpusError> {
    let usable = gen.legal_var_indices()?;
    let w = [
        if usable.is_empty() { 0.0 } else { 0.45 }, // EVar
        0.25,                                       // EConst
        if depth < 3 { 0.18 } else { 0.0 },         // EAdd
        if depth < 3 { 0.12 } else { 0.0 },         // EMul
    ];
    match pick_weighted(&mut gen.rng, &w) {
        0 => {
            gen.step(p.EVar)?;
            let v = usable[gen.rng.gen_range(0..usable.len())];
            let var = gen.use_var(v)?;
            gen.pop()?;
            Ok(Tree::new(p.EVar, vec![var]))
        }
        1 => gen.leaf(p.EConst),
        k => {
            let prod = if k == 2 { p.EAdd } else { p.EMul };
            gen.step(prod)?;
            let a = build_expr(gen, p, depth + 1)?;
            let b = build_expr(gen, p, depth + 1)?;
            gen.pop()?;
            Ok(Tree::new(prod, vec![a, b]))
        }
    }
}

fn pick_weighted(rng: &mut ChaCha20Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    debug_assert!(total > 0.0, "no feasible choice");
    let mut x = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        x -= w;
        if x < 0.0 && w > 0.0 {
            return i;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).expect("no feasible choice")
}

pub fn generate_corpus(g: &Grammar, spec: &CorpusSpec) -> Result<Corpus, CorpusError> {
    check_spec(g, spec)?;
    let mut trees = Vec::with_capacity(spec.programs);
    for i in 0..spec.programs {
        // One independent, reproducible stream per program.
        let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64);
        trees.push(generate_program(g, spec, &mut rng)?);
    }
    let (train, test) = split(trees, spec.holdout, spec.seed);
    Ok(Corpus { train, test })
}

/// Seeded uniform holdout partition; the held-out share is rounded to the
/// nearest whole program.
pub fn split(trees: Vec<Tree>, fraction: f64, seed: u64) -> (Vec<Tree>, Vec<Tree>) {
    let n = trees.len();
    let n_test = ((n as f64 * fraction).round() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX); // never collides with per-program streams
    for i in (1..n).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let test_set: std::collections::HashSet<usize> = order[..n_test].iter().copied().collect();
    let mut train = Vec::with_capacity(n - n_test);
    let mut test = Vec::with_capacity(n_test);
    for (i, t) in trees.into_iter().enumerate() {
        if test_set.contains(&i) {
            test.push(t);
        } else {
            train.push(t);
        }
    }
    (train, test)
}

/// Write `train.txt`/`test.txt` (one stream per line) and `manifest.txt`
/// (spec, seed, and summary statistics as `key = value`).
pub fn write_corpus(
    dir: &Path,
    g: &Grammar,
    corpus: &Corpus,
    spec: &CorpusSpec,
) -> Result<(), CorpusError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source: io::Error| CorpusError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (name, trees) in [("train.txt", &corpus.train), ("test.txt", &corpus.test)] {
        let path = dir.join(name);
        let mut text = String::new();
        for t in trees {
            text.push_str(&render_stream(g, &linearize(t)));
            text.push('\n');
        }
        fs::write(&path, text).map_err(io_err(&path))?;
    }
    let stats = corpus_stats(g, &corpus.train);
    let mut m = String::new();
    let _ = writeln!(m, "tool_version = {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(m, "grammar_hash = {}", g.source_hash());
    let _ = writeln!(m, "programs = {}", spec.programs);
    let _ = writeln!(m, "seed = {}", spec.seed);
    let _ = writeln!(m, "holdout = {}", spec.holdout);
    let _ = writeln!(m, "target_vars = {}", spec.mean_vars);
    let _ = writeln!(m, "target_types = {}", spec.mean_types);
    let _ = writeln!(m, "target_procs = {}", spec.mean_procs);
    let _ = writeln!(m, "target_stmts = {}", spec.mean_stmts);
    let _ = writeln!(m, "train_programs = {}", corpus.train.len());
    let _ = writeln!(m, "test_programs = {}", corpus.test.len());
    let _ = writeln!(m, "train_mean_vars = {}", stats.mean_vars);
    let _ = writeln!(m, "train_mean_types = {}", stats.mean_types);
    let _ = writeln!(m, "train_mean_procs = {}", stats.mean_procs);
    let _ = writeln!(m, "train_mean_stmts = {}", stats.mean_stmts);
    let path = dir.join("manifest.txt");
    fs::write(&path, m).map_err(io_err(&path))?;
    Ok(())
}

/// Read a corpus directory written by [`write_corpus`].
pub fn read_corpus(dir: &Path, g: &Grammar) -> Result<Corpus, CorpusError> {
    let read_split = |name: &str| -> Result<Vec<Tree>, CorpusError> {
        let path = dir.join(name);
        let text = fs::read_to_string(&path)
            .map_err(|source| CorpusError::Io { path: path.clone(), source })?;
        let mut trees = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let toks = parse_stream(g, line).map_err(|e| CorpusError::BadFile {
                path: path.clone(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            let tree =
                crate::stream::delinearize(g, &toks).map_err(|e| CorpusError::BadFile {
                    path: path.clone(),
                    line: i + 1,
                    msg: e.to_string(),
                })?;
            trees.push(tree);
        }
        Ok(trees)
    };
    Ok(Corpus { train: read_split("train.txt")?, test: read_split("test.txt")? })
}
