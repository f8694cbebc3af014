//! Whole-grammar validation.
//!
//! [`validate_grammar`] never fails; it returns a report listing every
//! problem found so a grammar author sees the full picture at once:
//!
//! * structure: root with inherited attributes, synthesized attributes on
//!   terminals, duplicate production names, terminal left-hand sides,
//!   reachable nonterminals without productions
//! * equations: every output occurrence (inherited attribute of a
//!   right-hand-side symbol, synthesized attribute of the left-hand side)
//!   defined exactly once; targets that are not outputs; arguments that are
//!   not inputs
//! * left-to-right order: an inherited attribute of slot j may only read
//!   synthesized attributes of slots left of j (and the left-hand side's
//!   inherited attributes)
//! * kinds: every equation and constraint type-checks against the function
//!   library

use std::collections::HashSet;
use std::fmt;

use super::{funcs, Arg, Direction, Grammar, ProdId, ValueKind};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum IssueKind {
    RootInherited,
    TerminalSynthesized,
    DuplicateProduction,
    LhsNotNonterminal,
    UnproductiveNonterminal,
    MissingEquation,
    DuplicateEquation,
    BadTarget,
    NonInputDependency,
    LAttrViolation,
    KindMismatch,
    BadConstraint,
}

#[derive(Clone, Debug)]
pub struct Issue {
    pub kind: IssueKind,
    pub production: Option<ProdId>,
    pub message: String,
}

#[derive(Debug, Default)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn count(&self, kind: IssueKind) -> usize {
        self.issues.iter().filter(|i| i.kind == kind).count()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.issues.is_empty() {
            return writeln!(f, "grammar ok");
        }
        for i in &self.issues {
            writeln!(f, "{:?}: {}", i.kind, i.message)?;
        }
        Ok(())
    }
}

pub fn validate_grammar(g: &Grammar) -> ValidationReport {
    let mut issues: Vec<Issue> = Vec::new();
    let mut push = |kind, production, message: String| {
        issues.push(Issue { kind, production, message });
    };

    // Root must not inherit anything: nothing exists above it to supply a value.
    for &a in g.attrs_of(g.root()) {
        if g.attr(a).direction == Direction::Inherited {
            push(
                IssueKind::RootInherited,
                None,
                format!("root `{}` has inherited attribute `{}`", g.sym_name(g.root()), g.attr(a).name),
            );
        }
    }

    // Terminals synthesize nothing; they have no structure to compute from.
    for (i, decl) in g.attrs.iter().enumerate() {
        let _ = i;
        if !g.is_nonterminal(decl.symbol) && decl.direction == Direction::Synthesized {
            push(
                IssueKind::TerminalSynthesized,
                None,
                format!("terminal `{}` has synthesized attribute `{}`", g.sym_name(decl.symbol), decl.name),
            );
        }
    }

    // Duplicate production names.
    let mut seen = HashSet::new();
    for (pid, p) in g.productions() {
        if !seen.insert(p.name.as_str()) {
            push(IssueKind::DuplicateProduction, Some(pid), format!("production `{}` defined more than once", p.name));
        }
        if !g.is_nonterminal(p.lhs) {
            push(
                IssueKind::LhsNotNonterminal,
                Some(pid),
                format!("`{}`: left-hand side `{}` is a terminal", p.name, g.sym_name(p.lhs)),
            );
        }
    }

    // Reachable nonterminals need at least one production, otherwise a hole
    // of that nonterminal can never be filled.
    let mut reach = HashSet::new();
    let mut stack = vec![g.root()];
    while let Some(s) = stack.pop() {
        if !reach.insert(s) {
            continue;
        }
        for &pid in g.prods_of(s) {
            for &r in &g.production(pid).rhs {
                if g.is_nonterminal(r) && !reach.contains(&r) {
                    stack.push(r);
                }
            }
        }
    }
    for n in g.nonterminals() {
        if reach.contains(&n) && g.prods_of(n).is_empty() {
            push(
                IssueKind::UnproductiveNonterminal,
                None,
                format!("nonterminal `{}` is reachable but has no productions", g.sym_name(n)),
            );
        }
    }

    // Per-production equation discipline.
    for (pid, p) in g.productions() {
        let slot_count = p.rhs.len() + 1;
        let occ_name = |slot: u8, attr_name: &str| -> String {
            let sym = g.slot_sym(pid, slot);
            format!("{}${}.{}", g.sym_name(sym), slot_occurrence(g, pid, slot), attr_name)
        };

        // Enumerate output occurrences: (0, syn) and (slot>=1, inh).
        let mut outputs: Vec<(u8, super::AttrId)> = Vec::new();
        for &a in g.attrs_of(p.lhs) {
            if g.attr(a).direction == Direction::Synthesized {
                outputs.push((0, a));
            }
        }
        for slot in 1..slot_count {
            let sym = p.rhs[slot - 1];
            for &a in g.attrs_of(sym) {
                if g.attr(a).direction == Direction::Inherited {
                    outputs.push((slot as u8, a));
                }
            }
        }

        for &(slot, attr) in &outputs {
            let n = p
                .equations
                .iter()
                .filter(|e| e.target.slot == slot && e.target.attr == attr)
                .count();
            let name = occ_name(slot, &g.attr(attr).name);
            if n == 0 {
                push(IssueKind::MissingEquation, Some(pid), format!("`{}`: no equation for {name}", p.name));
            } else if n > 1 {
                push(IssueKind::DuplicateEquation, Some(pid), format!("`{}`: {n} equations for {name}", p.name));
            }
        }

        let is_input = |slot: u8, attr: super::AttrId| -> bool {
            let dir = g.attr(attr).direction;
            (slot == 0 && dir == Direction::Inherited) || (slot != 0 && dir == Direction::Synthesized)
        };

        for e in &p.equations {
            let tname = occ_name(e.target.slot, &g.attr(e.target.attr).name);
            if !outputs.iter().any(|&(s, a)| s == e.target.slot && a == e.target.attr) {
                push(
                    IssueKind::BadTarget,
                    Some(pid),
                    format!("`{}` line {}: {tname} is not an output of this production", p.name, e.line),
                );
                continue;
            }
            let mut kinds: Vec<ValueKind> = Vec::new();
            let mut ok = true;
            for arg in &e.args {
                match arg {
                    Arg::Lit(v) => kinds.push(v.kind()),
                    Arg::Occ(o) => {
                        kinds.push(g.attr(o.attr).kind);
                        let aname = occ_name(o.slot, &g.attr(o.attr).name);
                        if !is_input(o.slot, o.attr) {
                            push(
                                IssueKind::NonInputDependency,
                                Some(pid),
                                format!("`{}` line {}: {tname} reads {aname}, which is not an input", p.name, e.line),
                            );
                            ok = false;
                        } else if e.target.slot >= 1
                            && g.attr(e.target.attr).direction == Direction::Inherited
                            && o.slot >= e.target.slot
                        {
                            // The left-to-right rule: only earlier subtrees
                            // are finished when this inherited value is needed.
                            push(
                                IssueKind::LAttrViolation,
                                Some(pid),
                                format!(
                                    "`{}` line {}: {tname} depends on {aname}, which lies to its right",
                                    p.name, e.line
                                ),
                            );
                            ok = false;
                        }
                    }
                }
            }
            if ok {
                match funcs::check_types(e.func, &kinds) {
                    Ok(result) => {
                        let want = g.attr(e.target.attr).kind;
                        if result != want {
                            push(
                                IssueKind::KindMismatch,
                                Some(pid),
                                format!(
                                    "`{}` line {}: {tname} has kind {want} but `{}` yields {result}",
                                    p.name,
                                    e.line,
                                    e.func.name()
                                ),
                            );
                        }
                    }
                    Err(msg) => {
                        push(IssueKind::KindMismatch, Some(pid), format!("`{}` line {}: {msg}", p.name, e.line));
                    }
                }
            }
        }

        // Constraints: shape-checked, and occurrence arguments must be
        // inherited attributes of the left-hand side so that the machine can
        // decide them at the hole, before the production is expanded.
        for c in &p.constraints {
            let shape = funcs::constraint_shape(c.id);
            if c.args.len() != shape.len() {
                push(
                    IssueKind::BadConstraint,
                    Some(pid),
                    format!("`{}` line {}: {} expects {} arguments", p.name, c.line, c.id.name(), shape.len()),
                );
                continue;
            }
            for (arg, &(kind, must_lit)) in c.args.iter().zip(shape) {
                match arg {
                    Arg::Lit(v) => {
                        if v.kind() != kind {
                            push(
                                IssueKind::BadConstraint,
                                Some(pid),
                                format!("`{}` line {}: {} literal has kind {}, expected {kind}", p.name, c.line, c.id.name(), v.kind()),
                            );
                        }
                    }
                    Arg::Occ(o) => {
                        if must_lit {
                            push(
                                IssueKind::BadConstraint,
                                Some(pid),
                                format!("`{}` line {}: {} argument must be a literal", p.name, c.line, c.id.name()),
                            );
                        } else if o.slot != 0 || g.attr(o.attr).direction != Direction::Inherited {
                            push(
                                IssueKind::BadConstraint,
                                Some(pid),
                                format!(
                                    "`{}` line {}: {} must read inherited attributes of the left-hand side",
                                    p.name, c.line, c.id.name()
                                ),
                            );
                        } else if g.attr(o.attr).kind != kind {
                            push(
                                IssueKind::BadConstraint,
                                Some(pid),
                                format!("`{}` line {}: {} argument has kind {}, expected {kind}", p.name, c.line, c.id.name(), g.attr(o.attr).kind),
                            );
                        }
                    }
                }
            }
        }
    }

    ValidationReport { issues }
}

/// 1-based occurrence number of `slot` among occurrences of its own symbol
/// (counting the left-hand side first), for diagnostics.
fn slot_occurrence(g: &Grammar, pid: ProdId, slot: u8) -> usize {
    let p = g.production(pid);
    let sym = g.slot_sym(pid, slot);
    let mut k = 0;
    if p.lhs == sym {
        k += 1;
        if slot == 0 {
            return k;
        }
    }
    for (i, &r) in p.rhs.iter().enumerate() {
        if r == sym {
            k += 1;
            if (i + 1) as u8 == slot {
                return k;
            }
        }
    }
    k
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::loader::parse;

    const NUMERAL: &str = include_str!("../../../../grammars/binary_numeral.ag");
    const MINI_C: &str = include_str!("../../../../grammars/mini_c.ag");

    #[test]
    fn shipped_grammars_are_clean() {
        for src in [NUMERAL, MINI_C] {
            let g = parse(src).unwrap();
            let report = validate_grammar(&g);
            assert!(report.is_empty(), "unexpected issues:\n{report}");
        }
    }

    #[test]
    fn right_dependency_is_flagged_once() {
        // Rewrite Pair so the first child's position depends on the second
        // child's result: exactly one left-to-right violation.
        let src = NUMERAL.replace(
            "eq Pair bits$2.positionIn  := copy(bits$1.positionIn)",
            "eq Pair bits$2.positionIn  := copy(bits$3.positionOut)",
        );
        let g = parse(&src).unwrap();
        let report = validate_grammar(&g);
        assert_eq!(report.count(IssueKind::LAttrViolation), 1, "{report}");
        assert_eq!(report.issues.len(), 1, "{report}");
        assert!(report.issues[0].message.contains("positionIn"));
    }

    #[test]
    fn root_inherited_is_structural() {
        let src = format!("{NUMERAL}\nattr numeral inh depth int");
        let g = parse(&src).unwrap();
        let report = validate_grammar(&g);
        assert_eq!(report.count(IssueKind::RootInherited), 1, "{report}");
        // The new output occurrence also goes undefined in Numeral's parent —
        // there is none, so no missing-equation noise should appear.
        assert_eq!(report.issues.len(), 1, "{report}");
    }

    #[test]
    fn missing_and_duplicate_equations() {
        let src = NUMERAL.replace("eq Zero bits.positionOut := inc(bits.positionIn)\n", "");
        let g = parse(&src).unwrap();
        let report = validate_grammar(&g);
        assert_eq!(report.count(IssueKind::MissingEquation), 1);

        let src = format!("{NUMERAL}\neq One bits.positionOut := copy(bits.positionIn)");
        let g = parse(&src).unwrap();
        let report = validate_grammar(&g);
        assert_eq!(report.count(IssueKind::DuplicateEquation), 1);
    }

    #[test]
    fn duplicate_production_and_unproductive() {
        let src = format!("{NUMERAL}\nprod Zero : bits ->");
        let g = parse(&src).unwrap();
        assert_eq!(validate_grammar(&g).count(IssueKind::DuplicateProduction), 1);

        let src = "nonterm a\nnonterm b\nprod P : a -> b";
        let g = parse(src).unwrap();
        assert_eq!(validate_grammar(&g).count(IssueKind::UnproductiveNonterminal), 1);
    }

    #[test]
    fn kind_errors_are_flagged() {
        let src = NUMERAL.replace(
            "eq Numeral bits.positionIn := const(0)",
            "eq Numeral bits.positionIn := const(true)",
        );
        let g = parse(&src).unwrap();
        assert_eq!(validate_grammar(&g).count(IssueKind::KindMismatch), 1);
    }

    #[test]
    fn terminal_synthesized_flagged() {
        let src = "nonterm a\nprod P : a -> t\nattr t syn x int\neq P t.x := const(1)";
        let g = parse(src).unwrap();
        let r = validate_grammar(&g);
        assert_eq!(r.count(IssueKind::TerminalSynthesized), 1, "{r}");
    }

    #[test]
    fn constraint_shape_enforced() {
        let bad = MINI_C.replace(
            "constraint Var0 declared(var.env, 0)",
            "constraint Var0 declared(var.env, var.name)",
        );
        let g = parse(&bad).unwrap();
        let r = validate_grammar(&g);
        assert!(r.count(IssueKind::BadConstraint) >= 1, "{r}");
    }
}
