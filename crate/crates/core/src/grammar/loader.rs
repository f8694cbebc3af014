//! Grammar file loading.
//!
//! The format is line oriented; `#` starts a comment and blank lines are
//! ignored. Five line forms:
//!
//! ```text
//! nonterm bits                      # declare a nonterminal (first one is the root)
//! prod Pair : bits -> bits bits     # named production; rhs may be empty
//! attr bits inh positionIn int      # attribute: symbol, inh|syn, name, kind
//! eq Pair bits$2.positionIn := copy(bits$1.positionIn)
//! constraint Var3 declared(var.env, 3)
//! ```
//!
//! Attribute kinds are `int`, `bool`, `set`, `type`. Occurrences are written
//! `sym` or `sym$k`, where `sym$k` is the k-th occurrence of that symbol
//! name counting from the left *including the left-hand side*; bare `sym`
//! means `sym$1`. Literal arguments are integers, `true`/`false`, `none`
//! (the empty type tag), `{}` (the empty set), or a type-tag name. Type
//! tags are collected in order of first appearance and form the grammar's
//! tag universe.
//!
//! Right-hand-side symbols never declared by a `nonterm` line are terminals.
//! The loader only rejects mechanically unusable input (syntax errors,
//! unknown names in equations); everything semantic, such as L-attributed
//! dependency violations or missing equations, is left to
//! [`validate_grammar`](super::validate::validate_grammar) so that a
//! diagnostic report can cover the whole file.

use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{
    funcs, Arg, AttrId, AttributeDecl, AttributeEquation, ConstraintId, ConstraintRef, Direction,
    Func, Grammar, OccRef, Production, ProdId, Sym, TagId, Value, ValueKind, VarSet,
};

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

fn err<T>(line: usize, msg: impl Into<String>) -> Result<T, LoadError> {
    Err(LoadError::Parse { line, msg: msg.into() })
}

pub fn load_path(path: impl AsRef<Path>) -> Result<Grammar, LoadError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| LoadError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse(&text)
}

/// Working state while interning symbols.
struct SymTable {
    names: Vec<String>,
    is_nt: Vec<bool>,
    index: HashMap<String, Sym>,
}

impl SymTable {
    fn intern(&mut self, name: &str, nonterminal: bool) -> Sym {
        if let Some(&s) = self.index.get(name) {
            if nonterminal {
                self.is_nt[s.0 as usize] = true;
            }
            return s;
        }
        let s = Sym(self.names.len() as u16);
        self.names.push(name.to_string());
        self.is_nt.push(nonterminal);
        self.index.insert(name.to_string(), s);
        s
    }
}

pub fn parse(text: &str) -> Result<Grammar, LoadError> {
    let hash = {
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect::<String>()
    };

    // Strip comments, keep (line number, words).
    let lines: Vec<(usize, Vec<&str>)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| {
            let l = l.split('#').next().unwrap_or("").trim();
            (i + 1, l.split_whitespace().collect::<Vec<_>>())
        })
        .filter(|(_, w)| !w.is_empty())
        .collect();

    let mut syms = SymTable { names: Vec::new(), is_nt: Vec::new(), index: HashMap::new() };
    let mut root = None;

    // Pass 1: nonterminal declarations.
    for (ln, w) in &lines {
        if w[0] == "nonterm" {
            if w.len() != 2 {
                return err(*ln, "usage: nonterm <name>");
            }
            let s = syms.intern(w[1], true);
            if root.is_none() {
                root = Some(s);
            }
        }
    }
    let root = match root {
        Some(r) => r,
        None => return err(0, "grammar declares no nonterminals"),
    };

    // Pass 2: productions and attribute declarations.
    let mut productions: Vec<Production> = Vec::new();
    let mut attrs: Vec<AttributeDecl> = Vec::new();
    for (ln, w) in &lines {
        match w[0] {
            "prod" => {
                // prod Name : lhs -> rhs...
                if w.len() < 5 || w[2] != ":" || !w.contains(&"->") {
                    return err(*ln, "usage: prod <Name> : <lhs> -> <rhs>...");
                }
                let arrow = w.iter().position(|&t| t == "->").unwrap();
                if arrow != 4 {
                    return err(*ln, "usage: prod <Name> : <lhs> -> <rhs>...");
                }
                let lhs = syms.intern(w[3], false);
                let rhs: Vec<Sym> = w[5..].iter().map(|t| syms.intern(t, false)).collect();
                productions.push(Production {
                    name: w[1].to_string(),
                    lhs,
                    rhs,
                    equations: Vec::new(),
                    constraints: Vec::new(),
                    nt_slots: Vec::new(),
                });
            }
            "attr" => {
                if w.len() != 5 {
                    return err(*ln, "usage: attr <symbol> <inh|syn> <name> <kind>");
                }
                let symbol = syms.intern(w[1], false);
                let direction = match w[2] {
                    "inh" => Direction::Inherited,
                    "syn" => Direction::Synthesized,
                    other => return err(*ln, format!("bad direction `{other}` (inh|syn)")),
                };
                let kind = match w[4] {
                    "int" => ValueKind::Int,
                    "bool" => ValueKind::Bool,
                    "set" => ValueKind::Set,
                    "type" => ValueKind::Type,
                    other => return err(*ln, format!("bad kind `{other}` (int|bool|set|type)")),
                };
                if attrs.iter().any(|a| a.symbol == symbol && a.name == w[3]) {
                    return err(*ln, format!("attribute `{}` already declared on `{}`", w[3], w[1]));
                }
                attrs.push(AttributeDecl {
                    symbol,
                    name: w[3].to_string(),
                    direction,
                    kind,
                });
            }
            _ => {}
        }
    }
    for p in &mut productions {
        p.nt_slots = p
            .rhs
            .iter()
            .enumerate()
            .filter(|(_, s)| syms.is_nt[s.0 as usize])
            .map(|(i, _)| (i + 1) as u8)
            .collect();
    }

    // Name lookup: first definition wins, duplicates surface in validation.
    let mut prod_index: HashMap<String, usize> = HashMap::new();
    for (i, p) in productions.iter().enumerate() {
        prod_index.entry(p.name.clone()).or_insert(i);
    }
    let attr_of = |sym: Sym, name: &str, attrs: &[AttributeDecl]| -> Option<AttrId> {
        attrs
            .iter()
            .position(|a| a.symbol == sym && a.name == name)
            .map(|i| AttrId(i as u16))
    };

    // Occurrence resolution within a production: `sym$k`, lhs leftmost.
    let resolve_occ = |p: &Production,
                       token: &str,
                       attrs: &[AttributeDecl],
                       syms: &SymTable,
                       ln: usize|
     -> Result<OccRef, LoadError> {
        let (occ_part, attr_part) = match token.split_once('.') {
            Some(x) => x,
            None => return err(ln, format!("`{token}`: expected <occ>.<attr>")),
        };
        let (sym_name, k) = match occ_part.split_once('$') {
            Some((s, k)) => {
                let k: usize = k
                    .parse()
                    .map_err(|_| LoadError::Parse { line: ln, msg: format!("bad occurrence `{occ_part}`") })?;
                if k == 0 {
                    return err(ln, "occurrence numbers start at 1");
                }
                (s, k)
            }
            None => (occ_part, 1),
        };
        let sym = match syms.index.get(sym_name) {
            Some(&s) => s,
            None => return err(ln, format!("unknown symbol `{sym_name}`")),
        };
        // Slots of this symbol, lhs first.
        let mut slots: Vec<u8> = Vec::new();
        if p.lhs == sym {
            slots.push(0);
        }
        for (i, &r) in p.rhs.iter().enumerate() {
            if r == sym {
                slots.push((i + 1) as u8);
            }
        }
        let slot = match slots.get(k - 1) {
            Some(&s) => s,
            None => {
                return err(
                    ln,
                    format!("`{}` has no occurrence {k} of `{sym_name}`", p.name),
                )
            }
        };
        let attr = match attr_of(sym, attr_part, attrs) {
            Some(a) => a,
            None => return err(ln, format!("`{sym_name}` has no attribute `{attr_part}`")),
        };
        Ok(OccRef { slot, attr })
    };

    // Pass 3: equations and constraints. Type tags intern in order of first
    // appearance, which fixes the tag universe deterministically.
    let mut tags: Vec<String> = Vec::new();
    let tag_of = |name: &str, tags: &mut Vec<String>| -> TagId {
        if let Some(i) = tags.iter().position(|t| t == name) {
            TagId(i as u8)
        } else {
            tags.push(name.to_string());
            TagId((tags.len() - 1) as u8)
        }
    };

    for (ln, w) in &lines {
        match w[0] {
            "eq" | "constraint" => {
                let is_eq = w[0] == "eq";
                if w.len() < 3 {
                    return err(*ln, "truncated line");
                }
                let pid = match prod_index.get(w[1]) {
                    Some(&i) => i,
                    None => return err(*ln, format!("unknown production `{}`", w[1])),
                };
                let rest = w[2..].join(" ");
                let (target, call) = if is_eq {
                    let (t, c) = match rest.split_once(":=") {
                        Some(x) => x,
                        None => return err(*ln, "expected `target := fn(args)`"),
                    };
                    (Some(t.trim().to_string()), c.trim().to_string())
                } else {
                    (None, rest)
                };
                let (fname, args_src) = match call.split_once('(') {
                    Some((f, a)) if a.trim_end().ends_with(')') => {
                        (f.trim(), a.trim_end().strip_suffix(')').unwrap().to_string())
                    }
                    _ => return err(*ln, "expected `fn(arg, ...)`"),
                };
                let mut args: Vec<Arg> = Vec::new();
                for raw in args_src.split(',') {
                    let raw = raw.trim();
                    if raw.is_empty() {
                        continue;
                    }
                    let arg = if raw == "{}" {
                        Arg::Lit(Value::Set(VarSet::empty()))
                    } else if raw == "true" {
                        Arg::Lit(Value::Bool(true))
                    } else if raw == "false" {
                        Arg::Lit(Value::Bool(false))
                    } else if raw == "none" {
                        Arg::Lit(Value::Type(None))
                    } else if let Ok(i) = raw.parse::<i64>() {
                        Arg::Lit(Value::Int(i))
                    } else if raw.contains('.') {
                        Arg::Occ(resolve_occ(&productions[pid], raw, &attrs, &syms, *ln)?)
                    } else {
                        Arg::Lit(Value::Type(Some(tag_of(raw, &mut tags))))
                    };
                    args.push(arg);
                }
                if is_eq {
                    let func = match Func::from_name(fname) {
                        Some(f) => f,
                        None => return err(*ln, format!("unknown function `{fname}`")),
                    };
                    let target =
                        resolve_occ(&productions[pid], &target.unwrap(), &attrs, &syms, *ln)?;
                    productions[pid].equations.push(AttributeEquation {
                        target,
                        func,
                        args,
                        line: *ln,
                    });
                } else {
                    let id = match fname {
                        "declared" => ConstraintId::DeclaredVariable,
                        "typesafe" => ConstraintId::TypesafeVariable,
                        other => return err(*ln, format!("unknown constraint `{other}`")),
                    };
                    productions[pid].constraints.push(ConstraintRef { id, args, line: *ln });
                }
            }
            "nonterm" | "prod" | "attr" => {}
            other => return err(*ln, format!("unknown directive `{other}`")),
        }
    }

    let _ = funcs::check_types; // semantic checks live in validate

    Ok(Grammar::assemble(
        syms.names,
        syms.is_nt,
        root,
        productions,
        attrs,
        tags,
        hash,
    ))
}

/// Look up a production id by name, as loaded (first definition wins).
pub fn prod(g: &Grammar, name: &str) -> ProdId {
    g.prod_by_name(name)
        .unwrap_or_else(|| panic!("grammar has no production `{name}`"))
}
