//! Attribute evaluation and constraint checking on complete trees.
//!
//! Because the grammar is left-to-right ordered (see `validate`), one pass
//! suffices: walk each node's slots left to right, computing a slot's
//! inherited attributes just before descending into it, and the node's own
//! synthesized attributes after the last child returns.

use crate::grammar::{funcs, Arg, AttrId, ConstraintId, Direction, Grammar, ProdId, Value};
use crate::tree::{fmt_path, Tree};

/// A tree annotated with every attribute value.
///
/// `values` is parallel to `Grammar::attrs_of` of the node's nonterminal;
/// inherited entries hold what the parent passed down, synthesized entries
/// what this subtree computed.
#[derive(Clone, Debug)]
pub struct AttributedTree {
    pub production: ProdId,
    pub values: Vec<Value>,
    pub children: Vec<AttributedTree>,
}

impl AttributedTree {
    pub fn value(&self, g: &Grammar, attr: AttrId) -> Value {
        self.values[g.attr_rank(attr)]
    }

    pub fn value_named(&self, g: &Grammar, attr_name: &str) -> Option<Value> {
        let sym = g.production(self.production).lhs;
        g.attr_by_name(sym, attr_name).map(|a| self.value(g, a))
    }
}

#[derive(Debug, thiserror::Error)]
#[error("at node {}: {message}", fmt_path(.path))]
pub struct EvalError {
    pub path: Vec<usize>,
    pub message: String,
}

/// One failed constraint instance at one node.
#[derive(Clone, Debug)]
pub struct Violation {
    pub constraint: ConstraintId,
    pub path: Vec<usize>,
    pub production: ProdId,
    pub message: String,
}

pub fn evaluate_attributes(g: &Grammar, t: &Tree) -> Result<AttributedTree, EvalError> {
    let mut path = Vec::new();
    eval_node(g, t, &[], &mut path)
}

type SlotVals = Vec<(AttrId, Value)>;

fn slot_get(store: &[SlotVals], slot: u8, attr: AttrId) -> Option<Value> {
    store[slot as usize].iter().find(|&&(a, _)| a == attr).map(|&(_, v)| v)
}

fn eval_node(
    g: &Grammar,
    t: &Tree,
    inherited: &[(AttrId, Value)],
    path: &mut Vec<usize>,
) -> Result<AttributedTree, EvalError> {
    let err = |path: &[usize], message: String| EvalError { path: path.to_vec(), message };
    let p = g.production(t.production);
    if t.children.len() != p.arity() {
        return Err(err(path, format!("`{}` takes {} children, found {}", p.name, p.arity(), t.children.len())));
    }

    let mut store: Vec<SlotVals> = vec![SlotVals::new(); p.rhs.len() + 1];
    store[0] = inherited.to_vec();

    let eval_eq = |eq: &crate::grammar::AttributeEquation, store: &[SlotVals], path: &[usize]| {
        let mut args = Vec::with_capacity(eq.args.len());
        for a in &eq.args {
            match a {
                Arg::Lit(v) => args.push(*v),
                Arg::Occ(o) => match slot_get(store, o.slot, o.attr) {
                    Some(v) => args.push(v),
                    None => {
                        return Err(err(
                            path,
                            format!("`{}` line {}: `{}` has no value yet", p.name, eq.line, g.attr(o.attr).name),
                        ))
                    }
                },
            }
        }
        funcs::apply(eq.func, &args)
            .map_err(|m| err(path, format!("`{}` line {}: {m}", p.name, eq.line)))
    };

    let mut children = Vec::with_capacity(t.children.len());
    let mut child_idx = 0;
    for slot in 1..=p.rhs.len() as u8 {
        for eq in p.equations.iter().filter(|e| e.target.slot == slot) {
            let v = eval_eq(eq, &store, path)?;
            store[slot as usize].push((eq.target.attr, v));
        }
        let sym = p.rhs[slot as usize - 1];
        if !g.is_nonterminal(sym) {
            continue;
        }
        let child = &t.children[child_idx];
        let got = child.nonterminal(g);
        if got != sym {
            return Err(err(
                path,
                format!("child {child_idx} of `{}` must be a {}, found {}", p.name, g.sym_name(sym), g.sym_name(got)),
            ));
        }
        // Pass down exactly the child's inherited attributes, in order.
        let mut child_inh = SlotVals::new();
        for &a in g.attrs_of(sym) {
            if g.attr(a).direction == Direction::Inherited {
                match slot_get(&store, slot, a) {
                    Some(v) => child_inh.push((a, v)),
                    None => {
                        return Err(err(
                            path,
                            format!("`{}`: no value for {}.{} of child {child_idx}", p.name, g.sym_name(sym), g.attr(a).name),
                        ))
                    }
                }
            }
        }
        path.push(child_idx);
        let at = eval_node(g, child, &child_inh, path)?;
        path.pop();
        for (k, &a) in g.attrs_of(sym).iter().enumerate() {
            if g.attr(a).direction == Direction::Synthesized {
                store[slot as usize].push((a, at.values[k]));
            }
        }
        children.push(at);
        child_idx += 1;
    }

    for eq in p.equations.iter().filter(|e| e.target.slot == 0) {
        let v = eval_eq(eq, &store, path)?;
        store[0].push((eq.target.attr, v));
    }

    let mut values = Vec::with_capacity(g.attrs_of(p.lhs).len());
    for &a in g.attrs_of(p.lhs) {
        match slot_get(&store, 0, a) {
            Some(v) => values.push(v),
            None => return Err(err(path, format!("`{}`: no value for own `{}`", p.name, g.attr(a).name))),
        }
    }
    Ok(AttributedTree { production: t.production, values, children })
}

/// Evaluate every `constraint` instance of the given kind; returns one
/// [`Violation`] per failing (node, constraint line) pair, in preorder.
pub fn check_tree(g: &Grammar, t: &AttributedTree, constraint: ConstraintId) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut path = Vec::new();
    check_node(g, t, constraint, &mut path, &mut out);
    out
}

fn check_node(
    g: &Grammar,
    t: &AttributedTree,
    constraint: ConstraintId,
    path: &mut Vec<usize>,
    out: &mut Vec<Violation>,
) {
    let p = g.production(t.production);
    for c in &p.constraints {
        if c.id != constraint {
            continue;
        }
        let args: Vec<Value> = c
            .args
            .iter()
            .map(|a| match a {
                Arg::Lit(v) => *v,
                Arg::Occ(o) => t.value(g, o.attr),
            })
            .collect();
        // Shape was validated at load time; a failure here is a programming
        // error, not a tree property.
        let ok = funcs::eval_constraint(c.id, &args)
            .unwrap_or_else(|m| panic!("constraint `{}` on `{}`: {m}", c.id.name(), p.name));
        if !ok {
            out.push(Violation {
                constraint: c.id,
                path: path.clone(),
                production: t.production,
                message: describe_failure(g, c.id, &args, &p.name),
            });
        }
    }
    for (i, child) in t.children.iter().enumerate() {
        path.push(i);
        check_node(g, child, constraint, path, out);
        path.pop();
    }
}

fn describe_failure(g: &Grammar, id: ConstraintId, args: &[Value], prod: &str) -> String {
    let var = match args.get(1) {
        Some(Value::Int(i)) => *i,
        _ => -1,
    };
    match id {
        ConstraintId::DeclaredVariable => format!("`{prod}`: v{var} is not in scope"),
        ConstraintId::TypesafeVariable => {
            let bound = match &args[0] {
                Value::Set(s) if var >= 0 => s.tag(var as usize),
                _ => None,
            };
            let want = match &args[2] {
                Value::Type(t) => *t,
                _ => None,
            };
            let show = |t: Option<crate::grammar::TagId>| match t {
                Some(t) => g.tag_name(t).to_owned(),
                None => "<none>".to_owned(),
            };
            format!("`{prod}`: v{var} has type {}, position requires {}", show(bound), show(want))
        }
    }
}
