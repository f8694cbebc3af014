//! The incremental constraint machine.
//!
//! [`ContextState`] replays a token stream and maintains, at every point,
//! the attribute values flowing into the current *hole* (the next node the
//! stream will expand). Because the grammar is left-to-right ordered, those
//! values are fully determined by the tokens seen so far, so the machine can
//! answer two questions before a production is chosen:
//!
//! * [`ContextState::context_vector`] — a fixed-length 0/1 summary of the
//!   hole's scope set and type expectation, fed to the neural models;
//! * [`ContextState::legal_productions`] — the subset `P_c` of the hole
//!   nonterminal's productions whose tracked constraints hold here.
//!
//! One machine instance tracks one [`ConstraintId`]; the stack arithmetic is
//! identical across constraints, only the vector layout and the production
//! filter differ.
//!
//! [`Layout`] is the per-grammar analysis behind the vectors: indexed
//! variable-name families (`Var0..`, `DVar0..`), the scope-set and
//! expected-type attribute names, and the vector lengths. It is derived
//! entirely from the grammar's constraint declarations and `const`-indexed
//! name equations, and cached on the [`Grammar`].

use std::fmt::Write as _;

use crate::grammar::{
    funcs, Arg, AttrId, ConstraintId, Func, Grammar, ProdId, Sym, Value, ValueKind, VarSet,
    MAX_VARS,
};
use crate::stream::Token;

/// Largest variable-name index any family may use.
pub const MAX_NAME_INDEX: usize = MAX_VARS - 1;

#[derive(Debug, thiserror::Error)]
pub enum MachineError {
    #[error("inconsistent stream: {0}")]
    InconsistentStream(String),
    #[error("`{0}` is not a nonterminal")]
    UnknownNonterminal(String),
    #[error("true production `{0}` is outside the legal set")]
    IllegalTruth(String),
}

/// An indexed family of nullary name productions: member i is the single
/// production whose one equation is `<nt>.<attr> := const(i)`.
#[derive(Debug)]
pub struct Family {
    pub nonterminal: Sym,
    pub name_attr: AttrId,
    members: Vec<ProdId>,
}

impl Family {
    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn member(&self, index: usize) -> ProdId {
        self.members[index]
    }
}

/// Per-grammar context analysis; obtain via [`layout`].
#[derive(Debug)]
pub struct Layout {
    families: Vec<Family>,
    /// production → (family, name index), for family members only.
    var_index_tbl: Vec<Option<(usize, usize)>>,
    /// Productions carrying a `declared` constraint, ordered by the variable
    /// index the constraint names; one declaration bit each.
    declared_bits: Vec<(usize, ProdId)>,
    /// Attribute names the constraints read: the scope set and the expected
    /// type. Values at a hole are found by these names, whatever the hole's
    /// nonterminal.
    env_name: Option<String>,
    expect_name: Option<String>,
    v_max: usize,
    num_tags: usize,
}

impl Layout {
    pub fn families(&self) -> &[Family] {
        &self.families
    }

    pub fn var_index(&self, p: ProdId) -> Option<(usize, usize)> {
        self.var_index_tbl[p.0 as usize]
    }

    /// Highest name index any context vector tracks (the largest family).
    pub fn v_max(&self) -> usize {
        self.v_max
    }

    pub fn declared_bits(&self) -> &[(usize, ProdId)] {
        &self.declared_bits
    }

    pub fn env_name(&self) -> Option<&str> {
        self.env_name.as_deref()
    }

    pub fn expect_name(&self) -> Option<&str> {
        self.expect_name.as_deref()
    }

    /// Context-vector length for a constraint: one bit per declarable name
    /// for the declaration constraint; a (name × type) grid plus one
    /// required-type block for the type constraint.
    pub fn context_len(&self, c: ConstraintId) -> usize {
        match c {
            ConstraintId::DeclaredVariable => self.declared_bits.len(),
            ConstraintId::TypesafeVariable => self.v_max * self.num_tags + self.num_tags,
        }
    }

    fn analyze(g: &Grammar) -> Layout {
        let mut families = Vec::new();
        let mut var_index_tbl = vec![None; g.num_productions()];
        for nt in g.nonterminals() {
            let prods = g.prods_of(nt);
            if prods.is_empty() {
                continue;
            }
            let mut indexed: Vec<(usize, ProdId)> = Vec::with_capacity(prods.len());
            let mut name_attr = None;
            let ok = prods.iter().all(|&pid| {
                let p = g.production(pid);
                if !p.rhs.is_empty() || p.equations.len() != 1 {
                    return false;
                }
                let eq = &p.equations[0];
                if eq.target.slot != 0 || eq.func != Func::Const {
                    return false;
                }
                match (name_attr, eq.target.attr) {
                    (None, a) => name_attr = Some(a),
                    (Some(prev), a) if prev == a => {}
                    _ => return false,
                }
                match eq.args.as_slice() {
                    [Arg::Lit(Value::Int(k))] if (0..=MAX_NAME_INDEX as i64).contains(k) => {
                        indexed.push((*k as usize, pid));
                        true
                    }
                    _ => false,
                }
            });
            if !ok {
                continue;
            }
            indexed.sort_by_key(|&(k, _)| k);
            if indexed.iter().enumerate().any(|(i, &(k, _))| i != k) {
                continue; // indices must be exactly 0..m-1
            }
            let fam = families.len();
            for (k, pid) in &indexed {
                var_index_tbl[pid.0 as usize] = Some((fam, *k));
            }
            families.push(Family {
                nonterminal: nt,
                name_attr: name_attr.expect("nonempty family has an attr"),
                members: indexed.into_iter().map(|(_, p)| p).collect(),
            });
        }

        let mut declared_bits = Vec::new();
        let mut env_name = None;
        let mut expect_name = None;
        for (pid, p) in g.productions() {
            for c in &p.constraints {
                if let (Some(o), None) = (funcs::constraint_set_occ(c), env_name.as_ref()) {
                    env_name = Some(g.attr(o.attr).name.clone());
                }
                match c.id {
                    ConstraintId::DeclaredVariable => {
                        let idx = funcs::constraint_var(c).expect("validated shape");
                        declared_bits.push((idx, pid));
                    }
                    ConstraintId::TypesafeVariable => {
                        if expect_name.is_none() {
                            let o = funcs::constraint_expect_occ(c).expect("validated shape");
                            expect_name = Some(g.attr(o.attr).name.clone());
                        }
                    }
                }
            }
        }
        declared_bits.sort_by_key(|&(idx, pid)| (idx, pid.0));
        let v_max = families.iter().map(Family::size).max().unwrap_or(0);

        Layout {
            families,
            var_index_tbl,
            declared_bits,
            env_name,
            expect_name,
            v_max,
            num_tags: g.num_tags(),
        }
    }
}

/// The cached [`Layout`] of a grammar.
pub fn layout(g: &Grammar) -> &Layout {
    g.layout_cache.get_or_init(|| Layout::analyze(g))
}

/// How often the two context queries were answered; lets callers prove a
/// model variant never consulted the machine.
#[derive(Clone, Copy, Default, PartialEq, Eq, Debug)]
pub struct QueryCounts {
    pub context_vector: usize,
    pub legal_productions: usize,
}

type SlotVals = Vec<(AttrId, Value)>;

#[derive(Clone)]
struct Frame {
    production: ProdId,
    /// Tree children completed so far (skips terminal slots).
    next_child: usize,
    /// Attribute values per slot: 0 = own, i = i-th right-hand-side symbol.
    store: Vec<SlotVals>,
}

/// Incremental attribute state over a token stream. See the module docs.
#[derive(Clone)]
pub struct ContextState<'g> {
    g: &'g Grammar,
    constraint: ConstraintId,
    stack: Vec<Frame>,
    done: bool,
    queries: QueryCounts,
}

pub fn init_context(g: &Grammar, constraint: ConstraintId) -> ContextState<'_> {
    ContextState { g, constraint, stack: Vec::new(), done: false, queries: QueryCounts::default() }
}

impl<'g> ContextState<'g> {
    pub fn constraint(&self) -> ConstraintId {
        self.constraint
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn queries(&self) -> QueryCounts {
        self.queries
    }

    /// The nonterminal the next Step must expand, if the next token may be a
    /// Step at all (at a completed node only Pop is possible).
    pub fn hole(&self) -> Option<Sym> {
        if self.done {
            return None;
        }
        match self.stack.last() {
            None => Some(self.g.root()),
            Some(f) => {
                let p = self.g.production(f.production);
                (f.next_child < p.arity()).then(|| p.child_sym(f.next_child))
            }
        }
    }

    /// Inherited attribute values already computed for the hole.
    fn hole_values(&self) -> &[(AttrId, Value)] {
        static EMPTY: &[(AttrId, Value)] = &[];
        match self.stack.last() {
            None => EMPTY,
            Some(f) => {
                let p = self.g.production(f.production);
                if f.next_child < p.arity() {
                    &f.store[p.nt_slot(f.next_child) as usize]
                } else {
                    EMPTY
                }
            }
        }
    }

    /// A value the constraints or vectors need, located by attribute name
    /// and kind among the hole's inherited values. The scope set and the
    /// expected type keep their names across nonterminals, so this works at
    /// any hole; holes without such an attribute report `None`.
    fn named_value(&self, name: &str, kind: ValueKind) -> Option<Value> {
        self.hole_values()
            .iter()
            .find(|&&(a, _)| {
                let d = self.g.attr(a);
                d.kind == kind && d.name == name
            })
            .map(|&(_, v)| v)
    }

    fn env(&self, layout: &Layout) -> VarSet {
        match layout.env_name().and_then(|n| self.named_value(n, ValueKind::Set)) {
            Some(Value::Set(s)) => s,
            _ => VarSet::empty(),
        }
    }

    fn expected_type(&self, layout: &Layout) -> Value {
        match layout.expect_name().and_then(|n| self.named_value(n, ValueKind::Type)) {
            Some(v @ Value::Type(_)) => v,
            _ => Value::Type(None),
        }
    }

    /// Advance over one token.
    pub fn update_context(&mut self, token: Token) -> Result<(), MachineError> {
        let err = |msg: String| Err(MachineError::InconsistentStream(msg));
        if self.done {
            return err("stream continues after the root subtree closed".into());
        }
        match token {
            Token::Step(p) => {
                let want = match self.hole() {
                    Some(s) => s,
                    None => {
                        let f = self.stack.last().expect("not done, no hole, so a node awaits POP");
                        return err(format!(
                            "`{}` is complete; expected POP",
                            self.g.production(f.production).name
                        ));
                    }
                };
                let got = self.g.production(p).lhs;
                if got != want {
                    return err(format!(
                        "hole is a {}, but `{}` expands {}",
                        self.g.sym_name(want),
                        self.g.production(p).name,
                        self.g.sym_name(got)
                    ));
                }
                let inherited = self.hole_values().to_vec();
                let prod = self.g.production(p);
                let mut store = vec![SlotVals::new(); prod.rhs.len() + 1];
                store[0] = inherited;
                let mut frame = Frame { production: p, next_child: 0, store };
                prepare_hole(self.g, &mut frame)?;
                self.stack.push(frame);
            }
            Token::Pop => {
                // Validate before popping so a rejected token leaves the
                // state untouched.
                match self.stack.last() {
                    None => return err("POP with no open node".into()),
                    Some(f) => {
                        let p = self.g.production(f.production);
                        if f.next_child != p.arity() {
                            return err(format!(
                                "POP closes `{}` after {} of {} children",
                                p.name,
                                f.next_child,
                                p.arity()
                            ));
                        }
                    }
                }
                let f = self.stack.pop().expect("checked above");
                let syn = eval_slot_eqs(self.g, f.production, 0, &f.store)?;
                let g = self.g;
                match self.stack.last_mut() {
                    None => self.done = true,
                    Some(parent) => {
                        let pp = g.production(parent.production);
                        let slot = pp.nt_slot(parent.next_child) as usize;
                        parent.store[slot].extend(syn);
                        parent.next_child += 1;
                        prepare_hole(g, parent)?;
                    }
                }
            }
        }
        Ok(())
    }

    /// The 0/1 context summary at the current hole. Always the same length
    /// for a given (grammar, constraint); all-zero when the hole carries no
    /// tracked attributes (including the root hole and after completion).
    pub fn context_vector(&mut self) -> Vec<f64> {
        self.queries.context_vector += 1;
        let layout = layout(self.g);
        let mut v = vec![0.0; layout.context_len(self.constraint)];
        match self.constraint {
            ConstraintId::DeclaredVariable => {
                let env = self.env(layout);
                for (bit, &(idx, _)) in layout.declared_bits().iter().enumerate() {
                    if env.contains(idx) {
                        v[bit] = 1.0;
                    }
                }
            }
            ConstraintId::TypesafeVariable => {
                let t = layout.num_tags;
                let env = self.env(layout);
                for (var, tag) in env.iter() {
                    if let (Some(tag), true) = (tag, var < layout.v_max) {
                        v[var * t + tag.0 as usize] = 1.0;
                    }
                }
                if let Value::Type(Some(tag)) = self.expected_type(layout) {
                    v[layout.v_max * t + tag.0 as usize] = 1.0;
                }
            }
        }
        v
    }

    /// `P_c`: the productions of `n` whose tracked constraints hold on the
    /// current context. Productions without constraints always qualify.
    pub fn legal_productions(&mut self, n: Sym) -> Result<Vec<ProdId>, MachineError> {
        self.queries.legal_productions += 1;
        if !self.g.is_nonterminal(n) {
            return Err(MachineError::UnknownNonterminal(self.g.sym_name(n).to_owned()));
        }
        let mut out = Vec::new();
        for &pid in self.g.prods_of(n) {
            if self.satisfies_constraints(pid) {
                out.push(pid);
            }
        }
        Ok(out)
    }

    fn satisfies_constraints(&self, pid: ProdId) -> bool {
        let p = self.g.production(pid);
        p.constraints.iter().filter(|c| c.id == self.constraint).all(|c| {
            let args: Vec<Value> = c
                .args
                .iter()
                .map(|a| match a {
                    Arg::Lit(v) => *v,
                    Arg::Occ(o) => self.occ_value(o.attr),
                })
                .collect();
            funcs::eval_constraint(c.id, &args)
                .unwrap_or_else(|m| panic!("constraint `{}` on `{}`: {m}", c.id.name(), p.name))
        })
    }

    /// Resolve a constraint's attribute reference against the hole. A direct
    /// hit by attribute id covers the ordinary case (the hole *is* the
    /// constrained nonterminal); otherwise fall back to the same-named
    /// attribute of the hole, and finally to the kind's neutral value (empty
    /// scope, no expectation), which is what an unentered context offers.
    fn occ_value(&self, attr: AttrId) -> Value {
        if let Some(&(_, v)) = self.hole_values().iter().find(|&&(a, _)| a == attr) {
            return v;
        }
        let want = self.g.attr(attr);
        if let Some(v) = self.named_value(&want.name, want.kind) {
            return v;
        }
        match want.kind {
            ValueKind::Set => Value::Set(VarSet::empty()),
            ValueKind::Type => Value::Type(None),
            ValueKind::Int => Value::Int(0),
            ValueKind::Bool => Value::Bool(false),
        }
    }
}

/// Compute the inherited attributes of the frame's next nonterminal slot,
/// if it has one. Runs exactly once per slot: `next_child` only moves
/// forward.
fn prepare_hole(g: &Grammar, frame: &mut Frame) -> Result<(), MachineError> {
    let p = g.production(frame.production);
    if frame.next_child < p.arity() {
        let slot = p.nt_slot(frame.next_child);
        let vals = eval_slot_eqs(g, frame.production, slot, &frame.store)?;
        frame.store[slot as usize] = vals;
    }
    Ok(())
}

fn eval_slot_eqs(g: &Grammar, pid: ProdId, slot: u8, store: &[SlotVals]) -> Result<SlotVals, MachineError> {
    let p = g.production(pid);
    let mut out = SlotVals::new();
    for eq in p.equations.iter().filter(|e| e.target.slot == slot) {
        let mut args = Vec::with_capacity(eq.args.len());
        for a in &eq.args {
            match a {
                Arg::Lit(v) => args.push(*v),
                Arg::Occ(o) => {
                    match store[o.slot as usize].iter().find(|&&(x, _)| x == o.attr) {
                        Some(&(_, v)) => args.push(v),
                        None => {
                            return Err(MachineError::InconsistentStream(format!(
                                "`{}` line {}: no value for `{}`",
                                p.name,
                                eq.line,
                                g.attr(o.attr).name
                            )))
                        }
                    }
                }
            }
        }
        let v = funcs::apply(eq.func, &args).map_err(|m| {
            MachineError::InconsistentStream(format!("`{}` line {}: {m}", p.name, eq.line))
        })?;
        out.push((eq.target.attr, v));
    }
    Ok(out)
}

/// The three-way split of a hole's production space around the truth:
/// `{p_true}`, the legal-but-wrong rest of `P_c`, and everything illegal.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Partition {
    pub correct: ProdId,
    pub legal_incorrect: Vec<ProdId>,
    pub illegal: Vec<ProdId>,
}

pub fn partition(
    g: &Grammar,
    n: Sym,
    p_true: ProdId,
    p_c: &[ProdId],
) -> Result<Partition, MachineError> {
    if !p_c.contains(&p_true) {
        return Err(MachineError::IllegalTruth(g.production(p_true).name.clone()));
    }
    let mut legal_incorrect = Vec::new();
    let mut illegal = Vec::new();
    for &p in g.prods_of(n) {
        if p == p_true {
            continue;
        } else if p_c.contains(&p) {
            legal_incorrect.push(p);
        } else {
            illegal.push(p);
        }
    }
    Ok(Partition { correct: p_true, legal_incorrect, illegal })
}

/// Render a 0/1 vector as a compact bit string for debug dumps.
pub fn vector_bits_string(v: &[f64]) -> String {
    let mut s = String::with_capacity(v.len());
    for &x in v {
        let _ = write!(s, "{}", if x != 0.0 { 1 } else { 0 });
    }
    s
}
