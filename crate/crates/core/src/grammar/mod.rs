//! Attribute grammars over operator-style productions.
//!
//! A grammar is a set of named productions (`Pair : bits -> bits bits`)
//! whose left-hand sides are nonterminals. Trees are built from production
//! applications; attributes decorate occurrences of symbols inside a
//! production and are defined by equations drawn from a small library of
//! pure functions ([`funcs`]).
//!
//! The grammars accepted here are *L-attributed*: an inherited attribute of
//! the i-th right-hand-side occurrence may depend only on inherited
//! attributes of the left-hand side and synthesized attributes of
//! occurrences strictly to its left. That discipline is what lets both the
//! batch evaluator ([`eval`]) and the incremental machine
//! ([`crate::machine`]) compute every attribute in a single left-to-right
//! pass.
//!
//! Submodules:
//! * [`loader`] – the line-oriented grammar file format
//! * [`validate`] – structural and dependency checks
//! * [`funcs`] – the equation/constraint function library
//! * [`eval`] – batch attribute evaluation and constraint checking

pub mod eval;
pub mod funcs;
pub mod loader;
pub mod validate;

use std::collections::HashMap;
use std::fmt;
use std::sync::OnceLock;

/// Interned symbol (nonterminal or terminal).
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, PartialOrd, Ord)]
pub struct Sym(pub u16);

/// Index of a production in [`Grammar::productions`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, PartialOrd, Ord)]
pub struct ProdId(pub u16);

/// Index of an attribute declaration in the grammar-wide list.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct AttrId(pub u16);

/// Index into the grammar's type-tag universe `T`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, PartialOrd, Ord)]
pub struct TagId(pub u8);

/// Hard cap on variable indices representable in a [`VarSet`]. Grammars
/// declare their own (smaller) variable universe; this is only the storage
/// bound.
pub const MAX_VARS: usize = 64;

const NO_TAG: u8 = u8::MAX;

/// A set of variable indices, each optionally carrying a type tag.
///
/// This is the one aggregate attribute value: declaration tracking uses the
/// membership side, type tracking uses the tags. Binding an index that is
/// already present replaces its tag (latest declaration wins).
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct VarSet {
    present: u64,
    tags: [u8; MAX_VARS],
}

impl VarSet {
    pub fn empty() -> Self {
        VarSet { present: 0, tags: [NO_TAG; MAX_VARS] }
    }

    pub fn contains(&self, v: usize) -> bool {
        v < MAX_VARS && self.present & (1 << v) != 0
    }

    /// Tag bound to `v`, if `v` is present and was bound with a tag.
    pub fn tag(&self, v: usize) -> Option<TagId> {
        if self.contains(v) && self.tags[v] != NO_TAG {
            Some(TagId(self.tags[v]))
        } else {
            None
        }
    }

    /// Returns a copy with `v` bound to `tag` (replacing any earlier binding).
    pub fn bind(&self, v: usize, tag: Option<TagId>) -> Self {
        debug_assert!(v < MAX_VARS);
        let mut out = *self;
        out.present |= 1 << v;
        out.tags[v] = tag.map_or(NO_TAG, |t| t.0);
        out
    }

    /// Set union; where both sides bind the same index, `other` wins.
    pub fn union(&self, other: &Self) -> Self {
        let mut out = *self;
        for (v, t) in other.iter() {
            out = out.bind(v, t);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.present.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.present == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, Option<TagId>)> + '_ {
        (0..MAX_VARS).filter(|&v| self.contains(v)).map(|v| (v, self.tag(v)))
    }
}

impl fmt::Debug for VarSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, (v, t)) in self.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            match t {
                Some(t) => write!(f, "{v}:{}", t.0)?,
                None => write!(f, "{v}")?,
            }
        }
        write!(f, "}}")
    }
}

/// Attribute value kinds.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ValueKind {
    Int,
    Bool,
    Set,
    Type,
}

impl fmt::Display for ValueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ValueKind::Int => "int",
            ValueKind::Bool => "bool",
            ValueKind::Set => "set",
            ValueKind::Type => "type",
        };
        f.write_str(s)
    }
}

/// A runtime attribute value. `Type(None)` is the "no expectation" tag.
#[derive(Clone, Copy, PartialEq, Debug)]
pub enum Value {
    Int(i64),
    Bool(bool),
    Set(VarSet),
    Type(Option<TagId>),
}

impl Value {
    pub fn kind(&self) -> ValueKind {
        match self {
            Value::Int(_) => ValueKind::Int,
            Value::Bool(_) => ValueKind::Bool,
            Value::Set(_) => ValueKind::Set,
            Value::Type(_) => ValueKind::Type,
        }
    }
}

/// Whether an attribute flows down the tree or up.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Direction {
    Inherited,
    Synthesized,
}

/// Declaration of one attribute on one symbol.
#[derive(Clone, Debug)]
pub struct AttributeDecl {
    pub symbol: Sym,
    pub name: String,
    pub direction: Direction,
    pub kind: ValueKind,
}

/// Reference to an attribute occurrence inside a production. Slot 0 is the
/// left-hand side; slot i (1-based) is the i-th right-hand-side symbol.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct OccRef {
    pub slot: u8,
    pub attr: AttrId,
}

/// Argument to an equation or constraint: an occurrence or a literal.
#[derive(Clone, Copy, PartialEq, Debug)]
pub enum Arg {
    Occ(OccRef),
    Lit(Value),
}

/// The fixed equation function library. See [`funcs`] for semantics.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Func {
    Const,
    Copy,
    Inc,
    Insert,
    Union,
    Bind,
    Lookup,
    Member,
    Eq,
}

impl Func {
    pub fn name(self) -> &'static str {
        match self {
            Func::Const => "const",
            Func::Copy => "copy",
            Func::Inc => "inc",
            Func::Insert => "insert",
            Func::Union => "union",
            Func::Bind => "bind",
            Func::Lookup => "lookup",
            Func::Member => "member",
            Func::Eq => "eq",
        }
    }

    pub fn from_name(s: &str) -> Option<Func> {
        Some(match s {
            "const" => Func::Const,
            "copy" => Func::Copy,
            "inc" => Func::Inc,
            "insert" => Func::Insert,
            "union" => Func::Union,
            "bind" => Func::Bind,
            "lookup" => Func::Lookup,
            "member" => Func::Member,
            "eq" => Func::Eq,
            _ => return None,
        })
    }
}

/// One attribute equation: `target := func(args...)`.
#[derive(Clone, Debug)]
pub struct AttributeEquation {
    pub target: OccRef,
    pub func: Func,
    pub args: Vec<Arg>,
    /// Source line, for diagnostics.
    pub line: usize,
}

/// The two constraints the machine knows how to track.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, PartialOrd, Ord)]
pub enum ConstraintId {
    DeclaredVariable,
    TypesafeVariable,
}

impl ConstraintId {
    pub const ALL: [ConstraintId; 2] =
        [ConstraintId::DeclaredVariable, ConstraintId::TypesafeVariable];

    pub fn name(self) -> &'static str {
        match self {
            ConstraintId::DeclaredVariable => "declared_variable",
            ConstraintId::TypesafeVariable => "typesafe_variable",
        }
    }

    /// Short form used on the command line and in file headers.
    pub fn short(self) -> &'static str {
        match self {
            ConstraintId::DeclaredVariable => "cd",
            ConstraintId::TypesafeVariable => "ct",
        }
    }

    pub fn from_str(s: &str) -> Option<ConstraintId> {
        Some(match s {
            "cd" | "declared" | "declared_variable" => ConstraintId::DeclaredVariable,
            "ct" | "typesafe" | "typesafe_variable" => ConstraintId::TypesafeVariable,
            _ => return None,
        })
    }
}

impl fmt::Display for ConstraintId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A constraint attached to one production.
///
/// Shapes (enforced by validation):
/// * `declared(set, v)` – args `[Occ(set), Lit(Int v)]`
/// * `typesafe(set, v, expected)` – args `[Occ(set), Lit(Int v), Occ(expected)]`
///
/// Occurrence arguments must reference inherited attributes of the
/// production's left-hand side, so every constraint can be decided at the
/// hole *before* the production is expanded.
#[derive(Clone, Debug)]
pub struct ConstraintRef {
    pub id: ConstraintId,
    pub args: Vec<Arg>,
    pub line: usize,
}

/// One production `name : lhs -> rhs...`.
#[derive(Clone, Debug)]
pub struct Production {
    pub name: String,
    pub lhs: Sym,
    pub rhs: Vec<Sym>,
    pub equations: Vec<AttributeEquation>,
    pub constraints: Vec<ConstraintRef>,
    /// 1-based rhs slots holding nonterminals, in order; tree children align
    /// with these (terminal symbols carry no subtree).
    nt_slots: Vec<u8>,
}

impl Production {
    /// Number of tree children a node with this production has.
    pub fn arity(&self) -> usize {
        self.nt_slots.len()
    }

    pub fn nt_slots(&self) -> &[u8] {
        &self.nt_slots
    }

    /// Slot of the `child`-th tree child.
    pub fn nt_slot(&self, child: usize) -> u8 {
        self.nt_slots[child]
    }

    /// Nonterminal of the `child`-th tree child.
    pub fn child_sym(&self, child: usize) -> Sym {
        self.rhs[self.nt_slots[child] as usize - 1]
    }
}

/// A fully loaded grammar plus lookup tables.
pub struct Grammar {
    symbols: Vec<String>,
    is_nt: Vec<bool>,
    nt_rank_tbl: Vec<Option<u16>>,
    nt_count: usize,
    root: Sym,
    productions: Vec<Production>,
    prods_of_tbl: Vec<Vec<ProdId>>,
    prod_by_name: HashMap<String, ProdId>,
    attrs: Vec<AttributeDecl>,
    attrs_of_tbl: Vec<Vec<AttrId>>,
    type_tags: Vec<String>,
    source_hash: String,
    pub(crate) layout_cache: OnceLock<crate::machine::Layout>,
}

impl Grammar {
    pub(crate) fn assemble(
        symbols: Vec<String>,
        is_nt: Vec<bool>,
        root: Sym,
        productions: Vec<Production>,
        attrs: Vec<AttributeDecl>,
        type_tags: Vec<String>,
        source_hash: String,
    ) -> Grammar {
        let mut nt_rank_tbl = vec![None; symbols.len()];
        let mut nt_count = 0usize;
        for (i, &nt) in is_nt.iter().enumerate() {
            if nt {
                nt_rank_tbl[i] = Some(nt_count as u16);
                nt_count += 1;
            }
        }
        let mut prods_of_tbl = vec![Vec::new(); symbols.len()];
        let mut prod_by_name = HashMap::new();
        for (i, p) in productions.iter().enumerate() {
            prods_of_tbl[p.lhs.0 as usize].push(ProdId(i as u16));
            // First definition wins; duplicates are a validation issue.
            prod_by_name.entry(p.name.clone()).or_insert(ProdId(i as u16));
        }
        let mut attrs_of_tbl = vec![Vec::new(); symbols.len()];
        for (i, a) in attrs.iter().enumerate() {
            attrs_of_tbl[a.symbol.0 as usize].push(AttrId(i as u16));
        }
        Grammar {
            symbols,
            is_nt,
            nt_rank_tbl,
            nt_count,
            root,
            productions,
            prods_of_tbl,
            prod_by_name,
            attrs,
            attrs_of_tbl,
            type_tags,
            source_hash,
            layout_cache: OnceLock::new(),
        }
    }

    pub fn root(&self) -> Sym {
        self.root
    }

    pub fn num_symbols(&self) -> usize {
        self.symbols.len()
    }

    /// Number of nonterminals, |N|.
    pub fn num_nonterminals(&self) -> usize {
        self.nt_count
    }

    /// Number of productions, |P|.
    pub fn num_productions(&self) -> usize {
        self.productions.len()
    }

    pub fn sym(&self, name: &str) -> Option<Sym> {
        self.symbols.iter().position(|s| s == name).map(|i| Sym(i as u16))
    }

    pub fn sym_name(&self, s: Sym) -> &str {
        &self.symbols[s.0 as usize]
    }

    pub fn is_nonterminal(&self, s: Sym) -> bool {
        self.is_nt[s.0 as usize]
    }

    /// Dense index of a nonterminal among nonterminals (for one-hot input).
    pub fn nt_rank(&self, s: Sym) -> Option<usize> {
        self.nt_rank_tbl[s.0 as usize].map(|r| r as usize)
    }

    pub fn nonterminals(&self) -> impl Iterator<Item = Sym> + '_ {
        (0..self.symbols.len()).map(|i| Sym(i as u16)).filter(|&s| self.is_nonterminal(s))
    }

    pub fn production(&self, p: ProdId) -> &Production {
        &self.productions[p.0 as usize]
    }

    pub fn productions(&self) -> impl Iterator<Item = (ProdId, &Production)> {
        self.productions.iter().enumerate().map(|(i, p)| (ProdId(i as u16), p))
    }

    pub fn prod_by_name(&self, name: &str) -> Option<ProdId> {
        self.prod_by_name.get(name).copied()
    }

    /// Productions whose left-hand side is `n` (the candidate set P_n).
    pub fn prods_of(&self, n: Sym) -> &[ProdId] {
        &self.prods_of_tbl[n.0 as usize]
    }

    pub fn attr(&self, a: AttrId) -> &AttributeDecl {
        &self.attrs[a.0 as usize]
    }

    pub fn attrs_of(&self, s: Sym) -> &[AttrId] {
        &self.attrs_of_tbl[s.0 as usize]
    }

    pub fn attr_by_name(&self, s: Sym, name: &str) -> Option<AttrId> {
        self.attrs_of_tbl[s.0 as usize]
            .iter()
            .copied()
            .find(|&a| self.attrs[a.0 as usize].name == name)
    }

    /// Rank of `a` within its symbol's attribute list.
    pub fn attr_rank(&self, a: AttrId) -> usize {
        let sym = self.attrs[a.0 as usize].symbol;
        self.attrs_of_tbl[sym.0 as usize].iter().position(|&x| x == a).unwrap()
    }

    /// The type-tag universe T, in declaration order.
    pub fn type_tags(&self) -> &[String] {
        &self.type_tags
    }

    pub fn num_tags(&self) -> usize {
        self.type_tags.len()
    }

    pub fn tag_name(&self, t: TagId) -> &str {
        &self.type_tags[t.0 as usize]
    }

    pub fn tag_by_name(&self, name: &str) -> Option<TagId> {
        self.type_tags.iter().position(|t| t == name).map(|i| TagId(i as u8))
    }

    /// SHA-256 of the grammar file bytes this grammar was loaded from.
    pub fn source_hash(&self) -> &str {
        &self.source_hash
    }

    /// Attributes of the symbol at `slot` of production `p`.
    pub fn slot_sym(&self, p: ProdId, slot: u8) -> Sym {
        let prod = self.production(p);
        if slot == 0 {
            prod.lhs
        } else {
            prod.rhs[slot as usize - 1]
        }
    }
}

impl fmt::Debug for Grammar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Grammar")
            .field("root", &self.sym_name(self.root))
            .field("nonterminals", &self.nt_count)
            .field("productions", &self.productions.len())
            .field("attrs", &self.attrs.len())
            .field("type_tags", &self.type_tags)
            .finish()
    }
}
