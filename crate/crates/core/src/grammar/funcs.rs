//! The fixed library of pure functions equations may use.
//!
//! * `const(lit)` – the literal itself
//! * `copy(x)` – identity, any kind
//! * `inc(i)` – integer successor
//! * `insert(s, v)` – set with index `v` added (untagged)
//! * `union(s, t)` – set union, `t`'s tags win on overlap
//! * `bind(s, v, tag)` – set with `v` bound to `tag` (latest wins)
//! * `lookup(s, v)` – tag bound to `v`, or the none tag
//! * `member(s, v)` – membership test
//! * `eq(a, b)` – equality of two same-kind scalars

use super::{Arg, ConstraintId, ConstraintRef, Func, OccRef, Value, ValueKind, MAX_VARS};

/// Static kind check: does `func` accept `args`, and what does it return?
/// `lit_kinds[i]` is `Some(kind)` for literal arguments, `None` for
/// occurrences whose kind is in `occ_kinds[i]`.
pub fn check_types(func: Func, kinds: &[ValueKind]) -> Result<ValueKind, String> {
    use ValueKind::*;
    let bad = |msg: &str| Err(format!("{}: {}", func.name(), msg));
    match func {
        Func::Const | Func::Copy => {
            if kinds.len() != 1 {
                return bad("expects 1 argument");
            }
            Ok(kinds[0])
        }
        Func::Inc => match kinds {
            [Int] => Ok(Int),
            _ => bad("expects (int)"),
        },
        Func::Insert => match kinds {
            [Set, Int] => Ok(Set),
            _ => bad("expects (set, int)"),
        },
        Func::Union => match kinds {
            [Set, Set] => Ok(Set),
            _ => bad("expects (set, set)"),
        },
        Func::Bind => match kinds {
            [Set, Int, Type] => Ok(Set),
            _ => bad("expects (set, int, type)"),
        },
        Func::Lookup => match kinds {
            [Set, Int] => Ok(Type),
            _ => bad("expects (set, int)"),
        },
        Func::Member => match kinds {
            [Set, Int] => Ok(Bool),
            _ => bad("expects (set, int)"),
        },
        Func::Eq => match kinds {
            [a, b] if a == b && *a != Set => Ok(Bool),
            _ => bad("expects two scalars of the same kind"),
        },
    }
}

fn var_index(v: i64) -> Result<usize, String> {
    if (0..MAX_VARS as i64).contains(&v) {
        Ok(v as usize)
    } else {
        Err(format!("variable index {v} out of range 0..{MAX_VARS}"))
    }
}

/// Apply `func` to already-resolved argument values.
pub fn apply(func: Func, args: &[Value]) -> Result<Value, String> {
    let wrong = || format!("{}: argument kind mismatch", func.name());
    match (func, args) {
        (Func::Const, [v]) | (Func::Copy, [v]) => Ok(*v),
        (Func::Inc, [Value::Int(i)]) => Ok(Value::Int(i + 1)),
        (Func::Insert, [Value::Set(s), Value::Int(v)]) => {
            Ok(Value::Set(s.bind(var_index(*v)?, None)))
        }
        (Func::Union, [Value::Set(a), Value::Set(b)]) => Ok(Value::Set(a.union(b))),
        (Func::Bind, [Value::Set(s), Value::Int(v), Value::Type(t)]) => {
            Ok(Value::Set(s.bind(var_index(*v)?, *t)))
        }
        (Func::Lookup, [Value::Set(s), Value::Int(v)]) => {
            Ok(Value::Type(s.tag(var_index(*v)?)))
        }
        (Func::Member, [Value::Set(s), Value::Int(v)]) => {
            Ok(Value::Bool(s.contains(var_index(*v)?)))
        }
        (Func::Eq, [a, b]) if a.kind() == b.kind() && a.kind() != ValueKind::Set => {
            Ok(Value::Bool(a == b))
        }
        _ => Err(wrong()),
    }
}

/// Expected argument shape of a constraint, as (kind, must-be-literal).
pub fn constraint_shape(id: ConstraintId) -> &'static [(ValueKind, bool)] {
    match id {
        // declared(set, v): v must be a use of a declared variable.
        ConstraintId::DeclaredVariable => &[(ValueKind::Set, false), (ValueKind::Int, true)],
        // typesafe(set, v, expected): v's bound tag must match `expected`
        // whenever `expected` names a tag at all.
        ConstraintId::TypesafeVariable => {
            &[(ValueKind::Set, false), (ValueKind::Int, true), (ValueKind::Type, false)]
        }
    }
}

/// Decide a constraint given resolved argument values.
pub fn eval_constraint(id: ConstraintId, args: &[Value]) -> Result<bool, String> {
    match (id, args) {
        (ConstraintId::DeclaredVariable, [Value::Set(s), Value::Int(v)]) => {
            Ok(s.contains(var_index(*v)?))
        }
        (ConstraintId::TypesafeVariable, [Value::Set(s), Value::Int(v), Value::Type(expect)]) => {
            match expect {
                None => Ok(true),
                Some(t) => Ok(s.tag(var_index(*v)?) == Some(*t)),
            }
        }
        _ => Err(format!("{}: argument kind mismatch", id.name())),
    }
}

/// The variable index a constraint tests, if its index argument is literal.
pub fn constraint_var(c: &ConstraintRef) -> Option<usize> {
    match c.args.get(1) {
        Some(Arg::Lit(Value::Int(v))) if (0..MAX_VARS as i64).contains(v) => Some(*v as usize),
        _ => None,
    }
}

/// The set-valued occurrence a constraint reads (its first argument).
pub fn constraint_set_occ(c: &ConstraintRef) -> Option<OccRef> {
    match c.args.first() {
        Some(Arg::Occ(o)) => Some(*o),
        _ => None,
    }
}

/// The expected-type occurrence of a `typesafe` constraint.
pub fn constraint_expect_occ(c: &ConstraintRef) -> Option<OccRef> {
    match (c.id, c.args.get(2)) {
        (ConstraintId::TypesafeVariable, Some(Arg::Occ(o))) => Some(*o),
        _ => None,
    }
}
