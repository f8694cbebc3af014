//! Depth-first token streams.
//!
//! A tree becomes a stream by preorder traversal: one `Step` per node as it
//! is entered, one `Pop` when its whole subtree (leaves included) is done.
//! The stream of a tree with n nodes therefore has exactly n Steps and n
//! Pops, and running depth never dips below zero.
//!
//! On disk a stream is one line of whitespace-separated tokens, `P:<name>`
//! for a Step (the production's name; its nonterminal follows from the
//! grammar) and `POP` for a Pop.

use crate::grammar::{Grammar, ProdId, Sym};
use crate::machine;
use crate::tree::Tree;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Token {
    Step(ProdId),
    Pop,
}

impl Token {
    /// The nonterminal a Step expands (its production's left-hand side).
    pub fn nonterminal(&self, g: &Grammar) -> Option<Sym> {
        match self {
            Token::Step(p) => Some(g.production(*p).lhs),
            Token::Pop => None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StreamError {
    #[error("token {pos}: {msg}")]
    Malformed { pos: usize, msg: String },
    #[error("{found} distinct variables, but only {max} variable names exist")]
    TooManyVariables { found: usize, max: usize },
}

/// Preorder linearization: Step on entry, Pop after the subtree.
pub fn linearize(tree: &Tree) -> Vec<Token> {
    enum Work<'t> {
        Enter(&'t Tree),
        Leave,
    }
    let mut out = Vec::new();
    let mut stack = vec![Work::Enter(tree)];
    while let Some(w) = stack.pop() {
        match w {
            Work::Enter(t) => {
                out.push(Token::Step(t.production));
                stack.push(Work::Leave);
                for c in t.children.iter().rev() {
                    stack.push(Work::Enter(c));
                }
            }
            Work::Leave => out.push(Token::Pop),
        }
    }
    out
}

/// Exact inverse of [`linearize`].
pub fn delinearize(g: &Grammar, tokens: &[Token]) -> Result<Tree, StreamError> {
    struct Frame {
        production: ProdId,
        children: Vec<Tree>,
    }
    let err = |pos: usize, msg: String| StreamError::Malformed { pos, msg };
    let mut stack: Vec<Frame> = Vec::new();
    let mut root: Option<Tree> = None;

    for (pos, &tok) in tokens.iter().enumerate() {
        if root.is_some() {
            return Err(err(pos, "tokens after the root subtree closed".into()));
        }
        match tok {
            Token::Step(p) => {
                let want = match stack.last() {
                    None => g.root(),
                    Some(f) => {
                        let prod = g.production(f.production);
                        if f.children.len() == prod.arity() {
                            return Err(err(
                                pos,
                                format!("`{}` is complete; expected POP", prod.name),
                            ));
                        }
                        prod.child_sym(f.children.len())
                    }
                };
                let got = g.production(p).lhs;
                if got != want {
                    return Err(err(
                        pos,
                        format!(
                            "hole is a {}, but `{}` expands {}",
                            g.sym_name(want),
                            g.production(p).name,
                            g.sym_name(got)
                        ),
                    ));
                }
                stack.push(Frame { production: p, children: Vec::new() });
            }
            Token::Pop => {
                let f = match stack.pop() {
                    Some(f) => f,
                    None => return Err(err(pos, "POP with no open node".into())),
                };
                let prod = g.production(f.production);
                if f.children.len() != prod.arity() {
                    return Err(err(
                        pos,
                        format!(
                            "POP closes `{}` after {} of {} children",
                            prod.name,
                            f.children.len(),
                            prod.arity()
                        ),
                    ));
                }
                let t = Tree::new(f.production, f.children);
                match stack.last_mut() {
                    Some(parent) => parent.children.push(t),
                    None => root = Some(t),
                }
            }
        }
    }
    match root {
        Some(t) => Ok(t),
        None => Err(err(tokens.len(), "stream ended with open nodes".into())),
    }
}

/// Rename variables by order of use: the i-th distinct variable encountered
/// in preorder becomes name i−1. A pure production substitution — every
/// member of every indexed-name family (uses and declarations share the
/// index space) is remapped; tree shape is untouched.
pub fn alias_variables(g: &Grammar, tree: &Tree) -> Result<Tree, StreamError> {
    let layout = machine::layout(g);
    if layout.families().is_empty() {
        return Ok(tree.clone());
    }
    // First-encounter order of original indices.
    let mut order: Vec<usize> = Vec::new();
    tree.walk(|n, _| {
        if let Some((_, idx)) = layout.var_index(n.production) {
            if !order.contains(&idx) {
                order.push(idx);
            }
        }
    });
    let max = layout.families().iter().map(|f| f.size()).min().unwrap_or(0);
    if order.len() > max {
        return Err(StreamError::TooManyVariables { found: order.len(), max });
    }
    let mut rank = vec![usize::MAX; machine::MAX_NAME_INDEX + 1];
    for (r, &idx) in order.iter().enumerate() {
        rank[idx] = r;
    }
    fn subst(layout: &machine::Layout, rank: &[usize], t: &Tree) -> Tree {
        let production = match layout.var_index(t.production) {
            Some((family, idx)) => layout.families()[family].member(rank[idx]),
            None => t.production,
        };
        Tree::new(production, t.children.iter().map(|c| subst(layout, rank, c)).collect())
    }
    Ok(subst(layout, &rank, tree))
}

pub fn render_stream(g: &Grammar, tokens: &[Token]) -> String {
    let mut s = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        match t {
            Token::Step(p) => {
                s.push_str("P:");
                s.push_str(&g.production(*p).name);
            }
            Token::Pop => s.push_str("POP"),
        }
    }
    s
}

pub fn parse_stream(g: &Grammar, line: &str) -> Result<Vec<Token>, StreamError> {
    let mut out = Vec::new();
    for (pos, word) in line.split_whitespace().enumerate() {
        if word == "POP" {
            out.push(Token::Pop);
        } else if let Some(name) = word.strip_prefix("P:") {
            match g.prod_by_name(name) {
                Some(p) => out.push(Token::Step(p)),
                None => {
                    return Err(StreamError::Malformed {
                        pos,
                        msg: format!("unknown production `{name}`"),
                    })
                }
            }
        } else {
            return Err(StreamError::Malformed { pos, msg: format!("unrecognized token `{word}`") });
        }
    }
    Ok(out)
}
