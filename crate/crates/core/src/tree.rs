//! Derivation trees.
//!
//! A node records which production was applied; its nonterminal is the
//! production's left-hand side. Children correspond, in order, to the
//! nonterminal slots of the right-hand side — terminal symbols contribute
//! no subtree.

use crate::grammar::{Grammar, ProdId, Sym};

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Tree {
    pub production: ProdId,
    pub children: Vec<Tree>,
}

#[derive(Debug, thiserror::Error)]
#[error("at node {}: {message}", crate::tree::fmt_path(.path))]
pub struct ShapeError {
    pub path: Vec<usize>,
    pub message: String,
}

pub(crate) fn fmt_path(path: &[usize]) -> String {
    if path.is_empty() {
        return "<root>".to_owned();
    }
    let mut s = String::new();
    for i in path {
        s.push('/');
        s.push_str(&i.to_string());
    }
    s
}

impl Tree {
    pub fn new(production: ProdId, children: Vec<Tree>) -> Self {
        Tree { production, children }
    }

    pub fn leaf(production: ProdId) -> Self {
        Tree { production, children: Vec::new() }
    }

    pub fn nonterminal(&self, g: &Grammar) -> Sym {
        g.production(self.production).lhs
    }

    pub fn node_count(&self) -> usize {
        1 + self.children.iter().map(Tree::node_count).sum::<usize>()
    }

    pub fn depth(&self) -> usize {
        1 + self.children.iter().map(Tree::depth).max().unwrap_or(0)
    }

    /// Every node applies a production of its nonterminal and has one child
    /// per nonterminal slot, of the right nonterminal.
    pub fn check_shape(&self, g: &Grammar) -> Result<(), ShapeError> {
        let mut path = Vec::new();
        self.check_shape_at(g, &mut path)
    }

    fn check_shape_at(&self, g: &Grammar, path: &mut Vec<usize>) -> Result<(), ShapeError> {
        let p = g.production(self.production);
        if self.children.len() != p.arity() {
            return Err(ShapeError {
                path: path.clone(),
                message: format!(
                    "`{}` takes {} children, found {}",
                    p.name,
                    p.arity(),
                    self.children.len()
                ),
            });
        }
        for (i, child) in self.children.iter().enumerate() {
            let want = p.child_sym(i);
            let got = child.nonterminal(g);
            if got != want {
                return Err(ShapeError {
                    path: path.clone(),
                    message: format!(
                        "child {i} of `{}` must be a {}, found {} (`{}`)",
                        p.name,
                        g.sym_name(want),
                        g.sym_name(got),
                        g.production(child.production).name
                    ),
                });
            }
            path.push(i);
            child.check_shape_at(g, path)?;
            path.pop();
        }
        Ok(())
    }

    /// Preorder traversal; the callback sees each node and its path.
    pub fn walk<'a>(&'a self, mut f: impl FnMut(&'a Tree, &[usize])) {
        let mut path = Vec::new();
        self.walk_at(&mut path, &mut f);
    }

    fn walk_at<'a>(&'a self, path: &mut Vec<usize>, f: &mut impl FnMut(&'a Tree, &[usize])) {
        f(self, path);
        for (i, c) in self.children.iter().enumerate() {
            path.push(i);
            c.walk_at(path, f);
            path.pop();
        }
    }
}
