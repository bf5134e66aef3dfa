//! Workflow description language: AST, parser, printer and validation.
//!
//! A workflow is a header (one handler, any number of endpoints and context
//! variables) followed by a block of statements. Activities are labelled;
//! the label doubles as the activity's [`PositionId`].

mod lexer;
mod parser;
mod printer;
mod validate;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::Expr;

pub use parser::{parse, parse_expression};
pub use validate::{validate, Diagnostic, DiagnosticKind};

/// Source location, 1-based.
///
/// Spans are carried for diagnostics only and compare equal to each other,
/// so structurally identical trees are `==` whatever their layout.
#[derive(Debug, Clone, Copy, Default, Eq)]
pub struct Span {
    pub line: u32,
    pub col: u32,
}

impl PartialEq for Span {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{line}:{col}: {message}")]
pub struct ParseError {
    pub message: String,
    pub line: u32,
    pub col: u32,
}

impl ParseError {
    pub(crate) fn at(span: Span, message: impl Into<String>) -> Self {
        ParseError { message: message.into(), line: span.line, col: span.col }
    }
}

/// Label of an activity; the address used by jumps and resume overrides.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PositionId(String);

impl PositionId {
    pub fn new(label: impl Into<String>) -> Self {
        let label = label.into();
        assert!(!label.is_empty(), "position ids are non-empty");
        PositionId(label)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for PositionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for PositionId {
    fn from(s: &str) -> Self {
        PositionId::new(s)
    }
}

impl std::borrow::Borrow<str> for PositionId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WaitSpec {
    All,
    Count(u32),
}

pub type Block = Vec<Node>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alternative {
    pub condition: Expr,
    pub body: Block,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Node {
    Call { position: PositionId, endpoint: String, parameters: Vec<(String, Expr)>, span: Span },
    Manipulate { position: PositionId, statements: Vec<(String, Expr)>, span: Span },
    Parallel { wait: WaitSpec, body: Block, span: Span },
    ParallelBranch { body: Block, span: Span },
    Choose { alternatives: Vec<Alternative>, otherwise: Option<Block>, span: Span },
    Cycle { condition: Expr, body: Block, span: Span },
    Critical { section: String, body: Block, span: Span },
}

impl Node {
    pub fn span(&self) -> Span {
        match self {
            Node::Call { span, .. }
            | Node::Manipulate { span, .. }
            | Node::Parallel { span, .. }
            | Node::ParallelBranch { span, .. }
            | Node::Choose { span, .. }
            | Node::Cycle { span, .. }
            | Node::Critical { span, .. } => *span,
        }
    }

    pub fn position(&self) -> Option<&PositionId> {
        match self {
            Node::Call { position, .. } | Node::Manipulate { position, .. } => Some(position),
            _ => None,
        }
    }

    /// Child blocks in path order. For `choose` the otherwise block, when
    /// present, sits at index `alternatives.len()`.
    pub fn children(&self) -> Vec<&Block> {
        match self {
            Node::Call { .. } | Node::Manipulate { .. } => Vec::new(),
            Node::Parallel { body, .. }
            | Node::ParallelBranch { body, .. }
            | Node::Cycle { body, .. }
            | Node::Critical { body, .. } => vec![body],
            Node::Choose { alternatives, otherwise, .. } => {
                alternatives.iter().map(|a| &a.body).chain(otherwise.iter()).collect()
            }
        }
    }

    /// The block addressed by path element `index` below this node.
    pub fn child_block(&self, index: usize) -> Option<&Block> {
        match self {
            Node::Choose { alternatives, otherwise, .. } => {
                if index < alternatives.len() {
                    Some(&alternatives[index].body)
                } else if index == alternatives.len() {
                    otherwise.as_ref()
                } else {
                    None
                }
            }
            Node::Parallel { .. } | Node::ParallelBranch { .. } | Node::Cycle { .. } | Node::Critical { .. } => None,
            Node::Call { .. } | Node::Manipulate { .. } => None,
        }
    }

    fn has_block_step(&self) -> bool {
        matches!(self, Node::Choose { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkflowAst {
    pub handler: String,
    pub endpoints: BTreeMap<String, String>,
    pub context: Vec<(String, Expr)>,
    pub body: Block,
}

/// Path from the workflow body to a node.
///
/// Each element indexes into a block. Below a `choose` node one extra element
/// selects the alternative (or the otherwise block) before indexing into it.
pub type NodePath = Vec<usize>;

impl WorkflowAst {
    /// Activity positions in source order.
    pub fn positions(&self) -> Vec<PositionId> {
        let mut out = Vec::new();
        walk(&self.body, &mut Vec::new(), &mut |node, _| {
            if let Some(p) = node.position() {
                out.push(p.clone());
            }
        });
        out
    }

    /// Activity position → node path.
    pub fn position_paths(&self) -> BTreeMap<PositionId, NodePath> {
        let mut out = BTreeMap::new();
        walk(&self.body, &mut Vec::new(), &mut |node, path| {
            if let Some(p) = node.position() {
                out.insert(p.clone(), path.to_vec());
            }
        });
        out
    }

    /// Resolves a node path. An index one past the end of a block is not a node.
    pub fn node_at(&self, path: &[usize]) -> Option<&Node> {
        self.nodes_along(path)?.last().copied()
    }

    /// Every node on the path, outermost first.
    pub fn nodes_along(&self, path: &[usize]) -> Option<Vec<&Node>> {
        let mut out = Vec::new();
        let mut block = &self.body;
        let mut i = 0;
        while i < path.len() {
            let node = block.get(path[i])?;
            out.push(node);
            i += 1;
            if i == path.len() {
                break;
            }
            if node.has_block_step() {
                block = node.child_block(path[i])?;
                i += 1;
            } else {
                block = node.children().into_iter().next()?;
            }
        }
        Some(out)
    }

    pub fn activity_count(&self) -> usize {
        let mut n = 0;
        walk(&self.body, &mut Vec::new(), &mut |node, _| {
            if node.position().is_some() {
                n += 1;
            }
        });
        n
    }
}

/// Pre-order walk handing each node its path.
pub fn walk(block: &Block, path: &mut NodePath, f: &mut impl FnMut(&Node, &[usize])) {
    for (i, node) in block.iter().enumerate() {
        path.push(i);
        f(node, path);
        if node.has_block_step() {
            for (j, child) in node.children().into_iter().enumerate() {
                path.push(j);
                walk(child, path, f);
                path.pop();
            }
        } else {
            for child in node.children() {
                walk(child, path, f);
            }
        }
        path.pop();
    }
}

impl fmt::Display for WorkflowAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        printer::print(self, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const NESTED: &str = r#"
workflow {
  handler "mock"
  context x: 0
  manipulate: a { x = 1 }
  parallel wait: all {
    parallel_branch { call: p, endpoint: e }
    parallel_branch {
      choose {
        alternative (x > 0) { manipulate: q { x = 2 } }
        otherwise { manipulate: r { x = 3 } }
      }
    }
  }
  cycle (x < 3) { critical: s { manipulate: c { x = x + 1 } } }
}
"#;

    #[test]
    fn paths_resolve_to_their_positions() {
        let ast = parse(NESTED.replace("handler \"mock\"", "handler \"mock\" endpoint e: \"x\"").as_str()).unwrap();
        let paths = ast.position_paths();
        assert_eq!(paths[&PositionId::from("a")], vec![0]);
        assert_eq!(paths[&PositionId::from("p")], vec![1, 0, 0]);
        assert_eq!(paths[&PositionId::from("q")], vec![1, 1, 0, 0, 0]);
        assert_eq!(paths[&PositionId::from("r")], vec![1, 1, 0, 1, 0]);
        assert_eq!(paths[&PositionId::from("c")], vec![2, 0, 0]);
        for (pos, path) in &paths {
            assert_eq!(ast.node_at(path).unwrap().position(), Some(pos));
            assert_eq!(ast.nodes_along(path).unwrap().last().unwrap().position(), Some(pos));
        }
        assert_eq!(ast.positions().len(), ast.activity_count());
    }
}
