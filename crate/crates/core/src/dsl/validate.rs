use std::collections::BTreeSet;
use std::fmt;

use super::{walk, Node, PositionId, Span, WorkflowAst};
use crate::expr::Expr;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DiagnosticKind {
    UndefinedVariable(String),
    UndefinedEndpoint(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub kind: DiagnosticKind,
    pub span: Span,
    /// The activity the reference sits in, if any.
    pub position: Option<PositionId>,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: ", self.span)?;
        match &self.kind {
            DiagnosticKind::UndefinedVariable(v) => write!(f, "undefined variable `{v}`")?,
            DiagnosticKind::UndefinedEndpoint(e) => write!(f, "undefined endpoint `{e}`")?,
        }
        if let Some(p) = &self.position {
            write!(f, " (in `{p}`)")?;
        }
        Ok(())
    }
}

/// Checks that every referenced endpoint and context variable is declared.
/// Context initialisers may only use variables declared before them.
pub fn validate(ast: &WorkflowAst) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut declared = BTreeSet::new();
    for (name, init) in &ast.context {
        undefined_in(init, &declared, Span::default(), None, &mut out);
        declared.insert(name.as_str());
    }

    walk(&ast.body, &mut Vec::new(), &mut |node, _| {
        let span = node.span();
        let position = node.position().cloned();
        match node {
            Node::Call { endpoint, parameters, .. } => {
                if !ast.endpoints.contains_key(endpoint) {
                    out.push(Diagnostic {
                        kind: DiagnosticKind::UndefinedEndpoint(endpoint.clone()),
                        span,
                        position: position.clone(),
                    });
                }
                for (_, e) in parameters {
                    undefined_in(e, &declared, span, position.as_ref(), &mut out);
                }
            }
            Node::Manipulate { statements, .. } => {
                for (target, e) in statements {
                    undefined_in(e, &declared, span, position.as_ref(), &mut out);
                    if !declared.contains(target.as_str()) {
                        push_var(&mut out, target, span, position.as_ref());
                    }
                }
            }
            Node::Choose { alternatives, .. } => {
                for alt in alternatives {
                    undefined_in(&alt.condition, &declared, alt.span, None, &mut out);
                }
            }
            Node::Cycle { condition, .. } => {
                undefined_in(condition, &declared, span, None, &mut out);
            }
            Node::Parallel { .. } | Node::ParallelBranch { .. } | Node::Critical { .. } => {}
        }
    });
    out
}

fn undefined_in(
    e: &Expr,
    declared: &BTreeSet<&str>,
    span: Span,
    position: Option<&PositionId>,
    out: &mut Vec<Diagnostic>,
) {
    for v in e.variables() {
        if !declared.contains(v) {
            push_var(out, v, span, position);
        }
    }
}

fn push_var(out: &mut Vec<Diagnostic>, name: &str, span: Span, position: Option<&PositionId>) {
    let kind = DiagnosticKind::UndefinedVariable(name.to_owned());
    if !out.iter().any(|d| d.kind == kind && d.position.as_ref() == position) {
        out.push(Diagnostic { kind, span, position: position.cloned() });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parse;

    fn kinds(src: &str) -> Vec<DiagnosticKind> {
        validate(&parse(src).unwrap()).into_iter().map(|d| d.kind).collect()
    }

    #[test]
    fn declared_endpoint_is_clean() {
        assert!(kinds(r#"workflow { handler "m" endpoint airline: "http://x" call: a, endpoint: airline }"#).is_empty());
    }

    #[test]
    fn undeclared_variable_in_condition() {
        assert_eq!(
            kinds(r#"workflow { handler "m" choose { alternative (y > 1) { } } }"#),
            vec![DiagnosticKind::UndefinedVariable("y".into())]
        );
    }

    #[test]
    fn parameters_over_declared_context() {
        assert!(kinds(
            r#"workflow { handler "m" endpoint e: "u" context people: 3
                call: book, endpoint: e, parameters: { persons: people } }"#
        )
        .is_empty());
    }

    #[test]
    fn every_reference_site() {
        let found = kinds(
            r#"workflow { handler "m" context a: b context b: 1
                call: c, endpoint: nowhere, parameters: { p: q }
                manipulate: m { z = b }
                cycle (w) { } }"#,
        );
        assert_eq!(
            found,
            vec![
                DiagnosticKind::UndefinedVariable("b".into()),
                DiagnosticKind::UndefinedEndpoint("nowhere".into()),
                DiagnosticKind::UndefinedVariable("q".into()),
                DiagnosticKind::UndefinedVariable("z".into()),
                DiagnosticKind::UndefinedVariable("w".into()),
            ]
        );
    }
}
