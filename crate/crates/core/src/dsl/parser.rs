use std::collections::{BTreeMap, HashMap};

use super::lexer::{tokenize, Tok};
use super::{Alternative, Block, Node, ParseError, PositionId, Span, WaitSpec, WorkflowAst};
use crate::expr::{BinaryOp, Expr, UnaryOp, Value};

/// Parses a `.wee` workflow description.
pub fn parse(source: &str) -> Result<WorkflowAst, ParseError> {
    let mut p = Parser::new(source)?;
    let ast = p.workflow()?;
    p.expect_eof()?;
    Ok(ast)
}

/// Parses a standalone expression.
pub fn parse_expression(source: &str) -> Result<Expr, ParseError> {
    let mut p = Parser::new(source)?;
    let e = p.expr()?;
    p.expect_eof()?;
    Ok(e)
}

const STATEMENT_KEYWORDS: &[&str] =
    &["call", "manipulate", "parallel", "parallel_branch", "choose", "cycle", "critical"];

struct Parser {
    toks: Vec<(Tok, Span)>,
    pos: usize,
    positions: HashMap<String, Span>,
    /// Whether a `parallel_branch` here would attach to an enclosing `parallel`.
    in_parallel: bool,
}

impl Parser {
    fn new(source: &str) -> Result<Self, ParseError> {
        Ok(Parser { toks: tokenize(source)?, pos: 0, positions: HashMap::new(), in_parallel: false })
    }

    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn span(&self) -> Span {
        self.toks[self.pos].1
    }

    fn next(&mut self) -> (Tok, Span) {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn error<T>(&self, message: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError::at(self.span(), message))
    }

    fn expect(&mut self, tok: Tok) -> Result<Span, ParseError> {
        if *self.peek() == tok {
            Ok(self.next().1)
        } else {
            self.error(format!("expected {}, found {}", tok.describe(), self.peek().describe()))
        }
    }

    fn expect_eof(&mut self) -> Result<(), ParseError> {
        match self.peek() {
            Tok::Eof => Ok(()),
            other => self.error(format!("unexpected {} after end of input", other.describe())),
        }
    }

    fn is_keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Tok::Ident(s) if s == kw)
    }

    fn keyword(&mut self, kw: &str) -> Result<Span, ParseError> {
        if self.is_keyword(kw) {
            Ok(self.next().1)
        } else {
            self.error(format!("expected `{kw}`, found {}", self.peek().describe()))
        }
    }

    fn ident(&mut self, what: &str) -> Result<(String, Span), ParseError> {
        match self.peek() {
            Tok::Ident(s) if !matches!(s.as_str(), "true" | "false" | "null") => {
                let s = s.clone();
                let span = self.next().1;
                Ok((s, span))
            }
            other => self.error(format!("expected {what}, found {}", other.describe())),
        }
    }

    fn string(&mut self) -> Result<String, ParseError> {
        match self.peek() {
            Tok::Str(s) => {
                let s = s.clone();
                self.next();
                Ok(s)
            }
            other => self.error(format!("expected string literal, found {}", other.describe())),
        }
    }

    fn workflow(&mut self) -> Result<WorkflowAst, ParseError> {
        self.keyword("workflow")?;
        self.expect(Tok::LBrace)?;

        let mut handler: Option<String> = None;
        let mut endpoints = BTreeMap::new();
        let mut context: Vec<(String, Expr)> = Vec::new();
        loop {
            let span = self.span();
            if self.is_keyword("handler") {
                self.next();
                let name = self.string()?;
                if handler.replace(name).is_some() {
                    return Err(ParseError::at(span, "duplicate handler declaration"));
                }
            } else if self.is_keyword("endpoint") {
                self.next();
                let (name, nspan) = self.ident("endpoint name")?;
                self.expect(Tok::Colon)?;
                let uri = self.string()?;
                if endpoints.insert(name.clone(), uri).is_some() {
                    return Err(ParseError::at(nspan, format!("duplicate endpoint `{name}`")));
                }
            } else if self.is_keyword("context") {
                self.next();
                let (name, nspan) = self.ident("context variable name")?;
                self.expect(Tok::Colon)?;
                let init = self.expr()?;
                if context.iter().any(|(n, _)| *n == name) {
                    return Err(ParseError::at(nspan, format!("duplicate context variable `{name}`")));
                }
                context.push((name, init));
            } else {
                break;
            }
        }
        let Some(handler) = handler else {
            return self.error("missing handler declaration");
        };
        let body = self.block()?;
        self.expect(Tok::RBrace)?;
        Ok(WorkflowAst { handler, endpoints, context, body })
    }

    /// Statements up to (not including) the closing brace.
    fn block(&mut self) -> Result<Block, ParseError> {
        let mut out = Vec::new();
        loop {
            match self.peek() {
                Tok::RBrace | Tok::Eof => return Ok(out),
                Tok::Ident(kw) if STATEMENT_KEYWORDS.contains(&kw.as_str()) => out.push(self.statement()?),
                Tok::Ident(kw) if matches!(kw.as_str(), "handler" | "endpoint" | "context") => {
                    return self.error(format!("`{kw}` declarations must precede the workflow body"))
                }
                other => return self.error(format!("expected statement, found {}", other.describe())),
            }
        }
    }

    fn braced_block(&mut self) -> Result<Block, ParseError> {
        self.expect(Tok::LBrace)?;
        let b = self.block()?;
        self.expect(Tok::RBrace)?;
        Ok(b)
    }

    fn position(&mut self) -> Result<PositionId, ParseError> {
        self.expect(Tok::Colon)?;
        let (label, span) = self.ident("activity label")?;
        if let Some(first) = self.positions.insert(label.clone(), span) {
            return Err(ParseError::at(span, format!("duplicate position `{label}` (first defined at {first})")));
        }
        Ok(PositionId::new(label))
    }

    fn statement(&mut self) -> Result<Node, ParseError> {
        let (tok, span) = self.next();
        let Tok::Ident(kw) = tok else { unreachable!() };
        match kw.as_str() {
            "call" => {
                let position = self.position()?;
                self.expect(Tok::Comma)?;
                self.keyword("endpoint")?;
                self.expect(Tok::Colon)?;
                let (endpoint, _) = self.ident("endpoint name")?;
                let mut parameters = Vec::new();
                if *self.peek() == Tok::Comma {
                    self.next();
                    self.keyword("parameters")?;
                    self.expect(Tok::Colon)?;
                    self.expect(Tok::LBrace)?;
                    while *self.peek() != Tok::RBrace {
                        let (name, nspan) = self.ident("parameter name")?;
                        self.expect(Tok::Colon)?;
                        let value = self.expr()?;
                        if parameters.iter().any(|(n, _)| *n == name) {
                            return Err(ParseError::at(nspan, format!("duplicate parameter `{name}`")));
                        }
                        parameters.push((name, value));
                        if *self.peek() == Tok::Comma {
                            self.next();
                        }
                    }
                    self.expect(Tok::RBrace)?;
                }
                Ok(Node::Call { position, endpoint, parameters, span })
            }
            "manipulate" => {
                let position = self.position()?;
                self.expect(Tok::LBrace)?;
                let mut statements = Vec::new();
                while *self.peek() != Tok::RBrace {
                    let (name, _) = self.ident("variable name")?;
                    self.expect(Tok::Assign)?;
                    statements.push((name, self.expr()?));
                }
                self.expect(Tok::RBrace)?;
                Ok(Node::Manipulate { position, statements, span })
            }
            "parallel" => {
                self.keyword("wait")?;
                self.expect(Tok::Colon)?;
                let wait = match self.peek().clone() {
                    Tok::Ident(s) if s == "all" => {
                        self.next();
                        WaitSpec::All
                    }
                    Tok::Int(k) => {
                        if k < 1 {
                            return self.error("wait count must be ≥ 1");
                        }
                        let k = u32::try_from(k).or_else(|_| self.error("wait count too large"))?;
                        self.next();
                        WaitSpec::Count(k)
                    }
                    other => {
                        return self.error(format!("expected `all` or a branch count, found {}", other.describe()))
                    }
                };
                let outer = std::mem::replace(&mut self.in_parallel, true);
                let body = self.braced_block();
                self.in_parallel = outer;
                Ok(Node::Parallel { wait, body: body?, span })
            }
            "parallel_branch" => {
                if !self.in_parallel {
                    return Err(ParseError::at(span, "parallel_branch outside of a parallel block"));
                }
                let outer = std::mem::replace(&mut self.in_parallel, false);
                let body = self.braced_block();
                self.in_parallel = outer;
                Ok(Node::ParallelBranch { body: body?, span })
            }
            "choose" => {
                self.expect(Tok::LBrace)?;
                let mut alternatives = Vec::new();
                let mut otherwise = None;
                loop {
                    let aspan = self.span();
                    if self.is_keyword("alternative") {
                        if otherwise.is_some() {
                            return self.error("`alternative` after `otherwise`");
                        }
                        self.next();
                        self.expect(Tok::LParen)?;
                        let condition = self.expr()?;
                        self.expect(Tok::RParen)?;
                        let body = self.braced_block()?;
                        alternatives.push(Alternative { condition, body, span: aspan });
                    } else if self.is_keyword("otherwise") {
                        if otherwise.is_some() {
                            return self.error("duplicate `otherwise`");
                        }
                        self.next();
                        otherwise = Some(self.braced_block()?);
                    } else {
                        break;
                    }
                }
                self.expect(Tok::RBrace)?;
                Ok(Node::Choose { alternatives, otherwise, span })
            }
            "cycle" => {
                self.expect(Tok::LParen)?;
                let condition = self.expr()?;
                self.expect(Tok::RParen)?;
                let body = self.braced_block()?;
                Ok(Node::Cycle { condition, body, span })
            }
            "critical" => {
                self.expect(Tok::Colon)?;
                let (section, _) = self.ident("section name")?;
                let body = self.braced_block()?;
                Ok(Node::Critical { section, body, span })
            }
            _ => unreachable!("statement keywords are checked by the caller"),
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        self.binary(0)
    }

    fn binary_op(&self) -> Option<BinaryOp> {
        Some(match self.peek() {
            Tok::Plus => BinaryOp::Add,
            Tok::Minus => BinaryOp::Sub,
            Tok::Star => BinaryOp::Mul,
            Tok::Slash => BinaryOp::Div,
            Tok::Percent => BinaryOp::Rem,
            Tok::EqEq => BinaryOp::Eq,
            Tok::NotEq => BinaryOp::Ne,
            Tok::Lt => BinaryOp::Lt,
            Tok::Le => BinaryOp::Le,
            Tok::Gt => BinaryOp::Gt,
            Tok::Ge => BinaryOp::Ge,
            Tok::AndAnd => BinaryOp::And,
            Tok::OrOr => BinaryOp::Or,
            _ => return None,
        })
    }

    // Precedence climbing; all binary operators are left-associative.
    fn binary(&mut self, min: u8) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        while let Some(op) = self.binary_op() {
            let prec = op.precedence();
            if prec < min {
                break;
            }
            self.next();
            let rhs = self.binary(prec + 1)?;
            lhs = Expr::binary(op, lhs, rhs);
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        match self.peek() {
            Tok::Bang => {
                self.next();
                Ok(Expr::Unary(UnaryOp::Not, Box::new(self.unary()?)))
            }
            Tok::Minus => {
                self.next();
                if let Tok::Int(i) = *self.peek() {
                    self.next();
                    return Ok(Expr::int(-i));
                }
                Ok(Expr::Unary(UnaryOp::Neg, Box::new(self.unary()?)))
            }
            _ => self.primary(),
        }
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        let (tok, span) = self.next();
        match tok {
            Tok::Int(i) => Ok(Expr::int(i)),
            Tok::Str(s) => Ok(Expr::Literal(Value::String(s))),
            Tok::Ident(s) => Ok(match s.as_str() {
                "true" => Expr::Literal(Value::Boolean(true)),
                "false" => Expr::Literal(Value::Boolean(false)),
                "null" => Expr::Literal(Value::Null),
                _ => Expr::Var(s),
            }),
            Tok::LParen => {
                let e = self.expr()?;
                self.expect(Tok::RParen)?;
                Ok(e)
            }
            other => Err(ParseError::at(span, format!("expected expression, found {}", other.describe()))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_program() {
        let ast = parse(r#"workflow { handler "mock" context x: 0 manipulate :a { x = x + 1 } }"#).unwrap();
        assert_eq!(ast.handler, "mock");
        assert_eq!(ast.context, vec![("x".to_string(), Expr::int(0))]);
        assert_eq!(ast.body.len(), 1);
        let Node::Manipulate { position, statements, .. } = &ast.body[0] else {
            panic!("expected manipulate");
        };
        assert_eq!(position.as_str(), "a");
        assert_eq!(statements[0].1, Expr::parse("x + 1").unwrap());
    }

    #[test]
    fn zero_wait_count_rejected() {
        let err = parse(r#"workflow { handler "mock" parallel wait: 0 { } }"#).unwrap_err();
        assert_eq!(err.message, "wait count must be ≥ 1");
        assert_eq!((err.line, err.col), (1, 42));
    }

    #[test]
    fn structural_errors() {
        let cases = [
            (r#"workflow { handler "m" manipulate: a { } manipulate: a { } }"#, "duplicate position `a`"),
            (r#"workflow { handler "m" context x: 1 context x: 2 }"#, "duplicate context variable `x`"),
            (r#"workflow { handler "m" endpoint e: "a" endpoint e: "b" }"#, "duplicate endpoint `e`"),
            (r#"workflow { handler "m" parallel_branch { } }"#, "parallel_branch outside"),
            (
                r#"workflow { handler "m" parallel wait: all { parallel_branch { parallel_branch { } } } }"#,
                "parallel_branch outside",
            ),
            (r#"workflow { context x: 1 }"#, "missing handler"),
            (r#"workflow { handler "m" handler "n" }"#, "duplicate handler"),
            (r#"workflow { handler "m" manipulate: a { } context x: 1 }"#, "must precede"),
            (r#"workflow { handler "m" cycle (x < ) { } }"#, "expected expression"),
            (r#"workflow { handler "m" } trailing"#, "after end of input"),
        ];
        for (src, needle) in cases {
            let err = parse(src).unwrap_err();
            assert!(err.message.contains(needle), "{src}: {err}");
        }
    }

    #[test]
    fn nested_parallel_branches_are_allowed_under_a_new_parallel() {
        let src = r#"workflow { handler "m"
            parallel wait: all { parallel_branch {
                parallel wait: 1 { parallel_branch { manipulate: a { } } }
            } } }"#;
        assert!(parse(src).is_ok());
    }

    #[test]
    fn precedence() {
        assert_eq!(
            parse_expression("1 + 2 * 3 == 7 && !false || x").unwrap(),
            Expr::binary(
                BinaryOp::Or,
                Expr::binary(
                    BinaryOp::And,
                    Expr::binary(
                        BinaryOp::Eq,
                        Expr::binary(
                            BinaryOp::Add,
                            Expr::int(1),
                            Expr::binary(BinaryOp::Mul, Expr::int(2), Expr::int(3))
                        ),
                        Expr::int(7)
                    ),
                    Expr::Unary(UnaryOp::Not, Box::new(Expr::Literal(Value::Boolean(false))))
                ),
                Expr::var("x")
            )
        );
        assert_eq!(
            parse_expression("10 - 3 - 2").unwrap(),
            Expr::binary(BinaryOp::Sub, Expr::binary(BinaryOp::Sub, Expr::int(10), Expr::int(3)), Expr::int(2))
        );
        assert_eq!(parse_expression("-5").unwrap(), Expr::int(-5));
    }

    #[test]
    fn parameters_accept_optional_commas() {
        let a =
            parse(r#"workflow { handler "m" endpoint e: "u" call: c, endpoint: e, parameters: { a: 1 b: x + 1 } }"#)
                .unwrap();
        let b =
            parse(r#"workflow { handler "m" endpoint e: "u" call: c, endpoint: e, parameters: { a: 1, b: x + 1 } }"#)
                .unwrap();
        assert_eq!(a, b);
    }
}
