use super::{ParseError, Span};

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum Tok {
    Ident(String),
    Int(i64),
    Str(String),
    Colon,
    Comma,
    LBrace,
    RBrace,
    LParen,
    RParen,
    Assign,
    Plus,
    Minus,
    Star,
    Slash,
    Percent,
    EqEq,
    NotEq,
    Lt,
    Le,
    Gt,
    Ge,
    AndAnd,
    OrOr,
    Bang,
    Eof,
}

impl Tok {
    pub(crate) fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Int(i) => format!("integer {i}"),
            Tok::Str(_) => "string literal".into(),
            Tok::Eof => "end of input".into(),
            other => format!("`{}`", other.symbol()),
        }
    }

    fn symbol(&self) -> &'static str {
        match self {
            Tok::Colon => ":",
            Tok::Comma => ",",
            Tok::LBrace => "{",
            Tok::RBrace => "}",
            Tok::LParen => "(",
            Tok::RParen => ")",
            Tok::Assign => "=",
            Tok::Plus => "+",
            Tok::Minus => "-",
            Tok::Star => "*",
            Tok::Slash => "/",
            Tok::Percent => "%",
            Tok::EqEq => "==",
            Tok::NotEq => "!=",
            Tok::Lt => "<",
            Tok::Le => "<=",
            Tok::Gt => ">",
            Tok::Ge => ">=",
            Tok::AndAnd => "&&",
            Tok::OrOr => "||",
            Tok::Bang => "!",
            _ => "?",
        }
    }
}

pub(crate) fn tokenize(src: &str) -> Result<Vec<(Tok, Span)>, ParseError> {
    let mut out = Vec::new();
    let mut chars = src.chars().peekable();
    let (mut line, mut col) = (1u32, 1u32);

    macro_rules! bump {
        () => {{
            let c = chars.next();
            if c == Some('\n') {
                line += 1;
                col = 1;
            } else if c.is_some() {
                col += 1;
            }
            c
        }};
    }

    while let Some(&c) = chars.peek() {
        let span = Span { line, col };
        if c.is_whitespace() {
            bump!();
            continue;
        }
        if c == '#' {
            while let Some(&c) = chars.peek() {
                if c == '\n' {
                    break;
                }
                bump!();
            }
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let mut s = String::new();
            while let Some(&c) = chars.peek() {
                if c.is_ascii_alphanumeric() || c == '_' {
                    s.push(c);
                    bump!();
                } else {
                    break;
                }
            }
            out.push((Tok::Ident(s), span));
            continue;
        }
        if c.is_ascii_digit() {
            let mut s = String::new();
            while let Some(&c) = chars.peek() {
                if c.is_ascii_digit() {
                    s.push(c);
                    bump!();
                } else {
                    break;
                }
            }
            let v = s.parse::<i64>().map_err(|_| ParseError::at(span, format!("integer literal {s} out of range")))?;
            out.push((Tok::Int(v), span));
            continue;
        }
        if c == '"' {
            bump!();
            let mut s = String::new();
            loop {
                match bump!() {
                    None => return Err(ParseError::at(span, "unterminated string literal")),
                    Some('"') => break,
                    Some('\\') => match bump!() {
                        Some('"') => s.push('"'),
                        Some('\\') => s.push('\\'),
                        Some('n') => s.push('\n'),
                        Some('t') => s.push('\t'),
                        Some(other) => {
                            return Err(ParseError::at(span, format!("unknown escape `\\{other}` in string literal")))
                        }
                        None => return Err(ParseError::at(span, "unterminated string literal")),
                    },
                    Some(c) => s.push(c),
                }
            }
            out.push((Tok::Str(s), span));
            continue;
        }
        bump!();
        let next = chars.peek().copied();
        let tok = match (c, next) {
            ('=', Some('=')) => {
                bump!();
                Tok::EqEq
            }
            ('!', Some('=')) => {
                bump!();
                Tok::NotEq
            }
            ('<', Some('=')) => {
                bump!();
                Tok::Le
            }
            ('>', Some('=')) => {
                bump!();
                Tok::Ge
            }
            ('&', Some('&')) => {
                bump!();
                Tok::AndAnd
            }
            ('|', Some('|')) => {
                bump!();
                Tok::OrOr
            }
            (':', _) => Tok::Colon,
            (',', _) => Tok::Comma,
            ('{', _) => Tok::LBrace,
            ('}', _) => Tok::RBrace,
            ('(', _) => Tok::LParen,
            (')', _) => Tok::RParen,
            ('=', _) => Tok::Assign,
            ('+', _) => Tok::Plus,
            ('-', _) => Tok::Minus,
            ('*', _) => Tok::Star,
            ('/', _) => Tok::Slash,
            ('%', _) => Tok::Percent,
            ('<', _) => Tok::Lt,
            ('>', _) => Tok::Gt,
            ('!', _) => Tok::Bang,
            (other, _) => return Err(ParseError::at(span, format!("unexpected character `{other}`"))),
        };
        out.push((tok, span));
    }
    out.push((Tok::Eof, Span { line, col }));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_positions() {
        let toks = tokenize("a # note\n  <= \"x\\\"y\"").unwrap();
        assert_eq!(toks[0].0, Tok::Ident("a".into()));
        assert_eq!(toks[1].0, Tok::Le);
        assert_eq!((toks[1].1.line, toks[1].1.col), (2, 3));
        assert_eq!(toks[2].0, Tok::Str("x\"y".into()));
        assert_eq!(toks[3].0, Tok::Eof);
    }

    #[test]
    fn lexical_errors() {
        assert!(tokenize("\"open").is_err());
        assert!(tokenize("a @ b").is_err());
        assert!(tokenize("99999999999999999999").is_err());
    }
}
