use std::fmt::{self, Write};

use super::{Block, Node, WaitSpec, WorkflowAst};
use crate::expr::write_string_literal;

pub(super) fn print(ast: &WorkflowAst, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    f.write_str("workflow {\n  handler ")?;
    write_string_literal(f, &ast.handler)?;
    f.write_char('\n')?;
    for (name, uri) in &ast.endpoints {
        write!(f, "  endpoint {name}: ")?;
        write_string_literal(f, uri)?;
        f.write_char('\n')?;
    }
    for (name, init) in &ast.context {
        writeln!(f, "  context {name}: {init}")?;
    }
    block(f, &ast.body, 1)?;
    f.write_str("}\n")
}

fn indent(f: &mut fmt::Formatter<'_>, depth: usize) -> fmt::Result {
    for _ in 0..depth {
        f.write_str("  ")?;
    }
    Ok(())
}

fn block(f: &mut fmt::Formatter<'_>, nodes: &Block, depth: usize) -> fmt::Result {
    for node in nodes {
        indent(f, depth)?;
        match node {
            Node::Call { position, endpoint, parameters, .. } => {
                write!(f, "call: {position}, endpoint: {endpoint}")?;
                if !parameters.is_empty() {
                    f.write_str(", parameters: {")?;
                    for (i, (name, value)) in parameters.iter().enumerate() {
                        let sep = if i == 0 { " " } else { ", " };
                        write!(f, "{sep}{name}: {value}")?;
                    }
                    f.write_str(" }")?;
                }
                f.write_char('\n')?;
            }
            Node::Manipulate { position, statements, .. } => {
                write!(f, "manipulate: {position} {{")?;
                for (name, value) in statements {
                    write!(f, " {name} = {value}")?;
                }
                f.write_str(" }\n")?;
            }
            Node::Parallel { wait, body, .. } => {
                match wait {
                    WaitSpec::All => f.write_str("parallel wait: all {\n")?,
                    WaitSpec::Count(k) => writeln!(f, "parallel wait: {k} {{")?,
                }
                block(f, body, depth + 1)?;
                indent(f, depth)?;
                f.write_str("}\n")?;
            }
            Node::ParallelBranch { body, .. } => {
                f.write_str("parallel_branch {\n")?;
                block(f, body, depth + 1)?;
                indent(f, depth)?;
                f.write_str("}\n")?;
            }
            Node::Choose { alternatives, otherwise, .. } => {
                f.write_str("choose {\n")?;
                for alt in alternatives {
                    indent(f, depth + 1)?;
                    writeln!(f, "alternative ({}) {{", alt.condition)?;
                    block(f, &alt.body, depth + 2)?;
                    indent(f, depth + 1)?;
                    f.write_str("}\n")?;
                }
                if let Some(body) = otherwise {
                    indent(f, depth + 1)?;
                    f.write_str("otherwise {\n")?;
                    block(f, body, depth + 2)?;
                    indent(f, depth + 1)?;
                    f.write_str("}\n")?;
                }
                indent(f, depth)?;
                f.write_str("}\n")?;
            }
            Node::Cycle { condition, body, .. } => {
                writeln!(f, "cycle ({condition}) {{")?;
                block(f, body, depth + 1)?;
                indent(f, depth)?;
                f.write_str("}\n")?;
            }
            Node::Critical { section, body, .. } => {
                writeln!(f, "critical: {section} {{")?;
                block(f, body, depth + 1)?;
                indent(f, depth)?;
                f.write_str("}\n")?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use crate::dsl::parse;

    #[test]
    fn round_trip() {
        let src = r#"
workflow {
  handler "mock"
  endpoint airline: "http://a/\"q\""
  context x: -1
  context s: "two\nlines"
  call: c, endpoint: airline, parameters: { a: (1 + 2) * x, b: !(x > 0) }
  manipulate: m { x = x - -3 s = "t" }
  parallel wait: 2 { parallel_branch { } parallel_branch { critical: k { } } }
  choose { alternative (x == 1) { } otherwise { cycle (false) { } } }
}
"#;
        let ast = parse(src).unwrap();
        let printed = ast.to_string();
        let again = parse(&printed).unwrap();
        assert_eq!(ast, again);
        assert_eq!(printed, again.to_string());
    }
}
