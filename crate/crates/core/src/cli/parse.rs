//! The REPL's command language: `name(arg, ..., key=arg)` where each arg
//! is a quoted string, a number or a bare word. `#` starts a comment.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Statement {
    Empty,
    Call(Call),
    /// A line with no parentheses, e.g. the detach keyword or input for a
    /// running program.
    Bare(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Call {
    pub name: String,
    pub args: Vec<String>,
    pub kwargs: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("syntax error at column {column}: {message}")]
pub struct SyntaxError {
    pub column: usize,
    pub message: String,
}

struct Lexer<'a> {
    chars: std::iter::Peekable<std::str::CharIndices<'a>>,
    len: usize,
}

impl<'a> Lexer<'a> {
    fn pos(&mut self) -> usize {
        self.chars.peek().map_or(self.len, |(i, _)| *i)
    }

    fn err(&mut self, message: impl Into<String>) -> SyntaxError {
        SyntaxError { column: self.pos() + 1, message: message.into() }
    }

    fn skip_ws(&mut self) {
        while self.chars.peek().is_some_and(|(_, c)| c.is_whitespace()) {
            self.chars.next();
        }
    }

    fn eat(&mut self, want: char) -> bool {
        self.skip_ws();
        if self.chars.peek().is_some_and(|(_, c)| *c == want) {
            self.chars.next();
            true
        } else {
            false
        }
    }

    fn word(&mut self) -> String {
        let mut s = String::new();
        while let Some((_, c)) = self.chars.peek() {
            if c.is_alphanumeric() || "_.-/~+:".contains(*c) {
                s.push(*c);
                self.chars.next();
            } else {
                break;
            }
        }
        s
    }

    fn quoted(&mut self, quote: char) -> Result<String, SyntaxError> {
        let mut s = String::new();
        loop {
            match self.chars.next() {
                None => return Err(self.err("unterminated string")),
                Some((_, c)) if c == quote => return Ok(s),
                Some((_, '\\')) => match self.chars.next() {
                    Some((_, 'n')) => s.push('\n'),
                    Some((_, 't')) => s.push('\t'),
                    Some((_, c)) => s.push(c),
                    None => return Err(self.err("unterminated string")),
                },
                Some((_, c)) => s.push(c),
            }
        }
    }

    fn value(&mut self) -> Result<String, SyntaxError> {
        self.skip_ws();
        match self.chars.peek().map(|(_, c)| *c) {
            Some(q @ ('\'' | '"')) => {
                self.chars.next();
                self.quoted(q)
            }
            _ => {
                let w = self.word();
                if w.is_empty() {
                    Err(self.err("expected a value"))
                } else {
                    Ok(w)
                }
            }
        }
    }
}

fn strip_comment(line: &str) -> &str {
    let mut quote = None;
    for (i, c) in line.char_indices() {
        match (quote, c) {
            (None, '#') => return &line[..i],
            (None, '\'' | '"') => quote = Some(c),
            (Some(q), c) if c == q => quote = None,
            _ => {}
        }
    }
    line
}

pub fn parse_line(line: &str) -> Result<Statement, SyntaxError> {
    let text = strip_comment(line).trim();
    if text.is_empty() {
        return Ok(Statement::Empty);
    }
    if !text.contains('(') {
        return Ok(Statement::Bare(text.to_string()));
    }
    let mut lx = Lexer { chars: text.char_indices().peekable(), len: text.len() };
    let name = lx.word();
    if name.is_empty() || !name.chars().next().is_some_and(|c| c.is_ascii_alphabetic()) {
        return Err(lx.err("expected a function name"));
    }
    if !lx.eat('(') {
        return Err(lx.err("expected '('"));
    }
    let mut call = Call { name, args: Vec::new(), kwargs: Vec::new() };
    if !lx.eat(')') {
        loop {
            let value = lx.value()?;
            if lx.eat('=') {
                let v = lx.value()?;
                call.kwargs.push((value, v));
            } else if !call.kwargs.is_empty() {
                return Err(lx.err("positional argument after keyword argument"));
            } else {
                call.args.push(value);
            }
            if lx.eat(')') {
                break;
            }
            if !lx.eat(',') {
                return Err(lx.err("expected ',' or ')'"));
            }
        }
    }
    lx.skip_ws();
    if lx.pos() != lx.len {
        return Err(lx.err("unexpected text after ')'"));
    }
    Ok(Statement::Call(call))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(line: &str) -> Call {
        match parse_line(line).unwrap() {
            Statement::Call(c) => c,
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn call_with_quoted_argument() {
        let c = call("run('SandboxOptions.txt')");
        assert_eq!(c.name, "run");
        assert_eq!(c.args, vec!["SandboxOptions.txt"]);
    }

    #[test]
    fn keywords_and_bare_words() {
        let c = call(r#"invoke("build", package=HelloAlg) # comment"#);
        assert_eq!(c.args, vec!["build"]);
        assert_eq!(c.kwargs, vec![("package".to_string(), "HelloAlg".to_string())]);
        assert_eq!(call("help()").args.len(), 0);
    }

    #[test]
    fn bare_lines_and_errors() {
        assert_eq!(parse_line("  detach ").unwrap(), Statement::Bare("detach".into()));
        assert_eq!(parse_line("# nothing").unwrap(), Statement::Empty);
        assert!(parse_line("run('x'").is_err());
        assert!(parse_line("run(a=1, b)").is_err());
        assert!(parse_line("run() x").is_err());
    }
}
