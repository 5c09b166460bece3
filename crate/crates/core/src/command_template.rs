//! Anchored full-argv command templates.
//!
//! A template is a whitespace-separated token list. Literal tokens must match
//! exactly; placeholders match one or more argv elements:
//!
//! - `{arg}`     any single argument
//! - `{int}`     a non-negative decimal integer
//! - `{path}`    one path argument (checked against the approved scope)
//! - `{path...}` one or more path arguments
//!
//! The whole argv must be consumed; there is no shell and no globbing.

use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("empty command template")]
    Empty,
    #[error("unknown placeholder `{0}`")]
    UnknownPlaceholder(String),
    #[error("template must start with a literal program name")]
    ProgramPlaceholder,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Token {
    Literal(String),
    Arg,
    Int,
    Path,
    Paths,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandTemplate {
    source: String,
    tokens: Vec<Token>,
}

impl CommandTemplate {
    pub fn as_str(&self) -> &str {
        &self.source
    }

    pub fn program(&self) -> &str {
        match &self.tokens[0] {
            Token::Literal(s) => s,
            _ => unreachable!("validated at parse time"),
        }
    }

    /// Returns the argv indices bound to path placeholders when `argv`
    /// matches the template.
    pub fn match_argv(&self, argv: &[String]) -> Option<Vec<usize>> {
        let mut paths = Vec::new();
        if match_from(&self.tokens, argv, 0, &mut paths) {
            Some(paths)
        } else {
            None
        }
    }
}

fn match_from(tokens: &[Token], argv: &[String], offset: usize, paths: &mut Vec<usize>) -> bool {
    let Some((head, rest)) = tokens.split_first() else {
        return argv.len() == offset;
    };
    let Some(arg) = argv.get(offset) else {
        return false;
    };
    match head {
        Token::Literal(lit) => lit == arg && match_from(rest, argv, offset + 1, paths),
        Token::Arg => match_from(rest, argv, offset + 1, paths),
        Token::Int => {
            !arg.is_empty() && arg.bytes().all(|b| b.is_ascii_digit()) && match_from(rest, argv, offset + 1, paths)
        }
        Token::Path => {
            paths.push(offset);
            if match_from(rest, argv, offset + 1, paths) {
                return true;
            }
            paths.pop();
            false
        }
        Token::Paths => {
            // Greedy with backtracking: take as many paths as possible while
            // the remaining tokens still match.
            let max = argv.len() - offset;
            for take in (1..=max).rev() {
                let mark = paths.len();
                paths.extend(offset..offset + take);
                if match_from(rest, argv, offset + take, paths) {
                    return true;
                }
                paths.truncate(mark);
            }
            false
        }
    }
}

impl FromStr for CommandTemplate {
    type Err = TemplateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let tokens = s
            .split_whitespace()
            .map(|t| match t {
                "{arg}" => Ok(Token::Arg),
                "{int}" => Ok(Token::Int),
                "{path}" => Ok(Token::Path),
                "{path...}" => Ok(Token::Paths),
                t if t.starts_with('{') && t.ends_with('}') => Err(TemplateError::UnknownPlaceholder(t.to_string())),
                t => Ok(Token::Literal(t.to_string())),
            })
            .collect::<Result<Vec<_>, _>>()?;
        match tokens.first() {
            None => Err(TemplateError::Empty),
            Some(Token::Literal(_)) => Ok(Self {
                source: tokens_to_source(&tokens),
                tokens,
            }),
            Some(_) => Err(TemplateError::ProgramPlaceholder),
        }
    }
}

fn tokens_to_source(tokens: &[Token]) -> String {
    tokens
        .iter()
        .map(|t| match t {
            Token::Literal(s) => s.as_str(),
            Token::Arg => "{arg}",
            Token::Int => "{int}",
            Token::Path => "{path}",
            Token::Paths => "{path...}",
        })
        .collect::<Vec<_>>()
        .join(" ")
}

impl fmt::Display for CommandTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(s: &[&str]) -> Vec<String> {
        s.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn grep_template_binds_trailing_paths() {
        let t: CommandTemplate = "grep -R {arg} {path...}".parse().unwrap();
        assert_eq!(
            t.match_argv(&argv(&["grep", "-R", "deprecated", "docs/", "tests/"])),
            Some(vec![3, 4])
        );
        assert_eq!(t.match_argv(&argv(&["grep", "-R", "deprecated"])), None);
        assert_eq!(t.match_argv(&argv(&["grep", "-r", "x", "docs"])), None);
    }

    #[test]
    fn paths_backtrack_before_literals() {
        let t: CommandTemplate = "find {path...} -type f".parse().unwrap();
        assert_eq!(
            t.match_argv(&argv(&["find", "docs", "tests", "-type", "f"])),
            Some(vec![1, 2])
        );
        assert_eq!(t.match_argv(&argv(&["find", "docs", "-type", "d"])), None);
    }

    #[test]
    fn int_and_exact_length() {
        let t: CommandTemplate = "head -n {int} {path}".parse().unwrap();
        assert_eq!(t.match_argv(&argv(&["head", "-n", "20", "README.rst"])), Some(vec![3]));
        assert_eq!(t.match_argv(&argv(&["head", "-n", "x", "README.rst"])), None);
        assert_eq!(t.match_argv(&argv(&["head", "-n", "20", "a", "b"])), None);
        let u: CommandTemplate = "uname -a".parse().unwrap();
        assert_eq!(u.match_argv(&argv(&["uname", "-a"])), Some(vec![]));
        assert_eq!(u.match_argv(&argv(&["uname", "-a", "|", "sh"])), None);
    }

    #[test]
    fn parse_errors() {
        assert_eq!("".parse::<CommandTemplate>(), Err(TemplateError::Empty));
        assert_eq!(
            "{arg} x".parse::<CommandTemplate>(),
            Err(TemplateError::ProgramPlaceholder)
        );
        assert!(matches!(
            "ls {dir}".parse::<CommandTemplate>(),
            Err(TemplateError::UnknownPlaceholder(_))
        ));
        let t: CommandTemplate = "ls   {path...}".parse().unwrap();
        assert_eq!(t.as_str(), "ls {path...}");
        assert_eq!(t.program(), "ls");
    }
}
