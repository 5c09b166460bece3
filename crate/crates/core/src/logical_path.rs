//! Logical resource paths.
//!
//! Objects are named by logical paths independent of where a sandbox keeps
//! them on disk: `/etc/ssh/sshd_config`, `/workspace/docs/intro.txt`, or
//! `~/.ssh/id_rsa` for the user's home. Remote endpoints are named with an
//! `endpoint:` designator.

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PathError {
    #[error("path `{0}` is not absolute (must start with `/` or `~/`)")]
    NotAbsolute(String),
    #[error("path `{0}` climbs out of the home directory")]
    HomeEscape(String),
    #[error("path `{0}` contains a NUL byte")]
    Nul(String),
}

pub const ENDPOINT_PREFIX: &str = "endpoint:";

pub fn is_endpoint_designator(s: &str) -> bool {
    s.starts_with(ENDPOINT_PREFIX)
}

/// Lexically normalizes a logical path: collapses `.`, `..` and repeated
/// separators. `..` at `/` stays at `/`; `..` above `~` is an error.
pub fn normalize(path: &str) -> Result<String, PathError> {
    if path.contains('\0') {
        return Err(PathError::Nul(path.to_string()));
    }
    if is_endpoint_designator(path) {
        return Ok(path.to_string());
    }
    let (root, rest) = if path == "~" {
        ("~", "")
    } else if let Some(rest) = path.strip_prefix("~/") {
        ("~", rest)
    } else if let Some(rest) = path.strip_prefix('/') {
        ("", rest)
    } else {
        return Err(PathError::NotAbsolute(path.to_string()));
    };
    let mut parts: Vec<&str> = Vec::new();
    for comp in rest.split('/') {
        match comp {
            "" | "." => {}
            ".." => {
                if parts.pop().is_none() && root == "~" {
                    return Err(PathError::HomeEscape(path.to_string()));
                }
            }
            c => parts.push(c),
        }
    }
    let joined = parts.join("/");
    Ok(match (root, joined.is_empty()) {
        ("~", true) => "~".to_string(),
        ("~", false) => format!("~/{joined}"),
        (_, true) => "/".to_string(),
        (_, false) => format!("/{joined}"),
    })
}

/// Resolves `arg` against a logical working directory.
pub fn resolve(cwd: &str, arg: &str) -> Result<String, PathError> {
    if arg.starts_with('/') || arg == "~" || arg.starts_with("~/") {
        normalize(arg)
    } else {
        normalize(&format!("{}/{}", cwd.trim_end_matches('/'), arg))
    }
}

/// Component-wise containment of two normalized logical paths.
pub fn is_within(path: &str, prefix: &str) -> bool {
    if prefix == "/" {
        return path.starts_with('/');
    }
    path == prefix || path.strip_prefix(prefix).is_some_and(|rest| rest.starts_with('/'))
}
