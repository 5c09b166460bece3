//! Logical-to-real path mapping and confined execution under a sandbox root.
//!
//! `/x` maps to `<root>/x` and `~/x` to `<root>/home/x`. Every path is
//! canonicalized (symlinks resolved) and mapped back to a logical path before
//! the scope check, so links and `..` cannot leave the approved scope.

use std::fs;
use std::io;
use std::path::{Component, Path, PathBuf};
use std::process::{Command, Stdio};

use crate::canonical::sha256_hex;
use crate::command_template::CommandTemplate;
use crate::logical_path;
use crate::request_plane::ScopeSpec;
use crate::risk_model::{Action, ObjectRef};

use super::{ExecutionOutcome, Mismatch, MismatchCode};

const COMMAND_PATH: &str = "/usr/local/bin:/usr/bin:/bin";

#[derive(Debug, Clone)]
pub struct Sandbox {
    root: PathBuf,
}

/// A fully resolved action, ready to perform.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Plan {
    pub act: Action,
    pub target: PathBuf,
    pub destination: Option<PathBuf>,
    /// argv with path arguments replaced by real paths.
    pub argv: Vec<String>,
    pub content: Option<String>,
}

impl Sandbox {
    pub fn new(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = fs::canonicalize(root.into())?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Lexical mapping, no filesystem access.
    pub fn real_path(&self, logical: &str) -> Result<PathBuf, Mismatch> {
        let n =
            logical_path::normalize(logical).map_err(|e| Mismatch::new(MismatchCode::ScopeViolation, e.to_string()))?;
        let rel = if n == "~" {
            "home".to_string()
        } else if let Some(rest) = n.strip_prefix("~/") {
            format!("home/{rest}")
        } else {
            n.trim_start_matches('/').to_string()
        };
        Ok(if rel.is_empty() {
            self.root.clone()
        } else {
            self.root.join(rel)
        })
    }

    fn to_logical(&self, real: &Path) -> Option<String> {
        let rel = real.strip_prefix(&self.root).ok()?;
        let mut parts = Vec::new();
        for c in rel.components() {
            match c {
                Component::Normal(s) => parts.push(s.to_str()?.to_string()),
                _ => return None,
            }
        }
        Some(match parts.split_first() {
            Some((first, rest)) if first == "home" => {
                if rest.is_empty() {
                    "~".to_string()
                } else {
                    format!("~/{}", rest.join("/"))
                }
            }
            _ => format!("/{}", parts.join("/")),
        })
    }

    /// Resolves symlinks on the longest existing prefix of `path`.
    fn canonicalize_lenient(path: &Path) -> io::Result<PathBuf> {
        match fs::symlink_metadata(path) {
            Ok(_) => fs::canonicalize(path),
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                let parent = path.parent().ok_or(e)?;
                let name = path
                    .file_name()
                    .ok_or_else(|| io::Error::from(io::ErrorKind::InvalidInput))?;
                Ok(Self::canonicalize_lenient(parent)?.join(name))
            }
            Err(e) => Err(e),
        }
    }

    /// Real path of `logical`, checked to stay inside the sandbox and inside
    /// one of `allowed` after symlink resolution.
    pub fn confine(&self, logical: &str, allowed: &[String]) -> Result<PathBuf, Mismatch> {
        let lexical = self.real_path(logical)?;
        let real = Self::canonicalize_lenient(&lexical)
            .map_err(|e| Mismatch::new(MismatchCode::ScopeViolation, format!("cannot resolve {logical}: {e}")))?;
        let back = self
            .to_logical(&real)
            .ok_or_else(|| Mismatch::new(MismatchCode::ScopeViolation, format!("{logical} escapes the sandbox")))?;
        let logical =
            logical_path::normalize(logical).map_err(|e| Mismatch::new(MismatchCode::ScopeViolation, e.to_string()))?;
        for p in [&logical, &back] {
            if !allowed.iter().any(|a| logical_path::is_within(p, a)) {
                return Err(Mismatch::new(
                    MismatchCode::ScopeViolation,
                    format!("{p} is outside the approved scope"),
                ));
            }
        }
        Ok(real)
    }

    /// Checks an action against an approved scope and resolves it.
    pub fn plan(
        &self,
        act: Action,
        obj: &ObjectRef,
        content: Option<&str>,
        scope: &ScopeSpec,
        allowlist: &[CommandTemplate],
    ) -> Result<Plan, Mismatch> {
        match (&obj.payload_sha256, content) {
            (Some(want), Some(c)) if sha256_hex(c.as_bytes()) == *want => {}
            (None, None) => {}
            _ => {
                return Err(Mismatch::new(
                    MismatchCode::PayloadMismatch,
                    "content does not match the bound payload digest",
                ))
            }
        }
        let target = self.confine(&obj.target, &scope.paths)?;
        let destination = match &obj.destination {
            Some(d) if !logical_path::is_endpoint_designator(d) => Some(self.confine(d, &scope.paths)?),
            _ => None,
        };
        let mut argv = obj.argv.clone();
        if act.is_command() {
            let path_args = scope
                .commands
                .iter()
                .filter_map(|c| c.parse::<CommandTemplate>().ok())
                .filter(|t| allowlist.is_empty() || allowlist.iter().any(|a| a.as_str() == t.as_str()))
                .find_map(|t| t.match_argv(&obj.argv))
                .ok_or_else(|| {
                    Mismatch::new(
                        MismatchCode::CommandNotAllowed,
                        format!("`{}` matches no approved template", obj.command_line()),
                    )
                })?;
            for i in path_args {
                let logical = logical_path::resolve(&obj.target, &obj.argv[i])
                    .map_err(|e| Mismatch::new(MismatchCode::ScopeViolation, e.to_string()))?;
                argv[i] = self.confine(&logical, &scope.paths)?.to_string_lossy().into_owned();
            }
        } else if !obj.argv.is_empty() {
            return Err(Mismatch::new(
                MismatchCode::ActionMismatch,
                "argv on a non-command action",
            ));
        }
        Ok(Plan {
            act,
            target,
            destination,
            argv,
            content: content.map(str::to_string),
        })
    }

    /// Unchecked plan for baseline runs: paths are mapped lexically and argv
    /// is passed through untouched.
    pub fn plan_direct(&self, act: Action, obj: &ObjectRef, content: Option<&str>) -> Result<Plan, Mismatch> {
        let destination = match &obj.destination {
            Some(d) if !logical_path::is_endpoint_designator(d) => Some(self.real_path(d)?),
            _ => None,
        };
        if act.is_command() && obj.argv.is_empty() {
            return Err(Mismatch::new(MismatchCode::Malformed, "command without argv"));
        }
        Ok(Plan {
            act,
            target: self.real_path(&obj.target)?,
            destination,
            argv: obj.argv.clone(),
            content: content.map(str::to_string),
        })
    }

    /// Performs exactly one host action.
    pub fn perform(&self, plan: &Plan, outbox_tag: &str) -> ExecutionOutcome {
        match self.perform_inner(plan, outbox_tag) {
            Ok(out) => out,
            Err(e) => ExecutionOutcome::failed(format!("{}: {e}", plan.act)),
        }
    }

    fn perform_inner(&self, plan: &Plan, outbox_tag: &str) -> io::Result<ExecutionOutcome> {
        let dest = || {
            plan.destination
                .as_deref()
                .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "missing destination"))
        };
        Ok(match plan.act {
            Action::Read => {
                let data = fs::read(&plan.target)?;
                ExecutionOutcome::completed_with_output("read", &data)
            }
            Action::Write | Action::Modify | Action::Configure => {
                let data = plan.content.as_deref().unwrap_or("");
                fs::write(&plan.target, data)?;
                ExecutionOutcome::completed("written")
            }
            Action::Copy => {
                fs::copy(&plan.target, dest()?)?;
                ExecutionOutcome::completed("copied")
            }
            Action::Rename => {
                fs::rename(&plan.target, dest()?)?;
                ExecutionOutcome::completed("renamed")
            }
            Action::Send => {
                let data = fs::read(&plan.target)?;
                let outbox = self.root.join(".outbox");
                fs::create_dir_all(&outbox)?;
                fs::write(outbox.join(outbox_tag), &data)?;
                ExecutionOutcome::completed_with_output("queued for sending", &data)
            }
            Action::Execute | Action::Invoke => {
                let out = Command::new(&plan.argv[0])
                    .args(&plan.argv[1..])
                    .current_dir(&plan.target)
                    .env_clear()
                    .env("PATH", COMMAND_PATH)
                    .env("LC_ALL", "C")
                    .stdin(Stdio::null())
                    .output()?;
                if out.status.success() {
                    ExecutionOutcome::completed_with_output("command exited 0", &out.stdout)
                } else {
                    ExecutionOutcome::failed(format!(
                        "command exited with {}: {}",
                        out.status,
                        String::from_utf8_lossy(&out.stderr).trim()
                    ))
                }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sandbox() -> (tempfile::TempDir, Sandbox) {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("workspace/docs")).unwrap();
        fs::create_dir_all(dir.path().join("etc")).unwrap();
        fs::create_dir_all(dir.path().join("home/.ssh")).unwrap();
        fs::write(dir.path().join("etc/passwd"), "root:x:0:0\n").unwrap();
        fs::write(dir.path().join("workspace/docs/a.txt"), "a\n").unwrap();
        let sb = Sandbox::new(dir.path()).unwrap();
        (dir, sb)
    }

    fn ws() -> Vec<String> {
        vec!["/workspace".to_string()]
    }

    #[test]
    fn mapping_round_trips() {
        let (_d, sb) = sandbox();
        assert_eq!(sb.real_path("/etc/passwd").unwrap(), sb.root().join("etc/passwd"));
        assert_eq!(
            sb.real_path("~/.ssh/id_rsa").unwrap(),
            sb.root().join("home/.ssh/id_rsa")
        );
        assert_eq!(sb.to_logical(&sb.root().join("home/.ssh")).unwrap(), "~/.ssh");
        assert_eq!(sb.to_logical(&sb.root().join("workspace/x")).unwrap(), "/workspace/x");
    }

    #[test]
    fn dotdot_and_symlink_escapes_are_rejected() {
        let (_d, sb) = sandbox();
        assert!(sb.confine("/workspace/docs/a.txt", &ws()).is_ok());
        assert!(sb.confine("/workspace/new.txt", &ws()).is_ok());
        let e = sb.confine("/workspace/../etc/passwd", &ws()).unwrap_err();
        assert_eq!(e.code, MismatchCode::ScopeViolation);

        std::os::unix::fs::symlink(sb.root().join("etc/passwd"), sb.root().join("workspace/link")).unwrap();
        assert_eq!(
            sb.confine("/workspace/link", &ws()).unwrap_err().code,
            MismatchCode::ScopeViolation
        );

        std::os::unix::fs::symlink("/", sb.root().join("workspace/hostroot")).unwrap();
        assert_eq!(
            sb.confine("/workspace/hostroot/etc/hostname", &ws()).unwrap_err().code,
            MismatchCode::ScopeViolation
        );
    }

    #[test]
    fn plan_binds_payload_and_templates() {
        let (_d, sb) = sandbox();
        let scope = ScopeSpec::paths(["/workspace"]).with_commands(["ls {path...}"]);
        let obj = ObjectRef::path("/workspace/out.txt").with_payload(b"hi");
        assert!(sb.plan(Action::Write, &obj, Some("hi"), &scope, &[]).is_ok());
        assert_eq!(
            sb.plan(Action::Write, &obj, Some("bye"), &scope, &[]).unwrap_err().code,
            MismatchCode::PayloadMismatch
        );
        let cmd = ObjectRef::command("/workspace", &["ls", "docs"]);
        let plan = sb.plan(Action::Execute, &cmd, None, &scope, &[]).unwrap();
        assert_eq!(plan.argv[1], sb.root().join("workspace/docs").to_string_lossy());
        let out = sb.plan(
            Action::Execute,
            &ObjectRef::command("/workspace", &["ls", "../etc"]),
            None,
            &scope,
            &[],
        );
        assert_eq!(out.unwrap_err().code, MismatchCode::ScopeViolation);
        let sh = ObjectRef::command("/workspace", &["sh", "-c", "id"]);
        assert_eq!(
            sb.plan(Action::Execute, &sh, None, &scope, &[]).unwrap_err().code,
            MismatchCode::CommandNotAllowed
        );
    }

    #[test]
    fn perform_reports_fs_failures() {
        let (_d, sb) = sandbox();
        let scope = ScopeSpec::paths(["/workspace"]);
        let obj = ObjectRef::path("/workspace/docs").with_payload(b"y");
        let plan = sb.plan(Action::Write, &obj, Some("y"), &scope, &[]).unwrap();
        assert_eq!(sb.perform(&plan, "t").status, super::super::OutcomeStatus::Failed);

        let missing = ObjectRef::path("/workspace/none/out.txt").with_payload(b"y");
        let plan = sb.plan(Action::Write, &missing, Some("y"), &scope, &[]).unwrap();
        assert_eq!(sb.perform(&plan, "t").status, super::super::OutcomeStatus::Failed);
    }
}
