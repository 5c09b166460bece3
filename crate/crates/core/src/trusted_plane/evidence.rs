//! Hash-chained evidence log.
//!
//! `record_hash = SHA-256(canonical(record without record_hash) || prev_hash)`
//! where `prev_hash` is the raw 32 bytes of the predecessor's hash (zeros for
//! the first record). Stored as one canonical-JSON record per line.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::canonical::{sha256_hex, to_canonical_bytes, to_canonical_bytes_without};
use crate::request_plane::ScopeSpec;
use crate::risk_model::{Action, EnforcementDecision, ObjectRef, SecurityLevel};

pub const GENESIS_HASH: &str = "0000000000000000000000000000000000000000000000000000000000000000";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResultStatus {
    Pending,
    Completed,
    Failed,
    Rejected,
    Denied,
    Inconsistent,
}

impl ResultStatus {
    pub fn is_terminal(self) -> bool {
        self != ResultStatus::Pending
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceEvent {
    Decision,
    Dispatch,
    Confirmation,
    Completion,
    /// The request never reached classification or was refused at intake.
    Rejection,
}

/// Trusted timestamp: plane wall clock plus a monotone event counter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Timestamp {
    pub wall: String,
    pub counter: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvidenceRecord {
    pub sid: String,
    pub act: Option<Action>,
    pub obj: Option<ObjectRef>,
    /// Approved scope for granted requests, requested scope otherwise.
    pub scope: Option<ScopeSpec>,
    pub level: Option<SecurityLevel>,
    pub seq: u64,
    pub dec: Option<EnforcementDecision>,
    pub ts: Timestamp,
    pub res: ResultStatus,
    pub event: EvidenceEvent,
    pub request_digest: Option<String>,
    pub grant_id: Option<String>,
    pub note: Option<String>,
    pub prev_hash: String,
    pub record_hash: String,
}

impl EvidenceRecord {
    pub fn compute_hash(&self) -> String {
        let body = to_canonical_bytes_without(self, "record_hash").expect("no floats");
        let prev = hex::decode(&self.prev_hash).unwrap_or_default();
        let mut input = body;
        input.extend_from_slice(&prev);
        sha256_hex(&input)
    }

    pub fn to_line(&self) -> Vec<u8> {
        to_canonical_bytes(self).expect("no floats")
    }

    pub fn lifecycle_key(&self) -> (String, u64) {
        (self.sid.clone(), self.seq)
    }
}

/// Fields supplied by the plane for a new record; the log fills in the
/// timestamp and chain fields.
#[derive(Debug, Clone)]
pub struct RecordDraft {
    pub sid: String,
    pub act: Option<Action>,
    pub obj: Option<ObjectRef>,
    pub scope: Option<ScopeSpec>,
    pub level: Option<SecurityLevel>,
    pub seq: u64,
    pub dec: Option<EnforcementDecision>,
    pub res: ResultStatus,
    pub event: EvidenceEvent,
    pub request_digest: Option<String>,
    pub grant_id: Option<String>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainHead {
    pub count: u64,
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub valid: bool,
    pub records: u64,
    pub head_hash: String,
    /// Index of the first record that fails hash or link verification.
    pub first_break: Option<u64>,
    pub break_reason: Option<String>,
    pub lifecycle_violations: Vec<String>,
    /// Lifecycles still waiting for a terminal record, as `sid#seq`.
    pub open_lifecycles: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum EvidenceError {
    #[error("evidence i/o: {0}")]
    Io(#[from] io::Error),
}

/// In-memory chain mirrored to an append-only file.
#[derive(Debug)]
pub struct EvidenceLog {
    records: Vec<EvidenceRecord>,
    file: Option<(PathBuf, File)>,
}

impl EvidenceLog {
    pub fn in_memory() -> Self {
        Self {
            records: Vec::new(),
            file: None,
        }
    }

    /// Starts a fresh log file, truncating any previous content.
    pub fn create(path: &Path) -> Result<Self, EvidenceError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).write(true).truncate(true).open(path)?;
        Ok(Self {
            records: Vec::new(),
            file: Some((path.to_path_buf(), file)),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.file.as_ref().map(|(p, _)| p.as_path())
    }

    pub fn records(&self) -> &[EvidenceRecord] {
        &self.records
    }

    pub fn head(&self) -> ChainHead {
        ChainHead {
            count: self.records.len() as u64,
            hash: self
                .records
                .last()
                .map(|r| r.record_hash.clone())
                .unwrap_or_else(|| GENESIS_HASH.to_string()),
        }
    }

    pub fn append(&mut self, draft: RecordDraft, wall: String) -> Result<EvidenceRecord, EvidenceError> {
        let head = self.head();
        let mut record = EvidenceRecord {
            sid: draft.sid,
            act: draft.act,
            obj: draft.obj,
            scope: draft.scope,
            level: draft.level,
            seq: draft.seq,
            dec: draft.dec,
            ts: Timestamp {
                wall,
                counter: head.count + 1,
            },
            res: draft.res,
            event: draft.event,
            request_digest: draft.request_digest,
            grant_id: draft.grant_id,
            note: draft.note,
            prev_hash: head.hash,
            record_hash: String::new(),
        };
        record.record_hash = record.compute_hash();
        if let Some((_, f)) = &mut self.file {
            let mut line = record.to_line();
            line.push(b'\n');
            f.write_all(&line)?;
            f.flush()?;
        }
        self.records.push(record.clone());
        Ok(record)
    }

    /// Records with `ts.counter > after`.
    pub fn after(&self, after: u64) -> &[EvidenceRecord] {
        let start = (after as usize).min(self.records.len());
        &self.records[start..]
    }
}

/// Reads an evidence file into raw lines.
pub fn read_lines(path: &Path) -> Result<Vec<String>, EvidenceError> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.is_empty() {
            lines.push(line);
        }
    }
    Ok(lines)
}

/// Verifies stored lines. Each line must parse and be in canonical form.
pub fn verify_lines(lines: &[String], expected_head: Option<&ChainHead>) -> VerificationReport {
    let mut parsed = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        let rec = serde_json::from_str::<EvidenceRecord>(line)
            .ok()
            .filter(|r| r.to_line() == line.as_bytes());
        match rec {
            Some(r) => parsed.push(r),
            None => {
                let mut report = verify_chain(&parsed, None);
                report.valid = false;
                report.first_break = Some(i as u64);
                report.break_reason = Some("record is not a canonical evidence record".into());
                report.records = lines.len() as u64;
                return report;
            }
        }
    }
    verify_chain(&parsed, expected_head)
}

/// Recomputes every hash and link, then checks per-request lifecycles.
pub fn verify_chain(records: &[EvidenceRecord], expected_head: Option<&ChainHead>) -> VerificationReport {
    let mut first_break = None;
    let mut break_reason = None;
    let mut prev = GENESIS_HASH.to_string();
    for (i, r) in records.iter().enumerate() {
        let reason = if r.prev_hash != prev {
            Some("prev_hash does not link to predecessor")
        } else if r.compute_hash() != r.record_hash {
            Some("record_hash mismatch")
        } else if r.ts.counter != i as u64 + 1 {
            Some("event counter out of order")
        } else {
            None
        };
        if let Some(reason) = reason {
            first_break = Some(i as u64);
            break_reason = Some(reason.to_string());
            break;
        }
        prev = r.record_hash.clone();
    }
    if first_break.is_none() {
        if let Some(head) = expected_head {
            if head.count != records.len() as u64 || head.hash != prev {
                let at = head.count.min(records.len() as u64);
                first_break = Some(at);
                break_reason = Some(format!(
                    "chain head mismatch: expected {} records ending {}, found {}",
                    head.count,
                    head.hash,
                    records.len()
                ));
            }
        }
    }

    let (lifecycle_violations, open_lifecycles) = check_lifecycles(records);
    VerificationReport {
        valid: first_break.is_none() && lifecycle_violations.is_empty(),
        records: records.len() as u64,
        head_hash: prev,
        first_break,
        break_reason,
        lifecycle_violations,
        open_lifecycles,
    }
}

fn check_lifecycles(records: &[EvidenceRecord]) -> (Vec<String>, Vec<String>) {
    let mut by_key: BTreeMap<(String, u64), Vec<&EvidenceRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.event != EvidenceEvent::Rejection) {
        by_key.entry(r.lifecycle_key()).or_default().push(r);
    }
    let mut violations = Vec::new();
    let mut open = Vec::new();
    for ((sid, seq), recs) in by_key {
        let key = format!("{sid}#{seq}");
        if recs[0].event != EvidenceEvent::Decision {
            violations.push(format!("{key}: lifecycle does not start with a decision"));
            continue;
        }
        if recs[0].dec == Some(EnforcementDecision::Deny) && recs.len() > 1 {
            violations.push(format!("{key}: denied request has later records"));
            continue;
        }
        let terminals: Vec<usize> = recs
            .iter()
            .enumerate()
            .filter(|(_, r)| r.res.is_terminal())
            .map(|(i, _)| i)
            .collect();
        match terminals.as_slice() {
            [] => open.push(key),
            [t] if *t == recs.len() - 1 => {}
            [_] => violations.push(format!("{key}: records after terminal")),
            _ => violations.push(format!("{key}: {} terminal records", terminals.len())),
        }
    }
    (violations, open)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn draft(seq: u64, event: EvidenceEvent, res: ResultStatus) -> RecordDraft {
        RecordDraft {
            sid: "s".into(),
            act: Some(Action::Write),
            obj: Some(ObjectRef::path("/workspace/a")),
            scope: Some(ScopeSpec::paths(["/workspace"])),
            level: Some(SecurityLevel::L0),
            seq,
            dec: Some(EnforcementDecision::Ree),
            res,
            event,
            request_digest: None,
            grant_id: None,
            note: None,
        }
    }

    fn sample_log() -> EvidenceLog {
        let mut log = EvidenceLog::in_memory();
        for seq in 1..=3 {
            log.append(draft(seq, EvidenceEvent::Decision, ResultStatus::Pending), "t".into())
                .unwrap();
            log.append(
                draft(seq, EvidenceEvent::Completion, ResultStatus::Completed),
                "t".into(),
            )
            .unwrap();
        }
        log
    }

    #[test]
    fn genesis_links_to_zero_hash() {
        let log = sample_log();
        assert_eq!(log.records()[0].prev_hash, GENESIS_HASH);
        assert_eq!(log.records()[1].prev_hash, log.records()[0].record_hash);
        let report = verify_chain(log.records(), Some(&log.head()));
        assert!(report.valid, "{report:?}");
        assert!(report.open_lifecycles.is_empty());
    }

    #[test]
    fn mutation_and_deletion_break_at_index() {
        let log = sample_log();
        let mut recs = log.records().to_vec();
        recs[2].note = Some("edited".into());
        assert_eq!(verify_chain(&recs, None).first_break, Some(2));

        let mut recs = log.records().to_vec();
        recs.remove(3);
        assert_eq!(verify_chain(&recs, None).first_break, Some(3));

        let mut recs = log.records().to_vec();
        recs.pop();
        let report = verify_chain(&recs, Some(&log.head()));
        assert_eq!(report.first_break, Some(5));
        assert!(!report.valid);
    }

    #[test]
    fn lifecycle_rules() {
        let mut log = EvidenceLog::in_memory();
        log.append(draft(1, EvidenceEvent::Decision, ResultStatus::Pending), "t".into())
            .unwrap();
        let r = verify_chain(log.records(), None);
        assert!(r.valid);
        assert_eq!(r.open_lifecycles, vec!["s#1".to_string()]);

        log.append(draft(1, EvidenceEvent::Completion, ResultStatus::Completed), "t".into())
            .unwrap();
        log.append(draft(1, EvidenceEvent::Completion, ResultStatus::Failed), "t".into())
            .unwrap();
        let r = verify_chain(log.records(), None);
        assert!(!r.valid);
        assert_eq!(r.first_break, None);
        assert_eq!(r.lifecycle_violations.len(), 1);

        let mut log = EvidenceLog::in_memory();
        let mut d = draft(1, EvidenceEvent::Decision, ResultStatus::Denied);
        d.dec = Some(EnforcementDecision::Deny);
        log.append(d, "t".into()).unwrap();
        log.append(draft(1, EvidenceEvent::Completion, ResultStatus::Completed), "t".into())
            .unwrap();
        assert!(!verify_chain(log.records(), None).valid);
    }

    #[test]
    fn file_round_trip_and_byte_flip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("evidence.jsonl");
        let mut log = EvidenceLog::create(&path).unwrap();
        for seq in 1..=2 {
            log.append(draft(seq, EvidenceEvent::Decision, ResultStatus::Pending), "t".into())
                .unwrap();
            log.append(
                draft(seq, EvidenceEvent::Completion, ResultStatus::Completed),
                "t".into(),
            )
            .unwrap();
        }
        let lines = read_lines(&path).unwrap();
        assert!(verify_lines(&lines, Some(&log.head())).valid);

        let mut bad = lines.clone();
        let mut bytes = bad[1].clone().into_bytes();
        let pos = bytes.iter().position(|&b| b == b'w').unwrap();
        bytes[pos] = b'W';
        bad[1] = String::from_utf8(bytes).unwrap();
        assert_eq!(verify_lines(&bad, None).first_break, Some(1));
    }
}
