use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ConsumeError {
    #[error("grant already consumed")]
    Replayed,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Single-use grant ledger, optionally journaled so consumption survives a
/// restart.
#[derive(Debug)]
pub struct ConsumptionLedger {
    consumed: HashSet<String>,
    journal: Option<File>,
}

impl ConsumptionLedger {
    pub fn in_memory() -> Self {
        Self {
            consumed: HashSet::new(),
            journal: None,
        }
    }

    pub fn open(path: &Path) -> io::Result<Self> {
        let mut consumed = HashSet::new();
        if path.exists() {
            for line in BufReader::new(File::open(path)?).lines() {
                let line = line?;
                if !line.is_empty() {
                    consumed.insert(line);
                }
            }
        }
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let journal = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            consumed,
            journal: Some(journal),
        })
    }

    pub fn is_consumed(&self, grant_id: &str) -> bool {
        self.consumed.contains(grant_id)
    }

    /// Journals before marking, so a crash can only over-consume.
    pub fn consume(&mut self, grant_id: &str) -> Result<(), ConsumeError> {
        if self.consumed.contains(grant_id) {
            return Err(ConsumeError::Replayed);
        }
        if let Some(j) = &mut self.journal {
            writeln!(j, "{grant_id}")?;
            j.sync_data()?;
        }
        self.consumed.insert(grant_id.to_string());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.consumed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.consumed.is_empty()
    }
}
