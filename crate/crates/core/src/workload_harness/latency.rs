//! Phase timings and the latency breakdown report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub const LATENCY_SCHEMA: &str = "opgate.latency/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Baseline,
    Protected,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "protected" => Ok(Mode::Protected),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

/// Durations in microseconds. Baseline rows carry the whole duration in
/// `total_us` with the phases left at zero.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub task_id: String,
    pub endpoint: Option<String>,
    pub mode: Mode,
    pub denied: bool,
    pub authorize_us: u64,
    pub execute_us: u64,
    pub complete_us: u64,
    pub total_us: u64,
}

impl PhaseTiming {
    pub fn key(&self) -> (String, Option<String>) {
        (self.task_id.clone(), self.endpoint.clone())
    }
}

fn median(mut xs: Vec<u64>) -> u64 {
    if xs.is_empty() {
        return 0;
    }
    xs.sort_unstable();
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2
    }
}

/// Per-phase medians over repeated measurements of the same row.
pub fn median_timings(samples: &[PhaseTiming]) -> Vec<PhaseTiming> {
    let mut groups: BTreeMap<(String, Option<String>, Mode), Vec<&PhaseTiming>> = BTreeMap::new();
    for s in samples {
        groups
            .entry((s.task_id.clone(), s.endpoint.clone(), s.mode))
            .or_default()
            .push(s);
    }
    groups
        .into_iter()
        .map(|((task_id, endpoint, mode), g)| PhaseTiming {
            task_id,
            endpoint,
            mode,
            denied: g.iter().any(|t| t.denied),
            authorize_us: median(g.iter().map(|t| t.authorize_us).collect()),
            execute_us: median(g.iter().map(|t| t.execute_us).collect()),
            complete_us: median(g.iter().map(|t| t.complete_us).collect()),
            total_us: median(g.iter().map(|t| t.total_us).collect()),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub task_id: String,
    pub endpoint: Option<String>,
    pub denied: bool,
    pub authorize_us: u64,
    pub execute_us: u64,
    pub complete_us: u64,
    pub protected_total_us: u64,
    pub baseline_us: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyDocument {
    pub schema: String,
    pub note: String,
    pub rows: Vec<LatencyRow>,
}

pub const MACHINE_LOCAL_NOTE: &str =
    "durations are machine-local microsecond medians from a software-emulated plane; not comparable to hardware TEE measurements";

/// Stacked breakdown per task next to its baseline duration.
pub fn emit_latency_report(timings: &[PhaseTiming]) -> (String, LatencyDocument) {
    let medians = median_timings(timings);
    let baseline: BTreeMap<_, _> = medians
        .iter()
        .filter(|t| t.mode == Mode::Baseline)
        .map(|t| (t.key(), t.total_us))
        .collect();
    let mut rows: Vec<LatencyRow> = medians
        .iter()
        .filter(|t| t.mode == Mode::Protected)
        .map(|t| LatencyRow {
            task_id: t.task_id.clone(),
            endpoint: t.endpoint.clone(),
            denied: t.denied,
            authorize_us: t.authorize_us,
            execute_us: t.execute_us,
            complete_us: t.complete_us,
            protected_total_us: t.total_us,
            baseline_us: baseline.get(&t.key()).copied(),
        })
        .collect();
    // Baseline-only rows.
    for t in medians.iter().filter(|t| t.mode == Mode::Baseline) {
        if !rows.iter().any(|r| (r.task_id.clone(), r.endpoint.clone()) == t.key()) {
            rows.push(LatencyRow {
                task_id: t.task_id.clone(),
                endpoint: t.endpoint.clone(),
                denied: false,
                authorize_us: 0,
                execute_us: 0,
                complete_us: 0,
                protected_total_us: 0,
                baseline_us: Some(t.total_us),
            });
        }
    }
    rows.sort_by(|a, b| (&a.task_id, &a.endpoint).cmp(&(&b.task_id, &b.endpoint)));

    let mut table = String::new();
    let _ = writeln!(
        table,
        "{:<6} {:<10} {:>11} {:>11} {:>11} {:>11} {:>11}",
        "task", "endpoint", "authorize", "execute", "complete", "protected", "baseline"
    );
    for r in &rows {
        let cell = |v: u64| format!("{v}us");
        let _ = writeln!(
            table,
            "{:<6} {:<10} {:>11} {:>11} {:>11} {:>11} {:>11}{}",
            r.task_id,
            r.endpoint.as_deref().unwrap_or("-"),
            cell(r.authorize_us),
            cell(r.execute_us),
            cell(r.complete_us),
            cell(r.protected_total_us),
            r.baseline_us.map(cell).unwrap_or_else(|| "-".into()),
            if r.denied { "  denied" } else { "" },
        );
    }
    let _ = writeln!(table, "({MACHINE_LOCAL_NOTE})");
    let doc = LatencyDocument {
        schema: LATENCY_SCHEMA.to_string(),
        note: MACHINE_LOCAL_NOTE.to_string(),
        rows,
    };
    (table, doc)
}

/// Structural properties of a protected-mode timing set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyStructure {
    /// Allowed remote rows whose execute phase exceeds authorize and complete.
    pub remote_execute_dominant: Vec<(String, String, bool)>,
    pub denied_remote_total_us: u64,
    pub denied_local_authorize_us: u64,
    /// max/min of the two denied medians, in thousandths.
    pub denied_ratio_milli: u64,
    /// Per allowed remote task: (task, slow execute, fast execute).
    pub slow_vs_fast_execute: Vec<(String, u64, u64)>,
}

impl LatencyStructure {
    pub fn execute_dominant(&self) -> bool {
        !self.remote_execute_dominant.is_empty() && self.remote_execute_dominant.iter().all(|(_, _, ok)| *ok)
    }

    pub fn denied_within_2x(&self) -> bool {
        self.denied_local_authorize_us > 0 && self.denied_remote_total_us > 0 && self.denied_ratio_milli <= 2000
    }

    pub fn slow_exceeds_fast(&self) -> bool {
        !self.slow_vs_fast_execute.is_empty() && self.slow_vs_fast_execute.iter().all(|(_, s, f)| s > f)
    }
}

/// `slow` and `fast` name the endpoints running the slow-setup and
/// fast-verify profiles.
pub fn latency_structure(timings: &[PhaseTiming], slow: &str, fast: &str) -> LatencyStructure {
    let m: Vec<_> = median_timings(timings)
        .into_iter()
        .filter(|t| t.mode == Mode::Protected)
        .collect();
    let remote_execute_dominant = m
        .iter()
        .filter(|t| t.endpoint.is_some() && !t.denied)
        .map(|t| {
            (
                t.task_id.clone(),
                t.endpoint.clone().unwrap_or_default(),
                t.execute_us > t.authorize_us && t.execute_us > t.complete_us,
            )
        })
        .collect();
    let denied_remote_total_us = median(
        m.iter()
            .filter(|t| t.denied && t.endpoint.is_some())
            .map(|t| t.total_us)
            .collect(),
    );
    let denied_local_authorize_us = median(
        m.iter()
            .filter(|t| t.denied && t.endpoint.is_none())
            .map(|t| t.authorize_us)
            .collect(),
    );
    let (hi, lo) = (
        denied_remote_total_us.max(denied_local_authorize_us),
        denied_remote_total_us.min(denied_local_authorize_us),
    );
    let denied_ratio_milli = (hi * 1000).checked_div(lo).unwrap_or(u64::MAX);
    let exec = |task: &str, ep: &str| {
        m.iter()
            .find(|t| t.task_id == task && t.endpoint.as_deref() == Some(ep))
            .map(|t| t.execute_us)
    };
    let mut slow_vs_fast_execute = Vec::new();
    let mut seen = Vec::new();
    for t in m.iter().filter(|t| t.endpoint.is_some() && !t.denied) {
        if seen.contains(&t.task_id) {
            continue;
        }
        seen.push(t.task_id.clone());
        if let (Some(s), Some(f)) = (exec(&t.task_id, slow), exec(&t.task_id, fast)) {
            slow_vs_fast_execute.push((t.task_id.clone(), s, f));
        }
    }
    LatencyStructure {
        remote_execute_dominant,
        denied_remote_total_us,
        denied_local_authorize_us,
        denied_ratio_milli,
        slow_vs_fast_execute,
    }
}
