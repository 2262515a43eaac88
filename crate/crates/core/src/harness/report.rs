//! Report files, schema version 1.
//!
//! A report directory holds:
//!
//! * `sessions.jsonl`: one [`SessionLogEntry`] per line, in log order.
//! * `summary.json`: a [`Summary`].
//! * `per_day.csv`: `day,entries,successes,failures,success_ratio`.
//! * `groups.csv`: `group,users,entries,overall,before_takedown,during_takedown`.
//!
//! Ratios are absent (empty in CSV, `null` in JSON) when no session
//! qualifies. Nothing in a report depends on wall-clock time, so the same
//! scenario always produces the same bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::{day_series, impact_ratio, tally, Action, DayPoint, Grouping, ImpactCell, SessionLogEntry, Tally};
use super::scenario::{Scenario, Window};
use super::world::{RunResult, RunStats};
use super::HarnessError;
use crate::chord::guard::{expected_runs, monte_carlo, GuardParams};
use crate::Millis;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub users: u64,
    pub entries: u64,
    pub overall: Option<f64>,
    pub before_takedown: Option<f64>,
    pub during_takedown: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Impact {
    pub by_mirror_count: BTreeMap<u32, ImpactCell>,
    pub by_rank: BTreeMap<u32, ImpactCell>,
    pub by_device_count: BTreeMap<u32, ImpactCell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuardSummary {
    pub r_total: usize,
    pub m: usize,
    pub p_on: f64,
    pub trials: usize,
    pub counts: Vec<u64>,
    pub timeouts: u64,
    pub mean_runs: f64,
    pub expected_runs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    /// SHA-256 of the compact scenario JSON.
    pub scenario_hash: String,
    /// SHA-256 of `sessions.jsonl`.
    pub log_hash: String,
    pub seed: u64,
    pub duration_ms: Millis,
    pub takedown: Option<Window>,
    pub entries: u64,
    pub overall: Option<f64>,
    pub update: Option<f64>,
    pub posting: Option<f64>,
    pub before_takedown: Option<f64>,
    pub during_takedown: Option<f64>,
    pub per_day: Vec<DayPoint>,
    /// By the scenario's user groups; users without one are under `""`.
    pub groups: BTreeMap<String, GroupStats>,
    /// `"none"`: one device and no mirrors. `"some"`: everyone else.
    pub replica_classes: BTreeMap<String, GroupStats>,
    pub impact: Impact,
    pub relay_bytes_total: u64,
    pub relay_bytes: Vec<u64>,
    pub detections: u64,
    pub stats: RunStats,
    pub guard: Option<GuardSummary>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sessions_jsonl(log: &[SessionLogEntry]) -> String {
    let mut out = String::new();
    for e in log {
        out.push_str(&serde_json::to_string(e).expect("log entry serialises"));
        out.push('\n');
    }
    out
}

pub fn parse_sessions(text: &str) -> Result<Vec<SessionLogEntry>, HarnessError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| HarnessError::Parse(format!("line {}: {e}", i + 1))))
        .collect()
}

fn group_stats<'a>(entries: impl Iterator<Item = &'a SessionLogEntry> + Clone, users: u64, takedown: Option<Window>) -> GroupStats {
    let all: Tally = tally(entries.clone());
    let (before, during) = match takedown {
        Some(w) => (
            tally(entries.clone().filter(|e| e.start_ms < w.start_ms)).ratio(),
            tally(entries.filter(|e| w.contains(e.start_ms))).ratio(),
        ),
        None => (all.ratio(), None),
    };
    GroupStats {
        users,
        entries: all.entries,
        overall: all.ratio(),
        before_takedown: before,
        during_takedown: during,
    }
}

/// Computes the summary of a finished run.
pub fn summarize(scenario: &Scenario, result: &RunResult) -> Result<Summary, HarnessError> {
    let log = &result.log;
    let takedown = scenario.takedown;
    let overall = group_stats(log.iter(), scenario.users.len() as u64, takedown);

    let mut groups = BTreeMap::new();
    let mut labels: BTreeMap<String, Vec<&str>> = BTreeMap::new();
    for u in &scenario.users {
        labels.entry(u.group.clone().unwrap_or_default()).or_default().push(&u.name);
    }
    for (label, members) in &labels {
        let stats = group_stats(
            log.iter().filter(|e| members.contains(&e.target.as_str())),
            members.len() as u64,
            takedown,
        );
        groups.insert(label.clone(), stats);
    }

    let mut replica_classes = BTreeMap::new();
    for (class, want) in [("none", false), ("some", true)] {
        let members: Vec<&str> = scenario
            .users
            .iter()
            .filter(|u| (u.devices.len() > 1 || !u.mirrors.is_empty()) == want)
            .map(|u| u.name.as_str())
            .collect();
        let stats = group_stats(
            log.iter().filter(|e| members.contains(&e.target.as_str())),
            members.len() as u64,
            takedown,
        );
        replica_classes.insert(class.to_string(), stats);
    }

    let guard = match scenario.guard {
        Some(g) => {
            let params = GuardParams::new(g.r_total, g.m, g.p_on);
            let mc = monte_carlo(&params, g.trials, scenario.seed, g.max_runs)?;
            Some(GuardSummary {
                r_total: g.r_total,
                m: g.m,
                p_on: g.p_on,
                trials: mc.trials,
                counts: mc.counts,
                timeouts: mc.timeouts,
                mean_runs: mc.mean_runs,
                expected_runs: expected_runs(&params)?,
            })
        }
        None => None,
    };

    Ok(Summary {
        schema_version: REPORT_SCHEMA_VERSION,
        scenario_hash: sha256_hex(&serde_json::to_vec(scenario).expect("scenario serialises")),
        log_hash: sha256_hex(sessions_jsonl(log).as_bytes()),
        seed: scenario.seed,
        duration_ms: scenario.duration_ms,
        takedown,
        entries: overall.entries,
        overall: overall.overall,
        update: tally(log.iter().filter(|e| e.action == Action::Update)).ratio(),
        posting: tally(log.iter().filter(|e| e.action == Action::Posting)).ratio(),
        before_takedown: overall.before_takedown,
        during_takedown: overall.during_takedown,
        per_day: day_series(log, scenario.days()),
        groups,
        replica_classes,
        impact: Impact {
            by_mirror_count: impact_ratio(log, Grouping::MirrorCount, &result.meta),
            by_rank: impact_ratio(log, Grouping::Rank, &result.meta),
            by_device_count: impact_ratio(log, Grouping::DeviceCount, &result.meta),
        },
        relay_bytes_total: result.stats.relay_bytes.iter().sum(),
        relay_bytes: result.stats.relay_bytes.clone(),
        detections: result.stats.detections,
        stats: result.stats.clone(),
        guard,
    })
}

fn ratio_cell(r: Option<f64>) -> String {
    r.map(|v| format!("{v:.6}")).unwrap_or_default()
}

pub fn per_day_csv(summary: &Summary) -> String {
    let mut out = String::from("day,entries,successes,failures,success_ratio\n");
    for d in &summary.per_day {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            d.day,
            d.entries,
            d.successes,
            d.failures,
            ratio_cell(d.success_ratio)
        );
    }
    out
}

pub fn groups_csv(summary: &Summary) -> String {
    let mut out = String::from("group,users,entries,overall,before_takedown,during_takedown\n");
    for (name, g) in &summary.groups {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            name,
            g.users,
            g.entries,
            ratio_cell(g.overall),
            ratio_cell(g.before_takedown),
            ratio_cell(g.during_takedown)
        );
    }
    out
}

/// Writes the four report files into `dir`, creating it if needed.
pub fn write_report(dir: &Path, scenario: &Scenario, result: &RunResult) -> Result<Summary, HarnessError> {
    let summary = summarize(scenario, result)?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("sessions.jsonl"), sessions_jsonl(&result.log))?;
    let mut json = serde_json::to_string_pretty(&summary).expect("summary serialises");
    json.push('\n');
    fs::write(dir.join("summary.json"), json)?;
    fs::write(dir.join("per_day.csv"), per_day_csv(&summary))?;
    fs::write(dir.join("groups.csv"), groups_csv(&summary))?;
    Ok(summary)
}

pub fn read_summary(path: &Path) -> Result<Summary, HarnessError> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Parse(e.to_string()))
}
