use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::netsim::{FaultSpec, RunStatus, Sim, TraceRecord};
use crate::protocol::ProtocolKind;
use crate::AgentId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub round: u64,
    pub agent: AgentId,
    pub train_loss: Option<f64>,
    pub heldout_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultEvent {
    pub tick: u64,
    pub fault: FaultSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: String,
    pub seed: u64,
    pub status: RunStatus,
    pub rounds_completed: u64,
    pub ticks: u64,
    pub reason: Option<String>,
    /// One row per `(round, agent)`; training losses count toward the round they complete.
    pub losses: Vec<LossRow>,
    pub messages_sent: BTreeMap<ProtocolKind, u64>,
    pub messages_delivered: BTreeMap<ProtocolKind, u64>,
    pub messages_dropped: BTreeMap<ProtocolKind, u64>,
    /// Payload scalars sent, the communication-cost proxy.
    pub payload_elements: BTreeMap<ProtocolKind, u64>,
    pub payload_elements_total: u64,
    pub idle_ticks: BTreeMap<AgentId, u64>,
    pub rounds_to_threshold: Option<u64>,
    pub fault_events: Vec<FaultEvent>,
    pub deadlock_guard_trips: u64,
    pub non_finite_losses: u64,
    pub wall_time_ms: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Jsonl,
}

impl MetricsReport {
    /// Derives every count from the trace of a finished run.
    pub fn from_sim(scenario: &str, seed: u64, sim: &Sim, threshold: Option<f64>) -> Self {
        let outcome = sim.outcome().cloned();
        let mut rows: BTreeMap<(u64, AgentId), LossRow> = BTreeMap::new();
        let mut sent_protocol: BTreeMap<u64, ProtocolKind> = BTreeMap::new();
        let mut sent = BTreeMap::new();
        let mut delivered = BTreeMap::new();
        let mut dropped = BTreeMap::new();
        let mut elements = BTreeMap::new();
        let mut fault_events = Vec::new();
        let mut guard = 0;
        let mut non_finite = 0;
        for r in &sim.trace.records {
            match r {
                TraceRecord::Sent { id, protocol, elements: e, .. } => {
                    sent_protocol.insert(*id, *protocol);
                    *sent.entry(*protocol).or_insert(0) += 1;
                    *elements.entry(*protocol).or_insert(0) += *e as u64;
                }
                TraceRecord::Delivered { id, .. } => {
                    *delivered.entry(sent_protocol[id]).or_insert(0) += 1;
                }
                TraceRecord::Dropped { id, .. } => {
                    *dropped.entry(sent_protocol[id]).or_insert(0) += 1;
                }
                TraceRecord::Metric {
                    agent, round, name, value, ..
                } => {
                    if !value.is_finite() {
                        non_finite += 1;
                    }
                    let (round, train) = match name.as_str() {
                        "train_loss" => (round + 1, true),
                        _ => (*round, false),
                    };
                    let row = rows.entry((round, *agent)).or_insert(LossRow {
                        round,
                        agent: *agent,
                        train_loss: None,
                        heldout_loss: None,
                    });
                    if train {
                        row.train_loss = Some(*value);
                    } else {
                        row.heldout_loss = Some(*value);
                    }
                }
                TraceRecord::Fault { tick, fault } => fault_events.push(FaultEvent {
                    tick: *tick,
                    fault: fault.clone(),
                }),
                TraceRecord::DeadlockGuard { .. } => guard += 1,
                _ => {}
            }
        }
        let losses: Vec<LossRow> = rows.into_values().collect();
        let rounds_to_threshold = threshold.and_then(|t| {
            let mut per_round: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
            for row in &losses {
                if let Some(h) = row.heldout_loss {
                    per_round.entry(row.round).or_default().push(h);
                }
            }
            per_round
                .into_iter()
                .find(|(_, v)| v.iter().sum::<f64>() / (v.len() as f64) < t)
                .map(|(r, _)| r)
        });
        Self {
            scenario: scenario.to_string(),
            seed,
            status: outcome.as_ref().map_or(RunStatus::TickLimit, |o| o.status),
            rounds_completed: sim.rounds(),
            ticks: sim.tick,
            reason: outcome.and_then(|o| o.reason),
            losses,
            payload_elements_total: elements.values().sum(),
            messages_sent: sent,
            messages_delivered: delivered,
            messages_dropped: dropped,
            payload_elements: elements,
            idle_ticks: sim.agents.iter().map(|a| (a.id, a.idle_ticks)).collect(),
            rounds_to_threshold,
            fault_events,
            deadlock_guard_trips: guard,
            non_finite_losses: non_finite,
            wall_time_ms: None,
        }
    }

    /// Totals as `(key, value)` rows; the same rows back both output formats.
    pub fn summary_rows(&self) -> Vec<(String, String)> {
        let mut rows = vec![
            ("scenario".to_string(), self.scenario.clone()),
            ("seed".into(), self.seed.to_string()),
            ("status".into(), json_str(&self.status)),
            ("rounds_completed".into(), self.rounds_completed.to_string()),
            ("ticks".into(), self.ticks.to_string()),
            ("reason".into(), self.reason.clone().unwrap_or_default()),
        ];
        for p in ProtocolKind::ALL {
            let get = |m: &BTreeMap<ProtocolKind, u64>| m.get(&p).copied().unwrap_or(0).to_string();
            rows.push((format!("sent.{}", p.name()), get(&self.messages_sent)));
            rows.push((format!("delivered.{}", p.name()), get(&self.messages_delivered)));
            rows.push((format!("dropped.{}", p.name()), get(&self.messages_dropped)));
            rows.push((format!("elements.{}", p.name()), get(&self.payload_elements)));
        }
        rows.push(("payload_elements_total".into(), self.payload_elements_total.to_string()));
        for (id, idle) in &self.idle_ticks {
            rows.push((format!("idle_ticks.{id}"), idle.to_string()));
        }
        rows.push((
            "rounds_to_threshold".into(),
            self.rounds_to_threshold.map(|r| r.to_string()).unwrap_or_default(),
        ));
        rows.push(("fault_events".into(), self.fault_events.len().to_string()));
        rows.push(("deadlock_guard_trips".into(), self.deadlock_guard_trips.to_string()));
        rows.push(("non_finite_losses".into(), self.non_finite_losses.to_string()));
        rows.push((
            "wall_time_ms".into(),
            self.wall_time_ms.map(|w| w.to_string()).unwrap_or_default(),
        ));
        rows
    }
}

fn json_str<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        Ok(other) => other.to_string(),
        Err(_) => String::new(),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Writes `losses.*` and `summary.*` into `dir`, returning the paths written.
pub fn emit_report(report: &MetricsReport, format: ReportFormat, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let (losses_path, summary_path) = match format {
        ReportFormat::Csv => (dir.join("losses.csv"), dir.join("summary.csv")),
        ReportFormat::Jsonl => (dir.join("losses.jsonl"), dir.join("summary.jsonl")),
    };
    let (losses, summary) = match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["round", "agent", "train_loss", "heldout_loss"]).map_err(|e| io_err(&losses_path, e))?;
            for r in &report.losses {
                w.write_record([r.round.to_string(), r.agent.to_string(), opt(r.train_loss), opt(r.heldout_loss)])
                    .map_err(|e| io_err(&losses_path, e))?;
            }
            let losses = w.into_inner().map_err(|e| io_err(&losses_path, e))?;
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["key", "value"]).map_err(|e| io_err(&summary_path, e))?;
            for (k, v) in report.summary_rows() {
                w.write_record([k, v]).map_err(|e| io_err(&summary_path, e))?;
            }
            (losses, w.into_inner().map_err(|e| io_err(&summary_path, e))?)
        }
        ReportFormat::Jsonl => {
            let mut losses = String::new();
            for r in &report.losses {
                losses.push_str(&serde_json::to_string(r).expect("rows serialize"));
                losses.push('\n');
            }
            let mut summary = String::new();
            for (key, value) in report.summary_rows() {
                let line = serde_json::json!({ "key": key, "value": value });
                summary.push_str(&line.to_string());
                summary.push('\n');
            }
            (losses.into_bytes(), summary.into_bytes())
        }
    };
    fs::write(&losses_path, losses).map_err(|e| io_err(&losses_path, e))?;
    fs::write(&summary_path, summary).map_err(|e| io_err(&summary_path, e))?;
    Ok(vec![losses_path, summary_path])
}
