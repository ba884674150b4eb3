use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::FaultSpec;
use crate::protocol::{Activity, Payload, Phase, ProtocolKind};
use crate::AgentId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    RecipientCrashed,
    Fault,
    Partition,
    Dissolution,
}

/// One trace line. Field order is the serialization order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum TraceRecord {
    Sent {
        tick: u64,
        id: u64,
        protocol: ProtocolKind,
        from: AgentId,
        to: AgentId,
        round: u64,
        deliver_at: u64,
        elements: usize,
        payload: Payload,
    },
    Delivered {
        tick: u64,
        id: u64,
    },
    Dropped {
        tick: u64,
        id: u64,
        reason: DropReason,
    },
    Activity {
        tick: u64,
        agent: AgentId,
        activity: Activity,
    },
    Phase {
        tick: u64,
        agent: AgentId,
        phase: Phase,
    },
    Fault {
        tick: u64,
        fault: FaultSpec,
    },
    RoundCompleted {
        tick: u64,
        round: u64,
    },
    Metric {
        tick: u64,
        agent: AgentId,
        round: u64,
        name: String,
        value: f64,
    },
    ModelUpdated {
        tick: u64,
        agent: AgentId,
        round: u64,
        fingerprint: u64,
    },
    DeadlockGuard {
        tick: u64,
        agent: AgentId,
        round: u64,
    },
    Note {
        tick: u64,
        agent: AgentId,
        text: String,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn push(&mut self, record: TraceRecord) {
        self.records.push(record);
    }

    /// Newline-delimited JSON, one record per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let line = serde_json::to_string(r).expect("trace records serialize");
            let _ = writeln!(out, "{line}");
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(Self { records })
    }

    /// Every sent envelope is delivered or dropped exactly once, never before it was sent.
    pub fn check_conservation(&self) -> Result<(), String> {
        let mut sent: BTreeMap<u64, u64> = BTreeMap::new();
        let mut settled: BTreeSet<u64> = BTreeSet::new();
        for r in &self.records {
            match r {
                TraceRecord::Sent { id, tick, .. } => {
                    if sent.insert(*id, *tick).is_some() {
                        return Err(format!("envelope {id} sent twice"));
                    }
                }
                TraceRecord::Delivered { id, tick } | TraceRecord::Dropped { id, tick, .. } => {
                    let Some(&at) = sent.get(id) else {
                        return Err(format!("envelope {id} settled before it was sent"));
                    };
                    if matches!(r, TraceRecord::Delivered { .. }) && *tick <= at {
                        return Err(format!("envelope {id} delivered at {tick}, sent at {at}"));
                    }
                    if !settled.insert(*id) {
                        return Err(format!("envelope {id} settled twice"));
                    }
                }
                _ => {}
            }
        }
        if let Some(id) = sent.keys().find(|id| !settled.contains(id)) {
            return Err(format!("envelope {id} never settled"));
        }
        Ok(())
    }

    fn sent_index(&self) -> BTreeMap<u64, &TraceRecord> {
        self.records
            .iter()
            .filter_map(|r| match r {
                TraceRecord::Sent { id, .. } => Some((*id, r)),
                _ => None,
            })
            .collect()
    }

    /// Delivered envelopes per protocol.
    pub fn delivered_by_protocol(&self) -> BTreeMap<ProtocolKind, u64> {
        let index = self.sent_index();
        let mut counts = BTreeMap::new();
        for r in &self.records {
            if let TraceRecord::Delivered { id, .. } = r {
                if let Some(TraceRecord::Sent { protocol, .. }) = index.get(id) {
                    *counts.entry(*protocol).or_insert(0) += 1;
                }
            }
        }
        counts
    }

    pub fn sent_by_protocol(&self) -> BTreeMap<ProtocolKind, (u64, u64)> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            if let TraceRecord::Sent { protocol, elements, .. } = r {
                let e = counts.entry(*protocol).or_insert((0, 0));
                e.0 += 1;
                e.1 += *elements as u64;
            }
        }
        counts
    }

    pub fn count(&self, pred: impl Fn(&TraceRecord) -> bool) -> usize {
        self.records.iter().filter(|r| pred(r)).count()
    }
}
