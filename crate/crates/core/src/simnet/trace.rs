//! Deterministic run record: the event log, the canonical chain summary,
//! the epoch rosters and the aggregate metrics, plus the tab-separated text
//! format they serialize to. The same configuration always produces the
//! same bytes.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write as _;

use crate::chain::{BlockNumber, EpochNumber, SlotIndex, Timestamp, ViewNumber};
use crate::hash::Hash32;

/// Something a node (or the simulator itself) reports into the trace.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Observation {
    Produced {
        height: BlockNumber,
        view: ViewNumber,
        slot: SlotIndex,
        hash: Hash32,
    },
    Accepted {
        height: BlockNumber,
        view: ViewNumber,
        hash: Hash32,
        is_macro: bool,
    },
    Rejected {
        height: BlockNumber,
        view: ViewNumber,
        reason: &'static str,
    },
    ViewChangeSent {
        height: BlockNumber,
        target_view: ViewNumber,
        slot: SlotIndex,
    },
    /// A 2f+1 quorum of view-change messages completed locally.
    ViewQuorum {
        height: BlockNumber,
        target_view: ViewNumber,
    },
    /// The head moved off the previous head's branch, abandoning `depth`
    /// blocks.
    Reorg {
        depth: u64,
        old_head: Hash32,
        new_head: Hash32,
    },
    Finalized {
        height: BlockNumber,
        hash: Hash32,
    },
    ForkProofCreated {
        height: BlockNumber,
        view: ViewNumber,
        slot: SlotIndex,
    },
    /// A fork proof landed on the (locally selected) chain.
    ForkProofOnChain {
        offense_height: BlockNumber,
        slot: SlotIndex,
        in_block: BlockNumber,
    },
    /// Epoch settlement as seen by the archival node.
    Settled {
        epoch: EpochNumber,
        distributed: u64,
        burned: u64,
        expelled: u32,
    },
    TxIncluded {
        tx: Hash32,
        height: BlockNumber,
    },
    TxInjected {
        tx: Hash32,
    },
    AttackBlockWithheld {
        height: BlockNumber,
    },
    AttackBlockReleased {
        height: BlockNumber,
    },
    AttackVcsReleased {
        height: BlockNumber,
    },
    PartitionStart,
    PartitionEnd,
    /// Two conflicting finalized macro blocks were observed.
    SafetyViolation {
        height: BlockNumber,
    },
}

impl Observation {
    fn write_fields(&self, out: &mut String) {
        match self {
            Observation::Produced {
                height,
                view,
                slot,
                hash,
            } => {
                let _ = write!(out, "produced\t{height}\t{view}\t{slot}\t{}", hash.short());
            }
            Observation::Accepted {
                height,
                view,
                hash,
                is_macro,
            } => {
                let kind = if *is_macro { "macro" } else { "micro" };
                let _ = write!(out, "accepted\t{height}\t{view}\t{kind}\t{}", hash.short());
            }
            Observation::Rejected {
                height,
                view,
                reason,
            } => {
                let _ = write!(out, "rejected\t{height}\t{view}\t{reason}");
            }
            Observation::ViewChangeSent {
                height,
                target_view,
                slot,
            } => {
                let _ = write!(out, "view-change-sent\t{height}\t{target_view}\t{slot}");
            }
            Observation::ViewQuorum {
                height,
                target_view,
            } => {
                let _ = write!(out, "view-quorum\t{height}\t{target_view}");
            }
            Observation::Reorg {
                depth,
                old_head,
                new_head,
            } => {
                let _ = write!(
                    out,
                    "reorg\t{depth}\t{}\t{}",
                    old_head.short(),
                    new_head.short()
                );
            }
            Observation::Finalized { height, hash } => {
                let _ = write!(out, "finalized\t{height}\t{}", hash.short());
            }
            Observation::ForkProofCreated { height, view, slot } => {
                let _ = write!(out, "fork-proof-created\t{height}\t{view}\t{slot}");
            }
            Observation::ForkProofOnChain {
                offense_height,
                slot,
                in_block,
            } => {
                let _ = write!(
                    out,
                    "fork-proof-on-chain\t{offense_height}\t{slot}\t{in_block}"
                );
            }
            Observation::Settled {
                epoch,
                distributed,
                burned,
                expelled,
            } => {
                let _ = write!(out, "settled\t{epoch}\t{distributed}\t{burned}\t{expelled}");
            }
            Observation::TxIncluded { tx, height } => {
                let _ = write!(out, "tx-included\t{}\t{height}", tx.short());
            }
            Observation::TxInjected { tx } => {
                let _ = write!(out, "tx-injected\t{}", tx.short());
            }
            Observation::AttackBlockWithheld { height } => {
                let _ = write!(out, "attack-block-withheld\t{height}");
            }
            Observation::AttackBlockReleased { height } => {
                let _ = write!(out, "attack-block-released\t{height}");
            }
            Observation::AttackVcsReleased { height } => {
                let _ = write!(out, "attack-vcs-released\t{height}");
            }
            Observation::PartitionStart => {
                let _ = write!(out, "partition-start");
            }
            Observation::PartitionEnd => {
                let _ = write!(out, "partition-end");
            }
            Observation::SafetyViolation { height } => {
                let _ = write!(out, "safety-violation\t{height}");
            }
        }
    }
}

/// One line of the event log.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct SimEvent {
    pub at: u64,
    pub node: u32,
    pub what: Observation,
}

/// Sentinel node id for events emitted by the simulator itself.
pub const SIM_NODE: u32 = u32::MAX;

/// One block of the finally selected chain (the archival node's head path).
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct CanonicalBlock {
    pub height: BlockNumber,
    pub view: ViewNumber,
    pub is_macro: bool,
    /// Producing slot for micro blocks; macro leaders are implied by view.
    pub producer_slot: Option<SlotIndex>,
    /// The raw view-0 owner drawn from the parent seed, before any barring
    /// or view change. This is the quantity the ownership-run statistics
    /// are about.
    pub first_owner_slot: SlotIndex,
    pub timestamp: Timestamp,
    pub hash: Hash32,
}

/// Which validator (by node id) held each slot in an epoch.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct EpochRoster {
    pub epoch: EpochNumber,
    pub slot_nodes: Vec<u32>,
}

#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct Metrics {
    pub sim_time_ms: u64,
    pub blocks_produced: u64,
    pub canonical_blocks: u64,
    pub canonical_micro_blocks: u64,
    pub finalized_macros: u64,
    /// Canonical blocks that landed at view > 0.
    pub heights_with_view_change: u64,
    /// Sum of canonical view numbers: total slots skipped on-chain.
    pub total_view_skips: u64,
    /// Heights at which more than one block was produced.
    pub fork_heights: u64,
    /// Maximal abandoned-branch lengths, over all produced blocks.
    pub fork_length_histogram: BTreeMap<u32, u64>,
    /// Depths of head reorgs observed by honest nodes.
    pub revert_depth_histogram: BTreeMap<u32, u64>,
    pub messages_sent: u64,
    pub messages_delivered: u64,
    pub messages_dropped_partition: u64,
    pub messages_pending_at_end: u64,
    pub safety_violation: bool,
    /// True when every honest node's chain agrees at the lowest honest
    /// head height (they may differ only by blocks still in flight).
    pub honest_heads_agree: bool,
    /// Final head per node: (node, height, hash-prefix).
    pub final_heads: Vec<(u32, BlockNumber, String)>,
}

/// Full run record.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct SimTrace {
    pub events: Vec<SimEvent>,
    pub canonical: Vec<CanonicalBlock>,
    pub epochs: Vec<EpochRoster>,
    pub metrics: Metrics,
}

fn hist_to_string(hist: &BTreeMap<u32, u64>) -> String {
    if hist.is_empty() {
        return "-".to_string();
    }
    let mut s = String::new();
    for (i, (k, v)) in hist.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "{k}:{v}");
    }
    s
}

fn hist_from_string(s: &str) -> Option<BTreeMap<u32, u64>> {
    let mut hist = BTreeMap::new();
    if s == "-" {
        return Some(hist);
    }
    for pair in s.split(',') {
        let (k, v) = pair.split_once(':')?;
        hist.insert(k.parse().ok()?, v.parse().ok()?);
    }
    Some(hist)
}

impl SimTrace {
    /// Line-oriented text form: `E` event lines, `C` canonical chain lines,
    /// `P` epoch roster lines, and a trailing `M` metrics block. Fields are
    /// tab-separated.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("#specbft-trace-v1\n");
        for e in &self.events {
            let _ = write!(out, "E\t{}\t{}\t", e.at, e.node);
            e.what.write_fields(&mut out);
            out.push('\n');
        }
        for c in &self.canonical {
            let producer = c
                .producer_slot
                .map_or_else(|| "-".to_string(), |s| s.to_string());
            let _ = writeln!(
                out,
                "C\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                c.height,
                c.view,
                u8::from(c.is_macro),
                producer,
                c.first_owner_slot,
                c.timestamp,
                c.hash.to_hex(),
            );
        }
        for r in &self.epochs {
            let mut nodes = String::new();
            for (i, n) in r.slot_nodes.iter().enumerate() {
                if i > 0 {
                    nodes.push(',');
                }
                let _ = write!(nodes, "{n}");
            }
            let _ = writeln!(out, "P\t{}\t{}", r.epoch, nodes);
        }
        let m = &self.metrics;
        let mut metric = |k: &str, v: String| {
            let _ = writeln!(out, "M\t{k}\t{v}");
        };
        metric("sim_time_ms", m.sim_time_ms.to_string());
        metric("blocks_produced", m.blocks_produced.to_string());
        metric("canonical_blocks", m.canonical_blocks.to_string());
        metric(
            "canonical_micro_blocks",
            m.canonical_micro_blocks.to_string(),
        );
        metric("finalized_macros", m.finalized_macros.to_string());
        metric(
            "heights_with_view_change",
            m.heights_with_view_change.to_string(),
        );
        metric("total_view_skips", m.total_view_skips.to_string());
        metric("fork_heights", m.fork_heights.to_string());
        metric("fork_length_histogram", hist_to_string(&m.fork_length_histogram));
        metric(
            "revert_depth_histogram",
            hist_to_string(&m.revert_depth_histogram),
        );
        metric("messages_sent", m.messages_sent.to_string());
        metric("messages_delivered", m.messages_delivered.to_string());
        metric(
            "messages_dropped_partition",
            m.messages_dropped_partition.to_string(),
        );
        metric(
            "messages_pending_at_end",
            m.messages_pending_at_end.to_string(),
        );
        metric("safety_violation", u8::from(m.safety_violation).to_string());
        metric(
            "honest_heads_agree",
            u8::from(m.honest_heads_agree).to_string(),
        );
        for (node, height, hash) in &m.final_heads {
            let _ = writeln!(out, "M\tfinal_head\t{node}\t{height}\t{hash}");
        }
        out
    }
}

/// Reader-side view of a trace file. Event payloads stay as raw strings;
/// reporting only needs the structured sections.
#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct ParsedTrace {
    /// (at, node, payload) for every event line.
    pub events: Vec<(u64, u32, String)>,
    pub canonical: Vec<CanonicalBlock>,
    pub epochs: Vec<EpochRoster>,
    pub metrics: Metrics,
}

impl ParsedTrace {
    pub fn parse(text: &str) -> Option<ParsedTrace> {
        let mut lines = text.lines();
        if lines.next()? != "#specbft-trace-v1" {
            return None;
        }
        let mut trace = ParsedTrace::default();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let (tag, rest) = line.split_once('\t')?;
            match tag {
                "E" => {
                    let mut fields = rest.splitn(3, '\t');
                    let at = fields.next()?.parse().ok()?;
                    let node = fields.next()?.parse().ok()?;
                    trace
                        .events
                        .push((at, node, fields.next()?.to_string()));
                }
                "C" => {
                    let fields: Vec<&str> = rest.split('\t').collect();
                    if fields.len() != 7 {
                        return None;
                    }
                    trace.canonical.push(CanonicalBlock {
                        height: fields[0].parse().ok()?,
                        view: fields[1].parse().ok()?,
                        is_macro: fields[2] == "1",
                        producer_slot: match fields[3] {
                            "-" => None,
                            s => Some(s.parse().ok()?),
                        },
                        first_owner_slot: fields[4].parse().ok()?,
                        timestamp: fields[5].parse().ok()?,
                        hash: Hash32::from_hex(fields[6])?,
                    });
                }
                "P" => {
                    let (epoch, nodes) = rest.split_once('\t')?;
                    let slot_nodes = if nodes.is_empty() {
                        Vec::new()
                    } else {
                        nodes
                            .split(',')
                            .map(|n| n.parse().ok())
                            .collect::<Option<Vec<u32>>>()?
                    };
                    trace.epochs.push(EpochRoster {
                        epoch: epoch.parse().ok()?,
                        slot_nodes,
                    });
                }
                "M" => {
                    let (key, value) = rest.split_once('\t')?;
                    let m = &mut trace.metrics;
                    match key {
                        "sim_time_ms" => m.sim_time_ms = value.parse().ok()?,
                        "blocks_produced" => m.blocks_produced = value.parse().ok()?,
                        "canonical_blocks" => m.canonical_blocks = value.parse().ok()?,
                        "canonical_micro_blocks" => {
                            m.canonical_micro_blocks = value.parse().ok()?
                        }
                        "finalized_macros" => m.finalized_macros = value.parse().ok()?,
                        "heights_with_view_change" => {
                            m.heights_with_view_change = value.parse().ok()?
                        }
                        "total_view_skips" => m.total_view_skips = value.parse().ok()?,
                        "fork_heights" => m.fork_heights = value.parse().ok()?,
                        "fork_length_histogram" => {
                            m.fork_length_histogram = hist_from_string(value)?
                        }
                        "revert_depth_histogram" => {
                            m.revert_depth_histogram = hist_from_string(value)?
                        }
                        "messages_sent" => m.messages_sent = value.parse().ok()?,
                        "messages_delivered" => m.messages_delivered = value.parse().ok()?,
                        "messages_dropped_partition" => {
                            m.messages_dropped_partition = value.parse().ok()?
                        }
                        "messages_pending_at_end" => {
                            m.messages_pending_at_end = value.parse().ok()?
                        }
                        "safety_violation" => m.safety_violation = value == "1",
                        "honest_heads_agree" => m.honest_heads_agree = value == "1",
                        "final_head" => {
                            let fields: Vec<&str> = value.split('\t').collect();
                            if fields.len() != 3 {
                                return None;
                            }
                            m.final_heads.push((
                                fields[0].parse().ok()?,
                                fields[1].parse().ok()?,
                                fields[2].to_string(),
                            ));
                        }
                        _ => return None,
                    }
                }
                _ => return None,
            }
        }
        Some(trace)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn text_round_trip_preserves_sections() {
        let trace = SimTrace {
            events: vec![
                SimEvent {
                    at: 100,
                    node: 3,
                    what: Observation::Produced {
                        height: 1,
                        view: 0,
                        slot: 2,
                        hash: crate::hash::sha256(b"x"),
                    },
                },
                SimEvent {
                    at: 150,
                    node: SIM_NODE,
                    what: Observation::PartitionStart,
                },
            ],
            canonical: vec![CanonicalBlock {
                height: 1,
                view: 0,
                is_macro: false,
                producer_slot: Some(2),
                first_owner_slot: 2,
                timestamp: 100,
                hash: crate::hash::sha256(b"x"),
            }],
            epochs: vec![EpochRoster {
                epoch: 1,
                slot_nodes: vec![0, 1, 2, 3],
            }],
            metrics: Metrics {
                sim_time_ms: 200,
                blocks_produced: 1,
                canonical_blocks: 1,
                canonical_micro_blocks: 1,
                final_heads: vec![(0, 1, String::from("abcdef"))],
                ..Metrics::default()
            },
        };
        let text = trace.to_text();
        let parsed = ParsedTrace::parse(&text).unwrap();
        assert_eq!(parsed.canonical, trace.canonical);
        assert_eq!(parsed.epochs, trace.epochs);
        assert_eq!(parsed.metrics, trace.metrics);
        assert_eq!(parsed.events.len(), 2);
        let expected = alloc::format!("produced\t1\t0\t2\t{}", crate::hash::sha256(b"x").short());
        assert_eq!(parsed.events[0].2, expected);
    }
}
