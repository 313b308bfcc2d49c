//! Deterministic simulated network: multicast/unicast delivery with cost
//! accounting, scenario execution, and adversary observers that check
//! forward/backward secrecy behaviorally.
//!
//! Delivery is reliable, ordered, and instant. The ledger counts one
//! multicast per message regardless of fan-out and meters bytes over the
//! canonical wire encodings. Observers are strictly read-only: a run with
//! probes enabled produces the identical trace to a run without them.

use crate::error::{Error, Result};
use crate::gf_mds::FieldElem;
use crate::ids::{MemberId, NodeId, Principal, ScopeId};
use crate::rekey::{
    member_recover_key, open_keys, CipherKind, CryptoConfig, HashKind, SeedKey, SessionKey,
};
use crate::roles::{
    Cast, EventKind, EventRecord, Group, MemberState, OpCounters, OutMsg, WirePayload,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, VecDeque};

// ---------------------------------------------------------------------------
// Scenario format
// ---------------------------------------------------------------------------

/// One subgroup in the initial layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgroupSpec {
    pub sn: String,
    pub members: Vec<String>,
}

/// A runnable scenario: configuration, initial layout, and event list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub seed: u64,
    pub field_bits: u8,
    pub hash: HashKind,
    pub cipher: CipherKind,
    pub subgroups: Vec<SubgroupSpec>,
    pub events: Vec<ScenarioEvent>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum ScenarioEvent {
    Join {
        member: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        subgroup: Option<String>,
    },
    Leave {
        member: String,
    },
    Merge {
        subgroup: String,
        members: Vec<String>,
    },
    Partition {
        members: Vec<String>,
    },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "kebab-case")]
enum ScenarioLine {
    Scenario {
        version: u32,
        seed: u64,
        field_bits: u8,
        hash: HashKind,
        cipher: CipherKind,
    },
    Init {
        subgroups: Vec<SubgroupSpec>,
    },
    Event(ScenarioEvent),
}

impl Scenario {
    /// Line-delimited structured form, mirroring the trace schema.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let header = ScenarioLine::Scenario {
            version: 1,
            seed: self.seed,
            field_bits: self.field_bits,
            hash: self.hash,
            cipher: self.cipher,
        };
        out.push_str(&serde_json::to_string(&header).unwrap());
        out.push('\n');
        out.push_str(
            &serde_json::to_string(&ScenarioLine::Init { subgroups: self.subgroups.clone() })
                .unwrap(),
        );
        out.push('\n');
        for e in &self.events {
            out.push_str(&serde_json::to_string(&ScenarioLine::Event(e.clone())).unwrap());
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Scenario> {
        let mut header: Option<(u64, u8, HashKind, CipherKind)> = None;
        let mut subgroups: Option<Vec<SubgroupSpec>> = None;
        let mut events = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let raw = raw.trim();
            if raw.is_empty() || raw.starts_with('#') {
                continue;
            }
            let line: ScenarioLine = serde_json::from_str(raw).map_err(|e| Error::ParseError {
                line: line_no,
                msg: e.to_string(),
            })?;
            match line {
                ScenarioLine::Scenario { version, seed, field_bits, hash, cipher } => {
                    if version != 1 {
                        return Err(Error::ParseError {
                            line: line_no,
                            msg: format!("unsupported scenario version {version}"),
                        });
                    }
                    header = Some((seed, field_bits, hash, cipher));
                }
                ScenarioLine::Init { subgroups: s } => subgroups = Some(s),
                ScenarioLine::Event(e) => events.push(e),
            }
        }
        let (seed, field_bits, hash, cipher) = header.ok_or(Error::ParseError {
            line: 0,
            msg: "missing scenario header line".into(),
        })?;
        let subgroups = subgroups.ok_or(Error::ParseError {
            line: 0,
            msg: "missing init line".into(),
        })?;
        Ok(Scenario { seed, field_bits, hash, cipher, subgroups, events })
    }

    /// The bundled sixteen-member walkthrough: three subgroups sized
    /// (8, 5, 3), a join that lands under the degree-2 node of the first
    /// subgroup, a second join, then the leaves that exercise the
    /// pseudo-node fill.
    pub fn walkthrough() -> Scenario {
        let named = |range: std::ops::RangeInclusive<u32>| -> Vec<String> {
            range.map(|i| format!("u{i}")).collect()
        };
        Scenario {
            seed: 1,
            field_bits: 8,
            hash: HashKind::Sha256,
            cipher: CipherKind::StreamMac,
            subgroups: vec![
                SubgroupSpec { sn: "sn1".into(), members: named(1..=8) },
                SubgroupSpec { sn: "sn2".into(), members: named(9..=13) },
                SubgroupSpec { sn: "sn3".into(), members: named(14..=16) },
            ],
            events: vec![
                ScenarioEvent::Join { member: "u17".into(), subgroup: None },
                ScenarioEvent::Join { member: "u18".into(), subgroup: None },
                ScenarioEvent::Leave { member: "u10".into() },
                ScenarioEvent::Leave { member: "u18".into() },
            ],
        }
    }
}

/// Knobs for the random scenario generator.
#[derive(Debug, Clone)]
pub struct FuzzParams {
    pub subgroups: u32,
    pub initial_per_subgroup: u32,
    pub events: u32,
    pub field_bits: u8,
    pub max_batch: u32,
    pub cipher: CipherKind,
}

impl Default for FuzzParams {
    fn default() -> Self {
        FuzzParams {
            subgroups: 4,
            initial_per_subgroup: 12,
            events: 1000,
            field_bits: 8,
            max_batch: 6,
            cipher: CipherKind::StreamMac,
        }
    }
}

/// Seeded random churn: joins, leaves, merges, and partitions over a
/// bounded membership so every scenario stays within the per-subgroup
/// position space.
pub fn generate_scenario(seed: u64, params: &FuzzParams) -> Scenario {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    // Stay well inside the position space: members, pseudos, and interior
    // nodes all consume evaluation points.
    let point_space = (1usize << params.field_bits) - 1;
    let cap_per_subgroup = (point_space.saturating_sub(10) / 3).max(2);
    let mut next_id: u32 = 1;
    let fresh = |n: u32, next_id: &mut u32| -> Vec<String> {
        let out = (*next_id..*next_id + n).map(|i| format!("u{i}")).collect();
        *next_id += n;
        out
    };
    let subgroups: Vec<SubgroupSpec> = (1..=params.subgroups)
        .map(|i| SubgroupSpec {
            sn: format!("sn{i}"),
            members: fresh(params.initial_per_subgroup, &mut next_id),
        })
        .collect();
    let mut live: Vec<String> = subgroups.iter().flat_map(|s| s.members.clone()).collect();
    let mut sizes: BTreeMap<String, usize> = subgroups
        .iter()
        .map(|s| (s.sn.clone(), s.members.len()))
        .collect();
    let total_cap = cap_per_subgroup * params.subgroups as usize;

    let mut events = Vec::new();
    let mut attempts = 0u64;
    while events.len() < params.events as usize && attempts < params.events as u64 * 20 + 100 {
        attempts += 1;
        let roll = rng.gen_range(0..100);
        if roll < 40 {
            if live.len() + 1 < total_cap {
                let member = fresh(1, &mut next_id).pop().unwrap();
                live.push(member.clone());
                // Auto-placement except an occasional pinned join.
                let subgroup = if rng.gen_bool(0.2) {
                    let pick: Vec<&String> = sizes
                        .iter()
                        .filter(|(_, &n)| n + 1 < cap_per_subgroup)
                        .map(|(s, _)| s)
                        .collect();
                    if pick.is_empty() {
                        None
                    } else {
                        let s = pick[rng.gen_range(0..pick.len())].clone();
                        *sizes.get_mut(&s).unwrap() += 1;
                        Some(s)
                    }
                } else {
                    None
                };
                events.push(ScenarioEvent::Join { member, subgroup });
            }
        } else if roll < 75 {
            if live.len() > 2 {
                let i = rng.gen_range(0..live.len());
                let member = live.swap_remove(i);
                events.push(ScenarioEvent::Leave { member });
            }
        } else if roll < 88 {
            let batch = rng.gen_range(1..=params.max_batch);
            let candidates: Vec<&String> = sizes
                .iter()
                .filter(|(_, &n)| n + (batch as usize) < cap_per_subgroup)
                .map(|(s, _)| s)
                .collect();
            if !candidates.is_empty() {
                let sn = candidates[rng.gen_range(0..candidates.len())].clone();
                let members = fresh(batch, &mut next_id);
                live.extend(members.iter().cloned());
                *sizes.get_mut(&sn).unwrap() += batch as usize;
                events.push(ScenarioEvent::Merge { subgroup: sn, members });
            }
        } else if live.len() > 4 {
            let take = rng.gen_range(1..=(live.len() / 3).max(1));
            let mut members = Vec::new();
            for _ in 0..take {
                let i = rng.gen_range(0..live.len());
                members.push(live.swap_remove(i));
            }
            events.push(ScenarioEvent::Partition { members });
        }
    }
    // Auto-placed joins and partitions drift the per-subgroup sizes; the
    // runner enforces real capacity, the generator only keeps headroom.
    Scenario {
        seed,
        field_bits: params.field_bits,
        hash: HashKind::Sha256,
        cipher: params.cipher,
        subgroups,
        events,
    }
}

// ---------------------------------------------------------------------------
// Trace format
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MsgKind {
    Seed,
    Rekey,
    Sealed,
}

/// One line of the versioned, line-delimited trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "kebab-case")]
pub enum TraceLine {
    Trace {
        version: u32,
        seed: u64,
        field_bits: u8,
        hash: HashKind,
        cipher: CipherKind,
        subgroups: Vec<String>,
    },
    Event {
        id: u64,
        op: EventKind,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        subgroup: Option<String>,
        joiners: Vec<String>,
        leavers: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        height: Option<u32>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        root_degree: Option<u32>,
        clean: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        attach_gap: Option<u32>,
        rebuilds: u32,
    },
    Msg {
        event: u64,
        kind: MsgKind,
        cast: Cast,
        scope: String,
        bytes: u64,
        to: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        epoch: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        symbols: Option<u32>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        payload_bytes: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sealing: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sealing_epoch: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        carries: Option<Vec<String>>,
    },
    Cost {
        event: u64,
        scope: String,
        multicasts: u64,
        unicasts: u64,
        bytes: u64,
    },
    Ops {
        event: u64,
        role: String,
        enc: u64,
        dec: u64,
        hash: u64,
        matrix: u64,
    },
    Summary {
        events: u64,
        multicasts: u64,
        unicasts: u64,
        bytes: u64,
        members: u64,
    },
}

pub fn trace_to_string(lines: &[TraceLine]) -> String {
    let mut out = String::new();
    for l in lines {
        out.push_str(&serde_json::to_string(l).unwrap());
        out.push('\n');
    }
    out
}

pub fn trace_from_str(text: &str) -> Result<Vec<TraceLine>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        out.push(serde_json::from_str(raw).map_err(|e| Error::ParseError {
            line: idx + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Cost ledger
// ---------------------------------------------------------------------------

/// Monotone counters for one event, split by attribution scope.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventCost {
    pub event: u64,
    pub kind: Option<EventKind>,
    pub subgroup: Option<ScopeId>,
    pub height: Option<u32>,
    pub clean: bool,
    pub attach_gap: Option<u32>,
    pub multicasts: BTreeMap<ScopeId, u64>,
    pub unicasts: BTreeMap<ScopeId, u64>,
    pub bytes: BTreeMap<ScopeId, u64>,
    pub controller_ops: BTreeMap<ScopeId, OpCounters>,
    pub member_ops: OpCounters,
}

impl EventCost {
    pub fn m(&self, scope: ScopeId) -> u64 {
        self.multicasts.get(&scope).copied().unwrap_or(0)
    }

    pub fn u(&self, scope: ScopeId) -> u64 {
        self.unicasts.get(&scope).copied().unwrap_or(0)
    }

    pub fn m_total(&self) -> u64 {
        self.multicasts.values().sum()
    }

    pub fn u_total(&self) -> u64 {
        self.unicasts.values().sum()
    }

    pub fn bytes_total(&self) -> u64 {
        self.bytes.values().sum()
    }
}

#[derive(Debug, Clone, Default)]
pub struct CostLedger {
    pub events: Vec<EventCost>,
}

impl CostLedger {
    pub fn totals(&self) -> (u64, u64, u64) {
        let m = self.events.iter().map(|e| e.m_total()).sum();
        let u = self.events.iter().map(|e| e.u_total()).sum();
        let b = self.events.iter().map(|e| e.bytes_total()).sum();
        (m, u, b)
    }
}

// ---------------------------------------------------------------------------
// Adversary observation
// ---------------------------------------------------------------------------

/// Everything one departed (or not-yet-joined) principal could know,
/// frozen at the moment of departure.
#[derive(Debug, Clone)]
pub struct GhostKnowledge {
    pub member: MemberId,
    pub left_epoch: u64,
    pub scope: Option<ScopeId>,
    pub leaf: Option<NodeId>,
    pub seeds: Vec<(ScopeId, SeedKey)>,
    pub keys: Vec<SessionKey>,
}

/// Read-only wiretap: records traffic and revoked knowledge, and checks
/// that no new message is usable with any of it. Recording never alters
/// delivery or the ledger.
#[derive(Debug, Default)]
pub struct AdversaryObserver {
    pub ghosts: Vec<GhostKnowledge>,
    /// (node, epoch) of every key any ghost holds -> ghost indices.
    key_holders: BTreeMap<(NodeId, u64), Vec<usize>>,
    /// Leaf nodes of departed members; a broadcast using one is a breach.
    dead_leaves: BTreeMap<NodeId, usize>,
    /// Messages a ghost could symbolically decrypt or decode.
    pub symbolic_breaches: u64,
}

impl AdversaryObserver {
    fn register_ghost(&mut self, g: GhostKnowledge) {
        let idx = self.ghosts.len();
        for k in &g.keys {
            self.key_holders.entry((k.node, k.epoch)).or_default().push(idx);
        }
        if let Some(leaf) = g.leaf {
            self.dead_leaves.insert(leaf, idx);
        }
        self.ghosts.push(g);
    }

    /// Symbolic closure step: if a fresh message is sealed under a key a
    /// ghost holds, the ghost learns the carried keys. Any growth after
    /// departure is a breach.
    fn observe(&mut self, epoch: u64, msg: &OutMsg) {
        match &msg.payload {
            WirePayload::Sealed(s) => {
                let holders = self
                    .key_holders
                    .get(&(s.sealing_node, s.sealing_epoch))
                    .cloned()
                    .unwrap_or_default();
                for idx in holders {
                    if self.ghosts[idx].left_epoch < epoch {
                        self.symbolic_breaches += 1;
                        // The ghost now owns the carried keys too.
                        for n in &s.carried_nodes {
                            self.key_holders.entry((*n, s.epoch)).or_default().push(idx);
                        }
                    }
                }
            }
            WirePayload::Broadcast(_) => {
                for (_, owner) in &msg.participants {
                    if let Some(&idx) = self.dead_leaves.get(owner) {
                        if self.ghosts[idx].left_epoch <= epoch {
                            self.symbolic_breaches += 1;
                        }
                    }
                }
            }
            WirePayload::Seed(_) => {}
        }
    }
}

/// Empirical attack statistics from the behavioral probes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ProbeStats {
    /// Revoked principals trying recorded keys against newer sealed
    /// messages.
    pub fs_open_attempts: u64,
    pub fs_opens: u64,
    /// Revoked principals decoding newer broadcasts with stale seeds.
    pub fs_decode_attempts: u64,
    pub fs_decode_hits: u64,
    /// New members trying their keys against pre-join sealed messages.
    pub bw_open_attempts: u64,
    pub bw_opens: u64,
    /// New members decoding pre-join broadcasts with their fresh seeds.
    pub bw_decode_attempts: u64,
    pub bw_decode_hits: u64,
    /// Pools of up to five revoked seeds attacking fresh broadcasts.
    pub conspiracy_attempts: u64,
    pub conspiracy_hits: u64,
    /// Messages symbolically usable with revoked knowledge (always 0 for a
    /// correct protocol).
    pub symbolic_breaches: u64,
}

impl ProbeStats {
    pub fn fs_decode_rate(&self) -> f64 {
        if self.fs_decode_attempts == 0 {
            0.0
        } else {
            self.fs_decode_hits as f64 / self.fs_decode_attempts as f64
        }
    }

    pub fn conspiracy_rate(&self) -> f64 {
        if self.conspiracy_attempts == 0 {
            0.0
        } else {
            self.conspiracy_hits as f64 / self.conspiracy_attempts as f64
        }
    }

    pub fn bw_decode_rate(&self) -> f64 {
        if self.bw_decode_attempts == 0 {
            0.0
        } else {
            self.bw_decode_hits as f64 / self.bw_decode_attempts as f64
        }
    }
}

// ---------------------------------------------------------------------------
// Runner
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Retain the full trace in memory (byte-identical across runs).
    pub keep_trace: bool,
    /// Record traffic and run the secrecy probes.
    pub observe: bool,
    /// Assert balance, keyring agreement, storage, and cost formulas after
    /// every event.
    pub check_invariants: bool,
    /// Max empirical probe attempts per ghost pool per event.
    pub probe_budget: u32,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { keep_trace: true, observe: true, check_invariants: true, probe_budget: 8 }
    }
}

/// Final output of a run: the trace, the ledger, probe statistics, and the
/// terminal protocol state.
pub struct SimReport {
    pub trace: Vec<TraceLine>,
    pub ledger: CostLedger,
    pub probes: ProbeStats,
    pub group: Group,
    pub members: BTreeMap<MemberId, MemberState>,
    pub registry: Registry,
    /// Repair fallbacks across the run, for fuzz summaries.
    pub rebuilds: u64,
}

/// Maps scenario names to compact ids and back.
#[derive(Debug, Clone, Default)]
pub struct Registry {
    member_names: Vec<String>,
    by_name: BTreeMap<String, MemberId>,
    scope_names: Vec<String>,
}

impl Registry {
    pub fn intern(&mut self, name: &str) -> MemberId {
        if let Some(m) = self.by_name.get(name) {
            return *m;
        }
        let id = MemberId(self.member_names.len() as u32);
        self.member_names.push(name.to_string());
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn lookup(&self, name: &str) -> Option<MemberId> {
        self.by_name.get(name).copied()
    }

    pub fn member_name(&self, m: MemberId) -> &str {
        &self.member_names[m.0 as usize]
    }

    pub fn scope_name(&self, s: ScopeId) -> String {
        if s.is_group() {
            "group".to_string()
        } else {
            self.scope_names
                .get((s.0 - 1) as usize)
                .cloned()
                .unwrap_or_else(|| format!("sn{}", s.0))
        }
    }

    pub fn scope_by_name(&self, name: &str) -> Option<ScopeId> {
        self.scope_names
            .iter()
            .position(|n| n == name)
            .map(|i| ScopeId(i as u32 + 1))
    }

    fn principal_name(&self, p: Principal) -> String {
        match p {
            Principal::Member(m) => self.member_name(m).to_string(),
            Principal::Sn(s) => self.scope_name(s),
            Principal::Bs => "bs".to_string(),
        }
    }
}

struct ArchivedMsg {
    epoch: u64,
    payload: WirePayload,
    true_raw: Option<FieldElem>,
}

struct Engine {
    cfg: CryptoConfig,
    group: Group,
    members: BTreeMap<MemberId, MemberState>,
    registry: Registry,
    opts: RunOptions,
    ledger: CostLedger,
    trace: Vec<TraceLine>,
    observer: AdversaryObserver,
    stats: ProbeStats,
    archive: VecDeque<ArchivedMsg>,
    rebuilds: u64,
    /// Pre-join knowledge violations found by the backward probe.
    joiner_breaches: u64,
}

const ARCHIVE_CAP: usize = 384;

impl Engine {
    /// Delivers one message: meters it, records it, runs the wiretap, and
    /// feeds every member recipient.
    fn deliver(&mut self, event_id: u64, msg: &OutMsg, cost: &mut EventCost) -> Result<()> {
        if msg.recipients.is_empty() {
            return Err(Error::ProtocolError("multicast with no recipients".into()));
        }
        match msg.cast {
            Cast::Multicast => *cost.multicasts.entry(msg.scope).or_default() += 1,
            Cast::Unicast => {
                if msg.recipients.len() != 1 {
                    return Err(Error::ProtocolError(
                        "unicast must have exactly one recipient".into(),
                    ));
                }
                *cost.unicasts.entry(msg.scope).or_default() += 1;
            }
        }
        *cost.bytes.entry(msg.scope).or_default() += msg.bytes as u64;

        if self.opts.keep_trace {
            self.trace.push(self.msg_line(event_id, msg));
        }
        if self.opts.observe {
            self.observer.observe(event_id, msg);
        }
        for r in &msg.recipients {
            let Principal::Member(m) = r else { continue };
            let st = self.members.entry(*m).or_insert_with(|| MemberState::new(*m));
            match st.process(&self.cfg, &msg.payload) {
                Ok(outcome) => {
                    if let crate::roles::ProcessOutcome::Applied { decoded, opened } = outcome {
                        if decoded {
                            cost.member_ops.hash += 1;
                            cost.member_ops.matrix += 1;
                        }
                        if opened {
                            cost.member_ops.dec += 1;
                        }
                    }
                }
                Err(e) => {
                    let detail = match &msg.payload {
                        WirePayload::Sealed(s) => format!(
                            "sealed under {}@{} carrying {:?}; ring {:?}",
                            s.sealing_node,
                            s.sealing_epoch,
                            s.carried_nodes,
                            st.ring()
                                .iter()
                                .map(|k| format!("{}@{}", k.node, k.epoch))
                                .collect::<Vec<_>>()
                        ),
                        _ => String::new(),
                    };
                    return Err(Error::ProtocolError(format!(
                        "event {event_id}: {} could not process a needed message: {e} [{detail}]",
                        self.registry.member_name(*m)
                    )));
                }
            }
        }
        Ok(())
    }

    fn msg_line(&self, event_id: u64, msg: &OutMsg) -> TraceLine {
        let to: Vec<String> =
            msg.recipients.iter().map(|p| self.registry.principal_name(*p)).collect();
        let scope = self.registry.scope_name(msg.scope);
        match &msg.payload {
            WirePayload::Seed(_) => TraceLine::Msg {
                event: event_id,
                kind: MsgKind::Seed,
                cast: msg.cast,
                scope,
                bytes: msg.bytes as u64,
                to,
                target: None,
                epoch: None,
                symbols: None,
                payload_bytes: None,
                sealing: None,
                sealing_epoch: None,
                carries: None,
            },
            WirePayload::Broadcast(b) => TraceLine::Msg {
                event: event_id,
                kind: MsgKind::Rekey,
                cast: msg.cast,
                scope,
                bytes: msg.bytes as u64,
                to,
                target: Some(b.target_node.to_string()),
                epoch: Some(b.epoch),
                symbols: Some(b.public_symbols.len() as u32 + 1),
                payload_bytes: Some(
                    ((b.public_symbols.len() + 1) * self.cfg.field.elem_bytes()) as u64,
                ),
                sealing: None,
                sealing_epoch: None,
                carries: None,
            },
            WirePayload::Sealed(s) => TraceLine::Msg {
                event: event_id,
                kind: MsgKind::Sealed,
                cast: msg.cast,
                scope,
                bytes: msg.bytes as u64,
                to,
                target: None,
                epoch: Some(s.epoch),
                symbols: None,
                payload_bytes: None,
                sealing: Some(s.sealing_node.to_string()),
                sealing_epoch: Some(s.sealing_epoch),
                carries: Some(s.carried_nodes.iter().map(|n| n.to_string()).collect()),
            },
        }
    }

    fn run_event(&mut self, record: &EventRecord) -> Result<()> {
        let mut cost = EventCost {
            event: record.epoch,
            kind: Some(record.kind),
            subgroup: record.target_subgroup,
            height: record.subgroup_height,
            clean: record.clean,
            attach_gap: record.attach_gap,
            ..EventCost::default()
        };
        self.rebuilds += record.rebuilds as u64;

        if self.opts.keep_trace {
            self.trace.push(TraceLine::Event {
                id: record.epoch,
                op: record.kind,
                subgroup: record.target_subgroup.map(|s| self.registry.scope_name(s)),
                joiners: record
                    .joiners
                    .iter()
                    .map(|m| self.registry.member_name(*m).to_string())
                    .collect(),
                leavers: record
                    .leavers
                    .iter()
                    .map(|m| self.registry.member_name(*m).to_string())
                    .collect(),
                height: record.subgroup_height,
                root_degree: record.root_degree,
                clean: record.clean,
                attach_gap: record.attach_gap,
                rebuilds: record.rebuilds,
            });
        }

        // Departing members are frozen before delivery: they receive
        // nothing from this event.
        let mut departing: Vec<GhostKnowledge> = Vec::new();
        for m in &record.leavers {
            if let Some(st) = self.members.remove(m) {
                departing.push(GhostKnowledge {
                    member: *m,
                    left_epoch: record.epoch,
                    scope: st.scope,
                    leaf: st.leaf,
                    seeds: st.knowledge.seeds.clone(),
                    keys: st.knowledge.keys.clone(),
                });
            }
        }

        for msg in &record.messages {
            self.deliver(record.epoch, msg, &mut cost)?;
        }
        for (scope, ops) in &record.controller_ops {
            cost.controller_ops.entry(*scope).or_default().add(ops);
        }

        if self.opts.observe {
            self.archive_event(record);
            for g in departing {
                self.observer.register_ghost(g);
            }
            self.run_probes(record)?;
        }
        if self.opts.check_invariants {
            self.check_event(record, &cost)?;
        }
        if self.opts.keep_trace {
            let mut scopes: BTreeSet<ScopeId> = cost.multicasts.keys().copied().collect();
            scopes.extend(cost.unicasts.keys().copied());
            for scope in scopes {
                self.trace.push(TraceLine::Cost {
                    event: record.epoch,
                    scope: self.registry.scope_name(scope),
                    multicasts: cost.m(scope),
                    unicasts: cost.u(scope),
                    bytes: cost.bytes.get(&scope).copied().unwrap_or(0),
                });
            }
            for (scope, ops) in &cost.controller_ops {
                self.trace.push(TraceLine::Ops {
                    event: record.epoch,
                    role: if scope.is_group() {
                        "bs".to_string()
                    } else {
                        self.registry.scope_name(*scope)
                    },
                    enc: ops.enc,
                    dec: ops.dec,
                    hash: ops.hash,
                    matrix: ops.matrix,
                });
            }
            self.trace.push(TraceLine::Ops {
                event: record.epoch,
                role: "members".to_string(),
                enc: cost.member_ops.enc,
                dec: cost.member_ops.dec,
                hash: cost.member_ops.hash,
                matrix: cost.member_ops.matrix,
            });
        }
        if !self.opts.observe {
            // Bound memory on long runs: history is only needed by probes.
            for m in self.members.values_mut() {
                m.knowledge.keys.clear();
            }
        }
        self.ledger.events.push(cost);
        Ok(())
    }

    fn archive_event(&mut self, record: &EventRecord) {
        for msg in &record.messages {
            let true_raw = match &msg.payload {
                WirePayload::Broadcast(b) if !b.scope.is_group() => self
                    .group
                    .subgroup(b.scope)
                    .and_then(|s| s.node_key(b.target_node))
                    .map(|k| k.raw),
                _ => None,
            };
            self.archive.push_back(ArchivedMsg {
                epoch: record.epoch,
                payload: msg.payload.clone(),
                true_raw,
            });
            if self.archive.len() > ARCHIVE_CAP {
                self.archive.pop_front();
            }
        }
    }

    /// Behavioral secrecy probes over this event's traffic.
    fn run_probes(&mut self, record: &EventRecord) -> Result<()> {
        let budget = self.opts.probe_budget as usize;
        let ghost_count = self.observer.ghosts.len();
        if ghost_count > 0 {
            // Rotate through ghosts deterministically.
            let start = (record.epoch as usize * 7) % ghost_count;
            let picks: Vec<usize> =
                (0..budget.min(ghost_count)).map(|i| (start + i) % ghost_count).collect();
            for msg in &record.messages {
                match &msg.payload {
                    WirePayload::Broadcast(b) if !b.scope.is_group() => {
                        let true_raw = self
                            .group
                            .subgroup(b.scope)
                            .and_then(|s| s.node_key(b.target_node))
                            .map(|k| k.raw);
                        let Some(true_raw) = true_raw else { continue };
                        for &gi in &picks {
                            let ghost = &self.observer.ghosts[gi];
                            if ghost.left_epoch >= record.epoch {
                                continue;
                            }
                            for (scope, seed) in &ghost.seeds {
                                if *scope != b.scope {
                                    continue;
                                }
                                self.stats.fs_decode_attempts += 1;
                                let got = member_recover_key(&self.cfg, seed, b);
                                if got.raw == true_raw {
                                    self.stats.fs_decode_hits += 1;
                                }
                            }
                        }
                        // Conspiracy: pool up to five revoked seeds; the
                        // per-attempt rate must not improve.
                        let pool: Vec<usize> = (0..5.min(ghost_count))
                            .map(|i| (start + i) % ghost_count)
                            .collect();
                        for &gi in &pool {
                            let ghost = &self.observer.ghosts[gi];
                            if ghost.left_epoch >= record.epoch {
                                continue;
                            }
                            for (scope, seed) in &ghost.seeds {
                                if *scope != b.scope {
                                    continue;
                                }
                                self.stats.conspiracy_attempts += 1;
                                if member_recover_key(&self.cfg, seed, b).raw == true_raw {
                                    self.stats.conspiracy_hits += 1;
                                }
                            }
                        }
                    }
                    WirePayload::Sealed(s) => {
                        for &gi in &picks {
                            let ghost = &self.observer.ghosts[gi];
                            if ghost.left_epoch >= record.epoch {
                                continue;
                            }
                            for key in ghost.keys.iter().rev().take(16) {
                                self.stats.fs_open_attempts += 1;
                                if open_keys(&self.cfg, key, s).is_ok() {
                                    self.stats.fs_opens += 1;
                                }
                            }
                        }
                    }
                    _ => {}
                }
            }
        }

        // Backward probes: fresh joiners against the recorded archive.
        for j in &record.joiners {
            let Some(st) = self.members.get(j) else { continue };
            // Symbolic: nothing the joiner holds predates its join.
            for k in &st.knowledge.keys {
                if k.epoch < record.epoch {
                    self.joiner_breaches += 1;
                }
            }
            let ring = st.ring();
            let mut tried = 0usize;
            for arch in self.archive.iter().rev() {
                if arch.epoch >= record.epoch {
                    continue;
                }
                if tried >= budget {
                    break;
                }
                match &arch.payload {
                    WirePayload::Sealed(s) => {
                        for key in &ring {
                            self.stats.bw_open_attempts += 1;
                            if open_keys(&self.cfg, key, s).is_ok() {
                                self.stats.bw_opens += 1;
                            }
                        }
                        tried += 1;
                    }
                    WirePayload::Broadcast(b) => {
                        let (Some(seed), Some(raw)) = (st.seed, arch.true_raw) else {
                            continue;
                        };
                        if Some(b.scope) != st.scope {
                            continue;
                        }
                        self.stats.bw_decode_attempts += 1;
                        if member_recover_key(&self.cfg, &seed, b).raw == raw {
                            self.stats.bw_decode_hits += 1;
                        }
                        tried += 1;
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    /// Per-event invariants: tree balance, keyring agreement, storage, and
    /// the cost formulas where they apply exactly.
    fn check_event(&self, record: &EventRecord, cost: &EventCost) -> Result<()> {
        let fail = |what: String| -> Result<()> {
            let mut snap = String::new();
            for (scope, sub) in self.group.subgroups() {
                snap.push_str(&format!(
                    " {}={}",
                    self.registry.scope_name(*scope),
                    sub.tree().snapshot()
                ));
            }
            Err(Error::ProtocolError(format!(
                "event {} ({:?}): {what}; trees:{snap}",
                record.epoch, record.kind
            )))
        };

        for (scope, sub) in self.group.subgroups() {
            let violations = sub.tree().check_balance();
            if !violations.is_empty() {
                return fail(format!(
                    "balance violations in {}: {violations:?}",
                    self.registry.scope_name(*scope)
                ));
            }
            if sub.tree().pseudo_count() > sub.tree().member_count().max(1) {
                return fail(format!(
                    "pseudo leaves exceed members in {}",
                    self.registry.scope_name(*scope)
                ));
            }
        }

        for (m, scope) in self.group.current_members() {
            let Some(st) = self.members.get(m) else {
                return fail(format!("{} has no delivered state", self.registry.member_name(*m)));
            };
            let expected = self
                .group
                .expected_ring(*m)
                .ok_or_else(|| Error::ProtocolError("missing ground truth ring".into()))?;
            let got = st.ring();
            if got != expected {
                return fail(format!(
                    "keyring mismatch for {} in {}: got {} keys, want {}",
                    self.registry.member_name(*m),
                    self.registry.scope_name(*scope),
                    got.len(),
                    expected.len()
                ));
            }
            // Storage bound: one seed plus one key per path level.
            let sub = self.group.subgroup(*scope).unwrap();
            let leaf = sub.tree().member_leaf(*m).unwrap();
            let want_len = sub.tree().path_to_root(leaf).len() + 1;
            if got.len() != want_len {
                return fail(format!(
                    "storage mismatch for {}: ring {} vs path {}",
                    self.registry.member_name(*m),
                    got.len(),
                    want_len
                ));
            }
        }

        match record.kind {
            EventKind::Join if record.clean => {
                let scope = record.target_subgroup.expect("join has a subgroup");
                let h = record.subgroup_height.unwrap() as u64;
                if (cost.m(scope), cost.u(scope)) != (h, 1) {
                    return fail(format!(
                        "clean join cost ({}, {}) differs from ({h}, 1)",
                        cost.m(scope),
                        cost.u(scope)
                    ));
                }
            }
            EventKind::Leave if record.clean => {
                let scope = record.target_subgroup.expect("leave has a subgroup");
                let sub = self.group.subgroup(scope).unwrap();
                if record.subgroup_height == Some(3) && !sub.tree().is_empty() {
                    let deg = sub.tree().node(sub.tree().root()).children.len() as u64;
                    let m = cost.m(scope);
                    let (lo, hi) = (2 + deg - 1 + 1, 3 + deg - 1 + 1);
                    if !(lo..=hi).contains(&m) {
                        return fail(format!(
                            "clean height-3 leave cost {m} outside [{lo}, {hi}]"
                        ));
                    }
                }
            }
            EventKind::Merge => {
                if let Some(gap) = record.attach_gap {
                    if gap > 3 {
                        return fail(format!("merge attachment weight gap {gap} exceeds 3"));
                    }
                }
            }
            _ => {}
        }

        if self.opts.observe && self.observer.symbolic_breaches + self.joiner_breaches > 0 {
            return fail(format!(
                "{} messages usable with revoked or pre-join knowledge",
                self.observer.symbolic_breaches + self.joiner_breaches
            ));
        }
        Ok(())
    }
}

/// Executes a scenario end to end: init, then each event through the
/// controllers, delivering every message, metering costs, and (optionally)
/// checking invariants and running the secrecy probes after each event.
pub fn run_scenario(scenario: &Scenario, opts: &RunOptions) -> Result<SimReport> {
    let mut cfg = CryptoConfig::for_bits(scenario.field_bits)?;
    cfg.hash = scenario.hash;
    cfg.cipher = scenario.cipher;

    let mut registry = Registry::default();
    let mut layout = Vec::new();
    for (i, sub) in scenario.subgroups.iter().enumerate() {
        registry.scope_names.push(sub.sn.clone());
        let scope = ScopeId(i as u32 + 1);
        let members: Vec<MemberId> = sub.members.iter().map(|n| registry.intern(n)).collect();
        layout.push((scope, members));
    }

    let (group, init_record) = Group::init_group(cfg, scenario.seed, &layout)?;
    let mut engine = Engine {
        cfg,
        group,
        members: BTreeMap::new(),
        registry,
        opts: opts.clone(),
        ledger: CostLedger::default(),
        trace: Vec::new(),
        observer: AdversaryObserver::default(),
        stats: ProbeStats::default(),
        archive: VecDeque::new(),
        rebuilds: 0,
        joiner_breaches: 0,
    };
    if opts.keep_trace {
        engine.trace.push(TraceLine::Trace {
            version: 1,
            seed: scenario.seed,
            field_bits: scenario.field_bits,
            hash: scenario.hash,
            cipher: scenario.cipher,
            subgroups: scenario.subgroups.iter().map(|s| s.sn.clone()).collect(),
        });
    }
    engine.run_event(&init_record)?;

    for (i, ev) in scenario.events.iter().enumerate() {
        let record = apply_event(&mut engine, ev).map_err(|e| match e {
            Error::ParseError { .. } | Error::ConfigError(_) => e,
            Error::MembershipError(m) => {
                Error::MembershipError(format!("scenario event {}: {m}", i + 1))
            }
            other => Error::ProtocolError(format!("scenario event {}: {other}", i + 1)),
        })?;
        engine.run_event(&record)?;
    }

    let (m, u, b) = engine.ledger.totals();
    if opts.keep_trace {
        engine.trace.push(TraceLine::Summary {
            events: engine.ledger.events.len() as u64,
            multicasts: m,
            unicasts: u,
            bytes: b,
            members: engine.group.member_count() as u64,
        });
    }
    engine.stats.symbolic_breaches =
        engine.observer.symbolic_breaches + engine.joiner_breaches;

    Ok(SimReport {
        trace: engine.trace,
        ledger: engine.ledger,
        probes: engine.stats,
        group: engine.group,
        members: engine.members,
        registry: engine.registry,
        rebuilds: engine.rebuilds,
    })
}

fn apply_event(engine: &mut Engine, ev: &ScenarioEvent) -> Result<EventRecord> {
    match ev {
        ScenarioEvent::Join { member, subgroup } => {
            let m = engine.registry.intern(member);
            let scope = match subgroup {
                Some(name) => Some(engine.registry.scope_by_name(name).ok_or_else(|| {
                    Error::ConfigError(format!("unknown subgroup name {name}"))
                })?),
                None => None,
            };
            engine.group.handle_join(m, scope)
        }
        ScenarioEvent::Leave { member } => {
            let m = engine
                .registry
                .lookup(member)
                .ok_or_else(|| Error::MembershipError(format!("unknown member {member}")))?;
            engine.group.handle_leave(m)
        }
        ScenarioEvent::Merge { subgroup, members } => {
            let scope = engine
                .registry
                .scope_by_name(subgroup)
                .ok_or_else(|| Error::ConfigError(format!("unknown subgroup name {subgroup}")))?;
            let ids: Vec<MemberId> = members.iter().map(|n| engine.registry.intern(n)).collect();
            engine.group.handle_merge(scope, &ids)
        }
        ScenarioEvent::Partition { members } => {
            let ids: Result<Vec<MemberId>> = members
                .iter()
                .map(|n| {
                    engine
                        .registry
                        .lookup(n)
                        .ok_or_else(|| Error::MembershipError(format!("unknown member {n}")))
                })
                .collect();
            engine.group.handle_partition(&ids?)
        }
    }
}

/// Recomputes per-event, per-scope costs from the message lines of a
/// trace; the report layer compares these against the recorded cost lines.
pub fn recompute_costs(trace: &[TraceLine]) -> BTreeMap<(u64, String), (u64, u64, u64)> {
    let mut out: BTreeMap<(u64, String), (u64, u64, u64)> = BTreeMap::new();
    for line in trace {
        if let TraceLine::Msg { event, cast, scope, bytes, .. } = line {
            let entry = out.entry((*event, scope.clone())).or_default();
            match cast {
                Cast::Multicast => entry.0 += 1,
                Cast::Unicast => entry.1 += 1,
            }
            entry.2 += bytes;
        }
    }
    out
}
