//! Protocol state machines for the base station, the sink nodes, and the
//! members: initialization, the four membership events, and member-side
//! message processing. Structure changes come from `keytree`; key material
//! and messages come from `rekey`.
//!
//! Distribution plan per event, derived from the dirty region (always a
//! root-connected set of internal nodes):
//!
//! * every dirty leaf-parent gets one public rekey broadcast its leaves
//!   decode with their seeds, plus one bundle sealed under the fresh key
//!   carrying the dirty keys above it;
//! * members whose lowest dirty ancestor is an interior node get the
//!   refreshed tail sealed under a key they already hold — the node's own
//!   previous key after additive events (joins, merges), or their
//!   untouched child subtree's key after subtractive events (leaves,
//!   partitions), where the departed must be locked out;
//! * the group key always refreshes: additively it rides the joiner
//!   bundles plus one group-wide seal under the previous group key;
//!   subtractively each subgroup re-seals it under its current subgroup
//!   key, never under anything a leaver knew.

use crate::error::{Error, Result};
use crate::gf_mds::{FieldElem, Position};
use crate::ids::{MemberId, NodeId, Principal, ScopeId};
use crate::keytree::{KeyTree, NodeKind, StructuralDelta};
use crate::rekey::{
    logic_seed, member_recover_key, open_keys, seal_key, seal_keys,
    CryptoConfig, KeySource, Participant, RekeyBroadcast, SealedKeyMsg, SeedKey, SessionKey,
};
use crate::wire::{self, SeedAssign};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

/// The base station's key node; the group key lives here.
pub const BS_NODE: NodeId = NodeId(0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Cast {
    Multicast,
    Unicast,
}

/// One message queued for delivery.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WirePayload {
    Seed(SeedAssign),
    Broadcast(RekeyBroadcast),
    Sealed(SealedKeyMsg),
}

#[derive(Debug, Clone)]
pub struct OutMsg {
    pub payload: WirePayload,
    pub cast: Cast,
    /// Ledger attribution: the subgroup the message serves, or the group
    /// scope for group-wide traffic.
    pub scope: ScopeId,
    pub recipients: Vec<Principal>,
    /// Evaluation points baked into a broadcast, with the tree node that
    /// owns each seed; trace metadata for the revocation bookkeeping, not
    /// wire content.
    pub participants: Vec<(Position, NodeId)>,
    /// Canonical encoded size.
    pub bytes: usize,
}

/// Controller-side operation counts. `hash` follows the analytic
/// convention: it counts H(s || r) symbol derivations only.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounters {
    pub enc: u64,
    pub dec: u64,
    pub hash: u64,
    pub matrix: u64,
}

impl OpCounters {
    pub fn add(&mut self, other: &OpCounters) {
        self.enc += other.enc;
        self.dec += other.dec;
        self.hash += other.hash;
        self.matrix += other.matrix;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    Init,
    Join,
    Leave,
    Merge,
    Partition,
}

/// Everything one event produced, for delivery and metering.
#[derive(Debug, Clone)]
pub struct EventRecord {
    pub epoch: u64,
    pub kind: EventKind,
    pub target_subgroup: Option<ScopeId>,
    pub joiners: Vec<MemberId>,
    pub leavers: Vec<MemberId>,
    pub messages: Vec<OutMsg>,
    /// Controller computation per scope; the group-scope entry is the base
    /// station.
    pub controller_ops: BTreeMap<ScopeId, OpCounters>,
    /// Height of the affected subgroup after the event.
    pub subgroup_height: Option<u32>,
    /// Degree of the affected subgroup's root after the event.
    pub root_degree: Option<u32>,
    /// True when nothing beyond the plain root path changed, so the
    /// analytic cost formulas apply exactly.
    pub clean: bool,
    pub attach_gap: Option<u32>,
    pub rebuilds: u32,
}

/// Per-subgroup evaluation-point allocator. Leaves take positions from the
/// bottom of [1, L], interior nodes from the top, so the ranges stay
/// disjoint while the subgroup fits.
#[derive(Debug, Clone)]
struct PositionAllocator {
    low_next: u16,
    high_next: u16,
    free_low: BTreeSet<u16>,
    free_high: BTreeSet<u16>,
}

impl PositionAllocator {
    fn new(limit: u16) -> Self {
        PositionAllocator {
            low_next: 1,
            high_next: limit,
            free_low: BTreeSet::new(),
            free_high: BTreeSet::new(),
        }
    }

    fn lease_low(&mut self, scope: ScopeId) -> Result<Position> {
        if let Some(&p) = self.free_low.iter().next() {
            self.free_low.remove(&p);
            return Ok(p);
        }
        if self.low_next > self.high_next {
            return Err(Error::PositionsExhausted(scope.0));
        }
        let p = self.low_next;
        self.low_next += 1;
        Ok(p)
    }

    fn lease_high(&mut self, scope: ScopeId) -> Result<Position> {
        if let Some(&p) = self.free_high.iter().next_back() {
            self.free_high.remove(&p);
            return Ok(p);
        }
        if self.high_next < self.low_next {
            return Err(Error::PositionsExhausted(scope.0));
        }
        let p = self.high_next;
        self.high_next -= 1;
        Ok(p)
    }

    fn release(&mut self, p: Position) {
        if p >= self.high_next {
            self.free_high.insert(p);
        } else {
            self.free_low.insert(p);
        }
    }

    fn can_lease_low(&self) -> bool {
        !self.free_low.is_empty() || self.low_next <= self.high_next
    }

    fn available(&self) -> usize {
        let middle = if self.high_next >= self.low_next {
            (self.high_next - self.low_next + 1) as usize
        } else {
            0
        };
        middle + self.free_low.len() + self.free_high.len()
    }
}

/// A sink node: one weight-balanced subgroup tree plus the seed table and
/// current key for every node in it.
#[derive(Debug, Clone)]
pub struct SubgroupController {
    scope: ScopeId,
    cfg: CryptoConfig,
    tree: KeyTree,
    /// (position, secret) per live node: assigned for leaves and pseudos,
    /// XOR-composed for interior nodes.
    seeds: BTreeMap<NodeId, SeedKey>,
    /// Current session key per live internal node.
    keys: BTreeMap<NodeId, SessionKey>,
    source: KeySource,
    positions: PositionAllocator,
    rng: ChaCha20Rng,
    /// Seed assigned by the base station, used to decode group-key
    /// broadcasts.
    sn_seed: SeedKey,
    /// Group key as last decoded from the base station.
    gk: Option<SessionKey>,
}

impl SubgroupController {
    fn new(cfg: CryptoConfig, scope: ScopeId, sn_seed: SeedKey, rng_seed: u64) -> Self {
        SubgroupController {
            scope,
            cfg,
            tree: KeyTree::new(scope),
            seeds: BTreeMap::new(),
            keys: BTreeMap::new(),
            source: KeySource::new(cfg, scope),
            positions: PositionAllocator::new(cfg.field.code_len),
            rng: ChaCha20Rng::seed_from_u64(rng_seed),
            sn_seed,
            gk: None,
        }
    }

    pub fn scope(&self) -> ScopeId {
        self.scope
    }

    pub fn tree(&self) -> &KeyTree {
        &self.tree
    }

    pub fn root_key(&self) -> Option<&SessionKey> {
        self.keys.get(&self.tree.root())
    }

    pub fn node_key(&self, id: NodeId) -> Option<&SessionKey> {
        self.keys.get(&id)
    }

    pub fn member_seed(&self, m: MemberId) -> Option<&SeedKey> {
        self.tree.member_leaf(m).and_then(|leaf| self.seeds.get(&leaf))
    }

    /// Seed record of any live node, interior nodes included.
    pub fn node_seed(&self, id: NodeId) -> Option<&SeedKey> {
        self.seeds.get(&id)
    }

    pub fn height(&self) -> u32 {
        self.tree.height()
    }

    pub fn has_capacity(&self) -> bool {
        self.positions.can_lease_low()
    }

    /// Conservative room check before admitting `extra` members: every new
    /// leaf may bring a pseudo sibling and interior growth needs a few
    /// high-side positions.
    pub fn can_accommodate(&self, extra: usize) -> bool {
        self.positions.available() >= 2 * extra + 8
    }

    fn fresh_secret(&mut self) -> FieldElem {
        self.cfg.field.elem(self.rng.gen())
    }

    /// Provisions seeds/positions for created nodes, frees removed ones,
    /// recomputes interior secrets bottom-up, and regenerates keys for the
    /// dirty region. Returns the seed unicasts for new member leaves, the
    /// superseded keys of the dirty nodes, and the public broadcasts that
    /// came out of each regeneration.
    fn provision_and_rekey(
        &mut self,
        epoch: u64,
        delta: &StructuralDelta,
        ops: &mut OpCounters,
    ) -> Result<Rekeyed> {
        let mut assigns = Vec::new();
        for &id in &delta.created {
            if !self.tree.contains_node(id) {
                continue; // created then consumed within the op
            }
            match self.tree.node(id).kind {
                NodeKind::Member(m) => {
                    let seed = SeedKey {
                        position: self.positions.lease_low(self.scope)?,
                        secret: self.fresh_secret(),
                    };
                    self.seeds.insert(id, seed);
                    ops.enc += 1; // secure unicast of the seed pair
                    assigns.push(SeedAssign { scope: self.scope, member: m, leaf: id, seed });
                }
                NodeKind::Pseudo => {
                    let seed = SeedKey {
                        position: self.positions.lease_low(self.scope)?,
                        secret: self.fresh_secret(),
                    };
                    self.seeds.insert(id, seed);
                }
                NodeKind::Logic | NodeKind::SubgroupRoot => {
                    let seed = SeedKey {
                        position: self.positions.lease_high(self.scope)?,
                        secret: FieldElem(0),
                    };
                    self.seeds.insert(id, seed);
                }
            }
        }
        // Releases come after leases so a departed member's position can
        // never resurface within the same event.
        for id in &delta.removed {
            if let Some(seed) = self.seeds.remove(id) {
                self.positions.release(seed.position);
            }
            self.keys.remove(id);
        }
        if self.tree.is_empty() {
            // Subgroup retired: interior keys die with it.
            self.keys.clear();
            let root = self.tree.root();
            let root_seed = self.seeds.get(&root).copied();
            let released: Vec<Position> = self
                .seeds
                .iter()
                .filter(|(id, _)| **id != root)
                .map(|(_, seed)| seed.position)
                .collect();
            for p in released {
                self.positions.release(p);
            }
            self.seeds.clear();
            if let Some(s) = root_seed {
                self.seeds.insert(root, s);
            }
            return Ok(Rekeyed { assigns, ..Rekeyed::default() });
        }
        // The permanent root needs a position the first time it is used.
        let root = self.tree.root();
        if !self.seeds.contains_key(&root) {
            let seed = SeedKey {
                position: self.positions.lease_high(self.scope)?,
                secret: FieldElem(0),
            };
            self.seeds.insert(root, seed);
        }
        // Interior secrets: XOR of children, bottom-up over the dirty set.
        for &v in &delta.dirty {
            if !self.tree.contains_node(v) || self.tree.node(v).kind.is_leaf() {
                continue;
            }
            let child_secrets: Vec<FieldElem> = self
                .tree
                .node(v)
                .children
                .iter()
                .map(|c| self.seeds[c].secret)
                .collect();
            let secret = match child_secrets.len() {
                0 => FieldElem(0),
                1 => child_secrets[0],
                _ => logic_seed(&child_secrets)?,
            };
            self.seeds.get_mut(&v).expect("interior node has a position").secret = secret;
        }
        // Fresh keys for the dirty region, children before parents.
        let mut out = Rekeyed { assigns, ..Rekeyed::default() };
        for &v in &delta.dirty {
            if !self.tree.contains_node(v) || self.tree.node(v).kind.is_leaf() {
                continue;
            }
            let participants: Vec<Participant> = self
                .tree
                .node(v)
                .children
                .iter()
                .map(|c| {
                    let s = &self.seeds[c];
                    (s.position, s.secret)
                })
                .collect();
            let (key, broadcast) = self.source.generate(epoch, v, &participants)?;
            ops.hash += participants.len() as u64;
            ops.matrix += 1;
            if let Some(old) = self.keys.insert(v, key) {
                out.previous.insert(v, old);
            }
            out.broadcasts.insert(v, broadcast);
        }
        Ok(out)
    }

    /// Decodes a group-key broadcast with the controller's own seed.
    fn process_gk_broadcast(&mut self, b: &RekeyBroadcast, ops: &mut OpCounters) -> SessionKey {
        ops.hash += 1;
        ops.matrix += 1;
        let gk = member_recover_key(&self.cfg, &self.sn_seed, b);
        self.gk = Some(gk);
        gk
    }
}

/// The base station: assigns sink-node seeds and regenerates the group key
/// over them on every membership event.
#[derive(Debug, Clone)]
pub struct GroupController {
    source: KeySource,
    sn_seeds: BTreeMap<ScopeId, SeedKey>,
    gk: Option<SessionKey>,
}

impl GroupController {
    fn new(cfg: CryptoConfig) -> Self {
        GroupController {
            source: KeySource::new(cfg, ScopeId::GROUP),
            sn_seeds: BTreeMap::new(),
            gk: None,
        }
    }

    fn refresh_gk(&mut self, epoch: u64, ops: &mut OpCounters) -> Result<(SessionKey, RekeyBroadcast)> {
        let participants: Vec<Participant> =
            self.sn_seeds.values().map(|s| (s.position, s.secret)).collect();
        let (key, broadcast) = self.source.generate(epoch, BS_NODE, &participants)?;
        ops.hash += participants.len() as u64;
        ops.matrix += 1;
        self.gk = Some(key);
        Ok((key, broadcast))
    }
}

/// Output of one provisioning pass.
#[derive(Debug, Clone, Default)]
struct Rekeyed {
    assigns: Vec<SeedAssign>,
    previous: BTreeMap<NodeId, SessionKey>,
    broadcasts: BTreeMap<NodeId, RekeyBroadcast>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    /// No prior keys exist below (group or subgroup bootstrap).
    Bootstrap,
    /// Members only arrived: superseded keys are safe sealing keys.
    Additive,
    /// Members departed: only untouched-subtree keys may seal.
    Subtractive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum GkMode {
    /// One seal under the previous group key reaches every old member.
    GroupWide,
    /// Per-subgroup seals under current subgroup keys (no safe old key).
    PerSubgroup,
}

/// The whole deployment: one base station, a fixed set of sink nodes, and
/// the live member-to-subgroup map.
#[derive(Debug, Clone)]
pub struct Group {
    cfg: CryptoConfig,
    bs: GroupController,
    subs: BTreeMap<ScopeId, SubgroupController>,
    membership: BTreeMap<MemberId, ScopeId>,
    event_seq: u64,
}

impl Group {
    /// Builds the whole group: per-subgroup balanced trees, bottom-up node
    /// keys, seed unicasts, path-key bundles, and the first group key.
    pub fn init_group(
        cfg: CryptoConfig,
        master_seed: u64,
        layout: &[(ScopeId, Vec<MemberId>)],
    ) -> Result<(Self, EventRecord)> {
        if layout.is_empty() {
            return Err(Error::ConfigError("group needs at least one subgroup".into()));
        }
        let mut seen_scopes = BTreeSet::new();
        let mut seen_members = BTreeSet::new();
        for (scope, members) in layout {
            if scope.is_group() || !seen_scopes.insert(*scope) {
                return Err(Error::ConfigError(format!("bad subgroup id {scope}")));
            }
            if members.is_empty() {
                return Err(Error::ConfigError(format!("subgroup {scope} has no members")));
            }
            for m in members {
                if !seen_members.insert(*m) {
                    return Err(Error::ConfigError(format!("{m} appears twice in layout")));
                }
            }
        }

        let mut bs = GroupController::new(cfg);
        let mut bs_rng = ChaCha20Rng::seed_from_u64(master_seed);
        let mut subs = BTreeMap::new();
        let mut membership = BTreeMap::new();
        let mut bs_alloc = PositionAllocator::new(cfg.field.code_len);
        for (scope, _) in layout {
            let seed = SeedKey {
                position: bs_alloc.lease_low(ScopeId::GROUP)?,
                secret: cfg.field.elem(bs_rng.gen()),
            };
            bs.sn_seeds.insert(*scope, seed);
            let sub_rng = master_seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(scope.0 as u64 + 1);
            subs.insert(*scope, SubgroupController::new(cfg, *scope, seed, sub_rng));
        }

        let epoch = 1;
        let mut record = blank_record(epoch, EventKind::Init);
        record.joiners = layout.iter().flat_map(|(_, ms)| ms.iter().copied()).collect();

        let mut group = Group { cfg, bs, subs, membership: BTreeMap::new(), event_seq: epoch };
        for (scope, members) in layout {
            let sub = group.subs.get_mut(scope).unwrap();
            let (tree, delta) = KeyTree::build_balanced_tree(*scope, members)?;
            sub.tree = tree;
            let mut ops = OpCounters::default();
            let rekeyed = sub.provision_and_rekey(epoch, &delta, &mut ops)?;
            for m in members {
                membership.insert(*m, *scope);
            }
            for sa in &rekeyed.assigns {
                push_seed_msg(&cfg, *sa, &mut record.messages);
            }
            let plan_ops = plan_subgroup_messages(
                sub,
                epoch,
                &delta,
                Mode::Bootstrap,
                &[],
                &rekeyed,
                &mut record.messages,
            );
            ops.add(&plan_ops);
            record.controller_ops.entry(*scope).or_default().add(&ops);
        }
        group.membership = membership;
        let gk_ctx = group.refresh_gk_state(epoch, &mut record)?;
        group.emit_gk_messages(epoch, GkMode::PerSubgroup, &[], gk_ctx, &mut record)?;
        sort_event_messages(&mut record.messages);
        Ok((group, record))
    }

    pub fn cfg(&self) -> &CryptoConfig {
        &self.cfg
    }

    pub fn subgroups(&self) -> impl Iterator<Item = (&ScopeId, &SubgroupController)> {
        self.subs.iter()
    }

    pub fn subgroup(&self, scope: ScopeId) -> Option<&SubgroupController> {
        self.subs.get(&scope)
    }

    pub fn group_key(&self) -> Option<&SessionKey> {
        self.bs.gk.as_ref()
    }

    pub fn member_scope(&self, m: MemberId) -> Option<ScopeId> {
        self.membership.get(&m).copied()
    }

    pub fn member_count(&self) -> usize {
        self.membership.len()
    }

    pub fn current_members(&self) -> impl Iterator<Item = (&MemberId, &ScopeId)> {
        self.membership.iter()
    }

    pub fn last_epoch(&self) -> u64 {
        self.event_seq
    }

    /// Ground truth for one member's keyring: path keys bottom-up plus the
    /// group key.
    pub fn expected_ring(&self, m: MemberId) -> Option<Vec<SessionKey>> {
        let scope = self.membership.get(&m)?;
        let sub = &self.subs[scope];
        let leaf = sub.tree.member_leaf(m)?;
        let mut ring: Vec<SessionKey> =
            sub.tree.path_to_root(leaf).iter().map(|id| sub.keys[id]).collect();
        ring.push(*self.bs.gk.as_ref()?);
        Some(ring)
    }

    /// Join target selection: any subgroup with a reusable pseudo slot
    /// first, then the lightest insertion point group-wide, ties to the
    /// lowest subgroup id.
    fn pick_join_target(&self) -> Result<ScopeId> {
        for (scope, sub) in &self.subs {
            if sub.tree.first_pseudo().is_some() {
                return Ok(*scope);
            }
        }
        let mut best: Option<(u32, ScopeId)> = None;
        for (scope, sub) in &self.subs {
            if !sub.can_accommodate(1) {
                continue;
            }
            let w = if sub.tree.is_empty() {
                0
            } else {
                sub.tree.best_leaf_parent().map(|(_, w)| w).unwrap_or(u32::MAX)
            };
            if best.is_none_or(|(bw, _)| w < bw) {
                best = Some((w, *scope));
            }
        }
        best.map(|(_, s)| s)
            .ok_or_else(|| Error::ConfigError("no subgroup has free positions".into()))
    }

    /// Single join; `subgroup` pins the target, otherwise the lightest
    /// insertion point in the whole tree wins.
    pub fn handle_join(&mut self, member: MemberId, subgroup: Option<ScopeId>) -> Result<EventRecord> {
        if self.membership.contains_key(&member) {
            return Err(Error::MembershipError(format!("{member} already in the group")));
        }
        let scope = match subgroup {
            Some(s) if self.subs.contains_key(&s) => s,
            Some(s) => return Err(Error::ConfigError(format!("unknown subgroup {s}"))),
            None => self.pick_join_target()?,
        };
        if !self.subs[&scope].can_accommodate(1) {
            return Err(Error::ConfigError(format!("subgroup {scope} has no room for a join")));
        }
        let epoch = self.next_epoch();
        let mut record = blank_record(epoch, EventKind::Join);
        record.target_subgroup = Some(scope);
        record.joiners = vec![member];

        let gk_ctx = self.refresh_gk_state(epoch, &mut record)?;
        let sub = self.subs.get_mut(&scope).unwrap();
        let delta = sub.tree.insert_leaf(member)?;
        let mut ops = OpCounters::default();
        let rekeyed = sub.provision_and_rekey(epoch, &delta, &mut ops)?;
        self.membership.insert(member, scope);
        record.clean = !delta.restructured;
        record.rebuilds = delta.rebuilds;
        record.subgroup_height = Some(sub.tree.height());
        record.root_degree = Some(sub.tree.node(sub.tree.root()).children.len() as u32);
        for sa in &rekeyed.assigns {
            push_seed_msg(&self.cfg, *sa, &mut record.messages);
        }
        let plan_ops = plan_subgroup_messages(
            sub,
            epoch,
            &delta,
            Mode::Additive,
            &[member],
            &rekeyed,
            &mut record.messages,
        );
        ops.add(&plan_ops);
        record.controller_ops.entry(scope).or_default().add(&ops);
        self.emit_gk_messages(epoch, GkMode::GroupWide, &[member], gk_ctx, &mut record)?;
        sort_event_messages(&mut record.messages);
        Ok(record)
    }

    /// Single leave: the departed member's whole key path regenerates and
    /// nothing new is ever sealed under a key it held.
    pub fn handle_leave(&mut self, member: MemberId) -> Result<EventRecord> {
        let scope = *self
            .membership
            .get(&member)
            .ok_or_else(|| Error::MembershipError(format!("{member} not in the group")))?;
        let epoch = self.next_epoch();
        let mut record = blank_record(epoch, EventKind::Leave);
        record.target_subgroup = Some(scope);
        record.leavers = vec![member];

        let gk_ctx = self.refresh_gk_state(epoch, &mut record)?;
        let sub = self.subs.get_mut(&scope).unwrap();
        let delta = sub.tree.remove_leaf(member)?;
        let mut ops = OpCounters::default();
        let rekeyed = sub.provision_and_rekey(epoch, &delta, &mut ops)?;
        self.membership.remove(&member);
        record.clean = !delta.restructured;
        record.rebuilds = delta.rebuilds;
        record.subgroup_height = Some(sub.tree.height());
        record.root_degree = Some(sub.tree.node(sub.tree.root()).children.len() as u32);
        let plan_ops = plan_subgroup_messages(
            sub,
            epoch,
            &delta,
            Mode::Subtractive,
            &[],
            &rekeyed,
            &mut record.messages,
        );
        ops.add(&plan_ops);
        record.controller_ops.entry(scope).or_default().add(&ops);
        self.emit_gk_messages(epoch, GkMode::PerSubgroup, &[], gk_ctx, &mut record)?;
        sort_event_messages(&mut record.messages);
        Ok(record)
    }

    /// Batch join into one subgroup: the joiners arrive as their own
    /// balanced tree merged at the closest-weight attachment point.
    pub fn handle_merge(&mut self, scope: ScopeId, members: &[MemberId]) -> Result<EventRecord> {
        if !self.subs.contains_key(&scope) {
            return Err(Error::ConfigError(format!("unknown subgroup {scope}")));
        }
        for m in members {
            if self.membership.contains_key(m) {
                return Err(Error::MembershipError(format!("{m} already in the group")));
            }
        }
        if !self.subs[&scope].can_accommodate(members.len()) {
            return Err(Error::ConfigError(format!(
                "subgroup {scope} has no room for {} joiners",
                members.len()
            )));
        }
        let epoch = self.next_epoch();
        let mut record = blank_record(epoch, EventKind::Merge);
        record.target_subgroup = Some(scope);
        record.joiners = members.to_vec();

        let gk_ctx = self.refresh_gk_state(epoch, &mut record)?;
        let sub = self.subs.get_mut(&scope).unwrap();
        let delta = sub.tree.merge_members(members)?;
        let mut ops = OpCounters::default();
        let rekeyed = sub.provision_and_rekey(epoch, &delta, &mut ops)?;
        for m in members {
            self.membership.insert(*m, scope);
        }
        record.clean = !delta.restructured;
        record.attach_gap = delta.attach_gap;
        record.rebuilds = delta.rebuilds;
        record.subgroup_height = Some(sub.tree.height());
        record.root_degree = Some(sub.tree.node(sub.tree.root()).children.len() as u32);
        for sa in &rekeyed.assigns {
            push_seed_msg(&self.cfg, *sa, &mut record.messages);
        }
        let plan_ops = plan_subgroup_messages(
            sub,
            epoch,
            &delta,
            Mode::Additive,
            members,
            &rekeyed,
            &mut record.messages,
        );
        ops.add(&plan_ops);
        record.controller_ops.entry(scope).or_default().add(&ops);
        self.emit_gk_messages(epoch, GkMode::GroupWide, members, gk_ctx, &mut record)?;
        sort_event_messages(&mut record.messages);
        Ok(record)
    }

    /// Batch departure, possibly spanning subgroups. Structure and keys are
    /// repaired per subgroup; the group key refreshes once at the end.
    pub fn handle_partition(&mut self, members: &[MemberId]) -> Result<EventRecord> {
        let mut by_scope: BTreeMap<ScopeId, Vec<MemberId>> = BTreeMap::new();
        for m in members {
            let scope = self
                .membership
                .get(m)
                .ok_or_else(|| Error::MembershipError(format!("{m} not in the group")))?;
            by_scope.entry(*scope).or_default().push(*m);
        }
        if by_scope.is_empty() {
            return Err(Error::MembershipError("partition of nobody".into()));
        }
        let epoch = self.next_epoch();
        let mut record = blank_record(epoch, EventKind::Partition);
        record.leavers = members.to_vec();
        record.target_subgroup = if by_scope.len() == 1 {
            Some(*by_scope.keys().next().unwrap())
        } else {
            None
        };

        let gk_ctx = self.refresh_gk_state(epoch, &mut record)?;
        for (scope, leavers) in &by_scope {
            let sub = self.subs.get_mut(scope).unwrap();
            let delta = sub.tree.partition_leaves(leavers)?;
            let mut ops = OpCounters::default();
            let rekeyed = sub.provision_and_rekey(epoch, &delta, &mut ops)?;
            for m in leavers {
                self.membership.remove(m);
            }
            record.clean &= !delta.restructured;
            record.rebuilds += delta.rebuilds;
            record.subgroup_height = Some(sub.tree.height());
            record.root_degree = Some(sub.tree.node(sub.tree.root()).children.len() as u32);
            let plan_ops = plan_subgroup_messages(
                sub,
                epoch,
                &delta,
                Mode::Subtractive,
                &[],
                &rekeyed,
                &mut record.messages,
            );
            ops.add(&plan_ops);
            record.controller_ops.entry(*scope).or_default().add(&ops);
        }
        self.emit_gk_messages(epoch, GkMode::PerSubgroup, &[], gk_ctx, &mut record)?;
        sort_event_messages(&mut record.messages);
        Ok(record)
    }

    fn next_epoch(&mut self) -> u64 {
        self.event_seq += 1;
        self.event_seq
    }

    /// Regenerates the group key, lets every sink node decode it, and
    /// queues the broadcast. Sealing messages follow in
    /// [`Group::emit_gk_messages`] once subgroup keys are final.
    fn refresh_gk_state(&mut self, epoch: u64, record: &mut EventRecord) -> Result<GkContext> {
        let gk_old = self.bs.gk;
        let mut bs_ops = OpCounters::default();
        let (gk_new, broadcast) = self.bs.refresh_gk(epoch, &mut bs_ops)?;
        record.controller_ops.entry(ScopeId::GROUP).or_default().add(&bs_ops);

        let bytes = wire::encode_broadcast(&self.cfg, &broadcast).len();
        // Sink nodes are the participants; their synthetic leaf ids in the
        // group scope identify the seed owners for the bookkeeping.
        let participants: Vec<(Position, NodeId)> = self
            .bs
            .sn_seeds
            .iter()
            .map(|(scope, s)| (s.position, NodeId::new(ScopeId::GROUP, scope.0)))
            .collect();
        record.messages.push(OutMsg {
            payload: WirePayload::Broadcast(broadcast.clone()),
            cast: Cast::Multicast,
            scope: ScopeId::GROUP,
            recipients: self.subs.keys().map(|s| Principal::Sn(*s)).collect(),
            participants,
            bytes,
        });
        for sub in self.subs.values_mut() {
            let mut sub_ops = OpCounters::default();
            let decoded = sub.process_gk_broadcast(&broadcast, &mut sub_ops);
            debug_assert_eq!(decoded, gk_new);
            record.controller_ops.entry(sub.scope).or_default().add(&sub_ops);
        }
        Ok(GkContext { gk_old, gk_new })
    }

    fn emit_gk_messages(
        &mut self,
        epoch: u64,
        mode: GkMode,
        joiners: &[MemberId],
        ctx: GkContext,
        record: &mut EventRecord,
    ) -> Result<()> {
        match mode {
            GkMode::GroupWide => {
                let old = ctx
                    .gk_old
                    .ok_or_else(|| Error::ProtocolError("no previous group key".into()))?;
                let joiner_set: BTreeSet<MemberId> = joiners.iter().copied().collect();
                let recipients: Vec<Principal> = self
                    .membership
                    .keys()
                    .filter(|m| !joiner_set.contains(m))
                    .map(|m| Principal::Member(*m))
                    .collect();
                if !recipients.is_empty() {
                    let msg = seal_key(&self.cfg, &old, &ctx.gk_new, epoch);
                    record.controller_ops.entry(ScopeId::GROUP).or_default().enc += 1;
                    push_sealed_msg(msg, ScopeId::GROUP, recipients, &mut record.messages);
                }
            }
            GkMode::PerSubgroup => {
                for sub in self.subs.values() {
                    if sub.tree.is_empty() {
                        continue;
                    }
                    let root_key = *sub
                        .keys
                        .get(&sub.tree.root())
                        .expect("nonempty subgroup has a root key");
                    let recipients: Vec<Principal> = sub
                        .tree
                        .members_under(sub.tree.root())
                        .into_iter()
                        .map(Principal::Member)
                        .collect();
                    let msg = seal_key(&self.cfg, &root_key, &ctx.gk_new, epoch);
                    record.controller_ops.entry(sub.scope).or_default().enc += 1;
                    push_sealed_msg(msg, sub.scope, recipients, &mut record.messages);
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct GkContext {
    gk_old: Option<SessionKey>,
    gk_new: SessionKey,
}

fn blank_record(epoch: u64, kind: EventKind) -> EventRecord {
    EventRecord {
        epoch,
        kind,
        target_subgroup: None,
        joiners: Vec::new(),
        leavers: Vec::new(),
        messages: Vec::new(),
        controller_ops: BTreeMap::new(),
        subgroup_height: None,
        root_degree: None,
        clean: true,
        attach_gap: None,
        rebuilds: 0,
    }
}

/// Canonical per-event wire order: seed unicasts, subgroup rekey traffic,
/// then group-scope messages, stable within each class.
fn sort_event_messages(messages: &mut [OutMsg]) {
    let rank = |m: &OutMsg| -> u8 {
        match (&m.payload, m.scope.is_group()) {
            (WirePayload::Seed(_), _) => 0,
            (_, false) => 1,
            (WirePayload::Broadcast(_), true) => 2,
            (WirePayload::Sealed(_), true) => 3,
        }
    };
    messages.sort_by_key(rank);
}

fn push_seed_msg(cfg: &CryptoConfig, sa: SeedAssign, out: &mut Vec<OutMsg>) {
    let bytes = wire::encode_seed_assign(cfg, &sa).len();
    out.push(OutMsg {
        payload: WirePayload::Seed(sa),
        cast: Cast::Unicast,
        scope: sa.scope,
        recipients: vec![Principal::Member(sa.member)],
        participants: Vec::new(),
        bytes,
    });
}

fn push_sealed_msg(
    msg: SealedKeyMsg,
    scope: ScopeId,
    recipients: Vec<Principal>,
    out: &mut Vec<OutMsg>,
) {
    if recipients.is_empty() {
        return;
    }
    let bytes = wire::encode_sealed(&msg).len();
    out.push(OutMsg {
        payload: WirePayload::Sealed(msg),
        cast: Cast::Multicast,
        scope,
        recipients,
        participants: Vec::new(),
        bytes,
    });
}

/// Plans the per-subgroup rekey messages for one event from the dirty
/// region. See the module docs for the rules.
fn plan_subgroup_messages(
    sub: &SubgroupController,
    epoch: u64,
    delta: &StructuralDelta,
    mode: Mode,
    joiners: &[MemberId],
    rekeyed: &Rekeyed,
    out: &mut Vec<OutMsg>,
) -> OpCounters {
    let mut ops = OpCounters::default();
    let scope = sub.scope;
    let tree = &sub.tree;
    if tree.is_empty() {
        return ops;
    }
    let dirty: BTreeSet<NodeId> =
        delta.dirty.iter().copied().filter(|id| tree.contains_node(*id)).collect();
    let created: BTreeSet<NodeId> = delta.created.iter().copied().collect();
    let joiner_set: BTreeSet<MemberId> = joiners.iter().copied().collect();

    let tail_above = |v: NodeId| -> Vec<SessionKey> {
        tree.path_to_root(v)
            .into_iter()
            .filter(|p| dirty.contains(p))
            .map(|p| sub.keys[&p])
            .collect()
    };

    for &v in &delta.dirty {
        if !tree.contains_node(v) {
            continue;
        }
        let node = tree.node(v);
        if node.children.is_empty() {
            continue;
        }
        let is_leaf_parent = node.children.iter().all(|c| tree.node(*c).kind.is_leaf());
        if is_leaf_parent {
            let members = tree.members_under(v);
            if members.is_empty() {
                continue;
            }
            let b = rekeyed.broadcasts[&v].clone();
            let bytes = wire::encode_broadcast(&sub.cfg, &b).len();
            let participants: Vec<(Position, NodeId)> =
                node.children.iter().map(|c| (sub.seeds[c].position, *c)).collect();
            out.push(OutMsg {
                payload: WirePayload::Broadcast(b),
                cast: Cast::Multicast,
                scope,
                recipients: members.iter().map(|m| Principal::Member(*m)).collect(),
                participants,
                bytes,
            });
            let mut carried = tail_above(v);
            if mode == Mode::Additive && members.iter().any(|m| joiner_set.contains(m)) {
                if let Some(gk) = sub.gk {
                    carried.push(gk);
                }
            }
            if !carried.is_empty() {
                let sealing = sub.keys[&v];
                let msg = seal_keys(&sub.cfg, &sealing, &carried, epoch);
                ops.enc += 1;
                push_sealed_msg(
                    msg,
                    scope,
                    members.into_iter().map(Principal::Member).collect(),
                    out,
                );
            }
            continue;
        }

        // Interior dirty node: serve the members whose lowest dirty
        // ancestor is v. Sealing under v's own previous key is only sound
        // when nothing moved: a member re-parented under v this event never
        // held that key, so restructured events stick to per-child seals.
        let mut carried = vec![sub.keys[&v]];
        carried.extend(tail_above(v));
        if mode == Mode::Additive
            && !delta.restructured
            && !created.contains(&v)
            && rekeyed.previous.contains_key(&v)
        {
            let excluded: BTreeSet<MemberId> = node
                .children
                .iter()
                .filter(|c| dirty.contains(c))
                .flat_map(|c| tree.members_under(*c))
                .collect();
            let recipients: Vec<Principal> = tree
                .members_under(v)
                .into_iter()
                .filter(|m| !excluded.contains(m))
                .map(Principal::Member)
                .collect();
            if recipients.is_empty() {
                continue;
            }
            let msg = seal_keys(&sub.cfg, &rekeyed.previous[&v], &carried, epoch);
            ops.enc += 1;
            push_sealed_msg(msg, scope, recipients, out);
        } else {
            for &c in &node.children {
                if dirty.contains(&c) || tree.node(c).kind.is_leaf() {
                    continue;
                }
                let members = tree.members_under(c);
                if members.is_empty() {
                    continue;
                }
                let sealing = sub.keys[&c];
                let msg = seal_keys(&sub.cfg, &sealing, &carried, epoch);
                ops.enc += 1;
                push_sealed_msg(
                    msg,
                    scope,
                    members.into_iter().map(Principal::Member).collect(),
                    out,
                );
            }
        }
    }
    ops
}

/// A member's protocol state: its seed, its keyring from leaf parent to
/// group key, and everything it has ever held (for the secrecy probes).
///
/// The subgroup path and the group key are stored apart: path rewrites
/// (splits, merges, rebuilds) must never disturb the group-key slot.
#[derive(Debug, Clone)]
pub struct MemberState {
    pub id: MemberId,
    pub scope: Option<ScopeId>,
    pub leaf: Option<NodeId>,
    pub seed: Option<SeedKey>,
    /// Subgroup path keys, leaf-parent first, subgroup root last.
    pub path: Vec<SessionKey>,
    /// Current group key.
    pub gk: Option<SessionKey>,
    pub knowledge: Knowledge,
}

/// Append-only record of secrets a principal has possessed.
#[derive(Debug, Clone, Default)]
pub struct Knowledge {
    pub seeds: Vec<(ScopeId, SeedKey)>,
    pub keys: Vec<SessionKey>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProcessOutcome {
    /// State advanced; the flags say what work the member did.
    Applied { decoded: bool, opened: bool },
    /// Not for this member, or stale: nothing changed.
    Ignored,
}

impl MemberState {
    pub fn new(id: MemberId) -> Self {
        MemberState {
            id,
            scope: None,
            leaf: None,
            seed: None,
            path: Vec::new(),
            gk: None,
            knowledge: Knowledge::default(),
        }
    }

    /// Full keyring, leaf-parent key first, group key last.
    pub fn ring(&self) -> Vec<SessionKey> {
        let mut out = self.path.clone();
        out.extend(self.gk);
        out
    }

    /// Applies one delivered message. `AuthFailure` comes back only when
    /// the member provably needed the message and could not open it; the
    /// harness treats that as a protocol bug.
    pub fn process(&mut self, cfg: &CryptoConfig, msg: &WirePayload) -> Result<ProcessOutcome> {
        match msg {
            WirePayload::Seed(sa) => {
                if sa.member != self.id {
                    return Ok(ProcessOutcome::Ignored);
                }
                self.scope = Some(sa.scope);
                self.leaf = Some(sa.leaf);
                self.seed = Some(sa.seed);
                self.path.clear();
                self.gk = None;
                self.knowledge.seeds.push((sa.scope, sa.seed));
                Ok(ProcessOutcome::Applied { decoded: false, opened: false })
            }
            WirePayload::Broadcast(b) => {
                let (Some(scope), Some(seed)) = (self.scope, self.seed) else {
                    return Ok(ProcessOutcome::Ignored);
                };
                if b.scope != scope {
                    return Ok(ProcessOutcome::Ignored);
                }
                if let Some(first) = self.path.first() {
                    if b.epoch < first.epoch {
                        return Ok(ProcessOutcome::Ignored);
                    }
                }
                let key = member_recover_key(cfg, &seed, b);
                if self.path.first().map(|k| k.node) == Some(b.target_node) {
                    // Same leaf parent refreshed; the tail stays valid.
                    self.path[0] = key;
                } else {
                    // Re-parented: the old path above is void, the bundle
                    // that follows rebuilds it.
                    self.path = vec![key];
                }
                self.knowledge.keys.push(key);
                Ok(ProcessOutcome::Applied { decoded: true, opened: false })
            }
            WirePayload::Sealed(sealed) => {
                let Some(sealing) = self.lookup(sealed.sealing_node, sealed.sealing_epoch)
                else {
                    return self.skip_or_flag(sealed);
                };
                let carried = open_keys(cfg, &sealing, sealed)?;
                self.apply_keys(sealed.sealing_node, &carried);
                Ok(ProcessOutcome::Applied { decoded: false, opened: true })
            }
        }
    }

    fn lookup(&self, node: NodeId, epoch: u64) -> Option<SessionKey> {
        if let Some(gk) = self.gk {
            if gk.node == node && gk.epoch == epoch {
                return Some(gk);
            }
        }
        self.path.iter().find(|k| k.node == node && k.epoch == epoch).copied()
    }

    /// Applies opened keys: the group key updates its own slot; path keys
    /// rewrite everything above the sealing position. Every sealed bundle
    /// carries the contiguous refreshed tail up to the subgroup root, so a
    /// rewrite is always complete — stale middle entries cannot survive a
    /// level disappearing above the member.
    fn apply_keys(&mut self, sealing_node: NodeId, carried: &[SessionKey]) {
        for k in carried {
            self.knowledge.keys.push(*k);
        }
        let (gk_keys, path_keys): (Vec<SessionKey>, Vec<SessionKey>) =
            carried.iter().partition(|k| k.node == BS_NODE);
        if let Some(gk) = gk_keys.last() {
            if self.gk.is_none_or(|cur| gk.epoch >= cur.epoch) {
                self.gk = Some(*gk);
            }
        }
        if path_keys.is_empty() {
            return;
        }
        let sealing_at = self.path.iter().position(|k| k.node == sealing_node);
        let keep = match sealing_at {
            Some(at) if path_keys.first().map(|k| k.node) == Some(sealing_node) => at,
            Some(at) => at + 1,
            // Sealed under the group key yet rewriting the path: replace it
            // wholesale.
            None => 0,
        };
        self.path.truncate(keep);
        self.path.extend_from_slice(&path_keys);
    }

    /// A sealed message we cannot open: fine if it is stale or for another
    /// path, a protocol bug if it carries keys we need.
    fn skip_or_flag(&self, sealed: &SealedKeyMsg) -> Result<ProcessOutcome> {
        let ring = self.ring();
        let needed = sealed
            .carried_nodes
            .iter()
            .any(|n| ring.iter().any(|r| r.node == *n && r.epoch < sealed.epoch));
        if needed {
            return Err(Error::AuthFailure);
        }
        Ok(ProcessOutcome::Ignored)
    }
}
