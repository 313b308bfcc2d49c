//! The weight-balanced 2-3 key tree: weights, balance checking, and the
//! structural adjustment rules for join, leave, merge, and partition,
//! including pseudo-node placement.
//!
//! Weights follow the downward recursion W(leaf) = 0,
//! W(v) = deg(v) + max over children of W(child). A node is balanced when
//! its children's weights pairwise differ by at most 1; internal degrees
//! are 2 or 3. The subgroup root is a permanent node that may temporarily
//! hold 0 or 1 children while the subgroup has at most one member.
//!
//! Every operation reports a `StructuralDelta`: which nodes need new keys
//! (any node whose member set changed, plus every created node), what was
//! created, and what died. Rekey message planning is built on that report.

use crate::error::{Error, Result};
use crate::ids::{MemberId, NodeId, ScopeId};
use std::collections::{BTreeMap, BTreeSet};

/// Role of a node inside one subgroup tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    /// The permanent top node; its key is the subgroup key.
    SubgroupRoot,
    /// Interior node with no physical device behind it.
    Logic,
    /// A member's leaf.
    Member(MemberId),
    /// Placeholder leaf keeping degrees in {2, 3} after departures.
    Pseudo,
}

impl NodeKind {
    pub fn is_leaf(self) -> bool {
        matches!(self, NodeKind::Member(_) | NodeKind::Pseudo)
    }
}

#[derive(Debug, Clone)]
pub struct KeyNode {
    pub id: NodeId,
    pub kind: NodeKind,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
}

/// What one structural operation did, for the rekey planner.
#[derive(Debug, Clone, Default)]
pub struct StructuralDelta {
    /// Nodes whose keys must be regenerated, bottom-up (children before
    /// parents). Always a root-connected region.
    pub dirty: Vec<NodeId>,
    /// Nodes created by the operation (leaves, pseudos, logic nodes).
    pub created: Vec<NodeId>,
    /// Nodes removed by the operation.
    pub removed: Vec<NodeId>,
    /// Leaf node now hosting the member, for insert-like operations.
    pub member_leaf: Option<NodeId>,
    /// Subtree-weight gap at the chosen merge attachment point.
    pub attach_gap: Option<u32>,
    /// True when anything beyond a plain leaf attach/detach happened.
    pub restructured: bool,
    /// Full or partial rebuilds taken by the repair fallback.
    pub rebuilds: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BalanceViolation {
    Degree { node: NodeId, degree: usize },
    WeightGap { node: NodeId, min: u32, max: u32 },
    DepthMismatch { node: NodeId },
}

/// Operation recorder; folded into a `StructuralDelta` when the op ends.
#[derive(Debug, Default)]
struct Recorder {
    touched: BTreeSet<NodeId>,
    created: BTreeSet<NodeId>,
    removed: BTreeSet<NodeId>,
    restructured: bool,
    rebuilds: u32,
}

impl Recorder {
    fn create(&mut self, id: NodeId) {
        self.created.insert(id);
    }

    fn remove(&mut self, id: NodeId) {
        if !self.created.remove(&id) {
            self.removed.insert(id);
        }
        self.touched.remove(&id);
    }
}

#[derive(Debug, Clone)]
pub struct KeyTree {
    scope: ScopeId,
    nodes: BTreeMap<NodeId, KeyNode>,
    root: NodeId,
    members: BTreeMap<MemberId, NodeId>,
    pseudo_count: usize,
    next_seq: u32,
}

impl KeyTree {
    pub fn new(scope: ScopeId) -> Self {
        let root = NodeId::new(scope, 0);
        let mut nodes = BTreeMap::new();
        nodes.insert(
            root,
            KeyNode { id: root, kind: NodeKind::SubgroupRoot, parent: None, children: Vec::new() },
        );
        KeyTree { scope, nodes, root, members: BTreeMap::new(), pseudo_count: 0, next_seq: 1 }
    }

    pub fn scope(&self) -> ScopeId {
        self.scope
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn node(&self, id: NodeId) -> &KeyNode {
        &self.nodes[&id]
    }

    pub fn contains_node(&self, id: NodeId) -> bool {
        self.nodes.contains_key(&id)
    }

    pub fn member_count(&self) -> usize {
        self.members.len()
    }

    pub fn pseudo_count(&self) -> usize {
        self.pseudo_count
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn members(&self) -> impl Iterator<Item = (&MemberId, &NodeId)> {
        self.members.iter()
    }

    pub fn member_leaf(&self, m: MemberId) -> Option<NodeId> {
        self.members.get(&m).copied()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    fn alloc_node(&mut self, kind: NodeKind) -> NodeId {
        let id = NodeId::new(self.scope, self.next_seq);
        self.next_seq += 1;
        self.nodes.insert(id, KeyNode { id, kind, parent: None, children: Vec::new() });
        if kind == NodeKind::Pseudo {
            self.pseudo_count += 1;
        }
        if let NodeKind::Member(m) = kind {
            self.members.insert(m, id);
        }
        id
    }

    fn drop_node(&mut self, id: NodeId) {
        let node = self.nodes.remove(&id).expect("drop of unknown node");
        match node.kind {
            NodeKind::Pseudo => self.pseudo_count -= 1,
            NodeKind::Member(m) => {
                self.members.remove(&m);
            }
            _ => {}
        }
    }

    /// Height in levels including the leaf level; a leaf is 1, the
    /// root-over-leaf-parents-over-leaves subgroup is 3.
    pub fn node_height(&self, id: NodeId) -> u32 {
        let node = &self.nodes[&id];
        if node.kind.is_leaf() {
            return 1;
        }
        1 + node.children.iter().map(|&c| self.node_height(c)).max().unwrap_or(0)
    }

    /// Height of the whole subgroup tree.
    pub fn height(&self) -> u32 {
        self.node_height(self.root)
    }

    /// Weight of the tree as a structure: a tree holding at most one leaf
    /// weighs 0 (the permanent root node does not count as a real level).
    pub fn tree_weight(&self) -> u32 {
        if self.nodes[&self.root].children.len() <= 1 {
            return 0;
        }
        self.subtree_weight(self.root)
    }

    /// W(leaf) = 0; W(v) = deg(v) + max child W.
    pub fn subtree_weight(&self, id: NodeId) -> u32 {
        let node = &self.nodes[&id];
        if node.children.is_empty() {
            return 0;
        }
        node.children.len() as u32
            + node.children.iter().map(|&c| self.subtree_weight(c)).max().unwrap()
    }

    /// Sum of parent degrees on the path to the root; the communication
    /// cost proxy used by the ledger. The root weighs 0.
    pub fn ancestor_weight(&self, id: NodeId) -> u32 {
        let mut acc = 0;
        let mut cur = id;
        while let Some(p) = self.nodes[&cur].parent {
            acc += self.nodes[&p].children.len() as u32;
            cur = p;
        }
        acc
    }

    /// Path from `id`'s parent up to and including the root.
    pub fn path_to_root(&self, id: NodeId) -> Vec<NodeId> {
        let mut path = Vec::new();
        let mut cur = id;
        while let Some(p) = self.nodes[&cur].parent {
            path.push(p);
            cur = p;
        }
        path
    }

    /// Member leaves below `id`, in tree order.
    pub fn members_under(&self, id: NodeId) -> Vec<MemberId> {
        let mut out = Vec::new();
        self.walk_members(id, &mut out);
        out
    }

    fn walk_members(&self, id: NodeId, out: &mut Vec<MemberId>) {
        match self.nodes[&id].kind {
            NodeKind::Member(m) => out.push(m),
            NodeKind::Pseudo => {}
            _ => {
                for &c in &self.nodes[&id].children {
                    self.walk_members(c, out);
                }
            }
        }
    }

    fn count_members_under(&self, id: NodeId) -> usize {
        match self.nodes[&id].kind {
            NodeKind::Member(_) => 1,
            NodeKind::Pseudo => 0,
            _ => self.nodes[&id]
                .children
                .iter()
                .map(|&c| self.count_members_under(c))
                .sum(),
        }
    }

    /// Internal nodes in order, leaves excluded.
    pub fn internal_nodes_in_order(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        self.walk_internal(self.root, &mut out);
        out
    }

    fn walk_internal(&self, id: NodeId, out: &mut Vec<NodeId>) {
        if self.nodes[&id].kind.is_leaf() {
            return;
        }
        out.push(id);
        for &c in &self.nodes[&id].children {
            self.walk_internal(c, out);
        }
    }

    /// Empty iff every internal node has a legal degree and weight-balanced,
    /// uniform-depth children. A root holding at most one member may sit at
    /// degree 0 or 1 over a leaf.
    pub fn check_balance(&self) -> Vec<BalanceViolation> {
        let mut out = Vec::new();
        for id in self.internal_nodes_in_order() {
            let node = &self.nodes[&id];
            let deg = node.children.len();
            let degenerate_root_ok = id == self.root
                && self.members.len() <= 1
                && (deg == 0 || (deg == 1 && self.nodes[&node.children[0]].kind.is_leaf()));
            if !(2..=3).contains(&deg) && !degenerate_root_ok {
                out.push(BalanceViolation::Degree { node: id, degree: deg });
            }
            if deg >= 2 {
                let ws: Vec<u32> =
                    node.children.iter().map(|&c| self.subtree_weight(c)).collect();
                let (min, max) = (*ws.iter().min().unwrap(), *ws.iter().max().unwrap());
                if max - min > 1 {
                    out.push(BalanceViolation::WeightGap { node: id, min, max });
                }
                let hs: Vec<u32> =
                    node.children.iter().map(|&c| self.node_height(c)).collect();
                if hs.iter().any(|&h| h != hs[0]) {
                    out.push(BalanceViolation::DepthMismatch { node: id });
                }
            }
        }
        out
    }

    /// Canonical nested text form for golden tests. Members print as `mN`,
    /// pseudos as `#`.
    pub fn snapshot(&self) -> String {
        let mut s = String::new();
        self.render(self.root, &mut s);
        s
    }

    fn render(&self, id: NodeId, s: &mut String) {
        match self.nodes[&id].kind {
            NodeKind::Member(m) => s.push_str(&m.to_string()),
            NodeKind::Pseudo => s.push('#'),
            _ => {
                s.push('(');
                for (i, &c) in self.nodes[&id].children.iter().enumerate() {
                    if i > 0 {
                        s.push(' ');
                    }
                    self.render(c, s);
                }
                s.push(')');
            }
        }
    }

    // ---- attachment plumbing -------------------------------------------

    fn mark_path(&self, from: NodeId, rec: &mut Recorder) {
        rec.touched.insert(from);
        for p in self.path_to_root(from) {
            rec.touched.insert(p);
        }
    }

    fn attach(&mut self, child: NodeId, parent: NodeId, at: Option<usize>, rec: &mut Recorder) {
        match at {
            Some(i) => self.nodes.get_mut(&parent).unwrap().children.insert(i, child),
            None => self.nodes.get_mut(&parent).unwrap().children.push(child),
        }
        self.nodes.get_mut(&child).unwrap().parent = Some(parent);
        self.mark_path(parent, rec);
    }

    fn detach(&mut self, child: NodeId, rec: &mut Recorder) {
        let parent = self.nodes[&child].parent.expect("detach of parentless node");
        self.mark_path(parent, rec);
        let kids = &mut self.nodes.get_mut(&parent).unwrap().children;
        let at = kids.iter().position(|&c| c == child).expect("child not under parent");
        kids.remove(at);
        self.nodes.get_mut(&child).unwrap().parent = None;
    }

    /// Removes a whole detached subtree from the arena.
    fn drop_subtree(&mut self, id: NodeId, rec: &mut Recorder) {
        let children = self.nodes[&id].children.clone();
        for c in children {
            self.drop_subtree(c, rec);
        }
        rec.remove(id);
        self.drop_node(id);
    }

    fn finish(
        &self,
        rec: Recorder,
        member_leaf: Option<NodeId>,
        gap: Option<u32>,
    ) -> StructuralDelta {
        let mut dirty: Vec<NodeId> = rec
            .touched
            .iter()
            .chain(rec.created.iter())
            .copied()
            .filter(|id| self.nodes.contains_key(id))
            .filter(|id| !self.nodes[id].kind.is_leaf())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        // Children before parents so key generation can run in order.
        let mut order: BTreeMap<NodeId, (u32, usize)> = BTreeMap::new();
        for id in &dirty {
            order.insert(*id, (self.node_height(*id), self.in_order_index(*id)));
        }
        dirty.sort_by_key(|id| order[id]);
        StructuralDelta {
            dirty,
            created: rec.created.into_iter().collect(),
            removed: rec.removed.into_iter().collect(),
            member_leaf,
            attach_gap: gap,
            restructured: rec.restructured,
            rebuilds: rec.rebuilds,
        }
    }

    fn in_order_index(&self, id: NodeId) -> usize {
        let mut idx = 0;
        let mut found = usize::MAX;
        self.index_walk(self.root, id, &mut idx, &mut found);
        found
    }

    fn index_walk(&self, cur: NodeId, want: NodeId, idx: &mut usize, found: &mut usize) {
        if cur == want {
            *found = *idx;
        }
        *idx += 1;
        if *found != usize::MAX {
            return;
        }
        let kids = self.nodes[&cur].children.clone();
        for c in kids {
            self.index_walk(c, want, idx, found);
            if *found != usize::MAX {
                return;
            }
        }
    }

    // ---- insertion ------------------------------------------------------

    /// Leftmost pseudo leaf, if any: reuse before growth.
    pub fn first_pseudo(&self) -> Option<NodeId> {
        self.find_pseudo(self.root)
    }

    fn find_pseudo(&self, id: NodeId) -> Option<NodeId> {
        match self.nodes[&id].kind {
            NodeKind::Pseudo => Some(id),
            NodeKind::Member(_) => None,
            _ => self.nodes[&id].children.iter().find_map(|&c| self.find_pseudo(c)),
        }
    }

    /// The insertion target: parent of a reusable pseudo if one exists,
    /// otherwise the leaf-parent with minimum subtree weight, leftmost on
    /// ties. `None` only for an empty tree.
    pub fn find_insertion_point(&self) -> Option<NodeId> {
        if let Some(p) = self.first_pseudo() {
            return self.nodes[&p].parent;
        }
        self.best_leaf_parent().map(|(id, _)| id)
    }

    /// Minimum-weight leaf-parent with its weight, leftmost on ties.
    pub fn best_leaf_parent(&self) -> Option<(NodeId, u32)> {
        let mut best: Option<(NodeId, u32)> = None;
        for id in self.internal_nodes_in_order() {
            let node = &self.nodes[&id];
            if node.children.is_empty()
                || !node.children.iter().all(|&c| self.nodes[&c].kind.is_leaf())
            {
                continue;
            }
            let w = self.subtree_weight(id);
            if best.is_none_or(|(_, bw)| w < bw) {
                best = Some((id, w));
            }
        }
        best
    }

    /// Inserts a member, reusing a pseudo slot when one exists, otherwise
    /// attaching at the minimum-weight leaf-parent with splits or a
    /// pseudo-padded sibling when the target is full.
    pub fn insert_leaf(&mut self, member: MemberId) -> Result<StructuralDelta> {
        if self.members.contains_key(&member) {
            return Err(Error::MembershipError(format!("{member} already present")));
        }
        let mut rec = Recorder::default();

        // Reuse rule: swap the leftmost pseudo for the member.
        if let Some(pseudo) = self.first_pseudo() {
            let parent = self.nodes[&pseudo].parent.expect("pseudo without parent");
            let at = self.nodes[&parent].children.iter().position(|&c| c == pseudo).unwrap();
            self.detach(pseudo, &mut rec);
            rec.remove(pseudo);
            self.drop_node(pseudo);
            let leaf = self.alloc_node(NodeKind::Member(member));
            rec.create(leaf);
            self.attach(leaf, parent, Some(at), &mut rec);
            return Ok(self.finish(rec, Some(leaf), None));
        }

        if self.members.is_empty() {
            let leaf = self.alloc_node(NodeKind::Member(member));
            rec.create(leaf);
            self.attach(leaf, self.root, None, &mut rec);
            return Ok(self.finish(rec, Some(leaf), None));
        }

        let (target, _) = self.best_leaf_parent().expect("nonempty tree has a leaf parent");
        let leaf = self.alloc_node(NodeKind::Member(member));
        rec.create(leaf);

        if self.nodes[&target].children.len() < 3 {
            self.attach(leaf, target, None, &mut rec);
        } else {
            let parent = self.nodes[&target].parent;
            match parent {
                Some(p) if self.nodes[&p].children.len() == 2 => {
                    // Full target but room next to it: a new sibling holding
                    // the member plus a pseudo keeps the old node untouched.
                    let pseudo = self.alloc_node(NodeKind::Pseudo);
                    rec.create(pseudo);
                    let sib = self.alloc_node(NodeKind::Logic);
                    rec.create(sib);
                    self.attach(leaf, sib, None, &mut rec);
                    self.attach(pseudo, sib, None, &mut rec);
                    self.attach(sib, p, None, &mut rec);
                    rec.restructured = true;
                }
                _ => {
                    self.attach(leaf, target, None, &mut rec);
                    self.split_overflow(target, &mut rec);
                    rec.restructured = true;
                }
            }
        }
        self.repair_weights_upward(self.nodes[&leaf].parent.unwrap(), &mut rec);
        self.ensure_balanced(&mut rec);
        Ok(self.finish(rec, Some(leaf), None))
    }

    /// Splits degree-4 nodes upward, pairing children by weight so sibling
    /// weights stay within 1.
    fn split_overflow(&mut self, mut v: NodeId, rec: &mut Recorder) {
        while self.nodes[&v].children.len() > 3 {
            let kids = self.nodes[&v].children.clone();
            let mut by_w: Vec<(u32, usize)> = kids
                .iter()
                .enumerate()
                .map(|(i, &c)| (self.subtree_weight(c), i))
                .collect();
            by_w.sort();
            // (min, max) with (mid, mid) equalizes the two halves.
            let mut a: Vec<usize> = vec![by_w[0].1, by_w[3].1];
            let mut b: Vec<usize> = vec![by_w[1].1, by_w[2].1];
            a.sort();
            b.sort();
            let group_a: Vec<NodeId> = a.iter().map(|&i| kids[i]).collect();
            let group_b: Vec<NodeId> = b.iter().map(|&i| kids[i]).collect();

            if v == self.root {
                let left = self.alloc_node(NodeKind::Logic);
                let right = self.alloc_node(NodeKind::Logic);
                rec.create(left);
                rec.create(right);
                for &c in &group_a {
                    self.nodes.get_mut(&left).unwrap().children.push(c);
                    self.nodes.get_mut(&c).unwrap().parent = Some(left);
                }
                for &c in &group_b {
                    self.nodes.get_mut(&right).unwrap().children.push(c);
                    self.nodes.get_mut(&c).unwrap().parent = Some(right);
                }
                self.nodes.get_mut(&left).unwrap().parent = Some(v);
                self.nodes.get_mut(&right).unwrap().parent = Some(v);
                self.nodes.get_mut(&v).unwrap().children = vec![left, right];
                rec.touched.insert(v);
                return;
            }

            let sib = self.alloc_node(NodeKind::Logic);
            rec.create(sib);
            self.nodes.get_mut(&v).unwrap().children = group_a.clone();
            for &c in &group_a {
                self.nodes.get_mut(&c).unwrap().parent = Some(v);
            }
            for &c in &group_b {
                self.nodes.get_mut(&sib).unwrap().children.push(c);
                self.nodes.get_mut(&c).unwrap().parent = Some(sib);
            }
            let p = self.nodes[&v].parent.unwrap();
            let at = self.nodes[&p].children.iter().position(|&c| c == v).unwrap() + 1;
            self.nodes.get_mut(&p).unwrap().children.insert(at, sib);
            self.nodes.get_mut(&sib).unwrap().parent = Some(p);
            rec.touched.insert(v);
            self.mark_path(p, rec);
            v = p;
        }
    }

    // ---- removal --------------------------------------------------------

    /// Removes a member's leaf. A degree-2 parent keeps its shape by
    /// adopting a pseudo leaf; subtrees left without members are pruned;
    /// weight repair walks upward.
    pub fn remove_leaf(&mut self, member: MemberId) -> Result<StructuralDelta> {
        let leaf = self
            .members
            .get(&member)
            .copied()
            .ok_or_else(|| Error::MembershipError(format!("{member} not present")))?;
        let mut rec = Recorder::default();
        let parent = self.nodes[&leaf].parent.expect("member leaf has a parent");
        self.detach(leaf, &mut rec);
        rec.remove(leaf);
        self.drop_node(leaf);

        if self.members.is_empty() {
            self.clear_all(&mut rec);
            return Ok(self.finish(rec, None, None));
        }

        self.repair_after_removal(parent, true, &mut rec);
        self.absorb_root(&mut rec);
        let start = if self.nodes.contains_key(&parent) { parent } else { self.root };
        self.repair_weights_upward(start, &mut rec);
        self.ensure_balanced(&mut rec);
        Ok(self.finish(rec, None, None))
    }

    fn clear_all(&mut self, rec: &mut Recorder) {
        let children = self.nodes[&self.root].children.clone();
        for c in children {
            self.detach(c, rec);
            self.drop_subtree(c, rec);
        }
        rec.touched.insert(self.root);
    }

    /// Degree repair at `p` after it lost a child. `prefer_pseudo` keeps the
    /// single-leave behavior (fill the hole, change nothing above); bulk
    /// repairs prefer borrowing and merging before padding.
    fn repair_after_removal(&mut self, p: NodeId, prefer_pseudo: bool, rec: &mut Recorder) {
        if !self.nodes.contains_key(&p) {
            return;
        }
        // Drop pseudo padding that is no longer needed to hold degree 2.
        if self.nodes[&p].children.len() >= 3 {
            self.gc_pseudos(p, rec);
        }
        let deg = self.nodes[&p].children.len();
        if deg >= 2 {
            return;
        }
        if p == self.root {
            return; // handled by absorb_root / degenerate allowance
        }
        if deg == 0 {
            let q = self.nodes[&p].parent.unwrap();
            self.detach(p, rec);
            rec.remove(p);
            self.drop_node(p);
            rec.restructured = true;
            self.repair_after_removal(q, prefer_pseudo, rec);
            return;
        }
        let lone = self.nodes[&p].children[0];
        if self.count_members_under(p) == 0 {
            // Nothing real left below: prune the whole remnant.
            let q = self.nodes[&p].parent.unwrap();
            self.detach(p, rec);
            self.drop_subtree(p, rec);
            rec.restructured = true;
            self.repair_after_removal(q, prefer_pseudo, rec);
            return;
        }
        if self.nodes[&lone].kind.is_leaf() {
            if prefer_pseudo {
                let pseudo = self.alloc_node(NodeKind::Pseudo);
                rec.create(pseudo);
                self.attach(pseudo, p, None, rec);
                return;
            }
            // Bulk mode: try to place the lone leaf with a sibling first.
            if self.borrow_or_merge(p, rec) {
                return;
            }
            let pseudo = self.alloc_node(NodeKind::Pseudo);
            rec.create(pseudo);
            self.attach(pseudo, p, None, rec);
            return;
        }
        // Lone internal child: rebalance against a sibling.
        if !self.borrow_or_merge(p, rec) {
            // No sibling can help; splice the lone child upward.
            let q = self.nodes[&p].parent.unwrap();
            let at = self.nodes[&q].children.iter().position(|&c| c == p).unwrap();
            self.detach(lone, rec);
            self.detach(p, rec);
            rec.remove(p);
            self.drop_node(p);
            self.attach(lone, q, Some(at), rec);
            rec.restructured = true;
        }
    }

    fn gc_pseudos(&mut self, p: NodeId, rec: &mut Recorder) {
        loop {
            let node = &self.nodes[&p];
            if node.children.len() <= 2 {
                return;
            }
            let Some(&pseudo) = node
                .children
                .iter()
                .rev()
                .find(|&&c| self.nodes[&c].kind == NodeKind::Pseudo)
            else {
                return;
            };
            self.detach(pseudo, rec);
            rec.remove(pseudo);
            self.drop_node(pseudo);
            rec.restructured = true;
        }
    }

    /// Fixes a degree-1 node by borrowing a child from a degree-3 sibling
    /// or merging its lone child into a degree-2 sibling. Returns false if
    /// the node has no siblings.
    fn borrow_or_merge(&mut self, p: NodeId, rec: &mut Recorder) -> bool {
        let Some(q) = self.nodes[&p].parent else {
            return false;
        };
        let sibs: Vec<NodeId> =
            self.nodes[&q].children.iter().copied().filter(|&c| c != p).collect();
        if sibs.is_empty() {
            return false;
        }
        let at = self.nodes[&q].children.iter().position(|&c| c == p).unwrap();
        // Adjacent first, left preferred.
        let ordered: Vec<NodeId> = {
            let kids = &self.nodes[&q].children;
            let mut v = Vec::new();
            if at > 0 {
                v.push(kids[at - 1]);
            }
            if at + 1 < kids.len() {
                v.push(kids[at + 1]);
            }
            for &s in &sibs {
                if !v.contains(&s) {
                    v.push(s);
                }
            }
            v
        };
        for &w in &ordered {
            if self.nodes[&w].children.len() == 3 {
                // Rotation: take w's child nearest to p.
                let w_at = self.nodes[&q].children.iter().position(|&c| c == w).unwrap();
                let give = if w_at < at {
                    *self.nodes[&w].children.last().unwrap()
                } else {
                    self.nodes[&w].children[0]
                };
                self.detach(give, rec);
                let slot = if w_at < at { Some(0) } else { None };
                self.attach(give, p, slot, rec);
                rec.restructured = true;
                return true;
            }
        }
        // All siblings degree <= 2: fold the lone child into the first one.
        let w = ordered[0];
        let lone = self.nodes[&p].children[0];
        let w_at = self.nodes[&q].children.iter().position(|&c| c == w).unwrap();
        self.detach(lone, rec);
        let slot = if w_at < at { None } else { Some(0) };
        self.attach(lone, w, slot, rec);
        self.detach(p, rec);
        rec.remove(p);
        self.drop_node(p);
        rec.restructured = true;
        self.repair_after_removal(q, false, rec);
        true
    }

    /// Collapses a degree-1 root over an internal child.
    fn absorb_root(&mut self, rec: &mut Recorder) {
        loop {
            let kids = self.nodes[&self.root].children.clone();
            if kids.len() != 1 || self.nodes[&kids[0]].kind.is_leaf() {
                return;
            }
            let child = kids[0];
            let grand = self.nodes[&child].children.clone();
            for &g in &grand {
                self.nodes.get_mut(&g).unwrap().parent = Some(self.root);
            }
            self.nodes.get_mut(&self.root).unwrap().children = grand;
            rec.remove(child);
            self.drop_node(child);
            rec.touched.insert(self.root);
            rec.restructured = true;
        }
    }

    // ---- weight repair ---------------------------------------------------

    /// Walks from `from` to the root restoring the sibling weight-gap
    /// invariant by moving grandchildren or re-pairing two siblings.
    fn repair_weights_upward(&mut self, from: NodeId, rec: &mut Recorder) {
        let mut cur = Some(if self.nodes.contains_key(&from) { from } else { self.root });
        while let Some(v) = cur {
            if !self.nodes[&v].kind.is_leaf() {
                self.repair_weights_at(v, rec);
            }
            cur = self.nodes[&v].parent;
        }
    }

    fn child_weights(&self, v: NodeId) -> Vec<u32> {
        self.nodes[&v].children.iter().map(|&c| self.subtree_weight(c)).collect()
    }

    fn weight_gap(&self, v: NodeId) -> u32 {
        let ws = self.child_weights(v);
        if ws.len() < 2 {
            return 0;
        }
        ws.iter().max().unwrap() - ws.iter().min().unwrap()
    }

    fn repair_weights_at(&mut self, v: NodeId, rec: &mut Recorder) {
        for _ in 0..4 {
            if self.nodes[&v].children.len() < 2 || self.weight_gap(v) <= 1 {
                return;
            }
            let kids = self.nodes[&v].children.clone();
            let ws = self.child_weights(v);
            let max = *ws.iter().max().unwrap();
            let min = *ws.iter().min().unwrap();
            let heavy = kids[ws.iter().position(|&w| w == max).unwrap()];
            let light = kids[ws.iter().position(|&w| w == min).unwrap()];
            if self.nodes[&heavy].kind.is_leaf() || self.nodes[&light].kind.is_leaf() {
                break; // leaf/internal mix needs the rebuild fallback
            }
            if !self.try_redistribute(v, heavy, light, rec) {
                break;
            }
        }
        if self.nodes[&v].children.len() >= 2 && self.weight_gap(v) > 1 {
            self.rebuild_subtree(v, rec);
        }
    }

    /// Moves one grandchild from `heavy` to `light`, or re-pairs their
    /// combined children, whichever evens the weights; false when no move
    /// helps.
    fn try_redistribute(
        &mut self,
        v: NodeId,
        heavy: NodeId,
        light: NodeId,
        rec: &mut Recorder,
    ) -> bool {
        let spread_now = self.weight_gap(v);
        // Heights must match for any grandchild move to keep leaves level.
        if self.node_height(heavy) != self.node_height(light) {
            return false;
        }
        let mut best: Option<(u32, usize)> = None;
        if self.nodes[&heavy].children.len() == 3 && self.nodes[&light].children.len() == 2 {
            let hk = self.nodes[&heavy].children.clone();
            for (i, &g) in hk.iter().enumerate() {
                // Simulate: heavy loses g, light gains g.
                let hw = 2 + hk
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, &c)| self.subtree_weight(c))
                    .max()
                    .unwrap();
                let lw = 3 + self.nodes[&light]
                    .children
                    .iter()
                    .map(|&c| self.subtree_weight(c))
                    .chain(std::iter::once(self.subtree_weight(g)))
                    .max()
                    .unwrap();
                let mut all: Vec<u32> = self.nodes[&v]
                    .children
                    .iter()
                    .filter(|&&c| c != heavy && c != light)
                    .map(|&c| self.subtree_weight(c))
                    .collect();
                all.push(hw);
                all.push(lw);
                let spread = *all.iter().max().unwrap() - *all.iter().min().unwrap();
                if best.is_none_or(|(bs, _)| spread < bs) {
                    best = Some((spread, i));
                }
            }
        }
        if let Some((spread, i)) = best {
            if spread < spread_now {
                let g = self.nodes[&heavy].children[i];
                self.detach(g, rec);
                self.attach(g, light, None, rec);
                rec.restructured = true;
                return true;
            }
        }
        // Re-pair heavy+light grandchildren into two groups of 2..=3.
        let pool: Vec<NodeId> = self.nodes[&heavy]
            .children
            .clone()
            .into_iter()
            .chain(self.nodes[&light].children.clone())
            .collect();
        if !(4..=6).contains(&pool.len()) {
            return false;
        }
        let ws: Vec<u32> = pool.iter().map(|&c| self.subtree_weight(c)).collect();
        let n = pool.len();
        let mut best_split: Option<(u32, Vec<usize>)> = None;
        for mask in 1u32..(1 << n) {
            let a = mask.count_ones() as usize;
            if !(2..=3).contains(&a) || !(2..=3).contains(&(n - a)) {
                continue;
            }
            let wa = a as u32
                + (0..n).filter(|i| mask & (1 << i) != 0).map(|i| ws[i]).max().unwrap();
            let wb = (n - a) as u32
                + (0..n).filter(|i| mask & (1 << i) == 0).map(|i| ws[i]).max().unwrap();
            let spread = wa.abs_diff(wb);
            if best_split.as_ref().is_none_or(|(bs, _)| spread < *bs) {
                best_split =
                    Some((spread, (0..n).filter(|i| mask & (1 << i) != 0).collect()));
            }
        }
        let Some((spread, pick)) = best_split else {
            return false;
        };
        if spread >= spread_now {
            return false;
        }
        let group_a: Vec<NodeId> = pick.iter().map(|&i| pool[i]).collect();
        let group_b: Vec<NodeId> =
            (0..n).filter(|i| !pick.contains(i)).map(|i| pool[i]).collect();
        self.nodes.get_mut(&heavy).unwrap().children = group_a.clone();
        for &c in &group_a {
            self.nodes.get_mut(&c).unwrap().parent = Some(heavy);
        }
        self.nodes.get_mut(&light).unwrap().children = group_b.clone();
        for &c in &group_b {
            self.nodes.get_mut(&c).unwrap().parent = Some(light);
        }
        rec.touched.insert(heavy);
        rec.touched.insert(light);
        self.mark_path(v, rec);
        rec.restructured = true;
        true
    }

    /// Last-resort repair: evacuate the subtree under `v` and reinsert its
    /// members leaf by leaf (or rebuild the whole tree when `v` is the
    /// root), keeping leaf node identities.
    fn rebuild_subtree(&mut self, v: NodeId, rec: &mut Recorder) {
        rec.rebuilds += 1;
        rec.restructured = true;
        if v == self.root {
            self.rebuild_all(rec);
            return;
        }
        let member_list = self.members_under(v);
        let leaves: Vec<NodeId> = member_list.iter().map(|m| self.members[m]).collect();
        for &leaf in &leaves {
            self.detach(leaf, rec);
        }
        let q = self.nodes[&v].parent.unwrap();
        self.detach(v, rec);
        self.drop_subtree(v, rec);
        self.repair_after_removal(q, false, rec);
        self.absorb_root(rec);
        for &leaf in &leaves {
            self.reattach_leaf(leaf, rec);
        }
    }

    /// Re-inserts an existing detached leaf with the normal placement rules.
    fn reattach_leaf(&mut self, leaf: NodeId, rec: &mut Recorder) {
        if let Some(pseudo) = self.first_pseudo() {
            let parent = self.nodes[&pseudo].parent.expect("pseudo without parent");
            let at = self.nodes[&parent].children.iter().position(|&c| c == pseudo).unwrap();
            self.detach(pseudo, rec);
            rec.remove(pseudo);
            self.drop_node(pseudo);
            self.attach(leaf, parent, Some(at), rec);
            return;
        }
        if self.nodes[&self.root].children.is_empty() {
            self.attach(leaf, self.root, None, rec);
            return;
        }
        let Some((target, _)) = self.best_leaf_parent() else {
            self.attach(leaf, self.root, None, rec);
            return;
        };
        self.attach(leaf, target, None, rec);
        if self.nodes[&target].children.len() > 3 {
            self.split_overflow(target, rec);
            rec.restructured = true;
        }
        let p = self.nodes[&leaf].parent.unwrap();
        self.repair_weights_upward(p, rec);
    }

    fn rebuild_all(&mut self, rec: &mut Recorder) {
        let member_list: Vec<MemberId> = self.members_under(self.root);
        let leaves: Vec<NodeId> = member_list.iter().map(|m| self.members[m]).collect();
        for &leaf in &leaves {
            if self.nodes[&leaf].parent.is_some() {
                self.detach(leaf, rec);
            }
        }
        self.clear_all(rec);
        self.build_over_leaves(&leaves, rec);
    }

    /// Arranges detached leaves under the root in the optimal balanced
    /// shape.
    fn build_over_leaves(&mut self, leaves: &[NodeId], rec: &mut Recorder) {
        rec.touched.insert(self.root);
        if leaves.is_empty() {
            return;
        }
        let plans = shape_plans(leaves.len());
        let mut cursor = 0usize;
        let parts = plans[leaves.len()].parts.clone();
        if parts.is_empty() {
            self.attach(leaves[0], self.root, None, rec);
            return;
        }
        for part in parts {
            let node = self.build_shape_node(&plans, leaves, &mut cursor, part, rec);
            self.attach(node, self.root, None, rec);
        }
    }

    fn build_shape_node(
        &mut self,
        plans: &[ShapePlan],
        leaves: &[NodeId],
        cursor: &mut usize,
        size: usize,
        rec: &mut Recorder,
    ) -> NodeId {
        if size == 1 {
            let leaf = leaves[*cursor];
            *cursor += 1;
            return leaf;
        }
        let node = self.alloc_node(NodeKind::Logic);
        rec.create(node);
        for part in plans[size].parts.clone() {
            let child = self.build_shape_node(plans, leaves, cursor, part, rec);
            self.attach(child, node, None, rec);
        }
        node
    }

    /// Guarantee pass: if any violation survives the local rules, rebuild
    /// everything. Counted so fuzz campaigns can report fallback rates.
    fn ensure_balanced(&mut self, rec: &mut Recorder) {
        if !self.check_balance().is_empty() {
            rec.rebuilds += 1;
            rec.restructured = true;
            self.rebuild_all(rec);
        }
    }

    // ---- bulk construction -----------------------------------------------

    /// Builds a fresh tree with the lowest-weight balanced shape over the
    /// given members, child sizes ascending left to right.
    pub fn build_balanced_tree(
        scope: ScopeId,
        members: &[MemberId],
    ) -> Result<(Self, StructuralDelta)> {
        if members.is_empty() {
            return Err(Error::MembershipError("cannot build a tree over no members".into()));
        }
        let mut tree = KeyTree::new(scope);
        let mut rec = Recorder::default();
        let leaves: Vec<NodeId> = members
            .iter()
            .map(|&m| {
                let leaf = tree.alloc_node(NodeKind::Member(m));
                rec.create(leaf);
                leaf
            })
            .collect();
        if leaves.len() != tree.members.len() {
            return Err(Error::MembershipError("duplicate member in layout".into()));
        }
        tree.build_over_leaves(&leaves, &mut rec);
        let delta = tree.finish(rec, None, None);
        Ok((tree, delta))
    }

    // ---- merge -------------------------------------------------------------

    /// Adds a batch of new members: they are first arranged as their own
    /// lowest-weight tree, then the lighter side is merged into the heavier
    /// at a node of matching height with the closest subtree weight.
    pub fn merge_members(&mut self, joiners: &[MemberId]) -> Result<StructuralDelta> {
        if joiners.is_empty() {
            return Err(Error::MembershipError("merge of zero members".into()));
        }
        let mut seen = BTreeSet::new();
        for m in joiners {
            if self.members.contains_key(m) || !seen.insert(*m) {
                return Err(Error::MembershipError(format!("{m} already present")));
            }
        }
        if joiners.len() == 1 {
            // Degenerate merge is exactly a join.
            let mut delta = self.insert_leaf(joiners[0])?;
            delta.attach_gap = Some(0);
            return Ok(delta);
        }
        let mut rec = Recorder::default();
        // Build the joiner tree as a floating region in this arena.
        let leaves: Vec<NodeId> = joiners
            .iter()
            .map(|&m| {
                let leaf = self.alloc_node(NodeKind::Member(m));
                rec.create(leaf);
                leaf
            })
            .collect();
        let plans = shape_plans(leaves.len());
        let mut cursor = 0usize;
        let new_top =
            self.build_shape_node(&plans, &leaves, &mut cursor, leaves.len(), &mut rec);

        if self.count_members_under(self.root) == 0 {
            // Merging into an empty subgroup bootstraps it.
            let grand = self.nodes[&new_top].children.clone();
            for &g in &grand {
                self.detach(g, &mut rec);
                self.attach(g, self.root, None, &mut rec);
            }
            rec.remove(new_top);
            self.drop_node(new_top);
            return Ok(self.finish(rec, None, Some(0)));
        }

        // Height of the existing content if it were floated as one node: a
        // multi-child root wraps at its own height, a lone leaf floats as
        // itself.
        let root_kids = self.nodes[&self.root].children.clone();
        let old_content_height = if root_kids.len() == 1 {
            self.node_height(root_kids[0])
        } else {
            self.node_height(self.root)
        };
        let new_height = self.node_height(new_top);

        let gap;
        if new_height < old_content_height {
            gap = self.attach_subtree(new_top, &mut rec);
        } else if new_height > old_content_height {
            // The old content becomes the floating side under the new shape.
            let old_top = self.float_root_content(&mut rec);
            let grand = self.nodes[&new_top].children.clone();
            for &g in &grand {
                self.detach(g, &mut rec);
                self.attach(g, self.root, None, &mut rec);
            }
            rec.remove(new_top);
            self.drop_node(new_top);
            gap = self.attach_subtree(old_top, &mut rec);
        } else {
            // Equal heights: a fresh degree-2 level above both sides.
            let old_top = self.float_root_content(&mut rec);
            gap = self.subtree_weight(old_top).abs_diff(self.subtree_weight(new_top));
            self.attach(old_top, self.root, None, &mut rec);
            self.attach(new_top, self.root, None, &mut rec);
            self.repair_weights_at(self.root, &mut rec);
        }
        rec.restructured = true;
        self.absorb_root(&mut rec);
        self.ensure_balanced(&mut rec);
        Ok(self.finish(rec, None, Some(gap)))
    }

    /// Wraps the root's current children into one floating logic node (or
    /// returns the lone child directly) and leaves the root empty.
    fn float_root_content(&mut self, rec: &mut Recorder) -> NodeId {
        let kids = self.nodes[&self.root].children.clone();
        rec.touched.insert(self.root);
        if kids.len() == 1 {
            let only = kids[0];
            self.detach(only, rec);
            return only;
        }
        let wrap = self.alloc_node(NodeKind::Logic);
        rec.create(wrap);
        for &c in &kids {
            self.detach(c, rec);
            self.attach(c, wrap, None, rec);
        }
        self.nodes.get_mut(&wrap).unwrap().parent = None;
        wrap
    }

    /// Attaches a floating subtree beside the existing node of equal height
    /// whose weight is closest; splits an overflowing parent. Returns the
    /// weight gap at the attachment point.
    fn attach_subtree(&mut self, float: NodeId, rec: &mut Recorder) -> u32 {
        let fh = self.node_height(float);
        let fw = self.subtree_weight(float);
        // In-order scan of candidates at the matching height.
        let mut best: Option<(u32, usize, NodeId)> = None;
        let mut ordered: Vec<NodeId> = Vec::new();
        let mut stack = vec![self.root];
        while let Some(v) = stack.pop() {
            ordered.push(v);
            let mut kids = self.nodes[&v].children.clone();
            kids.reverse();
            stack.extend(kids);
        }
        for (idx, v) in ordered.into_iter().enumerate() {
            if v == self.root || v == float {
                continue;
            }
            if self.nodes[&v].parent.is_none() {
                continue;
            }
            if self.node_height(v) != fh {
                continue;
            }
            let gap = self.subtree_weight(v).abs_diff(fw);
            if best.is_none_or(|(bg, bi, _)| (gap, idx) < (bg, bi)) {
                best = Some((gap, idx, v));
            }
        }
        let Some((gap, _, anchor)) = best else {
            // No peer at that height (degenerate small trees): put the
            // float directly under the root and let repair settle it.
            self.attach(float, self.root, None, rec);
            self.split_overflow(self.root, rec);
            self.repair_weights_upward(self.root, rec);
            return fw;
        };
        let parent = self.nodes[&anchor].parent.unwrap();
        let at =
            self.nodes[&parent].children.iter().position(|&c| c == anchor).unwrap() + 1;
        self.attach(float, parent, Some(at), rec);
        if self.nodes[&parent].children.len() > 3 {
            self.split_overflow(parent, rec);
        }
        self.repair_weights_upward(parent, rec);
        gap
    }

    // ---- partition -----------------------------------------------------------

    /// Removes a batch of members at once: all leaves detach first, then the
    /// tree is repaired bottom-up. No partial mutation on unknown members.
    pub fn partition_leaves(&mut self, leavers: &[MemberId]) -> Result<StructuralDelta> {
        let mut seen = BTreeSet::new();
        for m in leavers {
            if !self.members.contains_key(m) || !seen.insert(*m) {
                return Err(Error::MembershipError(format!("{m} not present or duplicated")));
            }
        }
        let mut rec = Recorder::default();
        for &m in leavers {
            let leaf = self.members[&m];
            self.detach(leaf, &mut rec);
            rec.remove(leaf);
            self.drop_node(leaf);
        }
        if self.members.is_empty() {
            self.clear_all(&mut rec);
            return Ok(self.finish(rec, None, None));
        }
        // Prune memberless subtrees, then repair degrees bottom-up.
        self.prune_empty(self.root, &mut rec);
        loop {
            let mut worklist: Vec<NodeId> = self.internal_nodes_in_order();
            worklist.sort_by_key(|&id| self.node_height(id));
            let mut changed = false;
            for id in worklist {
                if !self.nodes.contains_key(&id) || id == self.root {
                    continue;
                }
                if self.nodes[&id].children.len() < 2 {
                    self.repair_after_removal(id, false, &mut rec);
                    changed = true;
                    break;
                }
            }
            if !changed {
                break;
            }
        }
        self.absorb_root(&mut rec);
        // Weight repair bottom-up.
        let mut order = self.internal_nodes_in_order();
        order.sort_by_key(|&id| self.node_height(id));
        for id in order {
            if self.nodes.contains_key(&id) {
                self.repair_weights_at(id, &mut rec);
            }
        }
        self.absorb_root(&mut rec);
        self.ensure_balanced(&mut rec);
        Ok(self.finish(rec, None, None))
    }

    fn prune_empty(&mut self, id: NodeId, rec: &mut Recorder) {
        let kids = self.nodes[&id].children.clone();
        for c in kids {
            if self.nodes[&c].kind.is_leaf() {
                continue;
            }
            if self.count_members_under(c) == 0 {
                self.detach(c, rec);
                self.drop_subtree(c, rec);
                rec.restructured = true;
            } else {
                self.prune_empty(c, rec);
            }
        }
    }
}

/// Shape of the lowest-weight balanced tree per leaf count: weight, height
/// in internal levels, internal-node count, and the child part sizes
/// (ascending). Index 0 is unused.
#[derive(Debug, Clone, Default)]
struct ShapePlan {
    w: u32,
    h: u32,
    internals: u32,
    parts: Vec<usize>,
}

fn shape_plans(n: usize) -> Vec<ShapePlan> {
    let mut plans: Vec<ShapePlan> = vec![ShapePlan::default(); n + 1];
    if n >= 1 {
        plans[1] = ShapePlan { w: 0, h: 0, internals: 0, parts: Vec::new() };
    }
    for size in 2..=n {
        let mut best: Option<ShapePlan> = None;
        let mut candidates: Vec<Vec<usize>> = Vec::new();
        // Two parts, near-even with a small window.
        let half = size / 2;
        for a in half.saturating_sub(2)..=half {
            if a >= 1 && size - a >= a {
                candidates.push(vec![a, size - a]);
            }
        }
        // Three parts with spread <= 3.
        if size >= 3 {
            let third = size / 3;
            for x in third.saturating_sub(2)..=third + 1 {
                if x < 1 {
                    continue;
                }
                for y in x..=size {
                    let z = size as i64 - x as i64 - y as i64;
                    if z < y as i64 {
                        break;
                    }
                    let z = z as usize;
                    if z - x <= 3 {
                        candidates.push(vec![x, y, z]);
                    }
                }
            }
        }
        for parts in candidates {
            if parts.iter().any(|&p| p == 0 || p >= size) {
                continue;
            }
            let hs: Vec<u32> = parts.iter().map(|&p| plans[p].h).collect();
            if hs.iter().any(|&h| h != hs[0]) {
                continue;
            }
            let ws: Vec<u32> = parts.iter().map(|&p| plans[p].w).collect();
            if ws.iter().max().unwrap() - ws.iter().min().unwrap() > 1 {
                continue;
            }
            let cand = ShapePlan {
                w: parts.len() as u32 + ws.iter().max().unwrap(),
                h: hs[0] + 1,
                internals: 1 + parts.iter().map(|&p| plans[p].internals).sum::<u32>(),
                parts: parts.clone(),
            };
            let better = match &best {
                None => true,
                Some(b) => {
                    (cand.w, cand.h, cand.internals, &cand.parts)
                        < (b.w, b.h, b.internals, &b.parts)
                }
            };
            if better {
                best = Some(cand);
            }
        }
        plans[size] = best.unwrap_or_else(|| panic!("no balanced shape for {size} leaves"));
    }
    plans
}

/// Minimal subtree weight of a balanced 2-3 tree over `n` leaves.
pub fn optimal_tree_weight(n: usize) -> u32 {
    if n <= 1 {
        return 0;
    }
    shape_plans(n)[n].w
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn scope() -> ScopeId {
        ScopeId(1)
    }

    fn ids(n: u32) -> Vec<MemberId> {
        (1..=n).map(MemberId).collect()
    }

    fn build(n: u32) -> KeyTree {
        KeyTree::build_balanced_tree(scope(), &ids(n)).unwrap().0
    }

    /// Enumerates every 2-3 tree shape over n leaves (uneven depths
    /// allowed) and returns the minimal subtree weight.
    fn exhaustive_min_weight(n: usize) -> u32 {
        fn weights(n: usize, memo: &mut Vec<Option<Vec<u32>>>) -> Vec<u32> {
            if let Some(ws) = &memo[n] {
                return ws.clone();
            }
            let mut out = BTreeSet::new();
            if n == 1 {
                out.insert(0);
            } else {
                for k in 2..=3usize.min(n) {
                    fn compose(
                        n: usize,
                        k: usize,
                        memo: &mut Vec<Option<Vec<u32>>>,
                        acc_max: u32,
                        out: &mut BTreeSet<u32>,
                        k_total: usize,
                    ) {
                        if k == 1 {
                            for w in weights(n, memo) {
                                out.insert(k_total as u32 + acc_max.max(w));
                            }
                            return;
                        }
                        for first in 1..=(n - (k - 1)) {
                            for w in weights(first, memo) {
                                compose(n - first, k - 1, memo, acc_max.max(w), out, k_total);
                            }
                        }
                    }
                    compose(n, k, memo, 0, &mut out, k);
                }
            }
            let v: Vec<u32> = out.into_iter().collect();
            memo[n] = Some(v.clone());
            v
        }
        let mut memo = vec![None; n + 1];
        *weights(n, &mut memo).iter().min().unwrap()
    }

    #[test]
    fn weight_worked_values() {
        let t = build(8);
        // Child sizes ascend: (2, 3, 3).
        assert_eq!(t.snapshot(), "((m1 m2) (m3 m4 m5) (m6 m7 m8))");
        let kids = t.node(t.root()).children.clone();
        assert_eq!(t.subtree_weight(kids[0]), 2);
        assert_eq!(t.subtree_weight(kids[1]), 3);
        assert_eq!(t.subtree_weight(kids[2]), 3);
        assert_eq!(t.subtree_weight(t.root()), 6);
        for (_, &leaf) in t.members() {
            assert_eq!(t.subtree_weight(leaf), 0);
        }
    }

    #[test]
    fn ancestor_weight_recursion() {
        let t = build(8);
        assert_eq!(t.ancestor_weight(t.root()), 0);
        let kids = t.node(t.root()).children.clone();
        assert_eq!(t.ancestor_weight(kids[0]), 3);
        let leaf = t.member_leaf(MemberId(1)).unwrap();
        // Parent degree 2 plus root degree 3.
        assert_eq!(t.ancestor_weight(leaf), 5);
    }

    #[test]
    fn balance_check_flags_gaps() {
        let t = build(8);
        assert!(t.check_balance().is_empty());
        let single = build(1);
        assert!(single.check_balance().is_empty());
        assert_eq!(single.snapshot(), "(m1)");
        // Hand-build a (0, 2) weight gap.
        let mut bad = KeyTree::new(scope());
        let mut rec = Recorder::default();
        let a = bad.alloc_node(NodeKind::Member(MemberId(1)));
        let b = bad.alloc_node(NodeKind::Logic);
        let c = bad.alloc_node(NodeKind::Member(MemberId(2)));
        let d = bad.alloc_node(NodeKind::Member(MemberId(3)));
        bad.attach(a, bad.root, None, &mut rec);
        bad.attach(b, bad.root, None, &mut rec);
        bad.attach(c, b, None, &mut rec);
        bad.attach(d, b, None, &mut rec);
        let violations = bad.check_balance();
        assert!(violations
            .iter()
            .any(|v| matches!(v, BalanceViolation::WeightGap { min: 0, max: 2, .. })));
    }

    #[test]
    fn build_matches_exhaustive_minimum() {
        for n in 1..=9usize {
            let t = build(n as u32);
            assert!(t.check_balance().is_empty(), "n={n}");
            assert_eq!(t.tree_weight(), exhaustive_min_weight(n), "n={n}");
            assert_eq!(optimal_tree_weight(n), exhaustive_min_weight(n), "n={n}");
        }
    }

    #[test]
    fn build_known_small_shapes() {
        assert_eq!(build(1).snapshot(), "(m1)");
        assert_eq!(build(2).snapshot(), "(m1 m2)");
        assert_eq!(build(3).snapshot(), "(m1 m2 m3)");
        assert_eq!(optimal_tree_weight(3), 3);
        assert_eq!(optimal_tree_weight(8), 6);
        for n in [10u32, 17, 33, 64, 100, 250] {
            let t = build(n);
            assert!(t.check_balance().is_empty(), "n={n}");
            assert_eq!(t.member_count(), n as usize);
        }
    }

    #[test]
    fn build_rejects_bad_input() {
        assert!(KeyTree::build_balanced_tree(scope(), &[]).is_err());
        assert!(KeyTree::build_balanced_tree(scope(), &[MemberId(1), MemberId(1)]).is_err());
    }

    #[test]
    fn insertion_point_prefers_light_parent_then_pseudo() {
        let t = build(8);
        let kids = t.node(t.root()).children.clone();
        // The degree-2 child is the minimum-weight leaf-parent.
        assert_eq!(t.find_insertion_point(), Some(kids[0]));

        let mut t2 = build(4);
        t2.remove_leaf(MemberId(4)).unwrap();
        assert_eq!(t2.pseudo_count(), 1);
        let pseudo_parent = t2.find_insertion_point().unwrap();
        let d = t2.insert_leaf(MemberId(9)).unwrap();
        // Reuse: member lands where the pseudo was, no structural change.
        assert_eq!(t2.node(d.member_leaf.unwrap()).parent, Some(pseudo_parent));
        assert_eq!(t2.pseudo_count(), 0);
        assert!(!d.restructured);
    }

    #[test]
    fn insert_dirty_is_root_path_when_clean() {
        let mut t = build(8);
        let kids = t.node(t.root()).children.clone();
        let d = t.insert_leaf(MemberId(17)).unwrap();
        assert!(t.check_balance().is_empty());
        assert!(!d.restructured);
        // Dirty = insertion parent plus root, bottom-up.
        assert_eq!(d.dirty, vec![kids[0], t.root()]);
        assert_eq!(t.snapshot(), "((m1 m2 m17) (m3 m4 m5) (m6 m7 m8))");
    }

    #[test]
    fn insert_into_empty() {
        let mut t = KeyTree::new(scope());
        let d = t.insert_leaf(MemberId(5)).unwrap();
        assert_eq!(t.snapshot(), "(m5)");
        assert_eq!(d.dirty, vec![t.root()]);
        assert!(t.check_balance().is_empty());
    }

    #[test]
    fn insert_optimality_small_trees() {
        // The chosen insertion never increases total weight more than the
        // best over all leaf-parents, checked exhaustively on <= 12 leaves.
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for trial in 0..300u32 {
            let n = rng.gen_range(1..=12u32);
            let mut t = build(n);
            for _ in 0..rng.gen_range(0..4) {
                let m = MemberId(rng.gen_range(1..=n));
                if t.member_leaf(m).is_some() && t.member_count() > 1 {
                    t.remove_leaf(m).unwrap();
                }
            }
            assert!(t.check_balance().is_empty());
            let mut best_after = u32::MAX;
            // Oracle: try attaching at every leaf-parent on a clone.
            for cand in t.internal_nodes_in_order() {
                let node = t.node(cand).clone();
                if node.children.is_empty()
                    || !node.children.iter().all(|&c| t.node(c).kind.is_leaf())
                {
                    continue;
                }
                let mut sim = t.clone();
                let mut rec = Recorder::default();
                let leaf = sim.alloc_node(NodeKind::Member(MemberId(1000 + trial)));
                sim.attach(leaf, cand, None, &mut rec);
                if sim.nodes[&cand].children.len() > 3 {
                    sim.split_overflow(cand, &mut rec);
                }
                sim.repair_weights_upward(cand, &mut rec);
                if sim.check_balance().is_empty() {
                    best_after = best_after.min(sim.subtree_weight(sim.root()));
                }
            }
            let mut real = t.clone();
            real.insert_leaf(MemberId(1000 + trial)).unwrap();
            assert!(real.check_balance().is_empty());
            if best_after != u32::MAX {
                assert!(
                    real.subtree_weight(real.root()) <= best_after,
                    "trial {trial}: {} vs oracle {best_after}",
                    real.subtree_weight(real.root()),
                );
            }
        }
    }

    #[test]
    fn remove_degree2_parent_fills_pseudo() {
        let mut t = build(8);
        let kids = t.node(t.root()).children.clone();
        let d = t.remove_leaf(MemberId(2)).unwrap();
        // Hole filled, weights untouched, no upper repair.
        assert_eq!(t.snapshot(), "((m1 #) (m3 m4 m5) (m6 m7 m8))");
        assert_eq!(t.pseudo_count(), 1);
        assert_eq!(t.subtree_weight(kids[0]), 2);
        assert_eq!(d.dirty, vec![kids[0], t.root()]);
        assert!(t.check_balance().is_empty());
    }

    #[test]
    fn remove_degree3_parent_no_pseudo() {
        let mut t = build(8);
        t.remove_leaf(MemberId(4)).unwrap();
        assert_eq!(t.snapshot(), "((m1 m2) (m3 m5) (m6 m7 m8))");
        assert_eq!(t.pseudo_count(), 0);
        assert!(t.check_balance().is_empty());
    }

    #[test]
    fn remove_last_member_clears_tree() {
        let mut t = build(1);
        let d = t.remove_leaf(MemberId(1)).unwrap();
        assert_eq!(t.snapshot(), "()");
        assert_eq!(t.member_count(), 0);
        assert_eq!(t.node_count(), 1);
        assert!(!d.removed.is_empty());
    }

    #[test]
    fn remove_sibling_of_pseudo_prunes() {
        let mut t = build(4);
        t.remove_leaf(MemberId(4)).unwrap();
        assert_eq!(t.snapshot(), "((m1 m2) (m3 #))");
        t.remove_leaf(MemberId(3)).unwrap();
        // The memberless node dies and the root absorbs.
        assert_eq!(t.snapshot(), "(m1 m2)");
        assert_eq!(t.pseudo_count(), 0);
        assert!(t.check_balance().is_empty());
    }

    #[test]
    fn pseudo_count_never_exceeds_members() {
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        let mut t = build(10);
        let mut live: Vec<u32> = (1..=10).collect();
        let mut next = 11u32;
        for _ in 0..2000 {
            if rng.gen_bool(0.5) && live.len() > 1 {
                let i = rng.gen_range(0..live.len());
                let m = live.swap_remove(i);
                t.remove_leaf(MemberId(m)).unwrap();
            } else {
                t.insert_leaf(MemberId(next)).unwrap();
                live.push(next);
                next += 1;
            }
            assert!(t.pseudo_count() <= t.member_count());
            assert!(t.check_balance().is_empty());
        }
    }

    #[test]
    fn merge_single_is_insert() {
        let mut t = build(8);
        let d = t.merge_members(&[MemberId(20)]).unwrap();
        assert_eq!(d.attach_gap, Some(0));
        assert_eq!(t.snapshot(), "((m1 m2 m20) (m3 m4 m5) (m6 m7 m8))");
    }

    #[test]
    fn merge_small_into_large() {
        let mut t = build(9);
        let joiners: Vec<MemberId> = (30..33).map(MemberId).collect();
        let d = t.merge_members(&joiners).unwrap();
        assert!(t.check_balance().is_empty());
        assert!(d.attach_gap.unwrap() <= 3, "gap {:?}", d.attach_gap);
        assert_eq!(t.member_count(), 12);
    }

    #[test]
    fn merge_equal_heights_adds_level() {
        let mut t = build(3);
        let d = t.merge_members(&[MemberId(41), MemberId(42), MemberId(43)]).unwrap();
        assert!(t.check_balance().is_empty());
        assert_eq!(t.member_count(), 6);
        assert!(d.attach_gap.unwrap() <= 3);
    }

    #[test]
    fn merge_into_empty_bootstraps() {
        let mut t = KeyTree::new(scope());
        t.merge_members(&ids(5)).unwrap();
        assert!(t.check_balance().is_empty());
        assert_eq!(t.member_count(), 5);
    }

    #[test]
    fn merge_fuzz_attachment_gap() {
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        for trial in 0..200 {
            let n = rng.gen_range(1..=40u32);
            let mut t = build(n);
            let x = rng.gen_range(1..=10u32);
            let joiners: Vec<MemberId> = (1000..1000 + x).map(MemberId).collect();
            let d = t.merge_members(&joiners).unwrap();
            assert!(t.check_balance().is_empty(), "trial {trial} n={n} x={x}");
            assert!(d.attach_gap.unwrap() <= 3, "trial {trial}: gap {:?}", d.attach_gap);
            assert_eq!(t.member_count(), (n + x) as usize);
        }
    }

    #[test]
    fn partition_is_atomic() {
        let mut t = build(6);
        let before = t.snapshot();
        let err = t.partition_leaves(&[MemberId(2), MemberId(99)]);
        assert!(err.is_err());
        assert_eq!(t.member_count(), 6);
        assert_eq!(t.snapshot(), before);
    }

    #[test]
    fn partition_single_matches_remove_membership() {
        let mut a = build(8);
        let mut b = build(8);
        a.partition_leaves(&[MemberId(2)]).unwrap();
        b.remove_leaf(MemberId(2)).unwrap();
        assert!(a.check_balance().is_empty());
        assert_eq!(a.member_count(), b.member_count());
    }

    #[test]
    fn partition_all_clears() {
        let mut t = build(7);
        t.partition_leaves(&ids(7)).unwrap();
        assert_eq!(t.snapshot(), "()");
        assert_eq!(t.node_count(), 1);
    }

    #[test]
    fn partition_fuzz_balanced() {
        let mut rng = ChaCha20Rng::seed_from_u64(123);
        for trial in 0..150 {
            let n = rng.gen_range(2..=50u32);
            let mut t = build(n);
            let mut all: Vec<u32> = (1..=n).collect();
            let take = rng.gen_range(1..=(n as usize * 4 / 10).max(1));
            let mut leavers = Vec::new();
            for _ in 0..take.min(all.len() - 1) {
                let i = rng.gen_range(0..all.len());
                leavers.push(MemberId(all.swap_remove(i)));
            }
            if leavers.is_empty() {
                continue;
            }
            let before_paths: BTreeSet<NodeId> = leavers
                .iter()
                .flat_map(|m| {
                    let leaf = t.member_leaf(*m).unwrap();
                    t.path_to_root(leaf)
                })
                .collect();
            let d = t.partition_leaves(&leavers).unwrap();
            assert!(t.check_balance().is_empty(), "trial {trial}");
            assert_eq!(t.member_count(), n as usize - leavers.len());
            // Without restructuring, dirty stays within the removed paths.
            if !d.restructured {
                for id in &d.dirty {
                    assert!(
                        before_paths.contains(id) || d.created.contains(id),
                        "trial {trial}: stray dirty {id}"
                    );
                }
            }
        }
    }

    #[test]
    fn churn_fuzz_balance_and_depth() {
        let mut rng = ChaCha20Rng::seed_from_u64(2024);
        let mut t = build(12);
        let mut live: Vec<u32> = (1..=12).collect();
        let mut next = 13u32;
        for step in 0..5000 {
            match rng.gen_range(0..10) {
                0..=3 => {
                    t.insert_leaf(MemberId(next)).unwrap();
                    live.push(next);
                    next += 1;
                }
                4..=7 => {
                    if live.len() > 1 {
                        let i = rng.gen_range(0..live.len());
                        let m = live.swap_remove(i);
                        t.remove_leaf(MemberId(m)).unwrap();
                    }
                }
                8 => {
                    let x = rng.gen_range(1..=5u32);
                    let joiners: Vec<MemberId> = (next..next + x).map(MemberId).collect();
                    t.merge_members(&joiners).unwrap();
                    live.extend(next..next + x);
                    next += x;
                }
                _ => {
                    if live.len() > 2 {
                        let take = rng.gen_range(1..=(live.len() / 2).max(1));
                        let mut leavers = Vec::new();
                        for _ in 0..take {
                            let i = rng.gen_range(0..live.len());
                            leavers.push(MemberId(live.swap_remove(i)));
                        }
                        t.partition_leaves(&leavers).unwrap();
                    }
                }
            }
            let violations = t.check_balance();
            assert!(violations.is_empty(), "step {step}: {violations:?}");
            assert_eq!(t.member_count(), live.len());
            assert!(t.pseudo_count() <= t.member_count().max(1));
        }
    }

    #[test]
    fn subtree_weight_matches_path_sum_oracle() {
        // W(v) must equal the max over leaves below v of the sum of node
        // degrees on the way down.
        fn path_sum(t: &KeyTree, id: NodeId) -> u32 {
            let node = t.node(id);
            if node.kind.is_leaf() {
                return 0;
            }
            node.children
                .iter()
                .map(|&c| node.children.len() as u32 + path_sum(t, c))
                .max()
                .unwrap()
        }
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let mut t = build(9);
        let mut live: Vec<u32> = (1..=9).collect();
        let mut next = 10u32;
        for _ in 0..400 {
            if rng.gen_bool(0.5) && live.len() > 1 {
                let i = rng.gen_range(0..live.len());
                t.remove_leaf(MemberId(live.swap_remove(i))).unwrap();
            } else {
                t.insert_leaf(MemberId(next)).unwrap();
                live.push(next);
                next += 1;
            }
            for id in t.internal_nodes_in_order() {
                assert_eq!(t.subtree_weight(id), path_sum(&t, id));
            }
        }
    }

    #[test]
    fn dirty_sets_are_root_connected() {
        let mut rng = ChaCha20Rng::seed_from_u64(555);
        let mut t = build(15);
        let mut live: Vec<u32> = (1..=15).collect();
        let mut next = 16u32;
        for _ in 0..800 {
            let delta = if rng.gen_bool(0.5) {
                let d = t.insert_leaf(MemberId(next)).unwrap();
                live.push(next);
                next += 1;
                d
            } else if live.len() > 1 {
                let i = rng.gen_range(0..live.len());
                let m = live.swap_remove(i);
                t.remove_leaf(MemberId(m)).unwrap()
            } else {
                continue;
            };
            if t.member_count() == 0 {
                continue;
            }
            let dirty: BTreeSet<NodeId> = delta.dirty.iter().copied().collect();
            assert!(dirty.contains(&t.root()));
            for id in &delta.dirty {
                if *id == t.root() || !t.contains_node(*id) {
                    continue;
                }
                for anc in t.path_to_root(*id) {
                    assert!(dirty.contains(&anc), "ancestor {anc} of {id} not dirty");
                }
            }
            // Bottom-up ordering.
            for pair in delta.dirty.windows(2) {
                assert!(t.node_height(pair[0]) <= t.node_height(pair[1]));
            }
        }
    }
}
