//! Content-defined Merkle tree.
//!
//! Internal nodes are cut where the strong hash of the last `window_size`
//! child ids has its low `internal_mask_bits` bits clear, the same way CDC
//! cuts chunks out of bytes. A chunk split therefore only disturbs the
//! parents whose windows see the new leaves; everything else keeps its id.
//!
//! One tree can hold many versions. Each version has a root, and all nodes
//! are shared through `node_map` (id to node). Nodes may also carry a
//! modification history, see [`crate::versioning`].

mod codec;

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use std::ops::Range;
use std::sync::Arc;

pub use codec::{cdmt_deserialize, cdmt_serialize, INDEX_FORMAT_VERSION, INDEX_MAGIC};

use crate::error::{Error, Result};
use crate::rolling_hash::{hash_children, window_hash, Fingerprint};
use crate::versioning::{Lineage, VersionId, VersionKind};

pub const DEFAULT_INTERNAL_MASK_BITS: u32 = 2;
pub const DEFAULT_WINDOW: usize = 2;
pub const TUNED_WINDOW: usize = 8;
pub const DEFAULT_MAX_FANOUT: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CdmtConfig {
    pub internal_mask_bits: u32,
    pub window_size: usize,
    pub max_fanout: usize,
}

impl Default for CdmtConfig {
    fn default() -> Self {
        CdmtConfig {
            internal_mask_bits: DEFAULT_INTERNAL_MASK_BITS,
            window_size: DEFAULT_WINDOW,
            max_fanout: DEFAULT_MAX_FANOUT,
        }
    }
}

impl CdmtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=16).contains(&self.internal_mask_bits) {
            return Err(Error::InvalidConfig(format!(
                "internal_mask_bits must be in 1..=16, got {}",
                self.internal_mask_bits
            )));
        }
        if !(2..=16).contains(&self.window_size) {
            return Err(Error::InvalidConfig(format!(
                "window_size must be in 2..=16, got {}",
                self.window_size
            )));
        }
        if self.max_fanout < self.window_size || self.max_fanout > u16::MAX as usize {
            return Err(Error::InvalidConfig(format!(
                "max_fanout must be in {}..=65535, got {}",
                self.window_size, self.max_fanout
            )));
        }
        Ok(())
    }

    fn mask(&self) -> u64 {
        (1u64 << self.internal_mask_bits) - 1
    }
}

type CustomRule = Arc<dyn Fn(&[Fingerprint]) -> bool + Send + Sync>;

/// Decides whether a window of child ids closes the pending parent.
#[derive(Clone, Default)]
pub enum BoundaryRule {
    /// Low `internal_mask_bits` bits of [`window_hash`] are zero.
    #[default]
    Mask,
    /// Arbitrary predicate over the window, for worked examples and adversarial tests.
    Custom(CustomRule),
}

impl BoundaryRule {
    pub fn custom(f: impl Fn(&[Fingerprint]) -> bool + Send + Sync + 'static) -> Self {
        BoundaryRule::Custom(Arc::new(f))
    }

    fn matches(&self, window: &[Fingerprint], cfg: &CdmtConfig) -> bool {
        match self {
            BoundaryRule::Mask => {
                window_hash(window, cfg.window_size).expect("window sized by caller") & cfg.mask()
                    == 0
            }
            BoundaryRule::Custom(f) => f(window),
        }
    }
}

impl fmt::Debug for BoundaryRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BoundaryRule::Mask => f.write_str("Mask"),
            BoundaryRule::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeRef(pub(crate) u32);

impl NodeRef {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// What a node looks like in one version.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeState {
    pub id: Fingerprint,
    pub children: Vec<NodeRef>,
}

impl NodeState {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct HistoryEntry {
    pub version: u32,
    pub state: NodeState,
}

#[derive(Clone, Debug)]
pub struct CdmtNode {
    /// State at creation. Applies to every version unless overridden by `history`.
    pub(crate) birth: NodeState,
    /// In-place modifications, ordered by version ordinal.
    pub(crate) history: Vec<HistoryEntry>,
    /// Versions from whose root this node is reachable.
    pub(crate) versions: Vec<u32>,
}

impl CdmtNode {
    fn new(state: NodeState) -> Self {
        CdmtNode {
            birth: state,
            history: Vec::new(),
            versions: Vec::new(),
        }
    }

    pub fn id(&self) -> Fingerprint {
        self.birth.id
    }

    pub fn children(&self) -> &[NodeRef] {
        &self.birth.children
    }

    pub fn is_leaf(&self) -> bool {
        self.birth.is_leaf()
    }

    pub fn history(&self) -> &[HistoryEntry] {
        &self.history
    }

    pub fn versions(&self) -> &[u32] {
        &self.versions
    }
}

#[derive(Clone, Debug)]
pub struct VersionRecord {
    pub id: VersionId,
    pub parent: Option<u32>,
    /// Absent for versions known only from a transferred version table.
    pub root: Option<NodeRef>,
}

/// One level of a planned tree: node ids plus, above the leaves, the range of
/// children each node takes from the level below.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PlanLevel {
    pub ids: Vec<Fingerprint>,
    pub groups: Vec<Range<usize>>,
}

/// Cuts one level into parent groups.
pub fn group_level(
    ids: &[Fingerprint],
    cfg: &CdmtConfig,
    rule: &BoundaryRule,
) -> Vec<Range<usize>> {
    let w = cfg.window_size;
    let mut groups = Vec::with_capacity(ids.len() / (w + 1) + 1);
    let mut start = 0;
    for i in 0..ids.len() {
        let len = i + 1 - start;
        let cut = len >= cfg.max_fanout || (len >= w && rule.matches(&ids[i + 1 - w..=i], cfg));
        if cut {
            groups.push(start..i + 1);
            start = i + 1;
        }
    }
    if start < ids.len() {
        groups.push(start..ids.len());
    }
    groups
}

/// Level-by-level layout of the tree over `leaves`, bottom level first.
///
/// Stops at the first non-leaf level of size one. A single leaf gets one
/// wrapper parent so that every root is internal.
pub fn plan_levels(
    leaves: &[Fingerprint],
    cfg: &CdmtConfig,
    rule: &BoundaryRule,
) -> Result<Vec<PlanLevel>> {
    if leaves.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut levels = vec![PlanLevel {
        ids: leaves.to_vec(),
        groups: Vec::new(),
    }];
    loop {
        let below = &levels.last().unwrap().ids;
        if below.len() == 1 && levels.len() > 1 {
            break;
        }
        let groups = group_level(below, cfg, rule);
        debug_assert!(groups.len() < below.len() || below.len() == 1);
        let ids = groups
            .iter()
            .map(|g| hash_children(&below[g.clone()]))
            .collect();
        levels.push(PlanLevel { ids, groups });
    }
    Ok(levels)
}

/// Ids the client already holds.
pub trait KnownIds {
    fn knows(&self, id: &Fingerprint) -> bool;
}

impl KnownIds for HashSet<Fingerprint> {
    fn knows(&self, id: &Fingerprint) -> bool {
        self.contains(id)
    }
}

impl<A: KnownIds, B: KnownIds> KnownIds for (A, B) {
    fn knows(&self, id: &Fingerprint) -> bool {
        self.0.knows(id) || self.1.knows(id)
    }
}

impl<T: KnownIds + ?Sized> KnownIds for &T {
    fn knows(&self, id: &Fingerprint) -> bool {
        (**self).knows(id)
    }
}

/// Result of walking a target version against a known set.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CompareOutcome {
    /// Unknown leaf fingerprints, in breadth-first discovery order, without repeats.
    pub missing: Vec<Fingerprint>,
    /// Nodes taken off the queue.
    pub examined: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeStats {
    pub leaves: usize,
    pub internal: usize,
    pub height: usize,
    pub mean_fanout: f64,
}

/// Content-defined Merkle tree holding one or more versions.
#[derive(Clone, Debug)]
pub struct CdmtTree {
    pub(crate) config: CdmtConfig,
    pub(crate) rule: BoundaryRule,
    pub(crate) nodes: Vec<CdmtNode>,
    pub(crate) node_map: HashMap<Fingerprint, NodeRef>,
    pub(crate) versions: Vec<VersionRecord>,
    /// Versions in which each id is reachable from the root.
    pub(crate) membership: HashMap<Fingerprint, Vec<u32>>,
}

impl KnownIds for CdmtTree {
    fn knows(&self, id: &Fingerprint) -> bool {
        self.node_map.contains_key(id)
    }
}

/// Builds a single-version tree over `leaves`.
pub fn cdmt_build(leaves: &[Fingerprint], cfg: &CdmtConfig) -> Result<CdmtTree> {
    CdmtTree::build(leaves, cfg)
}

impl CdmtTree {
    /// Empty tree with no versions.
    pub fn new(cfg: &CdmtConfig) -> Result<Self> {
        Self::with_rule(cfg, BoundaryRule::Mask)
    }

    pub fn with_rule(cfg: &CdmtConfig, rule: BoundaryRule) -> Result<Self> {
        cfg.validate()?;
        Ok(CdmtTree {
            config: *cfg,
            rule,
            nodes: Vec::new(),
            node_map: HashMap::new(),
            versions: Vec::new(),
            membership: HashMap::new(),
        })
    }

    /// Tree with one branching version tagged `base`.
    pub fn build(leaves: &[Fingerprint], cfg: &CdmtConfig) -> Result<Self> {
        Self::build_tagged(leaves, cfg, BoundaryRule::Mask, "base")
    }

    pub fn build_tagged(
        leaves: &[Fingerprint],
        cfg: &CdmtConfig,
        rule: BoundaryRule,
        tag: &str,
    ) -> Result<Self> {
        if leaves.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut tree = Self::with_rule(cfg, rule)?;
        tree.commit(None, leaves, VersionKind::Branching, Some(tag.to_string()))?;
        Ok(tree)
    }

    pub fn config(&self) -> &CdmtConfig {
        &self.config
    }

    pub fn rule(&self) -> &BoundaryRule {
        &self.rule
    }

    pub fn node(&self, r: NodeRef) -> Result<&CdmtNode> {
        self.nodes
            .get(r.index())
            .ok_or_else(|| Error::corrupt(0, format!("dangling node reference {}", r.0)))
    }

    pub fn lookup(&self, id: &Fingerprint) -> Option<NodeRef> {
        self.node_map.get(id).copied()
    }

    pub fn contains(&self, id: &Fingerprint) -> bool {
        self.node_map.contains_key(id)
    }

    /// Physically allocated nodes across all versions.
    pub fn allocated_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Distinct ids across all versions.
    pub fn distinct_ids(&self) -> usize {
        self.node_map.len()
    }

    /// Total history entries over all nodes.
    pub fn history_entries(&self) -> usize {
        self.nodes.iter().map(|n| n.history.len()).sum()
    }

    pub fn version_records(&self) -> &[VersionRecord] {
        &self.versions
    }

    pub fn version_ids(&self) -> impl Iterator<Item = &VersionId> {
        self.versions.iter().map(|v| &v.id)
    }

    /// Most recently created version with a root.
    pub fn latest(&self) -> Option<&VersionId> {
        self.versions
            .iter()
            .rev()
            .find(|v| v.root.is_some())
            .map(|v| &v.id)
    }

    pub fn version_by_tag(&self, tag: &str) -> Option<&VersionId> {
        self.versions
            .iter()
            .map(|v| &v.id)
            .find(|v| v.label.as_deref() == Some(tag))
    }

    pub fn membership(&self, id: &Fingerprint) -> &[u32] {
        self.membership.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub(crate) fn record(&self, ordinal: u32) -> Result<&VersionRecord> {
        self.versions
            .get(ordinal as usize)
            .ok_or_else(|| Error::UnknownVersion(ordinal.to_string()))
    }

    pub(crate) fn root_of(&self, ordinal: u32) -> Result<(NodeRef, Lineage)> {
        let rec = self.record(ordinal)?;
        let root = rec
            .root
            .ok_or_else(|| Error::UnknownVersion(format!("{ordinal} has no root in this index")))?;
        Ok((root, self.lineage(ordinal)))
    }

    /// Breadth-first walk of `version`, yielding each distinct id once.
    pub(crate) fn walk_distinct(
        &self,
        version: u32,
        mut visit: impl FnMut(NodeRef, &NodeState),
    ) -> Result<()> {
        let (root, lineage) = self.root_of(version)?;
        let mut seen = HashSet::new();
        let mut queue = VecDeque::from([root]);
        let root_state = self.state_at(root, &lineage)?;
        seen.insert(root_state.id);
        while let Some(r) = queue.pop_front() {
            let state = self.state_at(r, &lineage)?;
            visit(r, state);
            for &c in &state.children {
                let child = self.state_at(c, &lineage)?;
                if seen.insert(child.id) {
                    queue.push_back(c);
                }
            }
        }
        Ok(())
    }

    /// Leaf fingerprints of `version` in left-to-right order.
    pub fn leaves(&self, version: u32) -> Result<Vec<Fingerprint>> {
        let (root, lineage) = self.root_of(version)?;
        let mut out = Vec::new();
        let mut stack = vec![root];
        while let Some(r) = stack.pop() {
            let state = self.state_at(r, &lineage)?;
            if state.is_leaf() {
                out.push(state.id);
            } else {
                stack.extend(state.children.iter().rev());
            }
        }
        Ok(out)
    }

    pub fn root_id(&self, version: u32) -> Result<Fingerprint> {
        let (root, lineage) = self.root_of(version)?;
        Ok(self.state_at(root, &lineage)?.id)
    }

    /// Ids of `version` listed level by level, leaves first.
    pub fn level_ids(&self, version: u32) -> Result<Vec<Vec<Fingerprint>>> {
        let (root, lineage) = self.root_of(version)?;
        let mut levels = vec![vec![root]];
        loop {
            let mut next = Vec::new();
            for &r in levels.last().unwrap() {
                next.extend_from_slice(&self.state_at(r, &lineage)?.children);
            }
            if next.is_empty() {
                break;
            }
            levels.push(next);
        }
        levels.reverse();
        levels
            .into_iter()
            .map(|lvl| {
                lvl.into_iter()
                    .map(|r| Ok(self.state_at(r, &lineage)?.id))
                    .collect()
            })
            .collect()
    }

    /// Distinct ids reachable in `version`.
    pub fn version_ids_set(&self, version: u32) -> Result<HashSet<Fingerprint>> {
        let mut ids = HashSet::new();
        self.walk_distinct(version, |_, s| {
            ids.insert(s.id);
        })?;
        Ok(ids)
    }

    /// Distinct nodes reachable in `version`.
    pub fn node_count(&self, version: u32) -> Result<usize> {
        let mut n = 0;
        self.walk_distinct(version, |_, _| n += 1)?;
        Ok(n)
    }

    pub fn stats(&self, version: u32) -> Result<TreeStats> {
        let levels = self.level_ids(version)?;
        let leaves = levels[0].len();
        let internal: usize = levels[1..].iter().map(Vec::len).sum();
        let children: usize = levels[..levels.len() - 1].iter().map(Vec::len).sum();
        Ok(TreeStats {
            leaves,
            internal,
            height: levels.len() - 1,
            mean_fanout: children as f64 / internal as f64,
        })
    }

    fn alloc(&mut self, state: NodeState) -> NodeRef {
        let r = NodeRef(self.nodes.len() as u32);
        self.node_map.entry(state.id).or_insert(r);
        self.nodes.push(CdmtNode::new(state));
        r
    }

    pub(crate) fn alloc_fresh(&mut self, state: NodeState) -> NodeRef {
        self.alloc(state)
    }

    /// Records `ordinal` in the membership of every node reachable from its root.
    pub(crate) fn mark_membership(&mut self, ordinal: u32) -> Result<()> {
        let mut touched = Vec::new();
        let mut ids = Vec::new();
        let (root, lineage) = self.root_of(ordinal)?;
        let mut seen_refs = HashSet::new();
        let mut stack = vec![root];
        let mut seen_ids = HashSet::new();
        while let Some(r) = stack.pop() {
            if !seen_refs.insert(r) {
                continue;
            }
            touched.push(r);
            let state = self.state_at(r, &lineage)?;
            if seen_ids.insert(state.id) {
                ids.push(state.id);
            }
            stack.extend(state.children.iter().copied());
        }
        for r in touched {
            let v = &mut self.nodes[r.index()].versions;
            if v.last() != Some(&ordinal) {
                v.push(ordinal);
            }
        }
        for id in ids {
            let v = self.membership.entry(id).or_default();
            if v.last() != Some(&ordinal) {
                v.push(ordinal);
            }
        }
        Ok(())
    }
}

/// Breadth-first comparison of `target`'s `version` against `known`.
///
/// Nodes whose id is known are pruned with their whole subtree. Unknown
/// internal nodes have their children queued; unknown leaves are returned.
pub fn cdmt_compare_with(
    known: &impl KnownIds,
    target: &CdmtTree,
    version: u32,
) -> Result<CompareOutcome> {
    let (root, lineage) = target.root_of(version)?;
    let mut out = CompareOutcome::default();
    let mut queued = HashSet::new();
    let mut queue = VecDeque::from([root]);
    queued.insert(target.state_at(root, &lineage)?.id);
    while let Some(r) = queue.pop_front() {
        out.examined += 1;
        let state = target.state_at(r, &lineage)?;
        if known.knows(&state.id) {
            continue;
        }
        if state.is_leaf() {
            out.missing.push(state.id);
            continue;
        }
        for &c in &state.children {
            let id = target.state_at(c, &lineage)?.id;
            if queued.insert(id) {
                queue.push_back(c);
            }
        }
    }
    Ok(out)
}

/// Leaf fingerprints of `target` at `version` that `client` does not hold.
pub fn cdmt_compare(
    client: &CdmtTree,
    target: &CdmtTree,
    version: u32,
) -> Result<Vec<Fingerprint>> {
    Ok(cdmt_compare_with(client, target, version)?.missing)
}

/// `(nodes examined by the tree walk, lookups a per-leaf key-value scan would make)`.
pub fn cdmt_comparison_count(
    client: &impl KnownIds,
    target: &CdmtTree,
    version: u32,
) -> Result<(usize, usize)> {
    let outcome = cdmt_compare_with(client, target, version)?;
    let kv = target.leaves(version)?.len();
    Ok((outcome.examined, kv))
}
