//! Versions inside one [`CdmtTree`].
//!
//! Two kinds of update are supported:
//!
//! * **Layering** (copy-on-write inside an image): nodes whose position in
//!   the tree is unchanged are updated in place by appending a
//!   `(version, state)` entry to their history. Readers of older versions
//!   keep seeing the older state.
//! * **Branching** (a tagged push): every changed node and its ancestors are
//!   fresh allocations; unchanged subtrees are shared by reference and the
//!   new root is appended to the root array.
//!
//! A node's state in a version is the newest history entry whose version is
//! an ancestor of (or equal to) that version, falling back to the state the
//! node was created with. Entries are sorted by ordinal, so the newest
//! candidate is found by binary search.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::fmt;

use crate::cdmt::{plan_levels, CdmtTree, HistoryEntry, NodeRef, NodeState, VersionRecord};
use crate::error::{Error, Result};
use crate::rolling_hash::Fingerprint;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VersionKind {
    Layering,
    Branching,
}

impl VersionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            VersionKind::Layering => "layering",
            VersionKind::Branching => "branching",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct VersionId {
    pub ordinal: u32,
    pub kind: VersionKind,
    pub label: Option<String>,
}

impl fmt::Display for VersionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.label {
            Some(tag) => write!(f, "{}#{}", tag, self.ordinal),
            None => write!(f, "#{}", self.ordinal),
        }
    }
}

/// A version and all of its ancestors, as sorted ordinals.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lineage {
    ordinals: Vec<u32>,
}

impl Lineage {
    pub fn contains(&self, ordinal: u32) -> bool {
        self.ordinals.binary_search(&ordinal).is_ok()
    }

    pub fn head(&self) -> u32 {
        *self.ordinals.last().expect("lineage is never empty")
    }
}

/// Positions of a resolved version, leaves first.
struct Layout {
    levels: Vec<Vec<NodeRef>>,
    /// `starts[l][j]` is the index in level `l - 1` of node `j`'s first child.
    starts: Vec<Vec<usize>>,
}

impl CdmtTree {
    pub(crate) fn lineage(&self, ordinal: u32) -> Lineage {
        let mut ordinals = vec![ordinal];
        let mut cur = self.versions.get(ordinal as usize).and_then(|v| v.parent);
        while let Some(p) = cur {
            ordinals.push(p);
            cur = self.versions.get(p as usize).and_then(|v| v.parent);
        }
        ordinals.sort_unstable();
        ordinals.dedup();
        Lineage { ordinals }
    }

    /// State of node `r` as seen from `lineage`.
    pub fn state_at(&self, r: NodeRef, lineage: &Lineage) -> Result<&NodeState> {
        let node = self.node(r)?;
        let history = &node.history;
        let mut idx = history.partition_point(|e| e.version <= lineage.head());
        while idx > 0 {
            idx -= 1;
            if lineage.contains(history[idx].version) {
                return Ok(&history[idx].state);
            }
        }
        Ok(&node.birth)
    }

    fn check_version(&self, v: &VersionId) -> Result<()> {
        match self.versions.get(v.ordinal as usize) {
            Some(rec) if rec.id == *v && rec.root.is_some() => Ok(()),
            _ => Err(Error::UnknownVersion(v.to_string())),
        }
    }

    fn layout(&self, ordinal: u32) -> Result<Layout> {
        let (root, lineage) = self.root_of(ordinal)?;
        let mut top_down: Vec<Vec<NodeRef>> = vec![vec![root]];
        let mut starts_top_down: Vec<Vec<usize>> = Vec::new();
        loop {
            let mut next = Vec::new();
            let mut starts = Vec::new();
            for &r in top_down.last().unwrap() {
                starts.push(next.len());
                next.extend_from_slice(&self.state_at(r, &lineage)?.children);
            }
            if next.is_empty() {
                break;
            }
            starts_top_down.push(starts);
            top_down.push(next);
        }
        top_down.reverse();
        starts_top_down.reverse();
        let mut starts = vec![Vec::new()];
        starts.extend(starts_top_down);
        Ok(Layout {
            levels: top_down,
            starts,
        })
    }

    /// Adds a version built over `leaves`. `parent` must exist when given;
    /// layering updates require one.
    pub(crate) fn commit(
        &mut self,
        parent: Option<u32>,
        leaves: &[Fingerprint],
        kind: VersionKind,
        label: Option<String>,
    ) -> Result<VersionId> {
        if leaves.is_empty() {
            return Err(Error::EmptyInput);
        }
        if let Some(p) = parent {
            self.root_of(p)?;
        }
        if kind == VersionKind::Branching && label.is_none() {
            return Err(Error::Contract("branching versions need a tag".into()));
        }
        if let Some(tag) = &label {
            if self.version_by_tag(tag).is_some() {
                return Err(Error::TagConflict(tag.clone()));
            }
        }
        let plan = plan_levels(leaves, &self.config, &self.rule)?;
        let ordinal = u32::try_from(self.versions.len())
            .map_err(|_| Error::Contract("too many versions".into()))?;

        let base = match (kind, parent) {
            (VersionKind::Layering, Some(p)) => Some(self.layout(p)?),
            (VersionKind::Layering, None) => {
                return Err(Error::Contract(
                    "layering update needs a base version".into(),
                ))
            }
            _ => None,
        };

        let id = VersionId {
            ordinal,
            kind,
            label,
        };
        // Registered before placement so `state_at` sees entries written for this version.
        self.versions.push(VersionRecord {
            id: id.clone(),
            parent,
            root: None,
        });
        match self.place_plan(&plan, ordinal, kind, base.as_ref()) {
            Ok(root) => {
                self.versions[ordinal as usize].root = Some(root);
                self.mark_membership(ordinal)?;
                Ok(id)
            }
            Err(e) => {
                self.versions.pop();
                Err(e)
            }
        }
    }

    fn place_plan(
        &mut self,
        plan: &[crate::cdmt::PlanLevel],
        ordinal: u32,
        kind: VersionKind,
        base: Option<&Layout>,
    ) -> Result<NodeRef> {
        let lineage = self.lineage(ordinal);
        let mut assigned: HashMap<NodeRef, Fingerprint> = HashMap::new();

        // Leaves are immutable: reuse by id or allocate.
        let mut refs: Vec<NodeRef> = Vec::with_capacity(plan[0].ids.len());
        for id in &plan[0].ids {
            let r = match self.node_map.get(id) {
                Some(&r) if self.nodes[r.index()].is_leaf() => r,
                _ => self.alloc_fresh(NodeState {
                    id: *id,
                    children: Vec::new(),
                }),
            };
            refs.push(r);
        }

        let mut pos_map: Vec<Option<usize>> = match base {
            Some(layout) => {
                let lineage_base = self.lineage(self.versions[ordinal as usize].parent.unwrap());
                let base_ids = layout.levels[0]
                    .iter()
                    .map(|&r| Ok(self.state_at(r, &lineage_base)?.id))
                    .collect::<Result<Vec<_>>>()?;
                align_leaves(&base_ids, &plan[0].ids)
            }
            None => Vec::new(),
        };

        for (l, level) in plan.iter().enumerate().skip(1) {
            let mut next_refs = Vec::with_capacity(level.ids.len());
            let mut next_map = Vec::with_capacity(level.ids.len());
            for (j, group) in level.groups.iter().enumerate() {
                let desired = NodeState {
                    id: level.ids[j],
                    children: refs[group.clone()].to_vec(),
                };
                let correspondent =
                    base.and_then(|layout| corresponding(layout, l, group, &pos_map));
                next_map.push(correspondent);
                let candidate = correspondent.map(|j2| base.unwrap().levels[l][j2]);
                let r =
                    self.place_node(desired, kind, ordinal, &lineage, &mut assigned, candidate)?;
                next_refs.push(r);
            }
            refs = next_refs;
            pos_map = next_map;
        }
        debug_assert_eq!(refs.len(), 1);
        Ok(refs[0])
    }

    fn place_node(
        &mut self,
        desired: NodeState,
        kind: VersionKind,
        ordinal: u32,
        lineage: &Lineage,
        assigned: &mut HashMap<NodeRef, Fingerprint>,
        correspondent: Option<NodeRef>,
    ) -> Result<NodeRef> {
        let id = desired.id;
        let in_place = |tree: &mut CdmtTree, r: NodeRef, desired: NodeState| {
            tree.nodes[r.index()].history.push(HistoryEntry {
                version: ordinal,
                state: desired,
            });
            tree.node_map.entry(id).or_insert(r);
        };
        if let Some(&x) = self.node_map.get(&id) {
            if !self.nodes[x.index()].is_leaf() {
                if *self.state_at(x, lineage)? == desired {
                    assigned.insert(x, id);
                    return Ok(x);
                }
                if kind == VersionKind::Layering && !assigned.contains_key(&x) {
                    in_place(self, x, desired);
                    assigned.insert(x, id);
                    return Ok(x);
                }
            }
        } else if let Some(b) = correspondent {
            if let Entry::Vacant(slot) = assigned.entry(b) {
                in_place(self, b, desired);
                slot.insert(id);
                return Ok(b);
            }
        }
        let r = self.alloc_fresh(desired);
        assigned.insert(r, id);
        Ok(r)
    }

    /// In-place update of `base`: unchanged positions append history entries
    /// instead of allocating.
    pub fn apply_layering_update(
        &mut self,
        base: &VersionId,
        new_leaves: &[Fingerprint],
    ) -> Result<VersionId> {
        self.check_version(base)?;
        self.commit(Some(base.ordinal), new_leaves, VersionKind::Layering, None)
    }

    /// Path-copying update of `base` recorded under `tag`.
    pub fn apply_branching_update(
        &mut self,
        base: &VersionId,
        new_leaves: &[Fingerprint],
        tag: &str,
    ) -> Result<VersionId> {
        self.check_version(base)?;
        self.commit(
            Some(base.ordinal),
            new_leaves,
            VersionKind::Branching,
            Some(tag.to_string()),
        )
    }

    /// Adds a tagged version with an optional parent. Used when replaying a
    /// store and for the first version of an image.
    pub fn insert_version(
        &mut self,
        parent: Option<&VersionId>,
        leaves: &[Fingerprint],
        kind: VersionKind,
        tag: Option<&str>,
    ) -> Result<VersionId> {
        if let Some(p) = parent {
            self.check_version(p)?;
        }
        self.commit(
            parent.map(|p| p.ordinal),
            leaves,
            kind,
            tag.map(str::to_string),
        )
    }

    pub fn resolve_version(&self, v: &VersionId) -> Result<NodeRef> {
        if self.versions.is_empty() {
            return Err(Error::UnknownVersion(format!("{v} (tree is empty)")));
        }
        self.check_version(v)?;
        Ok(self.versions[v.ordinal as usize].root.unwrap())
    }
}

/// Maps new leaf positions onto base positions through the common prefix and
/// suffix. The middle maps one-to-one only when it did not change length.
fn align_leaves(base: &[Fingerprint], new: &[Fingerprint]) -> Vec<Option<usize>> {
    let prefix = base.iter().zip(new).take_while(|(a, b)| a == b).count();
    let max_suffix = base.len().min(new.len()) - prefix;
    let suffix = base
        .iter()
        .rev()
        .zip(new.iter().rev())
        .take(max_suffix)
        .take_while(|(a, b)| a == b)
        .count();
    (0..new.len())
        .map(|i| {
            if i < prefix {
                Some(i)
            } else if i >= new.len() - suffix {
                Some(i + base.len() - new.len())
            } else if base.len() == new.len() {
                Some(i)
            } else {
                None
            }
        })
        .collect()
}

/// Base node at `level` covering exactly the mapped children of `group`.
fn corresponding(
    layout: &Layout,
    level: usize,
    group: &std::ops::Range<usize>,
    below: &[Option<usize>],
) -> Option<usize> {
    let starts = layout.starts.get(level)?;
    let first = below.get(group.start).copied().flatten()?;
    let j = starts.binary_search(&first).ok()?;
    let end = starts
        .get(j + 1)
        .copied()
        .unwrap_or(layout.levels[level - 1].len());
    if end - first != group.len() {
        return None;
    }
    let contiguous = group
        .clone()
        .enumerate()
        .all(|(t, c)| below.get(c).copied().flatten() == Some(first + t));
    contiguous.then_some(j)
}

pub fn apply_layering_update(
    tree: &mut CdmtTree,
    base: &VersionId,
    new_leaves: &[Fingerprint],
) -> Result<VersionId> {
    tree.apply_layering_update(base, new_leaves)
}

pub fn apply_branching_update(
    tree: &mut CdmtTree,
    base: &VersionId,
    new_leaves: &[Fingerprint],
    tag: &str,
) -> Result<VersionId> {
    tree.apply_branching_update(base, new_leaves, tag)
}

pub fn resolve_version(tree: &CdmtTree, v: &VersionId) -> Result<NodeRef> {
    tree.resolve_version(v)
}
