//! Complete k-ary Merkle tree over chunk fingerprints.
//!
//! This is the baseline index: node positions are fixed by leaf positions,
//! so a single chunk split shifts every node to its right. Incomplete groups
//! are padded with [`sentinel`].

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::rolling_hash::{hash_children, strong_hash, Fingerprint};

pub const DEFAULT_ARITY: usize = 4;

/// Padding digest for incomplete groups: the strong hash of the empty string.
pub fn sentinel() -> Fingerprint {
    strong_hash(b"")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MerkleTree {
    arity: usize,
    /// `levels[0]` holds the leaves, the last level holds the root alone.
    levels: Vec<Vec<Fingerprint>>,
}

/// Siblings of one node on the way to the root.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuthStep {
    /// Position of the path node inside its group.
    pub position: usize,
    /// The other `arity - 1` members of the group, in order.
    pub siblings: Vec<Fingerprint>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuthPath {
    pub leaf_index: usize,
    pub steps: Vec<AuthStep>,
}

impl AuthPath {
    /// All sibling digests bottom-up.
    pub fn siblings(&self) -> impl Iterator<Item = &Fingerprint> {
        self.steps.iter().flat_map(|s| s.siblings.iter())
    }

    /// Folds `leaf` with the path and returns the implied root.
    pub fn fold(&self, leaf: Fingerprint) -> Fingerprint {
        let mut current = leaf;
        for step in &self.steps {
            let mut group = step.siblings.clone();
            group.insert(step.position, current);
            current = hash_children(&group);
        }
        current
    }
}

/// `true` when `path` links `leaf` to `root`.
pub fn verify_auth_path(leaf: Fingerprint, path: &AuthPath, root: &Fingerprint) -> bool {
    path.fold(leaf) == *root
}

impl MerkleTree {
    pub fn build(leaves: &[Fingerprint], arity: usize) -> Result<Self> {
        if arity < 2 {
            return Err(Error::InvalidConfig(format!(
                "arity must be >= 2, got {arity}"
            )));
        }
        if leaves.is_empty() {
            return Err(Error::EmptyInput);
        }
        let pad = sentinel();
        let mut levels = vec![leaves.to_vec()];
        // A lone leaf still gets one parent so the root is always a hash of a group.
        loop {
            let current = levels.last().unwrap();
            if current.len() == 1 && levels.len() > 1 {
                break;
            }
            let next = current
                .chunks(arity)
                .map(|group| {
                    let padding = std::iter::repeat_n(&pad, arity - group.len());
                    hash_children(group.iter().chain(padding))
                })
                .collect();
            levels.push(next);
        }
        Ok(MerkleTree { arity, levels })
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn root(&self) -> Fingerprint {
        self.levels.last().unwrap()[0]
    }

    pub fn leaf_count(&self) -> usize {
        self.levels[0].len()
    }

    /// Number of edges from a leaf to the root.
    pub fn height(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn levels(&self) -> &[Vec<Fingerprint>] {
        &self.levels
    }

    /// Real nodes at all levels; padding is not counted.
    pub fn node_count(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    pub fn auth_path(&self, leaf_index: usize) -> Result<AuthPath> {
        if leaf_index >= self.leaf_count() {
            return Err(Error::OutOfRange {
                index: leaf_index,
                len: self.leaf_count(),
            });
        }
        let pad = sentinel();
        let mut steps = Vec::with_capacity(self.height());
        let mut index = leaf_index;
        for level in &self.levels[..self.levels.len() - 1] {
            let start = index - index % self.arity;
            let siblings = (start..start + self.arity)
                .filter(|&i| i != index)
                .map(|i| level.get(i).copied().unwrap_or(pad))
                .collect();
            steps.push(AuthStep {
                position: index - start,
                siblings,
            });
            index /= self.arity;
        }
        Ok(AuthPath { leaf_index, steps })
    }

    fn positioned(&self) -> impl Iterator<Item = (usize, usize, &Fingerprint)> {
        self.levels.iter().enumerate().flat_map(|(lvl, nodes)| {
            nodes
                .iter()
                .enumerate()
                .map(move |(pos, fp)| (lvl, pos, fp))
        })
    }
}

/// Nodes of `a` whose `(digest, level, position)` also occurs in `b`.
pub fn merkle_common_nodes(a: &MerkleTree, b: &MerkleTree) -> usize {
    a.positioned()
        .filter(|&(lvl, pos, fp)| b.levels.get(lvl).and_then(|l| l.get(pos)) == Some(fp))
        .count()
}

/// Nodes of `a` whose digest occurs anywhere in `b`, ignoring position.
pub fn merkle_common_digests(a: &MerkleTree, b: &MerkleTree) -> usize {
    let known: HashSet<&Fingerprint> = b.levels.iter().flatten().collect();
    a.levels
        .iter()
        .flatten()
        .filter(|fp| known.contains(fp))
        .count()
}
