//! Binary index format.
//!
//! ```text
//! header   "CDMT" | format u8 | mask_bits u8 | window u8 | max_fanout u16
//! versions count varint, then per version:
//!          ordinal varint | kind u8 (0 branching, 1 layering)
//!          parent+1 varint (0 = none) | has_tag u8 [| tag_len varint | tag bytes]
//! target   ordinal varint
//! nodes    count varint, then per node in depth-first preorder, each id once:
//!          kind u8 (0 leaf, 1 internal) | id [32]
//!          [internal: child_count varint | child ordinals varint...]
//!          membership bitmap, ceil(versions / 8) bytes, bit i = version i, LSB first
//! ```
//!
//! Integers are little-endian; varints are unsigned LEB128. Node 0 is the
//! root of the target version. The encoding is canonical: decoding rejects
//! any input that would not re-encode to the same bytes.

use std::collections::HashMap;

use super::{CdmtConfig, CdmtNode, CdmtTree, NodeRef, NodeState, VersionRecord};
use crate::error::{Error, Result};
use crate::rolling_hash::{hash_children, Fingerprint};
use crate::versioning::{VersionId, VersionKind};

pub const INDEX_MAGIC: &[u8; 4] = b"CDMT";
pub const INDEX_FORMAT_VERSION: u8 = 1;

const KIND_LEAF: u8 = 0;
const KIND_INTERNAL: u8 = 1;

fn put_varint(out: &mut Vec<u8>, mut v: u64) {
    while v >= 0x80 {
        out.push((v as u8) | 0x80);
        v >>= 7;
    }
    out.push(v as u8);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::corrupt(self.pos, "unexpected end of index"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn varint(&mut self) -> Result<u64> {
        let start = self.pos;
        let mut v = 0u64;
        for shift in (0..64).step_by(7) {
            let b = self.u8()?;
            let bits = u64::from(b & 0x7f);
            if shift == 63 && bits > 1 {
                return Err(Error::corrupt(start, "varint overflow"));
            }
            v |= bits << shift;
            if b & 0x80 == 0 {
                if b == 0 && shift > 0 {
                    return Err(Error::corrupt(start, "non-minimal varint"));
                }
                return Ok(v);
            }
        }
        Err(Error::corrupt(start, "varint too long"))
    }

    fn usize_bounded(&mut self, max: usize, what: &str) -> Result<usize> {
        let at = self.pos;
        let v = self.varint()?;
        if v > max as u64 {
            return Err(Error::corrupt(at, format!("{what} {v} exceeds {max}")));
        }
        Ok(v as usize)
    }
}

/// Encodes `version` of `tree`: its reachable nodes plus the full version table.
pub fn cdmt_serialize(tree: &CdmtTree, version: &VersionId) -> Result<Vec<u8>> {
    let rec = tree.record(version.ordinal)?;
    if rec.id != *version {
        return Err(Error::UnknownVersion(version.to_string()));
    }
    let (root, lineage) = tree.root_of(version.ordinal)?;
    let cfg = tree.config();
    let mut out = Vec::new();
    out.extend_from_slice(INDEX_MAGIC);
    out.push(INDEX_FORMAT_VERSION);
    out.push(cfg.internal_mask_bits as u8);
    out.push(cfg.window_size as u8);
    out.extend_from_slice(&(cfg.max_fanout as u16).to_le_bytes());

    let versions = tree.version_records();
    put_varint(&mut out, versions.len() as u64);
    for v in versions {
        put_varint(&mut out, u64::from(v.id.ordinal));
        out.push(match v.id.kind {
            VersionKind::Branching => 0,
            VersionKind::Layering => 1,
        });
        put_varint(&mut out, v.parent.map_or(0, |p| u64::from(p) + 1));
        match &v.id.label {
            Some(tag) => {
                out.push(1);
                put_varint(&mut out, tag.len() as u64);
                out.extend_from_slice(tag.as_bytes());
            }
            None => out.push(0),
        }
    }
    put_varint(&mut out, u64::from(version.ordinal));

    // Preorder numbering, each distinct id once.
    let mut order: Vec<&NodeState> = Vec::new();
    let mut index: HashMap<Fingerprint, usize> = HashMap::new();
    let mut stack = vec![root];
    while let Some(r) = stack.pop() {
        let state = tree.state_at(r, &lineage)?;
        if index.contains_key(&state.id) {
            continue;
        }
        index.insert(state.id, order.len());
        order.push(state);
        stack.extend(state.children.iter().rev().copied());
    }

    let bitmap_len = versions.len().div_ceil(8);
    put_varint(&mut out, order.len() as u64);
    for state in &order {
        out.push(if state.is_leaf() {
            KIND_LEAF
        } else {
            KIND_INTERNAL
        });
        out.extend_from_slice(state.id.as_bytes());
        if !state.is_leaf() {
            put_varint(&mut out, state.children.len() as u64);
            for &c in &state.children {
                let id = tree.state_at(c, &lineage)?.id;
                put_varint(&mut out, index[&id] as u64);
            }
        }
        let mut bitmap = vec![0u8; bitmap_len];
        for &v in tree.membership(&state.id) {
            bitmap[v as usize / 8] |= 1 << (v % 8);
        }
        out.extend_from_slice(&bitmap);
    }
    Ok(out)
}

/// Decodes an index produced by [`cdmt_serialize`]. The result holds one
/// rooted version (the target); the rest of the version table is metadata.
pub fn cdmt_deserialize(bytes: &[u8]) -> Result<CdmtTree> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != INDEX_MAGIC {
        return Err(Error::corrupt(0, "bad magic"));
    }
    let fmt = r.u8()?;
    if fmt != INDEX_FORMAT_VERSION {
        return Err(Error::corrupt(
            4,
            format!("unsupported format version {fmt}"),
        ));
    }
    let cfg = CdmtConfig {
        internal_mask_bits: u32::from(r.u8()?),
        window_size: usize::from(r.u8()?),
        max_fanout: usize::from(u16::from_le_bytes(r.take(2)?.try_into().unwrap())),
    };
    cfg.validate()
        .map_err(|e| Error::corrupt(5, e.to_string()))?;
    let mut tree = CdmtTree::new(&cfg).map_err(|e| Error::corrupt(5, e.to_string()))?;

    let remaining = bytes.len();
    let count = r.usize_bounded(remaining, "version count")?;
    for i in 0..count {
        let at = r.pos;
        let ordinal = r.varint()?;
        if ordinal != i as u64 {
            return Err(Error::corrupt(
                at,
                format!("version ordinal {ordinal} out of sequence"),
            ));
        }
        let at = r.pos;
        let kind = match r.u8()? {
            0 => VersionKind::Branching,
            1 => VersionKind::Layering,
            k => return Err(Error::corrupt(at, format!("bad version kind {k}"))),
        };
        let at = r.pos;
        let parent = match r.usize_bounded(i, "parent")? {
            0 => None,
            p => Some((p - 1) as u32),
        };
        let at_tag = r.pos;
        let label = match r.u8()? {
            0 => None,
            1 => {
                let len = r.usize_bounded(remaining, "tag length")?;
                let raw = r.take(len)?;
                let tag = std::str::from_utf8(raw)
                    .map_err(|_| Error::corrupt(at_tag, "tag is not UTF-8"))?;
                if tree.version_by_tag(tag).is_some() {
                    return Err(Error::corrupt(at_tag, format!("duplicate tag {tag}")));
                }
                Some(tag.to_string())
            }
            b => return Err(Error::corrupt(at_tag, format!("bad tag flag {b}"))),
        };
        if kind == VersionKind::Branching && label.is_none() {
            return Err(Error::corrupt(at, "branching version without tag"));
        }
        tree.versions.push(VersionRecord {
            id: VersionId {
                ordinal: i as u32,
                kind,
                label,
            },
            parent,
            root: None,
        });
    }
    if count == 0 {
        return Err(Error::corrupt(r.pos, "empty version table"));
    }
    let target = r.usize_bounded(count - 1, "target version")? as u32;

    let bitmap_len = count.div_ceil(8);
    let node_count_at = r.pos;
    let node_count = r.usize_bounded(remaining, "node count")?;
    if node_count == 0 {
        return Err(Error::corrupt(node_count_at, "no nodes"));
    }
    let mut offsets = Vec::with_capacity(node_count);
    for _ in 0..node_count {
        let at = r.pos;
        offsets.push(at);
        let kind = r.u8()?;
        let id = Fingerprint::from_slice(r.take(32)?).unwrap();
        let children = match kind {
            KIND_LEAF => Vec::new(),
            KIND_INTERNAL => {
                let n = r.usize_bounded(cfg.max_fanout, "child count")?;
                if n == 0 {
                    return Err(Error::corrupt(at, "internal node without children"));
                }
                (0..n)
                    .map(|_| {
                        Ok(NodeRef(
                            r.usize_bounded(node_count - 1, "child ordinal")? as u32
                        ))
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            k => return Err(Error::corrupt(at, format!("bad node kind {k}"))),
        };
        let bitmap_at = r.pos;
        let bitmap = r.take(bitmap_len)?;
        let mut versions = Vec::new();
        for v in 0..count {
            if bitmap[v / 8] & (1 << (v % 8)) != 0 {
                versions.push(v as u32);
            }
        }
        if bitmap_len > 0 && count % 8 != 0 && bitmap[bitmap_len - 1] >> (count % 8) != 0 {
            return Err(Error::corrupt(
                bitmap_at,
                "membership bit beyond version table",
            ));
        }
        let nref = NodeRef(tree.nodes.len() as u32);
        if tree.node_map.insert(id, nref).is_some() {
            return Err(Error::corrupt(at, format!("duplicate node id {id}")));
        }
        if !versions.is_empty() {
            tree.membership.insert(id, versions.clone());
        }
        tree.nodes.push(CdmtNode {
            birth: NodeState { id, children },
            history: Vec::new(),
            versions,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::corrupt(r.pos, "trailing bytes after node table"));
    }

    for (i, node) in tree.nodes.iter().enumerate() {
        if node.is_leaf() {
            continue;
        }
        let child_ids: Vec<Fingerprint> = node
            .birth
            .children
            .iter()
            .map(|c| tree.nodes[c.index()].birth.id)
            .collect();
        if hash_children(&child_ids) != node.birth.id {
            return Err(Error::corrupt(
                offsets[i],
                "internal id does not match its children",
            ));
        }
    }
    check_acyclic(&tree.nodes, &offsets)?;
    if tree.nodes[0].is_leaf() {
        return Err(Error::corrupt(offsets[0], "root is a leaf"));
    }
    tree.versions[target as usize].root = Some(NodeRef(0));

    // Anything not already rejected but still non-canonical (order, unreachable nodes).
    let again = cdmt_serialize(&tree, &tree.versions[target as usize].id.clone())?;
    if again != bytes {
        let at = again
            .iter()
            .zip(bytes)
            .position(|(a, b)| a != b)
            .unwrap_or(again.len().min(bytes.len()));
        return Err(Error::corrupt(at, "node table is not in canonical order"));
    }
    Ok(tree)
}

fn check_acyclic(nodes: &[CdmtNode], offsets: &[usize]) -> Result<()> {
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut color = vec![0u8; nodes.len()];
    for start in 0..nodes.len() {
        if color[start] != 0 {
            continue;
        }
        let mut stack = vec![(start, 0usize)];
        color[start] = 1;
        while let Some(&mut (n, ref mut next)) = stack.last_mut() {
            let children = &nodes[n].birth.children;
            if *next < children.len() {
                let c = children[*next].index();
                *next += 1;
                match color[c] {
                    0 => {
                        color[c] = 1;
                        stack.push((c, 0));
                    }
                    1 => return Err(Error::corrupt(offsets[n], "cycle in node table")),
                    _ => {}
                }
            } else {
                color[n] = 2;
                stack.pop();
            }
        }
    }
    Ok(())
}
