//! Push and pull between a client store and a registry.
//!
//! # Wire format
//!
//! Every message is one frame:
//!
//! ```text
//! "CDMT" | opcode u8 | length u32 LE | payload[length]
//! ```
//!
//! | opcode | name      | payload                                                 |
//! |--------|-----------|---------------------------------------------------------|
//! | 1      | HELLO     | protocol version u16                                    |
//! | 2      | GET_INDEX | name_len u16, name, tag_len u16, tag (empty = latest)   |
//! | 3      | INDEX     | bundle                                                  |
//! | 4      | NEED      | count u32, fingerprints [32]*                           |
//! | 5      | CHUNKS    | records (fp [32], len u32, bytes)*; empty ends a stream |
//! | 6      | COMMIT    | bundle from the client; empty from the registry as ack  |
//! | 7      | ERR       | code u16, UTF-8 message                                 |
//!
//! A bundle is `json_len u32 | manifest JSON | count u32 | (len u32 | recipe)* | index`,
//! where the index is the binary tree encoding from [`crate::cdmt`].
//!
//! A session starts with a HELLO exchange. A pull is GET_INDEX, then NEED
//! answered by CHUNKS frames and an empty terminator. A push is GET_INDEX for
//! the latest version, CHUNKS frames for what the registry lacks, then COMMIT.
//! The registry stages pushed chunks in memory and writes nothing until the
//! COMMIT validates, so a dropped connection leaves it unchanged.

use std::collections::HashSet;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::cdmt::{cdmt_compare_with, cdmt_deserialize, cdmt_serialize, CdmtTree, KnownIds};
use crate::error::{Error, Result};
use crate::rolling_hash::{strong_hash, Fingerprint};
use crate::store::{Recipe, Store, StoreOptions, VersionKindRepr};
use crate::versioning::VersionKind;

pub const FRAME_MAGIC: &[u8; 4] = b"CDMT";
pub const PROTOCOL_VERSION: u16 = 1;
pub const MAX_FRAME: usize = 64 << 20;
const CHUNK_BATCH: usize = 8 << 20;
const SOCKET_TIMEOUT: Duration = Duration::from_secs(300);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Opcode {
    Hello = 1,
    GetIndex = 2,
    Index = 3,
    Need = 4,
    Chunks = 5,
    Commit = 6,
    Err = 7,
}

impl TryFrom<u8> for Opcode {
    type Error = Error;

    fn try_from(b: u8) -> Result<Self> {
        Ok(match b {
            1 => Opcode::Hello,
            2 => Opcode::GetIndex,
            3 => Opcode::Index,
            4 => Opcode::Need,
            5 => Opcode::Chunks,
            6 => Opcode::Commit,
            7 => Opcode::Err,
            _ => return Err(Error::Protocol(format!("unknown opcode {b}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub op: Opcode,
    pub payload: Vec<u8>,
}

fn net(e: io::Error) -> Error {
    Error::Transfer(e.to_string())
}

/// Writes one frame and returns its size on the wire.
pub fn write_frame(w: &mut impl Write, op: Opcode, payload: &[u8]) -> Result<usize> {
    if payload.len() > MAX_FRAME {
        return Err(Error::Protocol(format!(
            "frame of {} bytes exceeds limit",
            payload.len()
        )));
    }
    let mut header = [0u8; 9];
    header[..4].copy_from_slice(FRAME_MAGIC);
    header[4] = op as u8;
    header[5..].copy_from_slice(&(payload.len() as u32).to_le_bytes());
    w.write_all(&header).map_err(net)?;
    w.write_all(payload).map_err(net)?;
    w.flush().map_err(net)?;
    Ok(9 + payload.len())
}

pub fn read_frame(r: &mut impl Read) -> Result<Frame> {
    let mut header = [0u8; 9];
    r.read_exact(&mut header).map_err(net)?;
    if &header[..4] != FRAME_MAGIC {
        return Err(Error::Protocol("bad frame magic".into()));
    }
    let op = Opcode::try_from(header[4])?;
    let len = u32::from_le_bytes(header[5..].try_into().unwrap()) as usize;
    if len > MAX_FRAME {
        return Err(Error::Protocol(format!(
            "frame of {len} bytes exceeds limit"
        )));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload).map_err(net)?;
    Ok(Frame { op, payload })
}

const ERR_PROTOCOL: u16 = 1;
const ERR_NOT_FOUND: u16 = 2;
const ERR_TAG_CONFLICT: u16 = 3;
const ERR_INTEGRITY: u16 = 4;
const ERR_MISSING_CHUNK: u16 = 5;
const ERR_OTHER: u16 = 6;

fn encode_error(e: &Error) -> Vec<u8> {
    let (code, msg) = match e {
        Error::Protocol(m) => (ERR_PROTOCOL, m.clone()),
        Error::NotFound(m) => (ERR_NOT_FOUND, m.clone()),
        Error::TagConflict(m) => (ERR_TAG_CONFLICT, m.clone()),
        Error::Integrity(m) => (ERR_INTEGRITY, m.clone()),
        Error::MissingChunk(fp) => (ERR_MISSING_CHUNK, fp.to_hex()),
        other => (ERR_OTHER, other.to_string()),
    };
    let mut out = code.to_le_bytes().to_vec();
    out.extend_from_slice(msg.as_bytes());
    out
}

fn decode_error(payload: &[u8]) -> Error {
    if payload.len() < 2 {
        return Error::Protocol("short ERR frame".into());
    }
    let code = u16::from_le_bytes([payload[0], payload[1]]);
    let msg = String::from_utf8_lossy(&payload[2..]).into_owned();
    match code {
        ERR_PROTOCOL => Error::Protocol(format!("registry: {msg}")),
        ERR_NOT_FOUND => Error::NotFound(msg),
        ERR_TAG_CONFLICT => Error::TagConflict(msg),
        ERR_INTEGRITY => Error::Integrity(msg),
        ERR_MISSING_CHUNK => match msg.parse() {
            Ok(fp) => Error::MissingChunk(fp),
            Err(_) => Error::Protocol(format!("bad fingerprint in ERR: {msg}")),
        },
        _ => Error::Transfer(format!("registry: {msg}")),
    }
}

/// Version metadata carried in a bundle.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub tag: String,
    pub kind: VersionKindRepr,
    pub parent: Option<String>,
    pub layers: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Bundle {
    pub manifest: Manifest,
    pub recipes: Vec<Recipe>,
    pub index: Vec<u8>,
}

impl Bundle {
    pub fn encode(&self) -> Vec<u8> {
        let json = serde_json::to_vec(&self.manifest).expect("manifest is serializable");
        let mut out = Vec::new();
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.recipes.len() as u32).to_le_bytes());
        for r in &self.recipes {
            let bytes = r.encode();
            out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
            out.extend_from_slice(&bytes);
        }
        out.extend_from_slice(&self.index);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Bundle> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes
                .get(
                    pos..pos
                        .checked_add(n)
                        .ok_or_else(|| Error::Protocol("bundle length overflow".into()))?,
                )
                .ok_or_else(|| Error::Protocol("truncated bundle".into()))?;
            pos += n;
            Ok(s)
        };
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap()) as usize;
        let json_len = u32_at(take(4)?);
        let manifest: Manifest = serde_json::from_slice(take(json_len)?)
            .map_err(|e| Error::Protocol(format!("bad manifest: {e}")))?;
        let count = u32_at(take(4)?);
        let mut recipes = Vec::new();
        for _ in 0..count {
            let len = u32_at(take(4)?);
            recipes.push(Recipe::decode(take(len)?)?);
        }
        let index = bytes[pos..].to_vec();
        Ok(Bundle {
            manifest,
            recipes,
            index,
        })
    }

    /// Checks that recipes, manifest layers and the index describe the same leaves.
    fn validate(&self) -> Result<(CdmtTree, u32)> {
        let tree = cdmt_deserialize(&self.index)?;
        let target = tree
            .latest()
            .ok_or_else(|| Error::Protocol("index has no rooted version".into()))?
            .clone();
        if target.label.as_deref() != Some(self.manifest.tag.as_str()) {
            return Err(Error::Integrity(
                "index version does not match manifest tag".into(),
            ));
        }
        let mut leaves = Vec::new();
        for layer in &self.manifest.layers {
            let recipe = self
                .recipes
                .iter()
                .find(|r| &r.layer_id == layer)
                .ok_or_else(|| {
                    Error::Integrity(format!("bundle lacks recipe for layer {layer}"))
                })?;
            leaves.extend_from_slice(&recipe.fps);
        }
        if tree.leaves(target.ordinal)? != leaves {
            return Err(Error::Integrity("index leaves do not match recipes".into()));
        }
        Ok((tree, target.ordinal))
    }
}

/// Bundle for `name:tag` (or the latest version of `name`) as held by `store`.
pub fn make_bundle(store: &Store, name: &str, tag: Option<&str>) -> Result<Vec<u8>> {
    let ix = store.image_index(name)?;
    let (version, id) = match tag {
        Some(t) => ix
            .by_tag(t)
            .ok_or_else(|| Error::NotFound(format!("{name}:{t}")))?,
        None => ix
            .latest()
            .ok_or_else(|| Error::NotFound(format!("image {name}")))?,
    };
    let mut recipes: Vec<Recipe> = Vec::new();
    for l in &version.layers {
        if !recipes.iter().any(|r| &r.layer_id == l) {
            recipes.push(store.recipe(l)?);
        }
    }
    let bundle = Bundle {
        manifest: Manifest {
            name: version.name.clone(),
            tag: version.tag.clone(),
            kind: version.kind,
            parent: version.parent.clone(),
            layers: version.layers.clone(),
        },
        recipes,
        index: cdmt_serialize(&ix.tree, id)?,
    };
    Ok(bundle.encode())
}

/// Registry side of a push: validates everything, then writes chunks,
/// recipes and finally the version record.
pub fn apply_push(
    store: &mut Store,
    staged: Vec<(Fingerprint, Vec<u8>)>,
    bundle: &[u8],
) -> Result<()> {
    let bundle = Bundle::decode(bundle)?;
    bundle.validate()?;
    let m = &bundle.manifest;
    if store.version(&m.name, &m.tag).is_ok() {
        return Err(Error::TagConflict(format!("{}:{}", m.name, m.tag)));
    }
    let mut staged_len = std::collections::HashMap::new();
    for (fp, data) in &staged {
        if strong_hash(data) != *fp {
            return Err(Error::Integrity(format!(
                "pushed chunk does not hash to {fp}"
            )));
        }
        staged_len.insert(*fp, data.len() as u32);
    }
    for r in &bundle.recipes {
        for (fp, len) in r.entries() {
            let have = store
                .chunk_len(&fp)
                .or_else(|| staged_len.get(&fp).copied());
            match have {
                None => return Err(Error::MissingChunk(fp)),
                Some(l) if l != len => {
                    return Err(Error::Integrity(format!("chunk {fp} length mismatch")))
                }
                _ => {}
            }
        }
    }
    let parent = store.latest_version(&m.name).map(|v| v.tag);
    store.put_verified_chunks(staged)?;
    for r in &bundle.recipes {
        store.put_recipe(r)?;
    }
    store.commit_version(
        &m.name,
        &m.tag,
        VersionKind::Branching,
        parent.as_deref(),
        m.layers.clone(),
    )?;
    Ok(())
}

/// What a registry offers to a client.
pub trait Registry {
    /// Bundle for `name:tag`, or for the latest version of `name` when `tag` is `None`.
    fn get_index(&mut self, name: &str, tag: Option<&str>) -> Result<Vec<u8>>;

    /// Delivers each requested chunk to `sink`, in request order.
    fn fetch_chunks(
        &mut self,
        fps: &[Fingerprint],
        sink: &mut dyn FnMut(Fingerprint, Vec<u8>) -> Result<()>,
    ) -> Result<()>;

    /// Sends the chunks in `fps` (read through `source`) and commits `bundle`.
    fn push(
        &mut self,
        fps: &[Fingerprint],
        source: &mut dyn FnMut(&Fingerprint) -> Result<Vec<u8>>,
        bundle: &[u8],
    ) -> Result<()>;
}

/// A registry that is a store directory on the local filesystem.
pub struct DirRegistry {
    root: PathBuf,
    options: StoreOptions,
}

impl DirRegistry {
    /// Opens (creating if needed) a registry directory.
    pub fn new(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        if !root.join("versions.json").exists() {
            Store::init(&root, &Default::default(), StoreOptions::default())?;
        }
        Ok(DirRegistry {
            root,
            options: StoreOptions::default(),
        })
    }

    fn open(&self) -> Result<Store> {
        Store::open(&self.root, self.options.clone())
    }
}

impl Registry for DirRegistry {
    fn get_index(&mut self, name: &str, tag: Option<&str>) -> Result<Vec<u8>> {
        make_bundle(&self.open()?, name, tag)
    }

    fn fetch_chunks(
        &mut self,
        fps: &[Fingerprint],
        sink: &mut dyn FnMut(Fingerprint, Vec<u8>) -> Result<()>,
    ) -> Result<()> {
        let store = self.open()?;
        for fp in fps {
            sink(*fp, store.read_chunk(fp)?)?;
        }
        Ok(())
    }

    fn push(
        &mut self,
        fps: &[Fingerprint],
        source: &mut dyn FnMut(&Fingerprint) -> Result<Vec<u8>>,
        bundle: &[u8],
    ) -> Result<()> {
        let staged = fps
            .iter()
            .map(|f| Ok((*f, source(f)?)))
            .collect::<Result<Vec<_>>>()?;
        apply_push(&mut self.open()?, staged, bundle)
    }
}

/// Client end of a network session.
pub struct TcpRegistry {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl TcpRegistry {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        let stream = TcpStream::connect(addr).map_err(net)?;
        stream.set_read_timeout(Some(SOCKET_TIMEOUT)).map_err(net)?;
        stream.set_nodelay(true).ok();
        let mut reg = TcpRegistry {
            reader: BufReader::new(stream.try_clone().map_err(net)?),
            writer: BufWriter::new(stream),
        };
        reg.send(Opcode::Hello, &PROTOCOL_VERSION.to_le_bytes())?;
        let reply = reg.expect(Opcode::Hello)?;
        if reply.payload != PROTOCOL_VERSION.to_le_bytes() {
            return Err(Error::Protocol(
                "registry speaks another protocol version".into(),
            ));
        }
        Ok(reg)
    }

    fn send(&mut self, op: Opcode, payload: &[u8]) -> Result<()> {
        write_frame(&mut self.writer, op, payload).map(drop)
    }

    fn expect(&mut self, op: Opcode) -> Result<Frame> {
        let f = read_frame(&mut self.reader)?;
        match f.op {
            o if o == op => Ok(f),
            Opcode::Err => Err(decode_error(&f.payload)),
            other => Err(Error::Protocol(format!("expected {op:?}, got {other:?}"))),
        }
    }
}

fn put_str16(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| Error::Contract("name too long".into()))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn get_str16<'a>(buf: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    let short = || Error::Protocol("truncated string".into());
    let len = u16::from_le_bytes(
        buf.get(*pos..*pos + 2)
            .ok_or_else(short)?
            .try_into()
            .unwrap(),
    ) as usize;
    *pos += 2;
    let s = buf.get(*pos..*pos + len).ok_or_else(short)?;
    *pos += len;
    std::str::from_utf8(s).map_err(|_| Error::Protocol("string is not UTF-8".into()))
}

fn parse_records(
    payload: &[u8],
    mut each: impl FnMut(Fingerprint, Vec<u8>) -> Result<()>,
) -> Result<()> {
    let mut pos = 0;
    while pos < payload.len() {
        let head = payload
            .get(pos..pos + 36)
            .ok_or_else(|| Error::Protocol("truncated chunk record".into()))?;
        let fp = Fingerprint::from_slice(&head[..32]).unwrap();
        let len = u32::from_le_bytes(head[32..].try_into().unwrap()) as usize;
        pos += 36;
        let data = payload
            .get(pos..pos + len)
            .ok_or_else(|| Error::Protocol("truncated chunk payload".into()))?;
        pos += len;
        each(fp, data.to_vec())?;
    }
    Ok(())
}

/// Sends chunks as CHUNKS frames of at most [`CHUNK_BATCH`] bytes each.
fn send_chunks(
    w: &mut impl Write,
    fps: &[Fingerprint],
    mut source: impl FnMut(&Fingerprint) -> Result<Vec<u8>>,
) -> Result<()> {
    let mut batch = Vec::new();
    for fp in fps {
        let data = source(fp)?;
        if !batch.is_empty() && batch.len() + 36 + data.len() > CHUNK_BATCH {
            write_frame(w, Opcode::Chunks, &batch)?;
            batch.clear();
        }
        batch.extend_from_slice(fp.as_bytes());
        batch.extend_from_slice(&(data.len() as u32).to_le_bytes());
        batch.extend_from_slice(&data);
    }
    if !batch.is_empty() {
        write_frame(w, Opcode::Chunks, &batch)?;
    }
    Ok(())
}

impl Registry for TcpRegistry {
    fn get_index(&mut self, name: &str, tag: Option<&str>) -> Result<Vec<u8>> {
        let mut p = Vec::new();
        put_str16(&mut p, name)?;
        put_str16(&mut p, tag.unwrap_or(""))?;
        self.send(Opcode::GetIndex, &p)?;
        Ok(self.expect(Opcode::Index)?.payload)
    }

    fn fetch_chunks(
        &mut self,
        fps: &[Fingerprint],
        sink: &mut dyn FnMut(Fingerprint, Vec<u8>) -> Result<()>,
    ) -> Result<()> {
        let mut p = Vec::with_capacity(4 + fps.len() * 32);
        p.extend_from_slice(&(fps.len() as u32).to_le_bytes());
        for fp in fps {
            p.extend_from_slice(fp.as_bytes());
        }
        self.send(Opcode::Need, &p)?;
        loop {
            let f = self.expect(Opcode::Chunks)?;
            if f.payload.is_empty() {
                return Ok(());
            }
            parse_records(&f.payload, &mut *sink)?;
        }
    }

    fn push(
        &mut self,
        fps: &[Fingerprint],
        source: &mut dyn FnMut(&Fingerprint) -> Result<Vec<u8>>,
        bundle: &[u8],
    ) -> Result<()> {
        send_chunks(&mut self.writer, fps, source)?;
        self.send(Opcode::Commit, bundle)?;
        self.expect(Opcode::Commit).map(drop)
    }
}

/// Opens `spec` as a registry: `tcp://host:port` or a directory path.
pub fn open_registry(spec: &str) -> Result<Box<dyn Registry>> {
    match spec.strip_prefix("tcp://") {
        Some(addr) => Ok(Box::new(TcpRegistry::connect(addr)?)),
        None => Ok(Box::new(DirRegistry::new(spec)?)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Push,
    Pull,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TransferReport {
    pub direction: Direction,
    pub chunks_sent: usize,
    /// Sum of the lengths of the chunks sent.
    pub bytes_payload: u64,
    /// Bundle bytes moved in either direction.
    pub bytes_index: u64,
    pub chunks_skipped: usize,
}

/// Ids a client holds: its own index of the image plus every stored chunk.
struct ClientKnown<'a> {
    tree: Option<&'a CdmtTree>,
    store: &'a Store,
}

impl KnownIds for ClientKnown<'_> {
    fn knows(&self, id: &Fingerprint) -> bool {
        self.tree.is_some_and(|t| t.contains(id)) || self.store.has_chunk(id)
    }
}

/// Fetches `name:tag` from `registry` into `client`, moving only chunks the client lacks.
pub fn pull(
    client: &mut Store,
    registry: &mut dyn Registry,
    name: &str,
    tag: &str,
) -> Result<TransferReport> {
    let raw = registry.get_index(name, Some(tag))?;
    let bundle = Bundle::decode(&raw)?;
    if bundle.manifest.name != name || bundle.manifest.tag != tag {
        return Err(Error::Protocol(
            "registry answered for another version".into(),
        ));
    }
    let (target, ordinal) = bundle.validate()?;
    let leaf_count = target.leaves(ordinal)?.len();

    let existing = client.version(name, tag).ok();
    if let Some(v) = &existing {
        if v.root != target.root_id(ordinal)?.to_hex() {
            return Err(Error::TagConflict(format!(
                "{name}:{tag} differs from the registry copy"
            )));
        }
    }
    let missing = {
        let ix = client.image_index(name).ok();
        let known = ClientKnown {
            tree: ix.as_ref().map(|ix| &ix.tree),
            store: client,
        };
        cdmt_compare_with(&known, &target, ordinal)?.missing
    };

    let wanted: HashSet<Fingerprint> = missing.iter().copied().collect();
    let mut received = HashSet::new();
    let mut bytes_payload = 0u64;
    let mut pending = Vec::new();
    let mut pending_bytes = 0usize;
    registry.fetch_chunks(&missing, &mut |fp, data| {
        if !wanted.contains(&fp) || !received.insert(fp) {
            return Err(Error::Protocol(format!("unrequested chunk {fp}")));
        }
        bytes_payload += data.len() as u64;
        pending_bytes += data.len();
        pending.push((fp, data));
        if pending_bytes >= CHUNK_BATCH {
            pending_bytes = 0;
            client.put_verified_chunks(std::mem::take(&mut pending))?;
        }
        Ok(())
    })?;
    client.put_verified_chunks(pending)?;
    if received.len() != wanted.len() {
        return Err(Error::Transfer(format!(
            "registry sent {} of {} chunks",
            received.len(),
            wanted.len()
        )));
    }

    if existing.is_none() {
        for r in &bundle.recipes {
            client.put_recipe(r)?;
        }
        let m = &bundle.manifest;
        let parent = m
            .parent
            .as_deref()
            .filter(|p| client.version(name, p).is_ok());
        let kind = match parent {
            Some(_) => m.kind.into(),
            None => VersionKind::Branching,
        };
        client.commit_version(name, tag, kind, parent, m.layers.clone())?;
    }
    Ok(TransferReport {
        direction: Direction::Pull,
        chunks_sent: missing.len(),
        bytes_payload,
        bytes_index: raw.len() as u64,
        chunks_skipped: leaf_count - missing.len(),
    })
}

/// Publishes `name:tag` from `client` to `registry`, sending only chunks missing
/// from the registry's latest version of the image.
pub fn push(
    client: &Store,
    registry: &mut dyn Registry,
    name: &str,
    tag: &str,
) -> Result<TransferReport> {
    client.version(name, tag)?;
    let ix = client.image_index(name)?;
    let (_, id) = ix.by_tag(tag).expect("version exists");
    let leaf_count = ix.tree.leaves(id.ordinal)?.len();

    let (remote, remote_bytes) = match registry.get_index(name, None) {
        Ok(raw) => {
            let tree = cdmt_deserialize(&Bundle::decode(&raw)?.index)?;
            (Some(tree), raw.len() as u64)
        }
        Err(Error::NotFound(_)) => (None, 0),
        Err(e) => return Err(e),
    };
    if let Some(t) = &remote {
        if t.version_by_tag(tag).is_some() {
            return Err(Error::TagConflict(format!(
                "{name}:{tag} already on the registry"
            )));
        }
    }
    let missing = match &remote {
        Some(t) => cdmt_compare_with(t, &ix.tree, id.ordinal)?.missing,
        None => cdmt_compare_with(&HashSet::new(), &ix.tree, id.ordinal)?.missing,
    };
    let bytes_payload = missing
        .iter()
        .map(|f| {
            client
                .chunk_len(f)
                .map(u64::from)
                .ok_or(Error::MissingChunk(*f))
        })
        .sum::<Result<u64>>()?;
    let bundle = make_bundle(client, name, Some(tag))?;
    registry.push(&missing, &mut |fp| client.read_chunk(fp), &bundle)?;
    Ok(TransferReport {
        direction: Direction::Push,
        chunks_sent: missing.len(),
        bytes_payload,
        bytes_index: remote_bytes + bundle.len() as u64,
        chunks_skipped: leaf_count - missing.len(),
    })
}

/// A running network registry.
pub struct ServerHandle {
    addr: std::net::SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> std::net::SocketAddr {
        self.addr
    }

    /// Stops accepting connections and waits for the accept loop to end.
    pub fn shutdown(mut self) {
        self.stop_now();
    }

    /// Blocks until the server stops.
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            t.join().ok();
        }
    }

    fn stop_now(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        TcpStream::connect(self.addr).ok();
        if let Some(t) = self.thread.take() {
            t.join().ok();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if self.thread.is_some() {
            self.stop_now();
        }
    }
}

/// Serves the store at `root_dir` on `endpoint` (for example `127.0.0.1:0`).
/// Pulls run concurrently; commits are serialized.
pub fn registry_serve(root_dir: impl AsRef<Path>, endpoint: &str) -> Result<ServerHandle> {
    let root = root_dir.as_ref();
    let store = match Store::open(root, StoreOptions::default()) {
        Err(Error::NotFound(_)) => Store::init(root, &Default::default(), StoreOptions::default())?,
        other => other?,
    };
    let listener = TcpListener::bind(endpoint)?;
    let addr = listener.local_addr()?;
    let store = Arc::new(RwLock::new(store));
    let stop = Arc::new(AtomicBool::new(false));
    let stop_flag = stop.clone();
    let thread = std::thread::spawn(move || {
        for conn in listener.incoming() {
            if stop_flag.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = conn else { continue };
            let store = store.clone();
            std::thread::spawn(move || serve_connection(stream, &store));
        }
    });
    Ok(ServerHandle {
        addr,
        stop,
        thread: Some(thread),
    })
}

fn serve_connection(stream: TcpStream, store: &RwLock<Store>) {
    stream.set_read_timeout(Some(SOCKET_TIMEOUT)).ok();
    stream.set_nodelay(true).ok();
    let Ok(read_half) = stream.try_clone() else {
        return;
    };
    let mut reader = BufReader::new(read_half);
    let mut writer = BufWriter::new(stream);
    let mut session = Session::default();
    loop {
        let frame = match read_frame(&mut reader) {
            Ok(f) => f,
            Err(Error::Protocol(msg)) => {
                write_frame(
                    &mut writer,
                    Opcode::Err,
                    &encode_error(&Error::Protocol(msg)),
                )
                .ok();
                break;
            }
            Err(_) => break,
        };
        match session.handle(frame, store, &mut writer) {
            Ok(()) => {}
            Err(e @ Error::Protocol(_)) => {
                write_frame(&mut writer, Opcode::Err, &encode_error(&e)).ok();
                break;
            }
            Err(Error::Transfer(_)) => break,
            Err(e) => {
                if write_frame(&mut writer, Opcode::Err, &encode_error(&e)).is_err() {
                    break;
                }
            }
        }
    }
    if let Ok(s) = writer.into_inner() {
        s.shutdown(Shutdown::Both).ok();
    }
}

#[derive(Default)]
struct Session {
    greeted: bool,
    staged: Vec<(Fingerprint, Vec<u8>)>,
}

impl Session {
    fn handle(&mut self, frame: Frame, store: &RwLock<Store>, w: &mut impl Write) -> Result<()> {
        if !self.greeted {
            if frame.op != Opcode::Hello {
                return Err(Error::Protocol("expected HELLO".into()));
            }
            if frame.payload != PROTOCOL_VERSION.to_le_bytes() {
                return Err(Error::Protocol("unsupported protocol version".into()));
            }
            self.greeted = true;
            write_frame(w, Opcode::Hello, &PROTOCOL_VERSION.to_le_bytes())?;
            return Ok(());
        }
        match frame.op {
            Opcode::GetIndex => {
                let mut pos = 0;
                let name = get_str16(&frame.payload, &mut pos)?;
                let tag = get_str16(&frame.payload, &mut pos)?;
                if pos != frame.payload.len() {
                    return Err(Error::Protocol("trailing bytes in GET_INDEX".into()));
                }
                let bundle = make_bundle(
                    &store.read().unwrap(),
                    name,
                    (!tag.is_empty()).then_some(tag),
                )?;
                write_frame(w, Opcode::Index, &bundle)?;
            }
            Opcode::Need => {
                let p = &frame.payload;
                if p.len() < 4 {
                    return Err(Error::Protocol("short NEED".into()));
                }
                let n = u32::from_le_bytes(p[..4].try_into().unwrap()) as usize;
                if p.len() != 4 + n * 32 {
                    return Err(Error::Protocol("NEED length does not match count".into()));
                }
                let fps: Vec<Fingerprint> = p[4..]
                    .chunks_exact(32)
                    .map(|c| Fingerprint::from_slice(c).unwrap())
                    .collect();
                let guard = store.read().unwrap();
                if let Some(f) = fps.iter().find(|f| !guard.has_chunk(f)) {
                    return Err(Error::MissingChunk(*f));
                }
                send_chunks(w, &fps, |f| guard.read_chunk(f))?;
                write_frame(w, Opcode::Chunks, &[])?;
            }
            Opcode::Chunks => {
                let staged = &mut self.staged;
                parse_records(&frame.payload, |fp, data| {
                    if strong_hash(&data) != fp {
                        return Err(Error::Integrity(format!(
                            "pushed chunk does not hash to {fp}"
                        )));
                    }
                    staged.push((fp, data));
                    Ok(())
                })?;
            }
            Opcode::Commit => {
                let staged = std::mem::take(&mut self.staged);
                apply_push(&mut store.write().unwrap(), staged, &frame.payload)?;
                write_frame(w, Opcode::Commit, &[])?;
            }
            other => return Err(Error::Protocol(format!("unexpected {other:?} from client"))),
        }
        Ok(())
    }
}
