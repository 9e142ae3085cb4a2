//! Deduplicated chunk store.
//!
//! Layout under the store root:
//!
//! ```text
//! LOCK                  advisory lock held by the open handle
//! segments/NNNN.log     records: len u32 | fp [32] | payload
//! locator.idx           fingerprint -> (segment, offset, len), rebuilt from the log when stale
//! recipes/<layer_id>    "CRCP" | total_length u64 | count u32 | (fp [32] | len u32)*
//! versions.json         images, their versions, and layers not yet in any version
//! ```
//!
//! Integers are little-endian. The top bit of a record's length marks a
//! DEFLATE-compressed payload; compression is off unless requested.
//! The log is the source of truth: `locator.idx` records the log length it
//! was written against and is rebuilt by scanning the segments whenever it
//! is missing, corrupt or out of date.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::cdmt::{CdmtConfig, CdmtTree};
use crate::chunker::{ChunkStream, ChunkerConfig};
use crate::error::{Error, Result};
use crate::rolling_hash::{strong_hash, Fingerprint, StrongHasher};
use crate::versioning::{VersionId, VersionKind};

pub const SEGMENT_SIZE: u64 = 64 << 20;
const RECORD_HEADER: u64 = 4 + 32;
const COMPRESSED: u32 = 1 << 31;
const LOCATOR_MAGIC: &[u8; 4] = b"CLOC";
const RECIPE_MAGIC: &[u8; 4] = b"CRCP";
const META_FORMAT: u32 = 1;

#[derive(Clone, Debug)]
pub struct StoreOptions {
    /// Re-hash every chunk on read.
    pub paranoid: bool,
    /// Store chunk payloads DEFLATE-compressed when that makes them smaller.
    pub compress_chunks: bool,
    pub segment_size: u64,
}

impl Default for StoreOptions {
    fn default() -> Self {
        StoreOptions {
            paranoid: false,
            compress_chunks: false,
            segment_size: SEGMENT_SIZE,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Location {
    segment: u32,
    /// Offset of the payload inside the segment.
    offset: u32,
    /// Stored length; top bit set when compressed.
    stored: u32,
}

impl Location {
    fn stored_len(&self) -> u32 {
        self.stored & !COMPRESSED
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Recipe {
    pub layer_id: String,
    pub fps: Vec<Fingerprint>,
    pub lengths: Vec<u32>,
    pub total_length: u64,
}

impl Recipe {
    pub fn new(entries: impl IntoIterator<Item = (Fingerprint, u32)>) -> Self {
        let (fps, lengths): (Vec<_>, Vec<_>) = entries.into_iter().unzip();
        let total_length: u64 = lengths.iter().map(|&l| u64::from(l)).sum();
        let mut h = StrongHasher::new();
        for fp in &fps {
            h.update(fp.as_bytes());
        }
        h.update(&total_length.to_le_bytes());
        Recipe {
            layer_id: h.finish().to_hex(),
            fps,
            lengths,
            total_length,
        }
    }

    pub fn len(&self) -> usize {
        self.fps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fps.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (Fingerprint, u32)> + '_ {
        self.fps.iter().copied().zip(self.lengths.iter().copied())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.fps.len() * 36);
        out.extend_from_slice(RECIPE_MAGIC);
        out.extend_from_slice(&self.total_length.to_le_bytes());
        out.extend_from_slice(&(self.fps.len() as u32).to_le_bytes());
        for (fp, len) in self.entries() {
            out.extend_from_slice(fp.as_bytes());
            out.extend_from_slice(&len.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Recipe> {
        let bad = |why: &str| Error::Integrity(format!("malformed recipe: {why}"));
        if bytes.len() < 16 || &bytes[..4] != RECIPE_MAGIC {
            return Err(bad("header"));
        }
        let total = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
        let count = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() != count.checked_mul(36).ok_or_else(|| bad("count"))? {
            return Err(bad("length"));
        }
        let recipe = Recipe::new(body.chunks_exact(36).map(|e| {
            (
                Fingerprint::from_slice(&e[..32]).unwrap(),
                u32::from_le_bytes(e[32..].try_into().unwrap()),
            )
        }));
        if recipe.total_length != total {
            return Err(bad("total length does not match entries"));
        }
        Ok(recipe)
    }
}

/// Result of one ingest call.
#[derive(Clone, Debug)]
pub struct IngestOutcome {
    pub recipe: Recipe,
    pub new_chunks: usize,
    pub dup_chunks: usize,
    pub new_bytes: u64,
    pub dup_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageVersion {
    pub name: String,
    pub tag: String,
    pub kind: VersionKindRepr,
    pub parent: Option<String>,
    pub layers: Vec<String>,
    /// Hex root id of the version in its image index.
    pub root: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VersionKindRepr {
    Layering,
    Branching,
}

impl From<VersionKind> for VersionKindRepr {
    fn from(k: VersionKind) -> Self {
        match k {
            VersionKind::Layering => VersionKindRepr::Layering,
            VersionKind::Branching => VersionKindRepr::Branching,
        }
    }
}

impl From<VersionKindRepr> for VersionKind {
    fn from(k: VersionKindRepr) -> Self {
        match k {
            VersionKindRepr::Layering => VersionKind::Layering,
            VersionKindRepr::Branching => VersionKind::Branching,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct IndexParams {
    internal_mask_bits: u32,
    window_size: usize,
    max_fanout: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct VersionEntry {
    tag: String,
    kind: VersionKindRepr,
    parent: Option<String>,
    layers: Vec<String>,
    root: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Meta {
    format: u32,
    index: IndexParams,
    images: BTreeMap<String, Vec<VersionEntry>>,
    loose_layers: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct StoreStats {
    pub chunks: usize,
    /// Payload bytes held in the log, as stored.
    pub stored_bytes: u64,
    /// Uncompressed payload bytes held in the log.
    pub logical_bytes: u64,
    pub segments: usize,
    pub layers: usize,
    pub images: usize,
    pub versions: usize,
}

/// An open store. Reads take `&self` and may run from many threads; writes
/// take `&mut self`. The handle holds an exclusive lock on the directory.
pub struct Store {
    root: PathBuf,
    options: StoreOptions,
    segments: Vec<File>,
    seg_lens: Vec<u64>,
    writer: Option<File>,
    locator: HashMap<Fingerprint, Location>,
    /// Uncompressed length of every stored chunk.
    raw_lens: HashMap<Fingerprint, u32>,
    meta: Meta,
    trees: Mutex<HashMap<String, Arc<ImageIndex>>>,
    _lock: File,
}

/// The index of one image rebuilt from its version history.
#[derive(Clone, Debug)]
pub struct ImageIndex {
    pub tree: CdmtTree,
    /// Parallel to the image's versions in `versions.json`.
    pub versions: Vec<(ImageVersion, VersionId)>,
}

impl ImageIndex {
    pub fn by_tag(&self, tag: &str) -> Option<&(ImageVersion, VersionId)> {
        self.versions.iter().find(|(v, _)| v.tag == tag)
    }

    pub fn latest(&self) -> Option<&(ImageVersion, VersionId)> {
        self.versions.last()
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn segment_name(n: usize) -> String {
    format!("{n:04}.log")
}

fn valid_layer_id(id: &str) -> bool {
    id.len() == 64
        && id
            .bytes()
            .all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase())
}

impl Store {
    /// Creates an empty store at `root` (which may exist but must not hold a store).
    pub fn init(root: impl AsRef<Path>, cdmt: &CdmtConfig, options: StoreOptions) -> Result<Store> {
        let root = root.as_ref();
        cdmt.validate()?;
        if root.join("versions.json").exists() {
            return Err(Error::Contract(format!(
                "{} already holds a store",
                root.display()
            )));
        }
        fs::create_dir_all(root.join("segments"))?;
        fs::create_dir_all(root.join("recipes"))?;
        let meta = Meta {
            format: META_FORMAT,
            index: IndexParams {
                internal_mask_bits: cdmt.internal_mask_bits,
                window_size: cdmt.window_size,
                max_fanout: cdmt.max_fanout,
            },
            images: BTreeMap::new(),
            loose_layers: Vec::new(),
        };
        write_atomic(
            &root.join("versions.json"),
            &serde_json::to_vec_pretty(&meta).unwrap(),
        )?;
        Store::open(root, options)
    }

    pub fn open(root: impl AsRef<Path>, options: StoreOptions) -> Result<Store> {
        let root = root.as_ref().to_path_buf();
        if options.segment_size == 0 || options.segment_size > u64::from(u32::MAX) {
            return Err(Error::InvalidConfig(
                "segment_size must be in 1..=u32::MAX".into(),
            ));
        }
        let meta_path = root.join("versions.json");
        if !meta_path.exists() {
            return Err(Error::NotFound(format!("no store at {}", root.display())));
        }
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(root.join("LOCK"))?;
        match lock.try_lock() {
            Ok(()) => {}
            Err(fs::TryLockError::WouldBlock) => {
                return Err(Error::Locked(root.display().to_string()))
            }
            Err(fs::TryLockError::Error(e)) => return Err(e.into()),
        }
        let meta: Meta = serde_json::from_slice(&fs::read(&meta_path)?)
            .map_err(|e| Error::Integrity(format!("versions.json: {e}")))?;
        if meta.format != META_FORMAT {
            return Err(Error::Integrity(format!(
                "unsupported versions.json format {}",
                meta.format
            )));
        }
        let mut store = Store {
            root,
            options,
            segments: Vec::new(),
            seg_lens: Vec::new(),
            writer: None,
            locator: HashMap::new(),
            raw_lens: HashMap::new(),
            meta,
            trees: Mutex::new(HashMap::new()),
            _lock: lock,
        };
        store.cdmt_config().validate()?;
        store.open_segments()?;
        if !store.load_locator()? {
            store.rebuild_locator()?;
            store.save_locator()?;
        }
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn cdmt_config(&self) -> CdmtConfig {
        CdmtConfig {
            internal_mask_bits: self.meta.index.internal_mask_bits,
            window_size: self.meta.index.window_size,
            max_fanout: self.meta.index.max_fanout,
        }
    }

    fn open_segments(&mut self) -> Result<()> {
        self.segments.clear();
        self.seg_lens.clear();
        let dir = self.root.join("segments");
        for n in 0.. {
            let path = dir.join(segment_name(n));
            if !path.exists() {
                break;
            }
            let f = OpenOptions::new().read(true).append(true).open(&path)?;
            self.seg_lens.push(f.metadata()?.len());
            self.segments.push(f);
        }
        self.writer = self.segments.last().map(|f| f.try_clone()).transpose()?;
        Ok(())
    }

    fn log_signature(&self) -> (u32, u64) {
        (self.segments.len() as u32, self.seg_lens.iter().sum())
    }

    /// Loads `locator.idx`; `false` when it is missing, damaged or stale.
    fn load_locator(&mut self) -> Result<bool> {
        let bytes = match fs::read(self.root.join("locator.idx")) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(false),
            Err(e) => return Err(e.into()),
        };
        let Some(body_len) = bytes.len().checked_sub(32) else {
            return Ok(false);
        };
        let (body, sum) = bytes.split_at(body_len);
        if strong_hash(body).as_bytes() != sum || body.len() < 24 || &body[..4] != LOCATOR_MAGIC {
            return Ok(false);
        }
        let segs = u32::from_le_bytes(body[4..8].try_into().unwrap());
        let total = u64::from_le_bytes(body[8..16].try_into().unwrap());
        let count = u64::from_le_bytes(body[16..24].try_into().unwrap()) as usize;
        if (segs, total) != self.log_signature() || body.len() - 24 != count * 48 {
            return Ok(false);
        }
        self.locator.clear();
        self.raw_lens.clear();
        for e in body[24..].chunks_exact(48) {
            let fp = Fingerprint::from_slice(&e[..32]).unwrap();
            let word = |i: usize| u32::from_le_bytes(e[32 + 4 * i..36 + 4 * i].try_into().unwrap());
            let loc = Location {
                segment: word(0),
                offset: word(1),
                stored: word(2),
            };
            if loc.segment as usize >= self.segments.len()
                || u64::from(loc.offset) + u64::from(loc.stored_len())
                    > self.seg_lens[loc.segment as usize]
            {
                return Ok(false);
            }
            self.locator.insert(fp, loc);
            self.raw_lens.insert(fp, word(3));
        }
        Ok(true)
    }

    fn save_locator(&self) -> Result<()> {
        let (segs, total) = self.log_signature();
        let mut body = Vec::with_capacity(24 + self.locator.len() * 48 + 32);
        body.extend_from_slice(LOCATOR_MAGIC);
        body.extend_from_slice(&segs.to_le_bytes());
        body.extend_from_slice(&total.to_le_bytes());
        body.extend_from_slice(&(self.locator.len() as u64).to_le_bytes());
        let mut entries: Vec<_> = self.locator.iter().collect();
        entries.sort_by_key(|(_, l)| (l.segment, l.offset));
        for (fp, loc) in entries {
            body.extend_from_slice(fp.as_bytes());
            for w in [loc.segment, loc.offset, loc.stored, self.raw_lens[fp]] {
                body.extend_from_slice(&w.to_le_bytes());
            }
        }
        let sum = strong_hash(&body);
        body.extend_from_slice(sum.as_bytes());
        write_atomic(&self.root.join("locator.idx"), &body)
    }

    /// Scans every segment. A torn record at the end of the last segment is cut off.
    fn rebuild_locator(&mut self) -> Result<()> {
        self.locator.clear();
        self.raw_lens.clear();
        let last = self.segments.len().saturating_sub(1);
        for seg in 0..self.segments.len() {
            let mut data = Vec::new();
            (&self.segments[seg]).read_to_end(&mut data)?;
            let mut pos = 0usize;
            while pos < data.len() {
                let good = data.len() - pos >= RECORD_HEADER as usize && {
                    let raw = u32::from_le_bytes(data[pos..pos + 4].try_into().unwrap());
                    let len = (raw & !COMPRESSED) as usize;
                    data.len() - pos - RECORD_HEADER as usize >= len
                };
                if !good {
                    if seg != last {
                        return Err(Error::Integrity(format!("segment {seg} is truncated")));
                    }
                    self.segments[seg].set_len(pos as u64)?;
                    self.seg_lens[seg] = pos as u64;
                    break;
                }
                let raw = u32::from_le_bytes(data[pos..pos + 4].try_into().unwrap());
                let fp = Fingerprint::from_slice(&data[pos + 4..pos + 36]).unwrap();
                let payload_at = pos + RECORD_HEADER as usize;
                let len = (raw & !COMPRESSED) as usize;
                let payload = &data[payload_at..payload_at + len];
                let plain = decode_payload(raw, payload)?;
                if self.options.paranoid && strong_hash(&plain) != fp {
                    return Err(Error::Integrity(format!(
                        "chunk {fp} in segment {seg} fails its hash"
                    )));
                }
                self.locator.insert(
                    fp,
                    Location {
                        segment: seg as u32,
                        offset: payload_at as u32,
                        stored: raw,
                    },
                );
                self.raw_lens.insert(fp, plain.len() as u32);
                pos = payload_at + len;
            }
        }
        Ok(())
    }

    pub fn has_chunk(&self, fp: &Fingerprint) -> bool {
        self.locator.contains_key(fp)
    }

    /// Uncompressed length of a stored chunk.
    pub fn chunk_len(&self, fp: &Fingerprint) -> Option<u32> {
        self.raw_lens.get(fp).copied()
    }

    pub fn chunk_count(&self) -> usize {
        self.locator.len()
    }

    pub fn chunk_fingerprints(&self) -> impl Iterator<Item = &Fingerprint> {
        self.locator.keys()
    }

    pub fn read_chunk(&self, fp: &Fingerprint) -> Result<Vec<u8>> {
        let loc = self.locator.get(fp).ok_or(Error::MissingChunk(*fp))?;
        let mut buf = vec![0u8; loc.stored_len() as usize];
        self.segments[loc.segment as usize].read_exact_at(&mut buf, u64::from(loc.offset))?;
        let data = decode_payload(loc.stored, &buf)?;
        if self.options.paranoid && strong_hash(&data) != *fp {
            return Err(Error::Integrity(format!("chunk {fp} fails its hash")));
        }
        Ok(data)
    }

    fn append(&mut self, fp: Fingerprint, data: &[u8]) -> Result<()> {
        let (stored, payload) = encode_payload(data, self.options.compress_chunks);
        let rec_len = RECORD_HEADER + payload.len() as u64;
        let need_new = match self.seg_lens.last() {
            None => true,
            Some(&len) => len > 0 && len + rec_len > self.options.segment_size,
        };
        if need_new {
            if let Some(w) = &self.writer {
                w.sync_all()?;
            }
            let path = self
                .root
                .join("segments")
                .join(segment_name(self.segments.len()));
            let f = OpenOptions::new()
                .create_new(true)
                .read(true)
                .append(true)
                .open(path)?;
            self.writer = Some(f.try_clone()?);
            self.segments.push(f);
            self.seg_lens.push(0);
        }
        let seg = self.segments.len() - 1;
        let offset = self.seg_lens[seg] + RECORD_HEADER;
        if offset + payload.len() as u64 > u64::from(u32::MAX) {
            return Err(Error::Contract("segment offset overflow".into()));
        }
        let mut rec = Vec::with_capacity(rec_len as usize);
        rec.extend_from_slice(&stored.to_le_bytes());
        rec.extend_from_slice(fp.as_bytes());
        rec.extend_from_slice(&payload);
        self.writer.as_mut().unwrap().write_all(&rec)?;
        self.seg_lens[seg] += rec_len;
        self.locator.insert(
            fp,
            Location {
                segment: seg as u32,
                offset: offset as u32,
                stored,
            },
        );
        self.raw_lens.insert(fp, data.len() as u32);
        Ok(())
    }

    /// Stores a chunk unless present. Returns `true` when it was new.
    fn put_chunk(&mut self, fp: Fingerprint, data: &[u8]) -> Result<bool> {
        if let Some(len) = self.chunk_len(&fp) {
            let collision = if self.options.paranoid {
                self.read_chunk(&fp)? != data
            } else {
                len as usize != data.len()
            };
            if collision {
                return Err(Error::Integrity(format!(
                    "fingerprint {fp} already stored with different content"
                )));
            }
            return Ok(false);
        }
        self.append(fp, data)?;
        Ok(true)
    }

    /// Stores received chunks after checking each against its fingerprint.
    pub fn put_verified_chunks(
        &mut self,
        chunks: impl IntoIterator<Item = (Fingerprint, Vec<u8>)>,
    ) -> Result<usize> {
        let mut added = 0;
        for (fp, data) in chunks {
            if strong_hash(&data) != fp {
                return Err(Error::Integrity(format!(
                    "received chunk does not hash to {fp}"
                )));
            }
            added += usize::from(self.put_chunk(fp, &data)?);
        }
        self.flush()?;
        Ok(added)
    }

    /// Syncs the log and persists the locator.
    pub fn flush(&mut self) -> Result<()> {
        if let Some(w) = &self.writer {
            w.sync_data()?;
        }
        self.save_locator()
    }

    /// Chunks `input`, stores chunks not yet present and records the layer recipe.
    pub fn ingest<R: Read>(&mut self, input: R, cfg: &ChunkerConfig) -> Result<IngestOutcome> {
        let mut entries = Vec::new();
        let (mut new_chunks, mut dup_chunks, mut new_bytes, mut dup_bytes) = (0, 0, 0u64, 0u64);
        for chunk in ChunkStream::new(input, cfg)? {
            let chunk = chunk?;
            let data = chunk.data.as_deref().expect("stream chunks carry data");
            if self.put_chunk(chunk.fp, data)? {
                new_chunks += 1;
                new_bytes += u64::from(chunk.length);
            } else {
                dup_chunks += 1;
                dup_bytes += u64::from(chunk.length);
            }
            entries.push((chunk.fp, chunk.length));
        }
        let recipe = Recipe::new(entries);
        self.flush()?;
        self.put_recipe(&recipe)?;
        if !self.meta.loose_layers.contains(&recipe.layer_id)
            && !self.layer_is_referenced(&recipe.layer_id)
        {
            self.meta.loose_layers.push(recipe.layer_id.clone());
            self.save_meta()?;
        }
        Ok(IngestOutcome {
            recipe,
            new_chunks,
            dup_chunks,
            new_bytes,
            dup_bytes,
        })
    }

    fn layer_is_referenced(&self, id: &str) -> bool {
        self.meta
            .images
            .values()
            .flatten()
            .any(|v| v.layers.iter().any(|l| l == id))
    }

    pub fn put_recipe(&mut self, recipe: &Recipe) -> Result<()> {
        let path = self.root.join("recipes").join(&recipe.layer_id);
        if !path.exists() {
            write_atomic(&path, &recipe.encode())?;
        }
        Ok(())
    }

    pub fn has_recipe(&self, layer_id: &str) -> bool {
        valid_layer_id(layer_id) && self.root.join("recipes").join(layer_id).exists()
    }

    pub fn recipe(&self, layer_id: &str) -> Result<Recipe> {
        if !valid_layer_id(layer_id) {
            return Err(Error::NotFound(format!("layer {layer_id}")));
        }
        let bytes = match fs::read(self.root.join("recipes").join(layer_id)) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(Error::NotFound(format!("layer {layer_id}")))
            }
            Err(e) => return Err(e.into()),
        };
        let recipe = Recipe::decode(&bytes)?;
        if recipe.layer_id != layer_id {
            return Err(Error::Integrity(format!(
                "recipe {layer_id} does not match its name"
            )));
        }
        Ok(recipe)
    }

    pub fn layer_ids(&self) -> Result<Vec<String>> {
        let mut ids = Vec::new();
        for e in fs::read_dir(self.root.join("recipes"))? {
            let name = e?.file_name().to_string_lossy().into_owned();
            if valid_layer_id(&name) {
                ids.push(name);
            }
        }
        ids.sort();
        Ok(ids)
    }

    /// Writes the bytes described by `recipe` to `out`.
    pub fn restore<W: Write>(&self, recipe: &Recipe, mut out: W) -> Result<u64> {
        let mut written = 0u64;
        for (fp, len) in recipe.entries() {
            let data = self.read_chunk(&fp)?;
            if data.len() != len as usize {
                return Err(Error::Integrity(format!(
                    "chunk {fp} has length {} not {len}",
                    data.len()
                )));
            }
            out.write_all(&data)?;
            written += u64::from(len);
        }
        out.flush()?;
        Ok(written)
    }

    pub fn restore_to_vec(&self, recipe: &Recipe) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(recipe.total_length as usize);
        self.restore(recipe, &mut out)?;
        Ok(out)
    }

    fn save_meta(&self) -> Result<()> {
        write_atomic(
            &self.root.join("versions.json"),
            &serde_json::to_vec_pretty(&self.meta).unwrap(),
        )
    }

    pub fn image_names(&self) -> Vec<String> {
        self.meta.images.keys().cloned().collect()
    }

    pub fn versions(&self, name: &str) -> Vec<ImageVersion> {
        self.meta
            .images
            .get(name)
            .map(|vs| vs.iter().map(|v| to_image_version(name, v)).collect())
            .unwrap_or_default()
    }

    /// Every recorded version of every image.
    pub fn all_versions(&self) -> Vec<ImageVersion> {
        self.meta
            .images
            .keys()
            .flat_map(|n| self.versions(n))
            .collect()
    }

    pub fn version(&self, name: &str, tag: &str) -> Result<ImageVersion> {
        self.versions(name)
            .into_iter()
            .find(|v| v.tag == tag)
            .ok_or_else(|| Error::NotFound(format!("{name}:{tag}")))
    }

    pub fn latest_version(&self, name: &str) -> Option<ImageVersion> {
        self.versions(name).pop()
    }

    pub fn loose_layers(&self) -> &[String] {
        &self.meta.loose_layers
    }

    /// Leaf sequence of a version: its layers' recipes concatenated.
    pub fn version_leaves(&self, layers: &[String]) -> Result<Vec<Fingerprint>> {
        let mut leaves = Vec::new();
        for l in layers {
            leaves.extend(self.recipe(l)?.fps);
        }
        Ok(leaves)
    }

    /// Rebuilds (or returns the cached) index of image `name`.
    pub fn image_index(&self, name: &str) -> Result<Arc<ImageIndex>> {
        if let Some(ix) = self.trees.lock().unwrap().get(name) {
            return Ok(ix.clone());
        }
        let entries = self
            .meta
            .images
            .get(name)
            .ok_or_else(|| Error::NotFound(format!("image {name}")))?;
        let mut tree = CdmtTree::new(&self.cdmt_config())?;
        let mut versions: Vec<(ImageVersion, VersionId)> = Vec::new();
        for e in entries {
            let leaves = self.version_leaves(&e.layers)?;
            let parent = e
                .parent
                .as_ref()
                .map(|p| {
                    versions
                        .iter()
                        .find(|(v, _)| &v.tag == p)
                        .map(|(_, id)| id.clone())
                        .ok_or_else(|| {
                            Error::Integrity(format!("{name}:{} has unknown parent {p}", e.tag))
                        })
                })
                .transpose()?;
            let id = tree.insert_version(parent.as_ref(), &leaves, e.kind.into(), Some(&e.tag))?;
            let root = tree.root_id(id.ordinal)?;
            if root.to_hex() != e.root {
                return Err(Error::Integrity(format!(
                    "{name}:{} rebuilt with a different root",
                    e.tag
                )));
            }
            versions.push((to_image_version(name, e), id));
        }
        let ix = Arc::new(ImageIndex { tree, versions });
        self.trees
            .lock()
            .unwrap()
            .insert(name.to_string(), ix.clone());
        Ok(ix)
    }

    /// Records a new version of `name`. Every layer must have a recipe and
    /// every chunk must be present.
    pub fn commit_version(
        &mut self,
        name: &str,
        tag: &str,
        kind: VersionKind,
        parent: Option<&str>,
        layers: Vec<String>,
    ) -> Result<ImageVersion> {
        if name.is_empty() || tag.is_empty() || name.contains(':') || tag.contains(':') {
            return Err(Error::Contract(format!("bad image reference {name}:{tag}")));
        }
        if layers.is_empty() {
            return Err(Error::EmptyInput);
        }
        let existing = self.meta.images.get(name);
        if existing.is_some_and(|vs| vs.iter().any(|v| v.tag == tag)) {
            return Err(Error::TagConflict(format!("{name}:{tag}")));
        }
        if kind == VersionKind::Layering && parent.is_none() {
            return Err(Error::Contract("layering version needs a parent".into()));
        }
        let leaves = self.version_leaves(&layers)?;
        if let Some(missing) = leaves.iter().find(|f| !self.has_chunk(f)) {
            return Err(Error::MissingChunk(*missing));
        }
        let mut tree = match existing {
            Some(_) => (*self.image_index(name)?).clone(),
            None => ImageIndex {
                tree: CdmtTree::new(&self.cdmt_config())?,
                versions: Vec::new(),
            },
        };
        let parent_id = parent
            .map(|p| {
                tree.by_tag(p)
                    .map(|(_, id)| id.clone())
                    .ok_or_else(|| Error::NotFound(format!("{name}:{p}")))
            })
            .transpose()?;
        let id = tree
            .tree
            .insert_version(parent_id.as_ref(), &leaves, kind, Some(tag))?;
        let entry = VersionEntry {
            tag: tag.to_string(),
            kind: kind.into(),
            parent: parent.map(str::to_string),
            layers,
            root: tree.tree.root_id(id.ordinal)?.to_hex(),
        };
        let version = to_image_version(name, &entry);
        tree.versions.push((version.clone(), id));
        self.meta.loose_layers.retain(|l| !entry.layers.contains(l));
        self.meta
            .images
            .entry(name.to_string())
            .or_default()
            .push(entry);
        self.save_meta()?;
        self.trees
            .lock()
            .unwrap()
            .insert(name.to_string(), Arc::new(tree));
        Ok(version)
    }

    /// Forgets a version. Its chunks stay until [`Store::gc`].
    pub fn remove_version(&mut self, name: &str, tag: &str) -> Result<ImageVersion> {
        let entries = self
            .meta
            .images
            .get_mut(name)
            .ok_or_else(|| Error::NotFound(format!("image {name}")))?;
        let pos = entries
            .iter()
            .position(|v| v.tag == tag)
            .ok_or_else(|| Error::NotFound(format!("{name}:{tag}")))?;
        if entries.iter().any(|v| v.parent.as_deref() == Some(tag)) {
            return Err(Error::Contract(format!(
                "{name}:{tag} is the parent of another version"
            )));
        }
        let removed = entries.remove(pos);
        if entries.is_empty() {
            self.meta.images.remove(name);
        }
        self.trees.lock().unwrap().remove(name);
        self.save_meta()?;
        Ok(to_image_version(name, &removed))
    }

    /// Drops a layer that belongs to no version.
    pub fn remove_loose_layer(&mut self, layer_id: &str) -> Result<()> {
        let before = self.meta.loose_layers.len();
        self.meta.loose_layers.retain(|l| l != layer_id);
        if before == self.meta.loose_layers.len() {
            return Err(Error::NotFound(format!("loose layer {layer_id}")));
        }
        self.save_meta()
    }

    /// Removes every chunk and recipe not reachable from `live` or from a
    /// loose layer, and returns the payload bytes reclaimed.
    pub fn gc(&mut self, live: &[ImageVersion]) -> Result<u64> {
        let mut live_layers: HashSet<String> =
            live.iter().flat_map(|v| v.layers.iter().cloned()).collect();
        live_layers.extend(self.meta.loose_layers.iter().cloned());
        let mut live_fps = HashSet::new();
        for l in &live_layers {
            live_fps.extend(self.recipe(l)?.fps);
        }
        let dead: Vec<Fingerprint> = self
            .locator
            .keys()
            .filter(|f| !live_fps.contains(f))
            .copied()
            .collect();
        for id in self.layer_ids()? {
            if !live_layers.contains(&id) {
                fs::remove_file(self.root.join("recipes").join(id))?;
            }
        }
        if dead.is_empty() {
            return Ok(0);
        }
        let reclaimed: u64 = dead.iter().map(|f| u64::from(self.raw_lens[f])).sum();

        // Copy live records in log order into a fresh segment directory, then swap.
        let mut order: Vec<(Fingerprint, Location)> = self
            .locator
            .iter()
            .filter(|(f, _)| live_fps.contains(*f))
            .map(|(f, l)| (*f, *l))
            .collect();
        order.sort_by_key(|(_, l)| (l.segment, l.offset));
        let tmp_dir = self.root.join("segments.tmp");
        if tmp_dir.exists() {
            fs::remove_dir_all(&tmp_dir)?;
        }
        fs::create_dir(&tmp_dir)?;
        let mut out: Option<(File, u64)> = None;
        let mut seg_count = 0usize;
        for (fp, loc) in &order {
            let mut payload = vec![0u8; loc.stored_len() as usize];
            self.segments[loc.segment as usize]
                .read_exact_at(&mut payload, u64::from(loc.offset))?;
            let rec_len = RECORD_HEADER + payload.len() as u64;
            if out
                .as_ref()
                .is_none_or(|(_, len)| *len > 0 && len + rec_len > self.options.segment_size)
            {
                if let Some((f, _)) = out.take() {
                    f.sync_all()?;
                }
                let f = File::create(tmp_dir.join(segment_name(seg_count)))?;
                seg_count += 1;
                out = Some((f, 0));
            }
            let (f, len) = out.as_mut().unwrap();
            f.write_all(&loc.stored.to_le_bytes())?;
            f.write_all(fp.as_bytes())?;
            f.write_all(&payload)?;
            *len += rec_len;
        }
        if let Some((f, _)) = out.take() {
            f.sync_all()?;
        }
        self.segments.clear();
        self.writer = None;
        let seg_dir = self.root.join("segments");
        let old_dir = self.root.join("segments.old");
        if old_dir.exists() {
            fs::remove_dir_all(&old_dir)?;
        }
        fs::rename(&seg_dir, &old_dir)?;
        fs::rename(&tmp_dir, &seg_dir)?;
        fs::remove_dir_all(&old_dir)?;
        self.open_segments()?;
        self.rebuild_locator()?;
        self.save_locator()?;
        Ok(reclaimed)
    }

    pub fn stats(&self) -> Result<StoreStats> {
        Ok(StoreStats {
            chunks: self.locator.len(),
            stored_bytes: self
                .locator
                .values()
                .map(|l| u64::from(l.stored_len()))
                .sum(),
            logical_bytes: self.raw_lens.values().map(|&l| u64::from(l)).sum(),
            segments: self.segments.len(),
            layers: self.layer_ids()?.len(),
            images: self.meta.images.len(),
            versions: self.meta.images.values().map(Vec::len).sum(),
        })
    }
}

fn to_image_version(name: &str, e: &VersionEntry) -> ImageVersion {
    ImageVersion {
        name: name.to_string(),
        tag: e.tag.clone(),
        kind: e.kind,
        parent: e.parent.clone(),
        layers: e.layers.clone(),
        root: e.root.clone(),
    }
}

fn encode_payload(data: &[u8], compress: bool) -> (u32, Vec<u8>) {
    if compress {
        let mut enc =
            flate2::write::DeflateEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(data).expect("writing to memory");
        let packed = enc.finish().expect("writing to memory");
        if packed.len() < data.len() {
            return (packed.len() as u32 | COMPRESSED, packed);
        }
    }
    (data.len() as u32, data.to_vec())
}

fn decode_payload(stored: u32, payload: &[u8]) -> Result<Vec<u8>> {
    if stored & COMPRESSED == 0 {
        return Ok(payload.to_vec());
    }
    let mut out = Vec::new();
    flate2::read::DeflateDecoder::new(payload)
        .read_to_end(&mut out)
        .map_err(|e| Error::Integrity(format!("compressed chunk does not inflate: {e}")))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_bytes(n: usize, seed: u64) -> Vec<u8> {
        let mut v = vec![0u8; n];
        ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut v);
        v
    }

    fn fresh(dir: &Path) -> Store {
        Store::init(dir, &CdmtConfig::default(), StoreOptions::default()).unwrap()
    }

    #[test]
    fn ingest_twice_is_all_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = fresh(dir.path());
        let data = random_bytes(500_000, 1);
        let a = s.ingest(&data[..], &ChunkerConfig::default()).unwrap();
        assert_eq!(a.dup_chunks, 0);
        let b = s.ingest(&data[..], &ChunkerConfig::default()).unwrap();
        assert_eq!(b.new_chunks, 0);
        assert_eq!(b.dup_chunks, b.recipe.len());
        assert_eq!(a.recipe, b.recipe);
        assert_eq!(s.restore_to_vec(&b.recipe).unwrap(), data);
    }

    #[test]
    fn empty_layer() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = fresh(dir.path());
        let out = s.ingest(&b""[..], &ChunkerConfig::default()).unwrap();
        assert!(out.recipe.is_empty());
        assert_eq!(out.recipe.total_length, 0);
        assert!(s.restore_to_vec(&out.recipe).unwrap().is_empty());
        assert_eq!(s.recipe(&out.recipe.layer_id).unwrap(), out.recipe);
    }

    #[test]
    fn accounting_identity() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = fresh(dir.path());
        let base = random_bytes(300_000, 2);
        let mut raw = 0u64;
        let mut saved = 0u64;
        for i in 0..4u8 {
            let mut v = base.clone();
            v[i as usize * 70_000] ^= 0xff;
            let out = s.ingest(&v[..], &ChunkerConfig::default()).unwrap();
            raw += v.len() as u64;
            saved += out.dup_bytes;
        }
        assert_eq!(s.stats().unwrap().stored_bytes + saved, raw);
    }

    #[test]
    fn missing_chunk_and_lookup_errors() {
        let dir = tempfile::tempdir().unwrap();
        let s = fresh(dir.path());
        let ghost = Recipe::new([(strong_hash(b"nope"), 4)]);
        assert!(matches!(
            s.restore_to_vec(&ghost),
            Err(Error::MissingChunk(_))
        ));
        assert!(matches!(s.recipe("../etc"), Err(Error::NotFound(_))));
        assert!(matches!(s.recipe(&ghost.layer_id), Err(Error::NotFound(_))));
    }

    #[test]
    fn length_mismatch_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = fresh(dir.path());
        let fp = strong_hash(b"abc");
        s.put_chunk(fp, b"abc").unwrap();
        assert!(matches!(s.put_chunk(fp, b"abcd"), Err(Error::Integrity(_))));
        assert!(matches!(
            s.put_verified_chunks([(fp, b"xyz".to_vec())]),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn second_open_is_locked() {
        let dir = tempfile::tempdir().unwrap();
        let _s = fresh(dir.path());
        assert!(matches!(
            Store::open(dir.path(), StoreOptions::default()),
            Err(Error::Locked(_))
        ));
        assert!(matches!(
            Store::open(dir.path().join("none"), StoreOptions::default()),
            Err(Error::NotFound(_))
        ));
    }

    #[test]
    fn reopen_and_rebuild_locator() {
        let dir = tempfile::tempdir().unwrap();
        let data = random_bytes(400_000, 3);
        let opts = StoreOptions {
            segment_size: 100_000,
            ..Default::default()
        };
        let recipe = {
            let mut s = Store::init(dir.path(), &CdmtConfig::default(), opts.clone()).unwrap();
            s.ingest(&data[..], &ChunkerConfig::default())
                .unwrap()
                .recipe
        };
        assert!(fs::read_dir(dir.path().join("segments")).unwrap().count() > 2);
        {
            let s = Store::open(dir.path(), opts.clone()).unwrap();
            assert_eq!(s.restore_to_vec(&recipe).unwrap(), data);
        }
        // Damage the locator: the log scan recovers it.
        let loc = dir.path().join("locator.idx");
        let mut bytes = fs::read(&loc).unwrap();
        bytes[30] ^= 1;
        fs::write(&loc, bytes).unwrap();
        {
            let s = Store::open(dir.path(), opts.clone()).unwrap();
            assert_eq!(s.restore_to_vec(&recipe).unwrap(), data);
        }
        fs::remove_file(&loc).unwrap();
        let s = Store::open(dir.path(), opts).unwrap();
        assert_eq!(s.restore_to_vec(&recipe).unwrap(), data);
    }

    #[test]
    fn torn_tail_record_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let recipe = {
            let mut s = fresh(dir.path());
            s.ingest(&random_bytes(100_000, 4)[..], &ChunkerConfig::default())
                .unwrap()
                .recipe
        };
        let seg = dir.path().join("segments").join(segment_name(0));
        let mut f = OpenOptions::new().append(true).open(&seg).unwrap();
        f.write_all(&[9, 0, 0, 0, 1, 2, 3]).unwrap();
        drop(f);
        let before = fs::metadata(&seg).unwrap().len();
        let s = Store::open(dir.path(), StoreOptions::default()).unwrap();
        assert_eq!(fs::metadata(&seg).unwrap().len(), before - 7);
        assert!(s.restore_to_vec(&recipe).is_ok());
    }

    #[test]
    fn paranoid_read_detects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let recipe = {
            let mut s = fresh(dir.path());
            s.ingest(&random_bytes(50_000, 5)[..], &ChunkerConfig::default())
                .unwrap()
                .recipe
        };
        let seg = dir.path().join("segments").join(segment_name(0));
        let mut bytes = fs::read(&seg).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        fs::write(&seg, bytes).unwrap();
        let opts = StoreOptions {
            paranoid: true,
            ..Default::default()
        };
        // The locator still matches the log length, so it is trusted; the read catches the damage.
        let s = Store::open(dir.path(), opts).unwrap();
        assert!(matches!(
            s.restore_to_vec(&recipe),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn compressed_chunks_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let opts = StoreOptions {
            compress_chunks: true,
            ..Default::default()
        };
        let mut s = Store::init(dir.path(), &CdmtConfig::default(), opts.clone()).unwrap();
        let mut data = vec![0u8; 200_000];
        data.extend(random_bytes(100_000, 6));
        let out = s.ingest(&data[..], &ChunkerConfig::default()).unwrap();
        let stats = s.stats().unwrap();
        assert!(stats.stored_bytes < stats.logical_bytes);
        assert_eq!(s.restore_to_vec(&out.recipe).unwrap(), data);
        drop(s);
        let s = Store::open(dir.path(), opts).unwrap();
        fs::remove_file(dir.path().join("locator.idx")).ok();
        assert_eq!(s.restore_to_vec(&out.recipe).unwrap(), data);
    }

    #[test]
    fn versions_and_image_index() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = fresh(dir.path());
        let cfg = ChunkerConfig::default();
        let l1 = s
            .ingest(&random_bytes(200_000, 7)[..], &cfg)
            .unwrap()
            .recipe;
        let l2 = s
            .ingest(&random_bytes(200_000, 8)[..], &cfg)
            .unwrap()
            .recipe;
        assert_eq!(s.loose_layers().len(), 2);
        let v1 = s
            .commit_version(
                "app",
                "v1",
                VersionKind::Branching,
                None,
                vec![l1.layer_id.clone()],
            )
            .unwrap();
        let v2 = s
            .commit_version(
                "app",
                "v2",
                VersionKind::Branching,
                Some("v1"),
                vec![l1.layer_id.clone(), l2.layer_id.clone()],
            )
            .unwrap();
        assert!(s.loose_layers().is_empty());
        assert!(matches!(
            s.commit_version(
                "app",
                "v2",
                VersionKind::Branching,
                None,
                vec![l1.layer_id.clone()]
            ),
            Err(Error::TagConflict(_))
        ));
        drop(s);

        let s = Store::open(dir.path(), StoreOptions::default()).unwrap();
        let ix = s.image_index("app").unwrap();
        assert_eq!(ix.versions.len(), 2);
        let (_, id2) = ix.by_tag("v2").unwrap();
        let mut expected = l1.fps.clone();
        expected.extend(&l2.fps);
        assert_eq!(ix.tree.leaves(id2.ordinal).unwrap(), expected);
        assert_eq!(s.version("app", "v1").unwrap(), v1);
        assert_eq!(ix.tree.root_id(id2.ordinal).unwrap().to_hex(), v2.root);
    }

    #[test]
    fn gc_reclaims_only_dead_chunks() {
        let dir = tempfile::tempdir().unwrap();
        let opts = StoreOptions {
            segment_size: 150_000,
            ..Default::default()
        };
        let mut s = Store::init(dir.path(), &CdmtConfig::default(), opts).unwrap();
        let cfg = ChunkerConfig::default();
        let shared = random_bytes(300_000, 9);
        let mut other = shared.clone();
        other.extend(random_bytes(120_000, 10));
        let a = s.ingest(&shared[..], &cfg).unwrap().recipe;
        let b = s.ingest(&other[..], &cfg).unwrap().recipe;
        s.commit_version(
            "img",
            "a",
            VersionKind::Branching,
            None,
            vec![a.layer_id.clone()],
        )
        .unwrap();
        s.commit_version(
            "img",
            "b",
            VersionKind::Branching,
            Some("a"),
            vec![b.layer_id.clone()],
        )
        .unwrap();

        assert_eq!(s.gc(&s.all_versions()).unwrap(), 0);

        let only_b: u64 = {
            let in_a: HashSet<_> = a.fps.iter().collect();
            let mut seen = HashSet::new();
            b.entries()
                .filter(|(f, _)| !in_a.contains(f) && seen.insert(*f))
                .map(|(_, l)| u64::from(l))
                .sum()
        };
        s.remove_version("img", "b").unwrap();
        assert_eq!(s.gc(&s.all_versions()).unwrap(), only_b);
        assert_eq!(s.gc(&s.all_versions()).unwrap(), 0);
        assert_eq!(s.restore_to_vec(&a).unwrap(), shared);
        assert!(matches!(s.recipe(&b.layer_id), Err(Error::NotFound(_))));
        drop(s);
        let s = Store::open(dir.path(), StoreOptions::default()).unwrap();
        assert_eq!(s.restore_to_vec(&a).unwrap(), shared);
    }

    #[test]
    fn restore_after_compaction_matches() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = fresh(dir.path());
        let cfg = ChunkerConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut keep = Vec::new();
        for i in 0..6 {
            let n = rng.gen_range(10_000..200_000);
            let r = s
                .ingest(&random_bytes(n, 100 + i)[..], &cfg)
                .unwrap()
                .recipe;
            let before = s.restore_to_vec(&r).unwrap();
            if i % 2 == 0 {
                s.commit_version(
                    "x",
                    &format!("t{i}"),
                    VersionKind::Branching,
                    None,
                    vec![r.layer_id.clone()],
                )
                .unwrap();
                keep.push((r, before));
            } else {
                s.remove_loose_layer(&r.layer_id).unwrap();
            }
        }
        assert!(s.gc(&s.all_versions()).unwrap() > 0);
        for (r, before) in keep {
            assert_eq!(s.restore_to_vec(&r).unwrap(), before);
        }
    }

    #[test]
    fn store_is_shareable_between_threads() {
        fn assert_sync<T: Send + Sync>() {}
        assert_sync::<Store>();
    }
}
