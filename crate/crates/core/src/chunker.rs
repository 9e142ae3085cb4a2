//! Content-defined chunking, plus a fixed-width baseline.
//!
//! A CDC boundary falls after byte `i` when the rolling fingerprint of the
//! window ending at `i` has its low `mask_bits` bits clear and the current
//! chunk is at least `min_chunk` long. Chunks are force-cut at `max_chunk`.
//! The rolling window is never reset at a cut, so boundary decisions depend
//! only on nearby content and on the distance to the previous cut.

use std::collections::HashMap;
use std::io::{self, Read};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rolling_hash::{strong_hash, Fingerprint, RabinTables, RollingState, DEFAULT_WINDOW};

pub const DEFAULT_MASK_BITS: u32 = 13;
pub const DEFAULT_MIN_CHUNK: usize = 2 * 1024;
pub const DEFAULT_MAX_CHUNK: usize = 64 * 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChunkMode {
    Cdc,
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChunkerConfig {
    pub mode: ChunkMode,
    pub mask_bits: u32,
    pub window_size: usize,
    pub min_chunk: usize,
    pub max_chunk: usize,
    pub fixed_width: usize,
}

impl Default for ChunkerConfig {
    fn default() -> Self {
        ChunkerConfig {
            mode: ChunkMode::Cdc,
            mask_bits: DEFAULT_MASK_BITS,
            window_size: DEFAULT_WINDOW,
            min_chunk: DEFAULT_MIN_CHUNK,
            max_chunk: DEFAULT_MAX_CHUNK,
            fixed_width: 8 * 1024,
        }
    }
}

impl ChunkerConfig {
    pub fn fixed(width: usize) -> Self {
        ChunkerConfig {
            mode: ChunkMode::Fixed,
            fixed_width: width,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        match self.mode {
            ChunkMode::Cdc => {
                if self.min_chunk == 0 || self.min_chunk > self.max_chunk {
                    return bad(format!(
                        "need 0 < min_chunk <= max_chunk, got {} and {}",
                        self.min_chunk, self.max_chunk
                    ));
                }
                if !(1..=40).contains(&self.mask_bits) {
                    return bad(format!(
                        "mask_bits must be in 1..=40, got {}",
                        self.mask_bits
                    ));
                }
                if self.window_size < 2 {
                    return bad(format!(
                        "window_size must be >= 2, got {}",
                        self.window_size
                    ));
                }
                if self.max_chunk > u32::MAX as usize {
                    return bad("max_chunk must fit in 32 bits".into());
                }
            }
            ChunkMode::Fixed => {
                if self.fixed_width == 0 || self.fixed_width > u32::MAX as usize {
                    return bad(format!("invalid fixed_width {}", self.fixed_width));
                }
            }
        }
        Ok(())
    }

    /// Expected chunk length on uniformly random input.
    pub fn expected_chunk_len(&self) -> usize {
        match self.mode {
            ChunkMode::Cdc => (self.min_chunk + (1usize << self.mask_bits)).min(self.max_chunk),
            ChunkMode::Fixed => self.fixed_width,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Chunk {
    pub offset: u64,
    pub length: u32,
    pub fp: Fingerprint,
    pub data: Option<Vec<u8>>,
}

impl Chunk {
    pub fn from_data(offset: u64, data: Vec<u8>) -> Self {
        Chunk {
            offset,
            length: data.len() as u32,
            fp: strong_hash(&data),
            data: Some(data),
        }
    }

    /// Drops the payload, keeping offset, length and fingerprint.
    pub fn detach(mut self) -> Self {
        self.data = None;
        self
    }
}

/// Incremental boundary detector. Feed bytes, get back cut positions.
struct Cutter {
    mode: ChunkMode,
    rolling: Option<RollingState>,
    mask: u64,
    min: usize,
    max: usize,
    fixed: usize,
    len: usize,
}

impl Cutter {
    fn new(cfg: &ChunkerConfig, tables: Option<Arc<RabinTables>>) -> Self {
        Cutter {
            mode: cfg.mode,
            rolling: tables.map(RollingState::with_tables),
            mask: (1u64 << cfg.mask_bits.min(63)) - 1,
            min: cfg.min_chunk,
            max: cfg.max_chunk,
            fixed: cfg.fixed_width,
            len: 0,
        }
    }

    /// Index just past the first boundary in `buf`, if any.
    #[inline]
    fn scan(&mut self, buf: &[u8]) -> Option<usize> {
        match self.mode {
            ChunkMode::Fixed => {
                let want = self.fixed - self.len;
                if buf.len() >= want {
                    self.len = 0;
                    Some(want)
                } else {
                    self.len += buf.len();
                    None
                }
            }
            ChunkMode::Cdc => {
                let rolling = self.rolling.as_mut().expect("cdc needs tables");
                for (i, &b) in buf.iter().enumerate() {
                    let fp = rolling.push(b);
                    self.len += 1;
                    if (self.len >= self.min && fp & self.mask == 0) || self.len >= self.max {
                        self.len = 0;
                        return Some(i + 1);
                    }
                }
                None
            }
        }
    }
}

const READ_BUF: usize = 256 * 1024;

/// Streaming chunker over any reader. Yields chunks with their payload attached.
pub struct ChunkStream<R> {
    reader: R,
    cutter: Cutter,
    buf: Vec<u8>,
    pos: usize,
    end: usize,
    pending: Vec<u8>,
    offset: u64,
    eof: bool,
}

impl<R: Read> ChunkStream<R> {
    pub fn new(reader: R, cfg: &ChunkerConfig) -> Result<Self> {
        cfg.validate()?;
        let tables = match cfg.mode {
            ChunkMode::Cdc => Some(RabinTables::new(cfg.window_size)?),
            ChunkMode::Fixed => None,
        };
        Ok(ChunkStream {
            reader,
            cutter: Cutter::new(cfg, tables),
            buf: vec![0; READ_BUF],
            pos: 0,
            end: 0,
            pending: Vec::new(),
            offset: 0,
            eof: false,
        })
    }

    fn emit(&mut self) -> Chunk {
        let data = std::mem::take(&mut self.pending);
        let chunk = Chunk::from_data(self.offset, data);
        self.offset += chunk.length as u64;
        chunk
    }

    fn next_chunk(&mut self) -> io::Result<Option<Chunk>> {
        loop {
            if self.pos == self.end {
                if self.eof {
                    return Ok(if self.pending.is_empty() {
                        None
                    } else {
                        Some(self.emit())
                    });
                }
                let n = loop {
                    match self.reader.read(&mut self.buf) {
                        Ok(n) => break n,
                        Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                        Err(e) => return Err(e),
                    }
                };
                self.pos = 0;
                self.end = n;
                if n == 0 {
                    self.eof = true;
                    continue;
                }
            }
            let window = &self.buf[self.pos..self.end];
            match self.cutter.scan(window) {
                Some(cut) => {
                    self.pending.extend_from_slice(&window[..cut]);
                    self.pos += cut;
                    return Ok(Some(self.emit()));
                }
                None => {
                    self.pending.extend_from_slice(window);
                    self.pos = self.end;
                }
            }
        }
    }
}

impl<R: Read> Iterator for ChunkStream<R> {
    type Item = io::Result<Chunk>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_chunk().transpose()
    }
}

/// Chunks a whole stream. I/O errors from the reader are propagated.
pub fn chunk_stream<R: Read>(input: R, cfg: &ChunkerConfig) -> Result<Vec<Chunk>> {
    let mut out = Vec::new();
    for chunk in ChunkStream::new(input, cfg)? {
        out.push(chunk?);
    }
    Ok(out)
}

/// Cut points of an in-memory buffer as `(offset, length)` pairs, without hashing.
pub fn boundaries(data: &[u8], cfg: &ChunkerConfig) -> Result<Vec<(usize, usize)>> {
    cfg.validate()?;
    let tables = match cfg.mode {
        ChunkMode::Cdc => Some(RabinTables::new(cfg.window_size)?),
        ChunkMode::Fixed => None,
    };
    let mut cutter = Cutter::new(cfg, tables);
    let mut out = Vec::new();
    let mut start = 0;
    let mut pos = 0;
    while pos < data.len() {
        match cutter.scan(&data[pos..]) {
            Some(cut) => {
                pos += cut;
                out.push((start, pos - start));
                start = pos;
            }
            None => pos = data.len(),
        }
    }
    if start < data.len() {
        out.push((start, data.len() - start));
    }
    Ok(out)
}

/// Chunks an in-memory buffer.
pub fn chunk_bytes(data: &[u8], cfg: &ChunkerConfig) -> Result<Vec<Chunk>> {
    Ok(boundaries(data, cfg)?
        .into_iter()
        .map(|(off, len)| Chunk::from_data(off as u64, data[off..off + len].to_vec()))
        .collect())
}

/// Bytes inserted at `offset`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Insertion {
    pub offset: usize,
    pub bytes: Vec<u8>,
}

impl Insertion {
    pub fn apply(&self, input: &[u8]) -> Result<Vec<u8>> {
        if self.offset > input.len() {
            return Err(Error::OutOfRange {
                index: self.offset,
                len: input.len(),
            });
        }
        let mut out = Vec::with_capacity(input.len() + self.bytes.len());
        out.extend_from_slice(&input[..self.offset]);
        out.extend_from_slice(&self.bytes);
        out.extend_from_slice(&input[self.offset..]);
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct ShiftOutcome {
    pub before: Vec<Chunk>,
    pub after: Vec<Chunk>,
    /// Size of the fingerprint multiset intersection.
    pub common: usize,
}

/// Size of the multiset intersection of two fingerprint sequences.
pub fn multiset_overlap<'a>(
    a: impl IntoIterator<Item = &'a Fingerprint>,
    b: impl IntoIterator<Item = &'a Fingerprint>,
) -> usize {
    let mut counts: HashMap<&Fingerprint, usize> = HashMap::new();
    for fp in a {
        *counts.entry(fp).or_default() += 1;
    }
    let mut common = 0;
    for fp in b {
        if let Some(c) = counts.get_mut(fp) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    common
}

/// Chunks `input` before and after applying `edit` and counts surviving chunks.
pub fn byte_shift_test(
    input: &[u8],
    edit: &Insertion,
    cfg: &ChunkerConfig,
) -> Result<ShiftOutcome> {
    let edited = edit.apply(input)?;
    let before: Vec<Chunk> = chunk_bytes(input, cfg)?
        .into_iter()
        .map(Chunk::detach)
        .collect();
    let after: Vec<Chunk> = chunk_bytes(&edited, cfg)?
        .into_iter()
        .map(Chunk::detach)
        .collect();
    let common = multiset_overlap(before.iter().map(|c| &c.fp), after.iter().map(|c| &c.fp));
    Ok(ShiftOutcome {
        before,
        after,
        common,
    })
}

/// Literal-delimiter chunking, for reproducing small readable examples.
///
/// A chunk ends right after every occurrence of `delimiter`. This is not a
/// content-defined rolling rule and is never used by the store.
pub mod demo {
    use super::Chunk;

    pub fn split_on_delimiter(data: &[u8], delimiter: &[u8]) -> Vec<Chunk> {
        let mut chunks = Vec::new();
        let mut start = 0;
        let mut i = 0;
        while i < data.len() {
            i += 1;
            if !delimiter.is_empty() && data[..i].ends_with(delimiter) {
                chunks.push(Chunk::from_data(start as u64, data[start..i].to_vec()));
                start = i;
            }
        }
        if start < data.len() {
            chunks.push(Chunk::from_data(start as u64, data[start..].to_vec()));
        }
        chunks
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(len: usize, seed: u64) -> Vec<u8> {
        let mut v = vec![0u8; len];
        ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut v);
        v
    }

    fn concat(chunks: &[Chunk]) -> Vec<u8> {
        chunks
            .iter()
            .flat_map(|c| c.data.clone().unwrap())
            .collect()
    }

    #[test]
    fn empty_stream() {
        let chunks = chunk_stream(&b""[..], &ChunkerConfig::default()).unwrap();
        assert!(chunks.is_empty());
    }

    #[test]
    fn config_validation() {
        let mut cfg = ChunkerConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.min_chunk = 0;
        assert!(cfg.validate().is_err());
        let cfg = ChunkerConfig {
            min_chunk: 10,
            max_chunk: 5,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ChunkerConfig {
            mask_bits: 41,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ChunkerConfig {
            window_size: 1,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn delimiter_demo_split() {
        let one = demo::split_on_delimiter(b"yutanabamuraabc", b"abc");
        assert_eq!(one.len(), 1);
        let two = demo::split_on_delimiter(b"yutanabcamuraabc", b"abc");
        let parts: Vec<_> = two.iter().map(|c| c.data.clone().unwrap()).collect();
        assert_eq!(parts, vec![b"yutanabc".to_vec(), b"amuraabc".to_vec()]);
    }

    #[test]
    fn round_trip_and_bounds() {
        let data = random(1 << 20, 5);
        let cfg = ChunkerConfig::default();
        let chunks = chunk_bytes(&data, &cfg).unwrap();
        assert_eq!(concat(&chunks), data);
        for (i, c) in chunks.iter().enumerate() {
            assert!(c.length as usize <= cfg.max_chunk);
            if i + 1 < chunks.len() {
                assert!(c.length as usize >= cfg.min_chunk);
            }
            assert_eq!(c.fp, strong_hash(c.data.as_ref().unwrap()));
        }
    }

    #[test]
    fn streaming_matches_in_memory() {
        // A reader that hands out odd-sized pieces exercises buffer seams.
        struct Dribble<'a>(&'a [u8], usize);
        impl Read for Dribble<'_> {
            fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
                let n = self.0.len().min(buf.len()).min(self.1);
                buf[..n].copy_from_slice(&self.0[..n]);
                self.0 = &self.0[n..];
                self.1 = self.1 % 7919 + 1;
                Ok(n)
            }
        }
        let data = random(600_000, 6);
        let cfg = ChunkerConfig::default();
        let a = chunk_bytes(&data, &cfg).unwrap();
        let b = chunk_stream(Dribble(&data, 1), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn read_errors_propagate() {
        struct Broken;
        impl Read for Broken {
            fn read(&mut self, _: &mut [u8]) -> io::Result<usize> {
                Err(io::Error::other("boom"))
            }
        }
        let err = chunk_stream(Broken, &ChunkerConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Storage(_)));
    }

    #[test]
    fn mean_chunk_length_in_expected_band() {
        let data = random(1 << 20, 7);
        let cfg = ChunkerConfig::default();
        let chunks = chunk_bytes(&data, &cfg).unwrap();
        let mean = data.len() / chunks.len();
        assert!(
            (4 * 1024..=16 * 1024).contains(&mean),
            "mean chunk length {mean}"
        );
    }

    #[test]
    fn forced_cut_at_max() {
        let data = vec![0xAAu8; 300_000];
        let cfg = ChunkerConfig {
            min_chunk: 1024,
            max_chunk: 4096,
            ..Default::default()
        };
        let chunks = chunk_bytes(&data, &cfg).unwrap();
        assert!(chunks.iter().all(|c| c.length as usize <= 4096));
        assert_eq!(concat(&chunks), data);
    }

    #[test]
    fn identity_edit() {
        let data = random(200_000, 8);
        let out = byte_shift_test(
            &data,
            &Insertion {
                offset: 1000,
                bytes: vec![],
            },
            &ChunkerConfig::default(),
        )
        .unwrap();
        assert_eq!(out.before, out.after);
        assert_eq!(out.common, out.before.len());
    }

    #[test]
    fn insertion_out_of_bounds() {
        let edit = Insertion {
            offset: 11,
            bytes: vec![1],
        };
        assert!(byte_shift_test(&[0; 10], &edit, &ChunkerConfig::default()).is_err());
    }

    #[test]
    fn fixed_width_suffers_byte_shift() {
        let data = random(64 * 1024, 9);
        let cfg = ChunkerConfig::fixed(4096);
        let out = byte_shift_test(
            &data,
            &Insertion {
                offset: 0,
                bytes: vec![0x42],
            },
            &cfg,
        )
        .unwrap();
        assert_eq!(out.common, 0);
    }

    #[test]
    fn cdc_survives_single_insertion() {
        let cfg = ChunkerConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let data = random(1 << 20, 11);
        let mut good = 0;
        for _ in 0..20 {
            let edit = Insertion {
                offset: rng.gen_range(0..data.len()),
                bytes: vec![rng.gen()],
            };
            let out = byte_shift_test(&data, &edit, &cfg).unwrap();
            if out.common + 3 >= out.before.len() {
                good += 1;
            }
        }
        assert!(good >= 19, "only {good}/20 trials kept N-3 chunks");
    }

    #[test]
    fn deterministic() {
        let data = random(300_000, 12);
        let cfg = ChunkerConfig::default();
        assert_eq!(
            chunk_bytes(&data, &cfg).unwrap(),
            chunk_bytes(&data, &cfg).unwrap()
        );
    }

    #[test]
    fn multiset_overlap_counts_duplicates() {
        let a = strong_hash(b"a");
        let b = strong_hash(b"b");
        assert_eq!(multiset_overlap(&[a, a, b], &[a, b, b]), 2);
    }
}
