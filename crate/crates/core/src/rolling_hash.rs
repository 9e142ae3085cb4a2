//! Fingerprinting primitives.
//!
//! Two very different hashes live here:
//!
//! * a Rabin fingerprint over GF(2) that rolls over a small byte window and
//!   decides where content-defined chunk boundaries fall, and
//! * a 256-bit BLAKE2b digest ([`strong_hash`]) that names chunks and tree
//!   nodes.
//!
//! [`window_hash`] sits in between: it reduces a window of child
//! fingerprints to 64 bits for the internal-node boundary test of the tree
//! index.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use blake2::digest::consts::U32;
use blake2::{Blake2b, Digest};

use crate::error::{Error, Result};

/// Irreducible polynomial of degree 63 over GF(2), bit `i` is the coefficient of `x^i`.
pub const RABIN_POLYNOMIAL: u64 = 0xcdfa_d713_91a9_d9ab;

const DEGREE: u32 = 63;
const LOW_MASK: u64 = (1 << DEGREE) - 1;

pub const MIN_WINDOW: usize = 2;
pub const MAX_WINDOW: usize = 64;
pub const DEFAULT_WINDOW: usize = 2;

type Blake2b256 = Blake2b<U32>;

/// A 256-bit BLAKE2b digest.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Fingerprint(pub [u8; 32]);

impl Fingerprint {
    pub const LEN: usize = 32;

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn from_slice(bytes: &[u8]) -> Option<Self> {
        <[u8; 32]>::try_from(bytes).ok().map(Fingerprint)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// First eight bytes, little endian.
    pub fn prefix_u64(&self) -> u64 {
        u64::from_le_bytes(self.0[..8].try_into().unwrap())
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fingerprint({})", &self.to_hex()[..16])
    }
}

impl FromStr for Fingerprint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out)
            .map_err(|e| Error::InvalidConfig(format!("bad fingerprint {s:?}: {e}")))?;
        Ok(Fingerprint(out))
    }
}

/// Unkeyed BLAKE2b with a 32-byte output.
pub fn strong_hash(data: &[u8]) -> Fingerprint {
    Fingerprint(Blake2b256::digest(data).into())
}

/// Incremental form of [`strong_hash`].
#[derive(Clone, Default)]
pub struct StrongHasher(Blake2b256);

impl StrongHasher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, data: &[u8]) {
        self.0.update(data);
    }

    pub fn finish(self) -> Fingerprint {
        Fingerprint(self.0.finalize().into())
    }
}

/// Strong hash of the concatenated digests.
pub fn hash_children<'a>(children: impl IntoIterator<Item = &'a Fingerprint>) -> Fingerprint {
    let mut hasher = StrongHasher::new();
    for child in children {
        hasher.update(&child.0);
    }
    hasher.finish()
}

/// Boundary value of a window of child fingerprints: the strong hash of their
/// concatenation truncated to 64 bits.
pub fn window_hash(children: &[Fingerprint], window: usize) -> Result<u64> {
    if children.len() != window {
        return Err(Error::Contract(format!(
            "window_hash expects {window} fingerprints, got {}",
            children.len()
        )));
    }
    Ok(hash_children(children).prefix_u64())
}

/// Sliding window over child fingerprints.
#[derive(Clone, Debug)]
pub struct ChildWindow {
    size: usize,
    items: VecDeque<Fingerprint>,
}

impl ChildWindow {
    pub fn new(size: usize) -> Self {
        ChildWindow {
            size,
            items: VecDeque::with_capacity(size),
        }
    }

    pub fn clear(&mut self) {
        self.items.clear();
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Appends `fp`, evicting the oldest entry once full. Returns the window
    /// hash when the window holds exactly `size` entries.
    pub fn push(&mut self, fp: Fingerprint) -> Option<u64> {
        if self.items.len() == self.size {
            self.items.pop_front();
        }
        self.items.push_back(fp);
        self.value()
    }

    pub fn value(&self) -> Option<u64> {
        if self.items.len() < self.size {
            return None;
        }
        let mut hasher = StrongHasher::new();
        for fp in &self.items {
            hasher.update(&fp.0);
        }
        Some(hasher.finish().prefix_u64())
    }

    pub fn contents(&self) -> impl Iterator<Item = &Fingerprint> {
        self.items.iter()
    }
}

/// Multiplication in GF(2)[x] modulo [`RABIN_POLYNOMIAL`]; both operands must have degree < 63.
pub(crate) fn gf2_mul_mod(mut a: u64, mut b: u64) -> u64 {
    let mut acc = 0u64;
    while b != 0 {
        if b & 1 == 1 {
            acc ^= a;
        }
        b >>= 1;
        a <<= 1;
        if a >> DEGREE & 1 == 1 {
            a ^= RABIN_POLYNOMIAL;
        }
    }
    acc
}

/// `x^n mod P`.
pub(crate) fn x_pow_mod(n: u32) -> u64 {
    let mut result = 1u64;
    let mut base = 2u64;
    let mut n = n;
    while n > 0 {
        if n & 1 == 1 {
            result = gf2_mul_mod(result, base);
        }
        base = gf2_mul_mod(base, base);
        n >>= 1;
    }
    result
}

/// Lookup tables for one window size.
///
/// The fingerprint of a window `b_0 .. b_{n-1}` is the residue of
/// `(x^{8n} + sum b_i x^{8(n-1-i)}) * x^64` modulo the polynomial. The leading
/// one keeps all-zero windows from fingerprinting to zero, and the `x^64`
/// factor forces a reduction even for two-byte windows, which would otherwise
/// be returned verbatim.
#[derive(Debug)]
pub struct RabinTables {
    window: usize,
    shift: [u64; 256],
    push: [u64; 256],
    pop: [u64; 256],
    empty: u64,
}

impl RabinTables {
    pub fn new(window: usize) -> Result<Arc<Self>> {
        if !(MIN_WINDOW..=MAX_WINDOW).contains(&window) {
            return Err(Error::InvalidConfig(format!(
                "rolling window must be in {MIN_WINDOW}..={MAX_WINDOW}, got {window}"
            )));
        }
        let x63 = x_pow_mod(DEGREE);
        let x64 = x_pow_mod(64);
        let x_out = x_pow_mod(8 * window as u32 + 64);
        let mut shift = [0u64; 256];
        let mut push = [0u64; 256];
        let mut pop = [0u64; 256];
        for b in 0..256u64 {
            shift[b as usize] = gf2_mul_mod(b, x63);
            push[b as usize] = gf2_mul_mod(b, x64);
            // Removes the old leading one (now at x^{8W+8}) and the evicted
            // byte, and re-inserts the leading one at x^{8W}.
            pop[b as usize] = gf2_mul_mod((0x100 | b) ^ 1, x_out);
        }
        Ok(Arc::new(RabinTables {
            window,
            shift,
            push,
            pop,
            empty: x64,
        }))
    }

    pub fn window(&self) -> usize {
        self.window
    }

    #[inline]
    fn times_x8(&self, fp: u64) -> u64 {
        ((fp << 8) & LOW_MASK) ^ self.shift[(fp >> (DEGREE - 8)) as usize]
    }
}

/// Running Rabin fingerprint over the last `window` bytes pushed.
#[derive(Clone, Debug)]
pub struct RollingState {
    tables: Arc<RabinTables>,
    ring: Vec<u8>,
    head: usize,
    filled: usize,
    fp: u64,
}

impl RollingState {
    pub fn new(window: usize) -> Result<Self> {
        Ok(Self::with_tables(RabinTables::new(window)?))
    }

    pub fn with_tables(tables: Arc<RabinTables>) -> Self {
        RollingState {
            ring: vec![0; tables.window],
            head: 0,
            filled: 0,
            fp: tables.empty,
            tables,
        }
    }

    pub fn window_size(&self) -> usize {
        self.tables.window
    }

    pub fn fingerprint(&self) -> u64 {
        self.fp
    }

    /// Bytes currently in the window, oldest first.
    pub fn window(&self) -> Vec<u8> {
        let w = self.tables.window;
        let start = (self.head + w - self.filled) % w;
        (0..self.filled)
            .map(|i| self.ring[(start + i) % w])
            .collect()
    }

    #[inline]
    pub fn push(&mut self, byte: u8) -> u64 {
        let t = &*self.tables;
        let mut fp = t.times_x8(self.fp) ^ t.push[byte as usize];
        if self.filled == t.window {
            fp ^= t.pop[self.ring[self.head] as usize];
        } else {
            self.filled += 1;
        }
        self.ring[self.head] = byte;
        self.head += 1;
        if self.head == t.window {
            self.head = 0;
        }
        self.fp = fp;
        fp
    }

    /// Fingerprint of `bytes` computed from scratch (only the trailing window counts).
    pub fn fingerprint_of(window: usize, bytes: &[u8]) -> Result<u64> {
        let mut state = RollingState::new(window)?;
        let start = bytes.len().saturating_sub(window);
        for &b in &bytes[start..] {
            state.push(b);
        }
        Ok(state.fp)
    }
}

/// Functional form of [`RollingState::push`].
pub fn roll_push(mut state: RollingState, byte: u8) -> RollingState {
    state.push(byte);
    state
}
