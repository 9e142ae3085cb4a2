//! Experiment quantities: dedup and compression ratios, common-node ratios,
//! comparison ratio and the hashing/indexing time split, plus a seeded
//! synthetic corpus generator.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use flate2::write::DeflateEncoder;
use flate2::Compression;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cdmt::{cdmt_build, cdmt_comparison_count, CdmtConfig, CdmtTree};
use crate::chunker::{boundaries, chunk_bytes, ChunkerConfig};
use crate::error::{Error, Result};
use crate::merkle::{merkle_common_digests, merkle_common_nodes, MerkleTree, DEFAULT_ARITY};
use crate::rolling_hash::{strong_hash, Fingerprint};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct DedupCounts {
    pub raw_bytes: u64,
    pub unique_bytes: u64,
    pub chunks: usize,
    pub unique_chunks: usize,
}

impl DedupCounts {
    pub fn ratio(&self) -> f64 {
        if self.unique_bytes == 0 {
            1.0
        } else {
            self.raw_bytes as f64 / self.unique_bytes as f64
        }
    }
}

pub fn dedup_counts<V: AsRef<[u8]>>(versions: &[V], cfg: &ChunkerConfig) -> Result<DedupCounts> {
    let mut seen = HashSet::new();
    let mut c = DedupCounts::default();
    for v in versions {
        for chunk in chunk_bytes(v.as_ref(), cfg)? {
            c.raw_bytes += u64::from(chunk.length);
            c.chunks += 1;
            if seen.insert(chunk.fp) {
                c.unique_bytes += u64::from(chunk.length);
                c.unique_chunks += 1;
            }
        }
    }
    Ok(c)
}

/// Raw bytes over unique chunk bytes across all versions. Empty input gives 1.
pub fn dedup_ratio<V: AsRef<[u8]>>(versions: &[V], cfg: &ChunkerConfig) -> Result<f64> {
    Ok(dedup_counts(versions, cfg)?.ratio())
}

pub fn deflate_size(data: &[u8], level: u32) -> u64 {
    let mut enc = DeflateEncoder::new(Vec::new(), Compression::new(level));
    enc.write_all(data).expect("writing to a Vec");
    enc.finish().expect("writing to a Vec").len() as u64
}

/// Raw bytes over the sum of each version compressed on its own.
pub fn compression_ratio<V: AsRef<[u8]>>(versions: &[V], level: u32) -> f64 {
    let raw: u64 = versions.iter().map(|v| v.as_ref().len() as u64).sum();
    let packed: u64 = versions
        .iter()
        .map(|v| deflate_size(v.as_ref(), level))
        .sum();
    if packed == 0 {
        1.0
    } else {
        raw as f64 / packed as f64
    }
}

/// Fractions of `a`'s nodes also found in `b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CommonNodes {
    /// Merkle nodes matching in digest, level and position.
    pub merkle_position: f64,
    /// Merkle nodes whose digest appears anywhere in the other tree.
    pub merkle_digest: f64,
    pub cdmt: f64,
}

pub fn common_node_ratio(
    a: &[Fingerprint],
    b: &[Fingerprint],
    cfg: &CdmtConfig,
) -> Result<CommonNodes> {
    let ma = MerkleTree::build(a, DEFAULT_ARITY)?;
    let mb = MerkleTree::build(b, DEFAULT_ARITY)?;
    let total = ma.node_count() as f64;
    let ta = cdmt_build(a, cfg)?;
    let tb = cdmt_build(b, cfg)?;
    Ok(CommonNodes {
        merkle_position: merkle_common_nodes(&ma, &mb) as f64 / total,
        merkle_digest: merkle_common_digests(&ma, &mb) as f64 / total,
        cdmt: cdmt_common(&ta, &tb, 0)?,
    })
}

fn cdmt_common(a: &CdmtTree, b: &CdmtTree, version: u32) -> Result<f64> {
    let (mut common, mut total) = (0usize, 0usize);
    a.walk_distinct(version, |_, s| {
        total += 1;
        common += usize::from(b.contains(&s.id));
    })?;
    Ok(common as f64 / total as f64)
}

/// Nodes the tree compare examines over the lookups a per-leaf scan makes,
/// for a client holding `client` and fetching `target`.
pub fn comparison_ratio(
    client: &[Fingerprint],
    target: &[Fingerprint],
    cfg: &CdmtConfig,
) -> Result<f64> {
    let c = cdmt_build(client, cfg)?;
    let t = cdmt_build(target, cfg)?;
    let (examined, kv) = cdmt_comparison_count(&c, &t, 0)?;
    Ok(examined as f64 / kv as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Timing {
    /// Boundary detection plus strong hashing of every chunk.
    pub hash_seconds: f64,
    /// Building one tree per version from its leaves.
    pub index_seconds: f64,
}

pub fn timing_report<V: AsRef<[u8]>>(
    versions: &[V],
    chunker: &ChunkerConfig,
    cdmt: &CdmtConfig,
) -> Result<Timing> {
    let mut t = Timing::default();
    for v in versions {
        let start = Instant::now();
        let data = v.as_ref();
        let leaves: Vec<Fingerprint> = boundaries(data, chunker)?
            .into_iter()
            .map(|(off, len)| strong_hash(&data[off..off + len]))
            .collect();
        t.hash_seconds += start.elapsed().as_secs_f64();
        if leaves.is_empty() {
            continue;
        }
        let start = Instant::now();
        std::hint::black_box(cdmt_build(&leaves, cdmt)?);
        t.index_seconds += start.elapsed().as_secs_f64();
    }
    Ok(t)
}

/// One warm-up pass, then the per-component minimum of `passes` timed passes.
/// Interference on a shared host only adds time, so the fastest pass is the
/// steadiest estimate.
pub fn timing_best<V: AsRef<[u8]>>(
    versions: &[V],
    chunker: &ChunkerConfig,
    cdmt: &CdmtConfig,
    passes: usize,
) -> Result<Timing> {
    timing_report(versions, chunker, cdmt)?;
    let mut best = Timing {
        hash_seconds: f64::INFINITY,
        index_seconds: f64::INFINITY,
    };
    for _ in 0..passes.max(1) {
        let t = timing_report(versions, chunker, cdmt)?;
        best.hash_seconds = best.hash_seconds.min(t.hash_seconds);
        best.index_seconds = best.index_seconds.min(t.index_seconds);
    }
    Ok(best)
}

/// Relative spread `(max - min) / mean` after dropping the extreme samples.
pub fn trimmed_spread(samples: &[f64]) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    if s.len() > 2 {
        s = s[1..s.len() - 1].to_vec();
    }
    let mean = s.iter().sum::<f64>() / s.len() as f64;
    if mean == 0.0 {
        return 0.0;
    }
    (s[s.len() - 1] - s[0]) / mean
}

/// Two leaf sequences of length `n` where `b` keeps a `shared` fraction of
/// `a`'s leaves in place and replaces the rest with fresh ids.
pub fn leaf_pair(seed: u64, n: usize, shared: f64) -> (Vec<Fingerprint>, Vec<Fingerprint>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fresh = || {
        let mut b = [0u8; 32];
        rng.fill_bytes(&mut b);
        Fingerprint(b)
    };
    let a: Vec<Fingerprint> = (0..n).map(|_| fresh()).collect();
    let mut b = a.clone();
    let replace = n - (shared * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for i in rand::seq::index::sample(&mut rng, n, replace) {
        let mut id = [0u8; 32];
        rng.fill_bytes(&mut id);
        b[i] = Fingerprint(id);
    }
    (a, b)
}

/// Edits `data` so that chunk `index` splits in two: the window that ends
/// the chunk is copied into its middle, creating a second cut there.
/// Returns `None` when the chunk is too short for both halves to stay above
/// the minimum chunk length.
pub fn split_edit(data: &[u8], cfg: &ChunkerConfig, index: usize) -> Result<Option<Vec<u8>>> {
    let cuts = boundaries(data, cfg)?;
    let Some(&(start, len)) = cuts.get(index) else {
        return Ok(None);
    };
    let w = cfg.window_size;
    if index + 1 == cuts.len() || len < 2 * cfg.min_chunk + 2 * w {
        return Ok(None);
    }
    let end = start + len;
    let mid = start + len / 2;
    let mut out = Vec::with_capacity(data.len() + w);
    out.extend_from_slice(&data[..mid]);
    out.extend_from_slice(&data[end - w..end]);
    out.extend_from_slice(&data[mid..]);
    let after = boundaries(&out, cfg)?;
    let split = after.len() == cuts.len() + 1
        && after[index] == (start, mid + w - start)
        && after[index + 1] == (mid + w, end - mid);
    Ok(split.then_some(out))
}

/// Seeded corpus: a base blob and versions derived from it by successive mutation.
///
/// Parsed from `synthetic:key=value,...` with keys `seed`, `size` (bytes,
/// with optional `K`/`M` suffix), `versions`, `rate` (fraction of bytes
/// touched per version), `region` (largest mutated region in bytes) and
/// `text` (`1` for a compressible base built from a repeated vocabulary of
/// byte tokens; `0` for random bytes).
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub size: usize,
    pub versions: usize,
    pub rate: f64,
    pub region: usize,
    pub text: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 1,
            size: 4 << 20,
            versions: 10,
            rate: 0.05,
            region: 32 * 1024,
            text: true,
        }
    }
}

fn parse_size(s: &str) -> Option<usize> {
    let (num, mul) = match s.as_bytes().last()? {
        b'K' | b'k' => (&s[..s.len() - 1], 1 << 10),
        b'M' | b'm' => (&s[..s.len() - 1], 1 << 20),
        b'G' | b'g' => (&s[..s.len() - 1], 1 << 30),
        _ => (s, 1),
    };
    num.parse::<usize>().ok()?.checked_mul(mul)
}

impl FromStr for SyntheticSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let body = s
            .strip_prefix("synthetic:")
            .or_else(|| (s == "synthetic").then_some(""))
            .ok_or_else(|| Error::InvalidConfig(format!("not a synthetic corpus spec: {s}")))?;
        let mut spec = SyntheticSpec::default();
        for kv in body.split(',').filter(|p| !p.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("expected key=value, got {kv}")))?;
            let bad = || Error::InvalidConfig(format!("bad value for {k}: {v}"));
            match k {
                "seed" => spec.seed = v.parse().map_err(|_| bad())?,
                "size" => spec.size = parse_size(v).ok_or_else(bad)?,
                "versions" => spec.versions = v.parse().map_err(|_| bad())?,
                "rate" => spec.rate = v.parse().map_err(|_| bad())?,
                "region" => spec.region = parse_size(v).ok_or_else(bad)?,
                "text" => spec.text = matches!(v, "1" | "true"),
                _ => return Err(Error::InvalidConfig(format!("unknown corpus key {k}"))),
            }
        }
        if spec.versions == 0 || spec.region == 0 || !(0.0..=1.0).contains(&spec.rate) {
            return Err(Error::InvalidConfig(format!("unusable corpus spec: {s}")));
        }
        Ok(spec)
    }
}

impl SyntheticSpec {
    pub fn generate(&self) -> Vec<Vec<u8>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let vocab = self.text.then(|| Vocabulary::new(&mut rng));
        let mut current = match &vocab {
            Some(v) => v.blob(&mut rng, self.size),
            None => random_bytes(&mut rng, self.size),
        };
        let mut out = Vec::with_capacity(self.versions);
        for i in 0..self.versions {
            if i > 0 {
                current = mutate(&mut rng, &current, self.rate, self.region, vocab.as_ref());
            }
            out.push(current.clone());
        }
        out
    }
}

fn random_bytes(rng: &mut impl RngCore, n: usize) -> Vec<u8> {
    let mut v = vec![0u8; n];
    rng.fill_bytes(&mut v);
    v
}

/// Random-byte tokens reused throughout a blob, so the blob compresses
/// while byte pairs stay as varied as in binary data.
struct Vocabulary(Vec<Vec<u8>>);

impl Vocabulary {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        Vocabulary(
            (0..4096)
                .map(|_| {
                    let len = rng.gen_range(3..24);
                    random_bytes(rng, len)
                })
                .collect(),
        )
    }

    fn blob(&self, rng: &mut ChaCha8Rng, n: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(n + 24);
        while out.len() < n {
            if rng.gen_ratio(1, 400) {
                let run = rng.gen_range(64..512);
                out.extend(random_bytes(rng, run));
            } else {
                out.extend_from_slice(&self.0[rng.gen_range(0..self.0.len())]);
            }
        }
        out.truncate(n);
        out
    }
}

/// Applies point edits, insertions, deletions and block rewrites until about
/// `rate * len` bytes have been touched.
fn mutate(
    rng: &mut ChaCha8Rng,
    base: &[u8],
    rate: f64,
    region: usize,
    vocab: Option<&Vocabulary>,
) -> Vec<u8> {
    let mut v = base.to_vec();
    let budget = (rate * base.len() as f64) as usize;
    let mut touched = 0;
    let filler = |rng: &mut ChaCha8Rng, n: usize| match vocab {
        Some(v) => v.blob(rng, n),
        None => random_bytes(rng, n),
    };
    while touched < budget && !v.is_empty() {
        let len = rng.gen_range(1..=region.min(budget - touched).max(1));
        let at = rng.gen_range(0..v.len());
        match rng.gen_range(0..10) {
            0 => {
                v[at] = v[at].wrapping_add(rng.gen_range(1..=255));
                touched += 1;
            }
            1..=3 => {
                let ins = filler(rng, len);
                v.splice(at..at, ins);
                touched += len;
            }
            4..=5 => {
                let end = (at + len).min(v.len());
                touched += end - at;
                v.drain(at..end);
            }
            _ => {
                let end = (at + len).min(v.len());
                let new = filler(rng, end - at);
                touched += end - at;
                v.splice(at..end, new);
            }
        }
    }
    v
}

/// Reads every regular file in `dir`, in name order, as one version each.
pub fn load_corpus_dir(dir: &Path) -> Result<Vec<Vec<u8>>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.is_file());
    paths.sort();
    paths.iter().map(|p| Ok(std::fs::read(p)?)).collect()
}

/// Loads `spec` as a synthetic spec or a directory of version files.
pub fn load_corpus(spec: &str) -> Result<Vec<Vec<u8>>> {
    if spec.starts_with("synthetic") {
        Ok(spec.parse::<SyntheticSpec>()?.generate())
    } else {
        load_corpus_dir(Path::new(spec))
    }
}

pub const CSV_HEADER: &str = "corpus,versions,raw_bytes,unique_bytes,dedup_ratio,compression_ratio,\
merkle_common_ratio,merkle_digest_ratio,cdmt_common_ratio,comparison_ratio,hash_seconds,index_seconds";

/// One corpus worth of metrics. Pairwise quantities are means over
/// consecutive version pairs, with the older version as `a`/client.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub corpus: String,
    pub versions: usize,
    pub raw_bytes: u64,
    pub unique_bytes: u64,
    pub dedup_ratio: f64,
    pub compression_ratio: f64,
    pub merkle_common_ratio: f64,
    pub merkle_digest_ratio: f64,
    pub cdmt_common_ratio: f64,
    pub comparison_ratio: f64,
    pub hash_seconds: f64,
    pub index_seconds: f64,
}

impl BenchRow {
    pub fn csv_line(&self) -> String {
        let mut s = String::new();
        write!(
            s,
            "{},{},{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.6},{:.6}",
            self.corpus.replace(',', ";"),
            self.versions,
            self.raw_bytes,
            self.unique_bytes,
            self.dedup_ratio,
            self.compression_ratio,
            self.merkle_common_ratio,
            self.merkle_digest_ratio,
            self.cdmt_common_ratio,
            self.comparison_ratio,
            self.hash_seconds,
            self.index_seconds
        )
        .unwrap();
        s
    }

    /// Whitespace-separated form with a `#` header, readable by gnuplot.
    pub fn gnuplot_line(&self) -> String {
        self.csv_line().replace(',', " ")
    }
}

pub fn gnuplot_header() -> String {
    format!("# {}", CSV_HEADER.replace(',', " "))
}

pub fn bench<V: AsRef<[u8]>>(
    corpus: &str,
    versions: &[V],
    chunker: &ChunkerConfig,
    cdmt: &CdmtConfig,
) -> Result<BenchRow> {
    let counts = dedup_counts(versions, chunker)?;
    let timing = timing_best(versions, chunker, cdmt, 3)?;
    let leaves: Vec<Vec<Fingerprint>> = versions
        .iter()
        .map(|v| {
            Ok(chunk_bytes(v.as_ref(), chunker)?
                .into_iter()
                .map(|c| c.fp)
                .collect())
        })
        .collect::<Result<_>>()?;
    let pairs: Vec<_> = leaves
        .windows(2)
        .filter(|w| !w[0].is_empty() && !w[1].is_empty())
        .collect();
    let (mut mp, mut md, mut cc, mut cr) = (0.0, 0.0, 0.0, 0.0);
    for w in &pairs {
        let c = common_node_ratio(&w[1], &w[0], cdmt)?;
        mp += c.merkle_position;
        md += c.merkle_digest;
        cc += c.cdmt;
        cr += comparison_ratio(&w[0], &w[1], cdmt)?;
    }
    let n = pairs.len().max(1) as f64;
    let nan_if_none = |x: f64| if pairs.is_empty() { f64::NAN } else { x / n };
    Ok(BenchRow {
        corpus: corpus.to_string(),
        versions: versions.len(),
        raw_bytes: counts.raw_bytes,
        unique_bytes: counts.unique_bytes,
        dedup_ratio: counts.ratio(),
        compression_ratio: compression_ratio(versions, 6),
        merkle_common_ratio: nan_if_none(mp),
        merkle_digest_ratio: nan_if_none(md),
        cdmt_common_ratio: nan_if_none(cc),
        comparison_ratio: nan_if_none(cr),
        hash_seconds: timing.hash_seconds,
        index_seconds: timing.index_seconds,
    })
}
