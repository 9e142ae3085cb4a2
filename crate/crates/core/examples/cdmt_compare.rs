//! Build content-defined trees for two versions and find what the second adds.
//!
//! Run with `cargo run --example cdmt_compare`.

use std::collections::HashSet;

use cdmt::{cdmt_build, cdmt_compare, chunk_bytes, CdmtConfig, ChunkerConfig, Fingerprint};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> cdmt::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut v1 = vec![0u8; 8 << 20];
    rng.fill_bytes(&mut v1);
    let mut v2 = v1.clone();
    for _ in 0..5 {
        let at = rng.gen_range(0..v2.len());
        v2.splice(at..at, *b"patched");
    }

    let chunker = ChunkerConfig::default();
    let fps = |d: &[u8]| -> cdmt::Result<Vec<Fingerprint>> {
        Ok(chunk_bytes(d, &chunker)?
            .into_iter()
            .map(|c| c.fp)
            .collect())
    };
    let (l1, l2) = (fps(&v1)?, fps(&v2)?);
    let cfg = CdmtConfig::default();
    let (t1, t2) = (cdmt_build(&l1, &cfg)?, cdmt_build(&l2, &cfg)?);
    let stats = t2.stats(0)?;
    println!(
        "v2: {} leaves, {} internal nodes, height {}, mean fanout {:.2}",
        stats.leaves, stats.internal, stats.height, stats.mean_fanout
    );

    let missing = cdmt_compare(&t1, &t2, 0)?;
    let have: HashSet<_> = l1.iter().collect();
    let expected: HashSet<_> = l2.iter().filter(|f| !have.contains(f)).collect();
    println!(
        "{} new chunks found by tree walk, {} by full scan",
        missing.len(),
        expected.len()
    );
    let (examined, scanned) = cdmt::cdmt_comparison_count(&t1, &t2, 0)?;
    println!("nodes examined {examined} vs {scanned} per-leaf lookups");
    Ok(())
}
