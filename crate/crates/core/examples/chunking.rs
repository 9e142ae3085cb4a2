//! Content-defined versus fixed-width chunking under a one-byte insertion.
//!
//! Run with `cargo run --example chunking`.

use cdmt::chunker::{byte_shift_test, Insertion};
use cdmt::ChunkerConfig;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> cdmt::Result<()> {
    let mut data = vec![0u8; 1 << 20];
    ChaCha8Rng::seed_from_u64(7).fill_bytes(&mut data);
    let edit = Insertion {
        offset: 100,
        bytes: vec![0xAA],
    };

    for (label, cfg) in [
        ("content-defined", ChunkerConfig::default()),
        ("fixed 8 KiB", ChunkerConfig::fixed(8 * 1024)),
    ] {
        let out = byte_shift_test(&data, &edit, &cfg)?;
        println!(
            "{label:>16}: {} chunks before, {} after, {} unchanged",
            out.before.len(),
            out.after.len(),
            out.common
        );
    }

    let chunks = cdmt::chunk_bytes(&data, &ChunkerConfig::default())?;
    let mean = data.len() / chunks.len();
    println!("mean content-defined chunk: {mean} bytes");
    for c in chunks.iter().take(3) {
        println!("{}\t{}\t{}", c.offset, c.length, c.fp);
    }
    Ok(())
}
