//! Authentication paths in a k-ary Merkle tree, and how a chunk split
//! disturbs position-sensitive matching while a content-defined tree keeps
//! most nodes.
//!
//! Run with `cargo run --example merkle_chunk_shift`.

use cdmt::merkle::{verify_auth_path, DEFAULT_ARITY};
use cdmt::metrics::{common_node_ratio, split_edit};
use cdmt::{chunk_bytes, CdmtConfig, ChunkerConfig, Fingerprint, MerkleTree};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn leaves(data: &[u8], cfg: &ChunkerConfig) -> cdmt::Result<Vec<Fingerprint>> {
    Ok(chunk_bytes(data, cfg)?.into_iter().map(|c| c.fp).collect())
}

fn main() -> cdmt::Result<()> {
    let cfg = ChunkerConfig::default();
    let mut data = vec![0u8; 4 << 20];
    ChaCha8Rng::seed_from_u64(11).fill_bytes(&mut data);
    let before = leaves(&data, &cfg)?;

    let tree = MerkleTree::build(&before, DEFAULT_ARITY)?;
    let path = tree.auth_path(17)?;
    println!(
        "{} leaves, height {}, leaf 17 verifies: {}",
        tree.leaf_count(),
        tree.height(),
        verify_auth_path(before[17], &path, &tree.root())
    );

    let edited = (0..before.len())
        .find_map(|i| split_edit(&data, &cfg, i).transpose())
        .expect("some chunk is long enough to split")?;
    let after = leaves(&edited, &cfg)?;
    let c = common_node_ratio(&after, &before, &CdmtConfig::default())?;
    println!("after splitting an early chunk:");
    println!("  merkle, by position: {:.3}", c.merkle_position);
    println!("  merkle, by digest:   {:.3}", c.merkle_digest);
    println!("  content-defined:     {:.3}", c.cdmt);
    Ok(())
}
