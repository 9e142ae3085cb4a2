//! Push an image to a directory registry, push an edited version, then pull
//! both into a fresh client. Only missing chunks cross.
//!
//! Run with `cargo run --example push_pull`.

use cdmt::store::{Store, StoreOptions};
use cdmt::transfer::{pull, push, DirRegistry};
use cdmt::{ChunkerConfig, VersionKind};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> cdmt::Result<()> {
    let dir = tempfile::tempdir()?;
    let cfg = ChunkerConfig::default();
    let mut dev = Store::init(
        dir.path().join("dev"),
        &Default::default(),
        StoreOptions::default(),
    )?;
    let mut registry = DirRegistry::new(dir.path().join("registry"))?;

    let mut layer = vec![0u8; 4 << 20];
    ChaCha8Rng::seed_from_u64(9).fill_bytes(&mut layer);
    let r1 = dev.ingest(&layer[..], &cfg)?.recipe;
    dev.commit_version(
        "svc",
        "1.0",
        VersionKind::Branching,
        None,
        vec![r1.layer_id],
    )?;
    println!("{:?}", push(&dev, &mut registry, "svc", "1.0")?);

    layer.splice(1_000_000..1_000_000, *b"small change");
    let r2 = dev.ingest(&layer[..], &cfg)?.recipe;
    dev.commit_version(
        "svc",
        "1.1",
        VersionKind::Branching,
        Some("1.0"),
        vec![r2.layer_id.clone()],
    )?;
    println!("{:?}", push(&dev, &mut registry, "svc", "1.1")?);

    let mut ci = Store::init(
        dir.path().join("ci"),
        &Default::default(),
        StoreOptions::default(),
    )?;
    println!("{:?}", pull(&mut ci, &mut registry, "svc", "1.0")?);
    println!("{:?}", pull(&mut ci, &mut registry, "svc", "1.1")?);
    println!("{:?}", pull(&mut ci, &mut registry, "svc", "1.1")?);
    assert_eq!(ci.restore_to_vec(&ci.recipe(&r2.layer_id)?)?, layer);
    Ok(())
}
