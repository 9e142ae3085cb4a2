//! Ingest layers into a chunk store, record image versions, restore and
//! reclaim unused chunks.
//!
//! Run with `cargo run --example dedup_store`.

use cdmt::store::{Store, StoreOptions};
use cdmt::{ChunkerConfig, VersionKind};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> cdmt::Result<()> {
    let dir = tempfile::tempdir()?;
    let mut store = Store::init(dir.path(), &Default::default(), StoreOptions::default())?;
    let cfg = ChunkerConfig::default();

    let mut base = vec![0u8; 6 << 20];
    ChaCha8Rng::seed_from_u64(5).fill_bytes(&mut base);
    let mut app = base[..2 << 20].to_vec();
    let first = store.ingest(&base[..], &cfg)?;
    let second = store.ingest(&app[..], &cfg)?;
    println!(
        "layer 1: {} new chunks; layer 2: {} new, {} already stored",
        first.new_chunks, second.new_chunks, second.dup_chunks
    );
    let id1 = first.recipe.layer_id.clone();
    store.commit_version(
        "web",
        "v1",
        VersionKind::Branching,
        None,
        vec![id1.clone(), second.recipe.layer_id],
    )?;

    app.extend_from_slice(b"v2 adds a config file");
    let third = store.ingest(&app[..], &cfg)?;
    store.commit_version(
        "web",
        "v2",
        VersionKind::Branching,
        Some("v1"),
        vec![id1, third.recipe.layer_id.clone()],
    )?;

    let restored = store.restore_to_vec(&third.recipe)?;
    assert_eq!(restored, app);
    let st = store.stats()?;
    println!(
        "{} chunks, {} bytes stored for {} logical bytes",
        st.chunks, st.stored_bytes, st.logical_bytes
    );

    store.remove_version("web", "v2")?;
    let live = store.all_versions();
    println!("gc reclaimed {} bytes", store.gc(&live)?);
    Ok(())
}
