//! Layering (in place, with per-node history) and branching (path copying)
//! versions in one tree, and resolving old versions afterwards.
//!
//! Run with `cargo run --example versioning`.

use cdmt::{strong_hash, CdmtConfig, CdmtTree, Fingerprint};

fn leaves(n: usize, salt: &str) -> Vec<Fingerprint> {
    (0..n)
        .map(|i| strong_hash(format!("{salt}{i}").as_bytes()))
        .collect()
}

fn main() -> cdmt::Result<()> {
    let cfg = CdmtConfig::default();
    let base = leaves(2000, "chunk");
    let mut tree = CdmtTree::build(&base, &cfg)?;
    let v0 = tree.latest().unwrap().clone();
    println!("base: {} nodes allocated", tree.allocated_nodes());

    let mut edited = base.clone();
    edited[1500] = strong_hash(b"rewritten");
    let layered = tree.apply_layering_update(&v0, &edited)?;
    println!(
        "layering {layered}: {} nodes, {} history entries",
        tree.allocated_nodes(),
        tree.history_entries()
    );

    let mut branch = base.clone();
    branch[10] = strong_hash(b"hotfix");
    let tagged = tree.apply_branching_update(&v0, &branch, "hotfix")?;
    println!("branching {tagged}: {} nodes", tree.allocated_nodes());

    for v in [&v0, &layered, &tagged] {
        let same = tree.leaves(v.ordinal)?;
        println!(
            "{v}: root {}, {} leaves",
            &tree.root_id(v.ordinal)?.to_hex()[..16],
            same.len()
        );
    }
    assert_eq!(tree.leaves(v0.ordinal)?, base);
    assert_eq!(tree.leaves(layered.ordinal)?, edited);
    assert_eq!(tree.leaves(tagged.ordinal)?, branch);
    Ok(())
}
