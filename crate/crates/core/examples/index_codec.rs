//! Serialize a versioned index, read it back and check that it is canonical.
//!
//! Run with `cargo run --example index_codec`.

use cdmt::{cdmt_deserialize, cdmt_serialize, strong_hash, CdmtConfig, CdmtTree, Error};

fn main() -> cdmt::Result<()> {
    let leaves: Vec<_> = (0..5000u32)
        .map(|i| strong_hash(&i.to_le_bytes()))
        .collect();
    let mut tree = CdmtTree::build(&leaves, &CdmtConfig::default())?;
    let v0 = tree.latest().unwrap().clone();
    let mut next = leaves.clone();
    next.truncate(4000);
    let v1 = tree.apply_branching_update(&v0, &next, "trimmed")?;

    let bytes = cdmt_serialize(&tree, &v1)?;
    println!(
        "{} leaves, {} index bytes ({:.1} per leaf)",
        next.len(),
        bytes.len(),
        bytes.len() as f64 / next.len() as f64
    );
    let back = cdmt_deserialize(&bytes)?;
    let id = back.latest().unwrap().clone();
    assert_eq!(back.root_id(id.ordinal)?, tree.root_id(v1.ordinal)?);
    assert_eq!(cdmt_serialize(&back, &id)?, bytes);

    let mut damaged = bytes.clone();
    damaged.truncate(bytes.len() - 3);
    match cdmt_deserialize(&damaged) {
        Err(Error::CorruptIndex { offset, reason }) => {
            println!("truncated copy rejected at byte {offset}: {reason}")
        }
        other => panic!("unexpected {other:?}"),
    }
    Ok(())
}
