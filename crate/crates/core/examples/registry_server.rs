//! Serve a directory over TCP and pull from it twice in parallel.
//!
//! Run with `cargo run --example registry_server`.

use std::thread;

use cdmt::store::{Store, StoreOptions};
use cdmt::transfer::{pull, registry_serve, TcpRegistry};
use cdmt::{ChunkerConfig, VersionKind};

fn main() -> cdmt::Result<()> {
    let dir = tempfile::tempdir()?;
    let reg_dir = dir.path().join("registry");
    {
        let mut s = Store::init(&reg_dir, &Default::default(), StoreOptions::default())?;
        let data: Vec<u8> = (0..3_000_000u32)
            .map(|i| (i.wrapping_mul(2_654_435_761) >> 13) as u8)
            .collect();
        let r = s.ingest(&data[..], &ChunkerConfig::default())?.recipe;
        s.commit_version("db", "15", VersionKind::Branching, None, vec![r.layer_id])?;
    }

    let server = registry_serve(&reg_dir, "127.0.0.1:0")?;
    let addr = server.local_addr();
    println!("listening on {addr}");

    let handles: Vec<_> = (0..2)
        .map(|i| {
            let root = dir.path().join(format!("client{i}"));
            thread::spawn(move || -> cdmt::Result<_> {
                let mut client = Store::init(root, &Default::default(), StoreOptions::default())?;
                let mut reg = TcpRegistry::connect(addr)?;
                pull(&mut client, &mut reg, "db", "15")
            })
        })
        .collect();
    for h in handles {
        println!("{:?}", h.join().expect("client thread")?);
    }
    server.shutdown();
    Ok(())
}
