//! Push and pull over both registry backends.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;

use cdmt::metrics::{split_edit, SyntheticSpec};
use cdmt::store::{Store, StoreOptions};
use cdmt::transfer::{
    pull, push, read_frame, registry_serve, write_frame, DirRegistry, Opcode, Registry,
    TcpRegistry, PROTOCOL_VERSION,
};
use cdmt::{chunk_bytes, ChunkerConfig, Error, Fingerprint, VersionKind};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn store(p: &Path) -> Store {
    Store::init(p, &Default::default(), StoreOptions::default()).unwrap()
}

fn random(seed: u64, n: usize) -> Vec<u8> {
    let mut v = vec![0u8; n];
    ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut v);
    v
}

fn add_version(s: &mut Store, name: &str, tag: &str, parent: Option<&str>, layers: &[&[u8]]) {
    let ids = layers
        .iter()
        .map(|l| {
            s.ingest(*l, &ChunkerConfig::default())
                .unwrap()
                .recipe
                .layer_id
        })
        .collect();
    s.commit_version(name, tag, VersionKind::Branching, parent, ids)
        .unwrap();
}

/// Distinct chunks of `data`, with lengths, as seen by an independent chunking pass.
fn chunk_set(data: &[u8]) -> Vec<(Fingerprint, u64)> {
    let mut seen = HashSet::new();
    chunk_bytes(data, &ChunkerConfig::default())
        .unwrap()
        .into_iter()
        .filter(|c| seen.insert(c.fp))
        .map(|c| (c.fp, u64::from(c.length)))
        .collect()
}

#[test]
fn pulls_move_exactly_the_set_difference() {
    let dir = tempfile::tempdir().unwrap();
    let versions = "synthetic:seed=4,size=2M,versions=6,rate=0.1"
        .parse::<SyntheticSpec>()
        .unwrap()
        .generate();
    let mut dev = store(&dir.path().join("dev"));
    let mut reg = DirRegistry::new(dir.path().join("reg")).unwrap();
    for (i, v) in versions.iter().enumerate() {
        let parent = (i > 0).then(|| format!("v{}", i - 1));
        add_version(&mut dev, "app", &format!("v{i}"), parent.as_deref(), &[v]);
        push(&dev, &mut reg, "app", &format!("v{i}")).unwrap();
    }

    let mut client = store(&dir.path().join("client"));
    let mut held: HashSet<Fingerprint> = HashSet::new();
    // Skip versions so that some pulls bridge several edits.
    for i in [0usize, 2, 3, 5] {
        let tag = format!("v{i}");
        let set = chunk_set(&versions[i]);
        let oracle: u64 = set
            .iter()
            .filter(|(f, _)| !held.contains(f))
            .map(|(_, l)| l)
            .sum();
        let oracle_count = set.iter().filter(|(f, _)| !held.contains(f)).count();
        let r = pull(&mut client, &mut reg, "app", &tag).unwrap();
        assert_eq!(r.bytes_payload, oracle, "{tag}");
        assert_eq!(r.chunks_sent, oracle_count, "{tag}");
        let recipe_len = client
            .version_leaves(&client.version("app", &tag).unwrap().layers)
            .unwrap()
            .len();
        assert_eq!(r.chunks_sent + r.chunks_skipped, recipe_len);
        held.extend(set.iter().map(|(f, _)| *f));
        let again = pull(&mut client, &mut reg, "app", &tag).unwrap();
        assert_eq!((again.chunks_sent, again.bytes_payload), (0, 0));
        let layer = &client.version("app", &tag).unwrap().layers[0];
        assert_eq!(
            client
                .restore_to_vec(&client.recipe(layer).unwrap())
                .unwrap(),
            versions[i]
        );
    }
}

#[test]
fn pull_of_mostly_shared_version_sends_only_new_chunks() {
    let dir = tempfile::tempdir().unwrap();
    let mut dev = store(&dir.path().join("dev"));
    let v1 = random(1, 4 << 20);
    let mut v2 = v1.clone();
    // Rewrite about a tenth of the stream in one block.
    let fresh = random(2, v1.len() / 10);
    v2.splice(v1.len() / 2..v1.len() / 2 + fresh.len(), fresh);
    add_version(&mut dev, "img", "v1", None, &[&v1]);
    add_version(&mut dev, "img", "v2", Some("v1"), &[&v2]);
    let mut reg = DirRegistry::new(dir.path().join("reg")).unwrap();
    push(&dev, &mut reg, "img", "v1").unwrap();
    push(&dev, &mut reg, "img", "v2").unwrap();

    let mut client = store(&dir.path().join("c"));
    let first = pull(&mut client, &mut reg, "img", "v1").unwrap();
    assert_eq!(first.chunks_skipped, 0);
    let before: HashSet<Fingerprint> = chunk_set(&v1).into_iter().map(|(f, _)| f).collect();
    let oracle: u64 = chunk_set(&v2)
        .iter()
        .filter(|(f, _)| !before.contains(f))
        .map(|(_, l)| l)
        .sum();
    let second = pull(&mut client, &mut reg, "img", "v2").unwrap();
    assert_eq!(second.bytes_payload, oracle);
    assert!(second.chunks_skipped > 8 * second.chunks_sent);
}

#[test]
fn split_chunk_push_sends_two_chunks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ChunkerConfig::default();
    let v1 = random(3, 3 << 20);
    let v2 = (5..50)
        .find_map(|i| split_edit(&v1, &cfg, i).unwrap())
        .unwrap();
    let mut dev = store(&dir.path().join("dev"));
    add_version(&mut dev, "svc", "v1", None, &[&v1]);
    add_version(&mut dev, "svc", "v2", Some("v1"), &[&v2]);
    let mut reg = DirRegistry::new(dir.path().join("reg")).unwrap();
    let all = push(&dev, &mut reg, "svc", "v1").unwrap();
    assert_eq!(all.chunks_sent, chunk_set(&v1).len());
    let r = push(&dev, &mut reg, "svc", "v2").unwrap();
    assert_eq!(r.chunks_sent, 2);

    // A new tag over unchanged content moves no chunks.
    add_version(&mut dev, "svc", "v2-again", Some("v2"), &[&v2]);
    let r = push(&dev, &mut reg, "svc", "v2-again").unwrap();
    assert_eq!((r.chunks_sent, r.bytes_payload), (0, 0));
    assert!(r.bytes_index > 0);
    assert!(matches!(
        push(&dev, &mut reg, "svc", "v2"),
        Err(Error::TagConflict(_))
    ));
}

fn seeded_registry(root: &Path) -> Vec<u8> {
    let mut s = store(root);
    let data = random(8, 3 << 20);
    add_version(&mut s, "db", "1", None, &[&data, &data[..1 << 20]]);
    data
}

#[test]
fn tcp_and_directory_backends_report_identically() {
    let dir = tempfile::tempdir().unwrap();
    let data = seeded_registry(&dir.path().join("reg"));
    let local = {
        let mut c = store(&dir.path().join("local"));
        let mut reg = DirRegistry::new(dir.path().join("reg")).unwrap();
        pull(&mut c, &mut reg, "db", "1").unwrap()
    };
    let server = registry_serve(dir.path().join("reg"), "127.0.0.1:0").unwrap();
    let mut c = store(&dir.path().join("remote"));
    let mut reg = TcpRegistry::connect(server.local_addr()).unwrap();
    let remote = pull(&mut c, &mut reg, "db", "1").unwrap();
    assert_eq!(local, remote);
    let layer = &c.version("db", "1").unwrap().layers[0];
    assert_eq!(c.restore_to_vec(&c.recipe(layer).unwrap()).unwrap(), data);

    // Pushing the same image to both kinds of fresh registry also agrees.
    let via_dir = push(
        &c,
        &mut DirRegistry::new(dir.path().join("fresh")).unwrap(),
        "db",
        "1",
    )
    .unwrap();
    let server2 = registry_serve(dir.path().join("fresh2"), "127.0.0.1:0").unwrap();
    let via_tcp = push(
        &c,
        &mut TcpRegistry::connect(server2.local_addr()).unwrap(),
        "db",
        "1",
    )
    .unwrap();
    assert_eq!(via_dir, via_tcp);
    server.shutdown();
    server2.shutdown();
}

#[test]
fn concurrent_pulls_agree() {
    let dir = tempfile::tempdir().unwrap();
    seeded_registry(&dir.path().join("reg"));
    let server = registry_serve(dir.path().join("reg"), "127.0.0.1:0").unwrap();
    let addr = server.local_addr();
    let reports: Vec<_> = (0..4)
        .map(|i| {
            let root = dir.path().join(format!("c{i}"));
            std::thread::spawn(move || {
                let mut c = store(&root);
                pull(&mut c, &mut TcpRegistry::connect(addr).unwrap(), "db", "1").unwrap()
            })
        })
        .collect::<Vec<_>>()
        .into_iter()
        .map(|h| h.join().unwrap())
        .collect();
    assert!(reports.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn malformed_frame_gets_protocol_error_and_server_survives() {
    let dir = tempfile::tempdir().unwrap();
    seeded_registry(&dir.path().join("reg"));
    let server = registry_serve(dir.path().join("reg"), "127.0.0.1:0").unwrap();

    let mut raw = TcpStream::connect(server.local_addr()).unwrap();
    raw.write_all(b"JUNKJUNKJUNK").unwrap();
    let f = read_frame(&mut raw).unwrap();
    assert_eq!(f.op, Opcode::Err);
    assert_eq!(u16::from_le_bytes([f.payload[0], f.payload[1]]), 1);
    let mut rest = Vec::new();
    assert_eq!(
        raw.read_to_end(&mut rest).unwrap(),
        0,
        "connection should be closed"
    );

    // Skipping HELLO is also a protocol violation.
    let mut raw = TcpStream::connect(server.local_addr()).unwrap();
    write_frame(&mut raw, Opcode::Need, &0u32.to_le_bytes()).unwrap();
    assert_eq!(read_frame(&mut raw).unwrap().op, Opcode::Err);

    let mut c = store(&dir.path().join("c"));
    pull(
        &mut c,
        &mut TcpRegistry::connect(server.local_addr()).unwrap(),
        "db",
        "1",
    )
    .unwrap();
    assert!(matches!(
        pull(
            &mut c,
            &mut TcpRegistry::connect(server.local_addr()).unwrap(),
            "db",
            "9"
        ),
        Err(Error::NotFound(_))
    ));
}

#[test]
fn interrupted_push_leaves_registry_serving_old_versions() {
    let dir = tempfile::tempdir().unwrap();
    seeded_registry(&dir.path().join("reg"));
    let server = registry_serve(dir.path().join("reg"), "127.0.0.1:0").unwrap();
    let addr = server.local_addr();

    let mut dev = store(&dir.path().join("dev"));
    pull(
        &mut dev,
        &mut TcpRegistry::connect(addr).unwrap(),
        "db",
        "1",
    )
    .unwrap();
    add_version(&mut dev, "db", "2", Some("1"), &[&random(9, 1 << 20)]);
    let bundle = cdmt::transfer::make_bundle(&dev, "db", Some("2")).unwrap();
    let fps: Vec<Fingerprint> = dev
        .version_leaves(&dev.version("db", "2").unwrap().layers)
        .unwrap();

    // Abort after HELLO, after each CHUNKS frame, and halfway through COMMIT.
    for cut in 0..=fps.len() + 1 {
        let mut s = TcpStream::connect(addr).unwrap();
        write_frame(&mut s, Opcode::Hello, &PROTOCOL_VERSION.to_le_bytes()).unwrap();
        read_frame(&mut s).unwrap();
        for fp in fps.iter().take(cut) {
            let data = dev.read_chunk(fp).unwrap();
            let mut rec = fp.as_bytes().to_vec();
            rec.extend_from_slice(&(data.len() as u32).to_le_bytes());
            rec.extend_from_slice(&data);
            write_frame(&mut s, Opcode::Chunks, &rec).unwrap();
        }
        if cut == fps.len() + 1 {
            let mut partial = b"CDMT\x06".to_vec();
            partial.extend_from_slice(&(bundle.len() as u32).to_le_bytes());
            partial.extend_from_slice(&bundle[..bundle.len() / 2]);
            s.write_all(&partial).unwrap();
        }
        drop(s);
    }

    let mut c = store(&dir.path().join("after"));
    let mut reg = TcpRegistry::connect(addr).unwrap();
    pull(&mut c, &mut reg, "db", "1").unwrap();
    assert!(matches!(
        pull(&mut c, &mut reg, "db", "2"),
        Err(Error::NotFound(_))
    ));
    // And a complete push still goes through.
    let r = push(&dev, &mut TcpRegistry::connect(addr).unwrap(), "db", "2").unwrap();
    assert_eq!(r.chunks_skipped + r.chunks_sent, fps.len());
    pull(&mut c, &mut reg, "db", "2").unwrap();
}

/// Serves a real bundle but flips a byte in every chunk.
struct Tampering(DirRegistry);

impl Registry for Tampering {
    fn get_index(&mut self, name: &str, tag: Option<&str>) -> cdmt::Result<Vec<u8>> {
        self.0.get_index(name, tag)
    }

    fn fetch_chunks(
        &mut self,
        fps: &[Fingerprint],
        sink: &mut dyn FnMut(Fingerprint, Vec<u8>) -> cdmt::Result<()>,
    ) -> cdmt::Result<()> {
        self.0.fetch_chunks(fps, &mut |fp, mut data| {
            data[0] ^= 1;
            sink(fp, data)
        })
    }

    fn push(
        &mut self,
        fps: &[Fingerprint],
        source: &mut dyn FnMut(&Fingerprint) -> cdmt::Result<Vec<u8>>,
        bundle: &[u8],
    ) -> cdmt::Result<()> {
        self.0.push(fps, source, bundle)
    }
}

#[test]
fn tampered_chunks_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    seeded_registry(&dir.path().join("reg"));
    let mut reg = Tampering(DirRegistry::new(dir.path().join("reg")).unwrap());
    let mut c = store(&dir.path().join("c"));
    assert!(matches!(
        pull(&mut c, &mut reg, "db", "1"),
        Err(Error::Integrity(_))
    ));
    assert!(c.version("db", "1").is_err());
}

#[test]
fn lost_connection_is_retriable() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let t = std::thread::spawn(move || drop(listener.accept()));
    let err = TcpRegistry::connect(addr)
        .err()
        .expect("connection should fail");
    t.join().unwrap();
    assert!(matches!(err, Error::Transfer(_)));
    assert!(err.is_retriable());
}
