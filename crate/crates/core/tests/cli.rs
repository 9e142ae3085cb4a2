//! The command-line binary end to end.

use std::collections::HashSet;
use std::path::Path;
use std::process::{Command, Output};

use cdmt::{chunk_bytes, ChunkerConfig};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cdmt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdmt"))
        .args(args)
        .env_remove("CDMT_REGISTRY")
        .env_remove("CDMT_CONFIG")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = cdmt(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_random(path: &Path, seed: u64, n: usize) -> Vec<u8> {
    let mut v = vec![0u8; n];
    ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut v);
    std::fs::write(path, &v).unwrap();
    v
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn ingest_restore_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let st = dir.path().join("store");
    let layer = dir.path().join("layer.bin");
    let data = write_random(&layer, 1, 1_500_000);
    ok(&["init", s(&st)]);
    let id = ok(&["ingest", s(&st), s(&layer)]).trim().to_string();
    let out = dir.path().join("out.bin");
    ok(&["restore", s(&st), &id, s(&out)]);
    assert_eq!(std::fs::read(&out).unwrap(), data);

    // Re-ingesting stores nothing new.
    let v: serde_json::Value =
        serde_json::from_str(&ok(&["--json", "ingest", s(&st), s(&layer)])).unwrap();
    assert_eq!(v["layers"][0]["new_chunks"], 0);
    assert_eq!(v["layers"][0]["layer_id"], id.as_str());
}

#[test]
fn compare_matches_brute_force_diff() {
    let dir = tempfile::tempdir().unwrap();
    let st = dir.path().join("store");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let da = write_random(&a, 2, 3_000_000);
    let mut db = da.clone();
    db.splice(2_000_000..2_000_000, *b"inserted bytes");
    db.truncate(2_600_000);
    std::fs::write(&b, &db).unwrap();
    ok(&["init", s(&st)]);
    ok(&["ingest", s(&st), s(&a), "--image", "app:v1"]);
    ok(&[
        "ingest",
        s(&st),
        s(&b),
        "--image",
        "app:v2",
        "--parent",
        "v1",
    ]);
    let v: serde_json::Value =
        serde_json::from_str(&ok(&["compare", s(&st), "app:v1", "app:v2", "--json"])).unwrap();
    let got: HashSet<String> = v["missing"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_str().unwrap().to_string())
        .collect();

    let cfg = ChunkerConfig::default();
    let old: HashSet<_> = chunk_bytes(&da, &cfg)
        .unwrap()
        .into_iter()
        .map(|c| c.fp)
        .collect();
    let want: HashSet<String> = chunk_bytes(&db, &cfg)
        .unwrap()
        .into_iter()
        .filter(|c| !old.contains(&c.fp))
        .map(|c| c.fp.to_hex())
        .collect();
    assert_eq!(got, want);
    assert_eq!(v["missing"].as_array().unwrap().len(), want.len());
}

#[test]
fn exit_codes_and_usage() {
    let out = cdmt(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(cdmt(&["--help"]).status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let st = dir.path().join("store");
    ok(&["init", s(&st)]);
    let out = cdmt(&[
        "--json",
        "restore",
        s(&st),
        "nope:v1",
        s(&dir.path().join("x")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["exit_code"], 1);

    // A damaged chunk is an integrity failure.
    let layer = dir.path().join("l");
    write_random(&layer, 3, 200_000);
    let id = ok(&["ingest", s(&st), s(&layer)]).trim().to_string();
    let seg = st.join("segments").join("0000.log");
    let mut bytes = std::fs::read(&seg).unwrap();
    let n = bytes.len();
    bytes[n - 10] ^= 0xff;
    std::fs::write(&seg, bytes).unwrap();
    std::fs::write(dir.path().join("paranoid.conf"), "paranoid = true\n").unwrap();
    let conf = dir.path().join("paranoid.conf");
    let out = cdmt(&[
        "--config",
        s(&conf),
        "restore",
        s(&st),
        &id,
        s(&dir.path().join("y")),
    ]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    // Nothing listens here: a transfer failure.
    let out = cdmt(&[
        "pull",
        "--store",
        s(&dir.path().join("c")),
        "tcp://127.0.0.1:1",
        "a:b",
    ]);
    assert_eq!(out.status.code(), Some(3));
    let out = cdmt(&["pull", "--store", s(&dir.path().join("c")), "a:b"]);
    assert_eq!(out.status.code(), Some(1), "no registry configured");
}

#[test]
fn chunk_manifest_lines() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("f");
    let data = write_random(&f, 4, 400_000);
    let text = ok(&[
        "chunk",
        s(&f),
        "--mask-bits",
        "12",
        "--min",
        "1024",
        "--max",
        "32768",
        "--window",
        "16",
    ]);
    let mut next = 0u64;
    for line in text.lines() {
        let cols: Vec<&str> = line.split('\t').collect();
        assert_eq!(cols.len(), 3);
        assert_eq!(cols[0].parse::<u64>().unwrap(), next);
        let len: u64 = cols[1].parse().unwrap();
        assert!(len <= 32768);
        assert_eq!(cols[2].len(), 64);
        next += len;
    }
    assert_eq!(next, data.len() as u64);
    let fixed = ok(&["chunk", s(&f), "--fixed", "100000"]);
    assert_eq!(fixed.lines().count(), 4);
}

#[test]
fn push_pull_via_env_registry() {
    let dir = tempfile::tempdir().unwrap();
    let (dev, reg, other) = (
        dir.path().join("dev"),
        dir.path().join("reg"),
        dir.path().join("other"),
    );
    let layer = dir.path().join("l");
    let data = write_random(&layer, 5, 700_000);
    ok(&["init", s(&dev)]);
    ok(&["ingest", s(&dev), s(&layer), "--image", "tool:1"]);
    let out = Command::new(env!("CARGO_BIN_EXE_cdmt"))
        .args(["--json", "push", "--store", s(&dev), "tool:1"])
        .env("CDMT_REGISTRY", s(&reg))
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let r: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["direction"], "push");

    let first: serde_json::Value = serde_json::from_str(&ok(&[
        "--json",
        "pull",
        "--store",
        s(&other),
        s(&reg),
        "tool:1",
    ]))
    .unwrap();
    assert_eq!(first["chunks_skipped"], 0);
    let again: serde_json::Value = serde_json::from_str(&ok(&[
        "--json",
        "pull",
        "--store",
        s(&other),
        s(&reg),
        "tool:1",
    ]))
    .unwrap();
    assert_eq!(again["chunks_sent"], 0);
    let out = dir.path().join("o");
    ok(&["restore", s(&other), "tool:1", s(&out)]);
    assert_eq!(std::fs::read(out).unwrap(), data);

    let stats: serde_json::Value =
        serde_json::from_str(&ok(&["--json", "stats", s(&other)])).unwrap();
    assert_eq!(stats["versions"], 1);
    let ix = dir.path().join("ix");
    ok(&["build-index", s(&other), "tool:1", "--out", s(&ix)]);
    assert!(cdmt::cdmt_deserialize(&std::fs::read(ix).unwrap()).is_ok());
    let gc: serde_json::Value = serde_json::from_str(&ok(&["--json", "gc", s(&other)])).unwrap();
    assert_eq!(gc["reclaimed_bytes"], 0);
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.csv");
    ok(&[
        "bench",
        "--corpus",
        "synthetic:size=256K,versions=3",
        "--out",
        s(&out),
    ]);
    let text = std::fs::read_to_string(out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(cdmt::metrics::CSV_HEADER));
    assert_eq!(lines.next().unwrap().split(',').count(), 12);
}

#[test]
fn second_process_on_a_store_fails_fast() {
    let dir = tempfile::tempdir().unwrap();
    let st = dir.path().join("store");
    ok(&["init", s(&st)]);
    let held = cdmt::store::Store::open(&st, Default::default()).unwrap();
    let out = cdmt(&["stats", s(&st)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("locked"));
    drop(held);
    ok(&["stats", s(&st)]);
}

#[test]
fn config_file_sets_tree_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("c.conf");
    std::fs::write(&conf, "# tuned\ninternal_window = 8\nmax_fanout = 32\n").unwrap();
    let st = dir.path().join("store");
    let out = Command::new(env!("CARGO_BIN_EXE_cdmt"))
        .args(["init", s(&st)])
        .env("CDMT_CONFIG", s(&conf))
        .output()
        .unwrap();
    assert!(out.status.success());
    let store = cdmt::store::Store::open(&st, Default::default()).unwrap();
    assert_eq!(
        (
            store.cdmt_config().window_size,
            store.cdmt_config().max_fanout
        ),
        (8, 32)
    );
    std::fs::write(&conf, "bogus = 1\n").unwrap();
    assert_eq!(
        cdmt(&["--config", s(&conf), "stats", s(&st)]).status.code(),
        Some(1)
    );
}
