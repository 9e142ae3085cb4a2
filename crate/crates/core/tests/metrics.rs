use cdmt::metrics::{
    common_node_ratio, split_edit, timing_best, timing_report, trimmed_spread, SyntheticSpec,
};
use cdmt::{chunk_bytes, CdmtConfig, ChunkerConfig, Fingerprint};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Mutex;

// Wall-clock tests must not share the CPU with each other.
static SERIAL: Mutex<()> = Mutex::new(());

fn fps(data: &[u8], cfg: &ChunkerConfig) -> Vec<Fingerprint> {
    chunk_bytes(data, cfg)
        .unwrap()
        .into_iter()
        .map(|c| c.fp)
        .collect()
}

#[test]
fn chunk_splits_never_favor_positional_merkle() {
    let _serial = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let cfg = ChunkerConfig::default();
    let tree_cfg = CdmtConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut trials = 0;
    while trials < 100 {
        let mut data = vec![0u8; rng.gen_range(256 << 10..2 << 20)];
        rng.fill_bytes(&mut data);
        let n = chunk_bytes(&data, &cfg).unwrap().len();
        let Some(edited) = split_edit(&data, &cfg, rng.gen_range(0..n)).unwrap() else {
            continue;
        };
        trials += 1;
        let c = common_node_ratio(&fps(&edited, &cfg), &fps(&data, &cfg), &tree_cfg).unwrap();
        assert!(
            c.cdmt >= c.merkle_position,
            "trial {trials}: cdmt {} < merkle {}",
            c.cdmt,
            c.merkle_position
        );
    }
}

#[test]
fn index_build_is_cheaper_than_hashing() {
    let _serial = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let versions = "synthetic:seed=5,size=100M,versions=1"
        .parse::<SyntheticSpec>()
        .unwrap()
        .generate();
    let t = timing_report(&versions, &ChunkerConfig::default(), &CdmtConfig::default()).unwrap();
    assert!(t.index_seconds < t.hash_seconds, "{t:?}");
}

#[test]
fn repeated_timing_runs_are_stable() {
    let _serial = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let versions = "synthetic:seed=6,size=16M,versions=4"
        .parse::<SyntheticSpec>()
        .unwrap()
        .generate();
    let runs: Vec<f64> = (0..5)
        .map(|_| {
            timing_best(
                &versions,
                &ChunkerConfig::default(),
                &CdmtConfig::default(),
                9,
            )
            .unwrap()
            .hash_seconds
        })
        .collect();
    let spread = trimmed_spread(&runs);
    println!("timing spread {spread:.3} over {runs:?}");
    assert!(spread < 0.20, "spread {spread} over {runs:?}");
}
