//! Dedup, compression and tree metrics over a seeded synthetic corpus,
//! printed as CSV.
//!
//! Run with `cargo run --release --example metrics_bench`.

use cdmt::metrics::{bench, SyntheticSpec, CSV_HEADER};
use cdmt::{CdmtConfig, ChunkerConfig};

fn main() -> cdmt::Result<()> {
    println!("{CSV_HEADER}");
    for rate in [0.01, 0.05, 0.2] {
        let spec = SyntheticSpec {
            rate,
            ..Default::default()
        };
        let versions = spec.generate();
        let row = bench(
            &format!("rate={rate}"),
            &versions,
            &ChunkerConfig::default(),
            &CdmtConfig::default(),
        )?;
        println!("{}", row.csv_line());
    }
    Ok(())
}
