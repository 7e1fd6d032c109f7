//! Store lookup latency as the store grows.

use blacklight::bench::{run_bench, write_bench_csv, BenchConfig};
use blacklight::config::{DetectorConfig, Salt};
use blacklight::fingerprint::Dims;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let rows = run_bench(&BenchConfig {
        detector: DetectorConfig::new(Salt::from_seed(0)),
        dims: Dims::CIFAR,
        sizes: vec![1_000, 10_000, 50_000],
        queries: 500,
        threads: None,
        seed: 1,
    })?;
    write_bench_csv(std::io::stdout().lock(), &rows)?;
    Ok(())
}
