//! Latency and storage benchmark for the fingerprint store.

use std::io::{self, Write};
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::config::DetectorConfig;
use crate::fingerprint::{
    fingerprint, Dims, Fingerprint, FingerprintError, HashDigest, DIGEST_LEN,
};
use crate::simulator::gen_benign;
use crate::store::{FingerprintIndex, SharedIndex, StoreError};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Fingerprint(#[from] FingerprintError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("thread count must be at least 1")]
    NoThreads,
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub detector: DetectorConfig,
    pub dims: Dims,
    /// Store sizes to measure at.
    pub sizes: Vec<usize>,
    /// Fresh queries timed per size.
    pub queries: usize,
    /// Issue queries from this many threads against a shared store.
    pub threads: Option<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub n: usize,
    /// Thread index, or `all` for the aggregate.
    pub thread: String,
    pub queries: usize,
    pub mean_us: f64,
    pub p99_us: f64,
    /// Digest payload per stored fingerprint.
    pub bytes_per_fingerprint: f64,
}

/// A fingerprint of `size` uniform random digests, standing in for a stored query.
pub fn random_fingerprint<R: RngCore>(rng: &mut R, size: usize) -> Fingerprint {
    let mut digests: Vec<HashDigest> = (0..size)
        .map(|_| {
            let mut d = [0u8; DIGEST_LEN];
            rng.fill_bytes(&mut d);
            HashDigest(d)
        })
        .collect();
    digests.sort_unstable_by(|a, b| b.cmp(a));
    digests.dedup();
    Fingerprint::from_sorted(digests, size).expect("random digests are distinct")
}

/// A store holding `n` random fingerprints, sized for `extra` more.
pub fn prefilled_index(
    cfg: &DetectorConfig,
    n: usize,
    extra: usize,
    seed: u64,
) -> Result<FingerprintIndex, StoreError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut index = FingerprintIndex::with_capacity(
        cfg.threshold,
        cfg.salt,
        (n + extra) * cfg.fingerprint_size,
    )
    .with_max_fingerprints(cfg.max_fingerprints);
    for _ in 0..n {
        index.insert(&random_fingerprint(&mut rng, cfg.fingerprint_size))?;
    }
    Ok(index)
}

fn summarize(
    n: usize,
    thread: String,
    mut micros: Vec<f64>,
    bytes_per_fingerprint: f64,
) -> BenchRow {
    micros.sort_by(f64::total_cmp);
    let queries = micros.len();
    let mean_us = if queries == 0 {
        0.0
    } else {
        micros.iter().sum::<f64>() / queries as f64
    };
    let p99_us = if queries == 0 {
        0.0
    } else {
        micros[((queries as f64 * 0.99).ceil() as usize).clamp(1, queries) - 1]
    };
    BenchRow {
        n,
        thread,
        queries,
        mean_us,
        p99_us,
        bytes_per_fingerprint,
    }
}

fn payload_per_fingerprint(index: &FingerprintIndex) -> f64 {
    if index.count() == 0 {
        0.0
    } else {
        (index.stored_digests() as usize * DIGEST_LEN) as f64 / index.count() as f64
    }
}

/// For each store size, prefills a store and times `check_and_insert` on
/// fingerprints of fresh benign images. Fingerprinting itself is not timed.
pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRow>, BenchError> {
    let probes: Vec<Fingerprint> = gen_benign(cfg.queries, cfg.dims, cfg.seed ^ 0x5eed)
        .iter()
        .map(|r| fingerprint(&r.image, &cfg.detector))
        .collect::<Result<_, _>>()?;
    let mut rows = Vec::new();
    for &n in &cfg.sizes {
        let mut index = prefilled_index(
            &cfg.detector,
            n,
            cfg.queries,
            cfg.seed.wrapping_add(n as u64),
        )?;
        match cfg.threads {
            None => {
                let mut micros = Vec::with_capacity(probes.len());
                for fp in &probes {
                    let start = Instant::now();
                    index.check_and_insert(fp)?;
                    micros.push(start.elapsed().as_secs_f64() * 1e6);
                }
                let bytes = payload_per_fingerprint(&index);
                rows.push(summarize(n, "all".into(), micros, bytes));
            }
            Some(0) => return Err(BenchError::NoThreads),
            Some(threads) => {
                let shared = SharedIndex::new(index);
                let chunk = probes.len().div_ceil(threads).max(1);
                let per_thread: Vec<Result<Vec<f64>, StoreError>> = std::thread::scope(|s| {
                    let handles: Vec<_> = probes
                        .chunks(chunk)
                        .map(|part| {
                            let shared = &shared;
                            s.spawn(move || {
                                let mut micros = Vec::with_capacity(part.len());
                                for fp in part {
                                    let start = Instant::now();
                                    shared.check_and_insert(fp)?;
                                    micros.push(start.elapsed().as_secs_f64() * 1e6);
                                }
                                Ok(micros)
                            })
                        })
                        .collect();
                    handles
                        .into_iter()
                        .map(|h| h.join().expect("bench thread"))
                        .collect()
                });
                index = shared.into_inner();
                let bytes = payload_per_fingerprint(&index);
                let mut all = Vec::new();
                for (t, micros) in per_thread.into_iter().enumerate() {
                    let micros = micros?;
                    all.extend_from_slice(&micros);
                    rows.push(summarize(n, t.to_string(), micros, bytes));
                }
                rows.push(summarize(n, "all".into(), all, bytes));
            }
        }
    }
    Ok(rows)
}

pub fn write_bench_csv<W: Write>(mut out: W, rows: &[BenchRow]) -> io::Result<()> {
    writeln!(out, "n,thread,queries,mean_us,p99_us,bytes_per_fingerprint")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{:.3},{:.3},{}",
            r.n, r.thread, r.queries, r.mean_us, r.p99_us, r.bytes_per_fingerprint
        )?;
    }
    Ok(())
}
