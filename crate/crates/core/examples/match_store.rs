//! Insert fingerprints into the store and look up near duplicates.

use blacklight::config::{DetectorConfig, Salt};
use blacklight::fingerprint::{fingerprint, Dims};
use blacklight::simulator::{gen_benign, trace_images, TraceKind, TraceSpec};
use blacklight::store::FingerprintIndex;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = DetectorConfig::new(Salt::from_seed(3));
    let mut index = FingerprintIndex::new(cfg.threshold, cfg.salt);

    for rec in gen_benign(500, Dims::CIFAR, 11) {
        index.insert(&fingerprint(&rec.image, &cfg)?)?;
    }
    println!(
        "stored {} fingerprints, {} distinct digests",
        index.count(),
        index.distinct_digests()
    );

    let trace = trace_images(&TraceSpec::new(TraceKind::ProbePair, 6, 12, 5, Dims::CIFAR))?;
    for (step, img) in trace.iter().enumerate() {
        let hit = index.check_and_insert(&fingerprint(img, &cfg)?)?;
        println!(
            "probe step {step}: overlap {:>2} best {:?} flagged {}",
            hit.max_overlap, hit.best_match, hit.flagged
        );
    }

    index.reset(Salt::from_seed(4));
    println!(
        "after reset: {} stored, epoch {}",
        index.count(),
        index.epoch()
    );
    Ok(())
}
