//! End-to-end experiment: each attack family mixed with benign traffic.

use blacklight::config::{DetectorConfig, Salt};
use blacklight::fingerprint::Dims;
use blacklight::simulator::{run_experiment, ExperimentSpec, TraceKind, TraceSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for kind in [
        TraceKind::ProbePair,
        TraceKind::Interpolation,
        TraceKind::PatchFlip,
    ] {
        let mut spec = ExperimentSpec::new(DetectorConfig::new(Salt::from_seed(1)));
        spec.benign_count = 300;
        spec.traces = (0..4)
            .map(|i| TraceSpec::new(kind, 100, 12, 40 + i, Dims::CIFAR))
            .collect();
        let r = run_experiment(&spec)?;
        println!(
            "{:<14} detected {:.2} coverage {:.3} queries-to-detect {:?} fpr {}",
            kind.to_string(),
            r.attack_detection_rate,
            r.mean_coverage,
            r.mean_queries_to_detect,
            r.false_positive_rate
        );
    }
    Ok(())
}
