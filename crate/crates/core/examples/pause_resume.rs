//! Attacker that waits out store resets; shows how many epochs a trace needs.

use blacklight::config::{DetectorConfig, Salt};
use blacklight::fingerprint::Dims;
use blacklight::simulator::{pause_resume, ExperimentSpec, TraceKind, TraceSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut spec = ExperimentSpec::new(DetectorConfig::new(Salt::from_seed(2)));
    spec.traces = (0..3)
        .map(|i| TraceSpec::new(TraceKind::ProbePair, 100, 12, i, Dims::CIFAR))
        .collect();
    for interval in [1, 3, 1000] {
        let report = pause_resume(&spec, interval)?;
        println!(
            "reset every {interval:>4}: cycles {:?} (mean {:.1}), {} queries submitted",
            report.cycles, report.mean_cycles, report.total_queries
        );
    }
    Ok(())
}
