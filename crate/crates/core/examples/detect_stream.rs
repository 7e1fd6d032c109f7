//! Run the stateful detector over a mixed stream and print the report.

use blacklight::config::{DetectorConfig, Salt};
use blacklight::detector::{compute_metrics, Detector, Label, Mitigation};
use blacklight::fingerprint::Dims;
use blacklight::simulator::{gen_attack_trace, gen_benign, interleave, TraceKind, TraceSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let traces = (1..=3)
        .map(|id| {
            gen_attack_trace(
                &TraceSpec::new(TraceKind::ProbePair, 80, 12, id as u64, Dims::CIFAR),
                id,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    let stream = interleave(gen_benign(400, Dims::CIFAR, 21), traces, 22);

    let mut detector = Detector::seeded(
        DetectorConfig::new(Salt::from_seed(0)),
        Mitigation::Reject,
        0,
    )?;
    let verdicts = detector.process_stream(&stream);
    let labels: Vec<Label> = stream.iter().map(|r| r.label).collect();
    let report = compute_metrics(&verdicts, &labels)?;
    println!("{}", report.to_json());
    Ok(())
}
