//! End-to-end detection: fingerprint each query, match it against prior
//! queries, reject matches, and score labeled streams.

use std::collections::BTreeMap;
use std::io::{self, Write};
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use thiserror::Error;

use crate::config::{DetectorConfig, ResetPolicy, Salt, SALT_LEN};
use crate::fingerprint::{fingerprint, QueryImage};
use crate::store::{FingerprintIndex, QueryId};

/// Ground truth attached to a query in a labeled stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Label {
    Benign,
    Attack { trace_id: u32, step: u32 },
}

impl Label {
    pub fn is_attack(&self) -> bool {
        matches!(self, Label::Attack { .. })
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Label::Benign => f.write_str("benign"),
            Label::Attack { trace_id, step } => write!(f, "attack:{trace_id}:{step}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryRecord {
    pub image: QueryImage,
    pub label: Label,
    pub timestamp: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Action {
    Forwarded,
    Rejected,
    /// The query could not be fingerprinted (e.g. smaller than one window).
    Invalid,
}

impl Action {
    pub fn as_str(&self) -> &'static str {
        match self {
            Action::Forwarded => "forwarded",
            Action::Rejected => "rejected",
            Action::Invalid => "invalid",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Verdict {
    /// Timestamp of the record this verdict is for.
    pub timestamp: u64,
    /// Store epoch the query was matched in.
    pub epoch: u32,
    pub flagged: bool,
    pub overlap: usize,
    pub best_match: Option<QueryId>,
    pub action: Action,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mitigation {
    /// Drop every flagged query.
    #[default]
    Reject,
    /// Detection only; flagged queries still reach the model.
    Off,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DetectError {
    #[error("{verdicts} verdicts but only {labels} labels")]
    MissingLabels { verdicts: usize, labels: usize },
    #[error("trace {trace_id} has non-increasing step indices")]
    NonMonotonicTrace { trace_id: u32 },
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
}

/// Where fresh salts come from on reset.
#[derive(Debug, Clone)]
enum SaltSource {
    Os,
    Seeded(Box<ChaCha20Rng>),
}

impl SaltSource {
    fn next(&mut self) -> Salt {
        match self {
            SaltSource::Os => Salt::random(),
            SaltSource::Seeded(rng) => {
                let mut b = [0u8; SALT_LEN];
                rng.fill_bytes(&mut b);
                Salt(b)
            }
        }
    }
}

/// Stateful detector: one fingerprint store plus the reset schedule.
#[derive(Debug, Clone)]
pub struct Detector {
    cfg: DetectorConfig,
    store: FingerprintIndex,
    mitigation: Mitigation,
    insert_flagged: bool,
    salts: SaltSource,
    epoch_queries: u64,
    epoch_started: Instant,
}

impl Detector {
    /// Detector whose reset salts come from the OS RNG.
    pub fn new(cfg: DetectorConfig, mitigation: Mitigation) -> Result<Self, DetectError> {
        Self::build(cfg, mitigation, SaltSource::Os)
    }

    /// Detector whose reset salts are derived from `salt_seed`, for reproducible runs.
    pub fn seeded(
        cfg: DetectorConfig,
        mitigation: Mitigation,
        salt_seed: u64,
    ) -> Result<Self, DetectError> {
        Self::build(
            cfg,
            mitigation,
            SaltSource::Seeded(Box::new(ChaCha20Rng::seed_from_u64(salt_seed))),
        )
    }

    fn build(
        cfg: DetectorConfig,
        mitigation: Mitigation,
        salts: SaltSource,
    ) -> Result<Self, DetectError> {
        cfg.validate()?;
        let store = FingerprintIndex::new(cfg.threshold, cfg.salt)
            .with_max_fingerprints(cfg.max_fingerprints);
        Ok(Detector {
            cfg,
            store,
            mitigation,
            insert_flagged: true,
            salts,
            epoch_queries: 0,
            epoch_started: Instant::now(),
        })
    }

    /// When false, flagged fingerprints are not stored (flag-and-drop).
    pub fn with_insert_flagged(mut self, insert_flagged: bool) -> Self {
        self.insert_flagged = insert_flagged;
        self
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn store(&self) -> &FingerprintIndex {
        &self.store
    }

    pub fn epoch(&self) -> u32 {
        self.store.epoch()
    }

    /// Clears the store and installs a fresh salt.
    pub fn reset(&mut self) {
        let salt = self.salts.next();
        self.store.reset(salt);
        self.epoch_queries = 0;
        self.epoch_started = Instant::now();
    }

    fn reset_due(&self) -> bool {
        match self.cfg.reset {
            ResetPolicy::Never => false,
            ResetPolicy::EveryQueries(n) => self.epoch_queries >= n,
            ResetPolicy::Every(period) => self.epoch_started.elapsed() >= period,
        }
    }

    pub fn process(&mut self, record: &QueryRecord) -> Verdict {
        if self.reset_due() {
            self.reset();
        }
        self.epoch_queries += 1;

        let mut cfg = self.cfg.clone();
        cfg.salt = *self.store.salt();
        let outcome = fingerprint(&record.image, &cfg)
            .map_err(|e| e.to_string())
            .and_then(|fp| {
                self.store
                    .check_and_maybe_insert(&fp, self.insert_flagged)
                    .map_err(|e| e.to_string())
            });

        match outcome {
            Ok(m) => Verdict {
                timestamp: record.timestamp,
                epoch: self.store.epoch(),
                flagged: m.flagged,
                overlap: m.max_overlap,
                best_match: m.best_match,
                action: if m.flagged && self.mitigation == Mitigation::Reject {
                    Action::Rejected
                } else {
                    Action::Forwarded
                },
                error: None,
            },
            Err(e) => Verdict {
                timestamp: record.timestamp,
                epoch: self.store.epoch(),
                flagged: false,
                overlap: 0,
                best_match: None,
                action: Action::Invalid,
                error: Some(e),
            },
        }
    }

    pub fn process_stream(&mut self, stream: &[QueryRecord]) -> Vec<Verdict> {
        stream.iter().map(|r| self.process(r)).collect()
    }
}

/// Runs a fresh detector over `stream`. Reset salts come from `salt_seed`.
pub fn process_stream(
    stream: &[QueryRecord],
    cfg: &DetectorConfig,
    mitigation: Mitigation,
    salt_seed: u64,
) -> Result<Vec<Verdict>, DetectError> {
    let mut det = Detector::seeded(cfg.clone(), mitigation, salt_seed)?;
    Ok(det.process_stream(stream))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceReport {
    pub trace_id: u32,
    pub length: u64,
    pub flagged: u64,
    pub forwarded: u64,
    pub required_progress: u64,
    /// Some query other than the final one was flagged.
    pub attack_detected: bool,
    /// 1-based position of the first flagged query within the trace.
    pub queries_to_detect: Option<u64>,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionReport {
    pub per_trace: Vec<TraceReport>,
    pub attack_detection_rate: f64,
    pub mean_queries_to_detect: Option<f64>,
    pub mean_coverage: f64,
    pub false_positive_rate: f64,
    pub attack_success_with_mitigation: f64,
    pub benign_total: u64,
    pub benign_flagged: u64,
}

/// Scores verdicts against labels; every trace must forward its full length to succeed.
pub fn compute_metrics(
    verdicts: &[Verdict],
    labels: &[Label],
) -> Result<DetectionReport, DetectError> {
    compute_metrics_with_budgets(verdicts, labels, &BTreeMap::new())
}

/// As [`compute_metrics`], with per-trace forwarded-query budgets. Traces
/// missing from `budgets` need their full length forwarded.
pub fn compute_metrics_with_budgets(
    verdicts: &[Verdict],
    labels: &[Label],
    budgets: &BTreeMap<u32, u64>,
) -> Result<DetectionReport, DetectError> {
    if labels.len() < verdicts.len() {
        return Err(DetectError::MissingLabels {
            verdicts: verdicts.len(),
            labels: labels.len(),
        });
    }

    let mut benign_total = 0u64;
    let mut benign_flagged = 0u64;
    // trace id -> (step, flagged, forwarded) in stream order
    let mut traces: BTreeMap<u32, Vec<(u32, bool, bool)>> = BTreeMap::new();
    for (v, label) in verdicts.iter().zip(labels) {
        match *label {
            Label::Benign => {
                benign_total += 1;
                benign_flagged += u64::from(v.flagged);
            }
            Label::Attack { trace_id, step } => {
                traces.entry(trace_id).or_default().push((
                    step,
                    v.flagged,
                    v.action == Action::Forwarded,
                ));
            }
        }
    }

    let mut per_trace = Vec::with_capacity(traces.len());
    for (trace_id, steps) in traces {
        if steps.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(DetectError::NonMonotonicTrace { trace_id });
        }
        let length = steps.len() as u64;
        let flagged = steps.iter().filter(|s| s.1).count() as u64;
        let forwarded = steps.iter().filter(|s| s.2).count() as u64;
        let first = steps.iter().position(|s| s.1).map(|i| i as u64 + 1);
        per_trace.push(TraceReport {
            trace_id,
            length,
            flagged,
            forwarded,
            required_progress: budgets.get(&trace_id).copied().unwrap_or(length),
            attack_detected: first.is_some_and(|p| p < length),
            queries_to_detect: first,
            coverage: flagged as f64 / length as f64,
        });
    }

    let n = per_trace.len() as f64;
    let frac = |count: usize| {
        if per_trace.is_empty() {
            0.0
        } else {
            count as f64 / n
        }
    };
    let detected: Vec<&TraceReport> = per_trace.iter().filter(|t| t.attack_detected).collect();
    let mean_queries_to_detect = if detected.is_empty() {
        None
    } else {
        Some(
            detected
                .iter()
                .filter_map(|t| t.queries_to_detect)
                .sum::<u64>() as f64
                / detected.len() as f64,
        )
    };
    let mean_coverage = if per_trace.is_empty() {
        0.0
    } else {
        per_trace.iter().map(|t| t.coverage).sum::<f64>() / n
    };

    Ok(DetectionReport {
        attack_detection_rate: frac(detected.len()),
        mean_queries_to_detect,
        mean_coverage,
        false_positive_rate: if benign_total == 0 {
            0.0
        } else {
            benign_flagged as f64 / benign_total as f64
        },
        attack_success_with_mitigation: frac(
            per_trace
                .iter()
                .filter(|t| t.forwarded >= t.required_progress)
                .count(),
        ),
        benign_total,
        benign_flagged,
        per_trace,
    })
}

impl DetectionReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per trace and a final `ALL` row with the stream-level aggregates.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "trace_id,detected,queries_to_detect,coverage")?;
        for t in &self.per_trace {
            writeln!(
                out,
                "{},{},{},{}",
                t.trace_id,
                t.attack_detected,
                t.queries_to_detect
                    .map(|q| q.to_string())
                    .unwrap_or_default(),
                t.coverage
            )?;
        }
        writeln!(
            out,
            "ALL,{},{},{}",
            self.attack_detection_rate,
            self.mean_queries_to_detect
                .map(|q| q.to_string())
                .unwrap_or_default(),
            self.mean_coverage
        )
    }
}

/// Verdict log: `timestamp,label,flagged,overlap,action,epoch`.
pub fn write_verdict_log<W: Write>(
    mut out: W,
    verdicts: &[Verdict],
    labels: &[Label],
) -> io::Result<()> {
    writeln!(out, "timestamp,label,flagged,overlap,action,epoch")?;
    for (v, l) in verdicts.iter().zip(labels) {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            v.timestamp,
            l,
            v.flagged,
            v.overlap,
            v.action.as_str(),
            v.epoch
        )?;
    }
    Ok(())
}
