//! Stateful detection of query-based black-box attacks by matching
//! salted, quantized window-hash fingerprints of incoming queries.

pub mod bench;
pub mod cli;
pub mod config;
pub mod detector;
pub mod fingerprint;
pub mod formats;
pub mod simulator;
pub mod store;
pub mod theory;

pub use config::{ConfigError, DetectorConfig, ResetPolicy, Salt};
pub use detector::{
    compute_metrics, compute_metrics_with_budgets, process_stream, Action, DetectError,
    DetectionReport, Detector, Label, Mitigation, QueryRecord, Verdict,
};
pub use fingerprint::{fingerprint, Dims, Fingerprint, FingerprintError, HashDigest, QueryImage};
pub use store::{FingerprintIndex, MatchResult, QueryId, SharedIndex, StoreError};
