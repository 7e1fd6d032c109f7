//! Detector configuration and the flat `key=value` file format used for it.

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use rand::rngs::OsRng;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Length of the hash salt in bytes.
pub const SALT_LEN: usize = 16;

/// Default number of stored fingerprints before `insert` refuses more.
pub const DEFAULT_MAX_FINGERPRINTS: u64 = 10_000_000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("quantization step must be in 1..=255, got {0}")]
    InvalidQuantization(u32),
    #[error("window size must be at least 1")]
    InvalidWindow,
    #[error("sliding step must satisfy 1 <= p <= w (p = {step}, w = {window})")]
    InvalidStep { step: usize, window: usize },
    #[error("fingerprint size must be at least 1")]
    InvalidFingerprintSize,
    #[error("threshold must be below fingerprint size (t = {threshold}, s = {size})")]
    InvalidThreshold { threshold: usize, size: usize },
    #[error("salt must be {SALT_LEN} bytes of hex, got {0:?}")]
    InvalidSalt(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("missing required key `{0}`")]
    MissingKey(&'static str),
}

/// Secret value mixed into every window hash. Rotated on every store reset.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Salt(pub [u8; SALT_LEN]);

impl Salt {
    /// Draws a salt from the operating system's cryptographic RNG.
    pub fn random() -> Self {
        let mut bytes = [0u8; SALT_LEN];
        OsRng.fill_bytes(&mut bytes);
        Salt(bytes)
    }

    /// Reproducible salt for tests and seeded experiments.
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut bytes = [0u8; SALT_LEN];
        rng.fill_bytes(&mut bytes);
        Salt(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; SALT_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl FromStr for Salt {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bytes = hex::decode(s.trim()).map_err(|_| ConfigError::InvalidSalt(s.to_string()))?;
        let arr: [u8; SALT_LEN] = bytes
            .try_into()
            .map_err(|_| ConfigError::InvalidSalt(s.to_string()))?;
        Ok(Salt(arr))
    }
}

// Never print the salt in logs or panics.
impl fmt::Debug for Salt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Salt(..)")
    }
}

/// When the fingerprint store is cleared and the salt refreshed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResetPolicy {
    #[default]
    Never,
    /// Reset after this many processed queries.
    EveryQueries(u64),
    /// Reset once this much wall-clock time has passed in the current epoch.
    Every(Duration),
}

/// All tunables of the detector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectorConfig {
    /// Quantization step `q`: each 8-bit pixel becomes `v / q`.
    pub quant_step: u8,
    /// Sliding window size `w`, in pixel elements.
    pub window: usize,
    /// Sliding step `p`.
    pub step: usize,
    /// Number of hashes kept per fingerprint `S`.
    pub fingerprint_size: usize,
    /// Flag when more than `threshold` hashes match (`T`).
    pub threshold: usize,
    pub salt: Salt,
    pub reset: ResetPolicy,
    /// Upper bound on stored fingerprints within one epoch.
    pub max_fingerprints: u64,
}

impl DetectorConfig {
    /// Default configuration (q=50, w=20, p=1, S=50, T=25) with the given salt.
    pub fn new(salt: Salt) -> Self {
        DetectorConfig {
            quant_step: 50,
            window: 20,
            step: 1,
            fingerprint_size: 50,
            threshold: 25,
            salt,
            reset: ResetPolicy::Never,
            max_fingerprints: DEFAULT_MAX_FINGERPRINTS,
        }
    }

    /// Defaults for large or background-heavy inputs, where a 50-pixel window is used.
    pub fn large_input(salt: Salt) -> Self {
        DetectorConfig {
            window: 50,
            ..DetectorConfig::new(salt)
        }
    }

    pub fn with_window(mut self, window: usize) -> Self {
        self.window = window;
        self
    }

    pub fn with_step(mut self, step: usize) -> Self {
        self.step = step;
        self
    }

    pub fn with_quant_step(mut self, q: u8) -> Self {
        self.quant_step = q;
        self
    }

    pub fn with_fingerprint_size(mut self, s: usize) -> Self {
        self.fingerprint_size = s;
        self
    }

    pub fn with_threshold(mut self, t: usize) -> Self {
        self.threshold = t;
        self
    }

    pub fn with_salt(mut self, salt: Salt) -> Self {
        self.salt = salt;
        self
    }

    pub fn with_reset(mut self, reset: ResetPolicy) -> Self {
        self.reset = reset;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.quant_step == 0 {
            return Err(ConfigError::InvalidQuantization(0));
        }
        if self.window == 0 {
            return Err(ConfigError::InvalidWindow);
        }
        if self.step == 0 || self.step > self.window {
            return Err(ConfigError::InvalidStep {
                step: self.step,
                window: self.window,
            });
        }
        if self.fingerprint_size == 0 {
            return Err(ConfigError::InvalidFingerprintSize);
        }
        if self.threshold >= self.fingerprint_size {
            return Err(ConfigError::InvalidThreshold {
                threshold: self.threshold,
                size: self.fingerprint_size,
            });
        }
        Ok(())
    }

    /// Number of window hashes produced for an input of `len` pixel elements.
    pub fn window_count(&self, len: usize) -> Option<usize> {
        window_count(len, self.window, self.step)
    }

    /// Parses the flat `key=value` format (`q`, `w`, `p`, `s`, `t`, `salt_hex`,
    /// optional `reset_interval`). Blank lines and `#` comments are ignored.
    pub fn parse_kv(text: &str) -> Result<Self, ConfigError> {
        let mut q = None;
        let mut w = None;
        let mut p = None;
        let mut s = None;
        let mut t = None;
        let mut salt = None;
        let mut reset = ResetPolicy::Never;
        for (line, key, value) in kv_pairs(text)? {
            let num = |v: &str| -> Result<u64, ConfigError> {
                v.parse::<u64>().map_err(|_| ConfigError::Parse {
                    line,
                    message: format!("`{key}` expects an unsigned integer, got `{v}`"),
                })
            };
            match key {
                "q" => {
                    let v = num(value)?;
                    if !(1..=255).contains(&v) {
                        return Err(ConfigError::InvalidQuantization(
                            v.min(u32::MAX as u64) as u32
                        ));
                    }
                    q = Some(v as u8);
                }
                "w" => w = Some(num(value)? as usize),
                "p" => p = Some(num(value)? as usize),
                "s" => s = Some(num(value)? as usize),
                "t" => t = Some(num(value)? as usize),
                "salt_hex" => salt = Some(value.parse::<Salt>()?),
                "reset_interval" => {
                    let v = num(value)?;
                    reset = if v == 0 {
                        ResetPolicy::Never
                    } else {
                        ResetPolicy::EveryQueries(v)
                    };
                }
                other => {
                    return Err(ConfigError::Parse {
                        line,
                        message: format!("unknown key `{other}`"),
                    })
                }
            }
        }
        let cfg = DetectorConfig {
            quant_step: q.ok_or(ConfigError::MissingKey("q"))?,
            window: w.ok_or(ConfigError::MissingKey("w"))?,
            step: p.ok_or(ConfigError::MissingKey("p"))?,
            fingerprint_size: s.ok_or(ConfigError::MissingKey("s"))?,
            threshold: t.ok_or(ConfigError::MissingKey("t"))?,
            salt: salt.ok_or(ConfigError::MissingKey("salt_hex"))?,
            reset,
            max_fingerprints: DEFAULT_MAX_FINGERPRINTS,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        let mut out = format!(
            "q={}\nw={}\np={}\ns={}\nt={}\nsalt_hex={}\n",
            self.quant_step,
            self.window,
            self.step,
            self.fingerprint_size,
            self.threshold,
            self.salt.to_hex()
        );
        if let ResetPolicy::EveryQueries(n) = self.reset {
            out.push_str(&format!("reset_interval={n}\n"));
        }
        out
    }
}

/// `floor((len - window) / step) + 1`, or `None` when the input is shorter than a window.
pub fn window_count(len: usize, window: usize, step: usize) -> Option<usize> {
    if window == 0 || step == 0 || len < window {
        return None;
    }
    Some((len - window) / step + 1)
}

/// Splits `key=value` text into `(line_number, key, value)` triples.
pub(crate) fn kv_pairs(text: &str) -> Result<Vec<(usize, &str, &str)>, ConfigError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
            line: idx + 1,
            message: format!("expected key=value, got `{line}`"),
        })?;
        out.push((idx + 1, k.trim(), v.trim()));
    }
    Ok(out)
}
