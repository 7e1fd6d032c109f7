//! Probabilistic fingerprints of image queries.
//!
//! A query is quantized, flattened row-major with interleaved channels, cut
//! into overlapping windows, and every window is hashed with SHA3-256 under a
//! secret salt. The fingerprint keeps only the `S` numerically largest distinct
//! digests. Two queries whose quantized pixels mostly agree share most window
//! hashes, and therefore most of their top-`S` digests.

use std::cmp::Ordering;
use std::fmt;
use std::hash::{BuildHasherDefault, Hash, Hasher};

use serde::{Deserialize, Serialize};
use sha3::{Digest, Sha3_256};
use thiserror::Error;

use crate::config::{window_count, ConfigError, DetectorConfig, Salt};

/// Size of one window digest in bytes.
pub const DIGEST_LEN: usize = 32;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FingerprintError {
    #[error("input has {len} pixel elements, fewer than the window size {window}")]
    InputTooSmall { len: usize, window: usize },
    #[error("image dimensions {height}x{width}x{channels} do not match {len} pixel bytes")]
    DimensionMismatch {
        height: usize,
        width: usize,
        channels: usize,
        len: usize,
    },
    #[error("unsupported channel count {0} (expected 1 or 3)")]
    UnsupportedChannels(usize),
    #[error("fingerprint digests must be non-empty and strictly descending")]
    Unsorted,
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Raw 8-bit query image, row-major with channels interleaved per pixel.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct QueryImage {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<u8>,
}

impl QueryImage {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        pixels: Vec<u8>,
    ) -> Result<Self, FingerprintError> {
        if channels != 1 && channels != 3 {
            return Err(FingerprintError::UnsupportedChannels(channels));
        }
        if height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(channels))
            != Some(pixels.len())
        {
            return Err(FingerprintError::DimensionMismatch {
                height,
                width,
                channels,
                len: pixels.len(),
            });
        }
        Ok(QueryImage {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> Dims {
        Dims {
            height: self.height,
            width: self.width,
            channels: self.channels,
        }
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    /// Total number of pixel elements, `h * w * c`.
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    /// Largest per-element absolute difference. Panics if dimensions differ.
    pub fn linf_distance(&self, other: &QueryImage) -> u8 {
        assert_eq!(self.pixels.len(), other.pixels.len(), "image sizes differ");
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| a.abs_diff(*b))
            .max()
            .unwrap_or(0)
    }

    /// Euclidean distance in intensity units. Panics if dimensions differ.
    pub fn l2_distance(&self, other: &QueryImage) -> f64 {
        assert_eq!(self.pixels.len(), other.pixels.len(), "image sizes differ");
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| {
                let d = f64::from(*a) - f64::from(*b);
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Image shape `(height, width, channels)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Dims {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Dims {
            height,
            width,
            channels,
        }
    }

    /// 32x32x3, the small-image benchmark shape.
    pub const CIFAR: Dims = Dims::new(32, 32, 3);

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

impl std::str::FromStr for Dims {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split('x').collect();
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| format!("bad dims `{s}`"))
        };
        match parts.as_slice() {
            [h, w, c] => Ok(Dims::new(parse(h)?, parse(w)?, parse(c)?)),
            [h, w] => Ok(Dims::new(parse(h)?, parse(w)?, 1)),
            _ => Err(format!("expected HxWxC, got `{s}`")),
        }
    }
}

/// One SHA3-256 window digest. Ordered as a big-endian unsigned integer.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct HashDigest(pub [u8; DIGEST_LEN]);

impl HashDigest {
    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }
}

impl fmt::Debug for HashDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "HashDigest({})", hex::encode(&self.0[..8]))
    }
}

// Digests are uniform, so the low-order bytes already make a good table hash.
// The leading bytes are not used: top-S selection biases them towards 0xff.
impl Hash for HashDigest {
    fn hash<H: Hasher>(&self, state: &mut H) {
        let mut tail = [0u8; 8];
        tail.copy_from_slice(&self.0[DIGEST_LEN - 8..]);
        state.write_u64(u64::from_le_bytes(tail));
    }
}

/// Pass-through hasher for keys that already hash themselves to a uniform `u64`.
#[derive(Default, Clone, Copy)]
pub struct DigestHasher(u64);

impl Hasher for DigestHasher {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 = self.0.rotate_left(8) ^ u64::from(b);
        }
    }

    fn write_u64(&mut self, n: u64) {
        self.0 = n;
    }
}

pub type DigestBuildHasher = BuildHasherDefault<DigestHasher>;

/// The top-`S` distinct window digests of one query, largest first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fingerprint {
    digests: Vec<HashDigest>,
    source_n: usize,
}

impl Fingerprint {
    /// Wraps digests that are already strictly descending and non-empty.
    pub fn from_sorted(
        digests: Vec<HashDigest>,
        source_n: usize,
    ) -> Result<Self, FingerprintError> {
        if digests.is_empty() || digests.windows(2).any(|w| w[0] <= w[1]) {
            return Err(FingerprintError::Unsorted);
        }
        Ok(Fingerprint { digests, source_n })
    }

    pub fn digests(&self) -> &[HashDigest] {
        &self.digests
    }

    /// Number of window hashes (before dedup and selection) this was built from.
    pub fn source_n(&self) -> usize {
        self.source_n
    }

    pub fn len(&self) -> usize {
        self.digests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.digests.is_empty()
    }

    /// Digest payload size: 32 bytes per stored digest.
    pub fn payload_len(&self) -> usize {
        self.digests.len() * DIGEST_LEN
    }

    /// Number of digests shared with `other`, by a merge over both sorted lists.
    pub fn overlap(&self, other: &Fingerprint) -> usize {
        let (mut i, mut j, mut n) = (0, 0, 0);
        let (a, b) = (&self.digests, &other.digests);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
                Ordering::Greater => i += 1,
                Ordering::Less => j += 1,
            }
        }
        n
    }
}

/// Maps every pixel element to its bucket `v / q`.
pub fn quantize(img: &QueryImage, q: u8) -> Vec<u8> {
    assert!(q >= 1, "quantization step must be positive");
    img.pixels.iter().map(|v| v / q).collect()
}

/// Hashes every window `qbytes[k*p .. k*p + w]` as `SHA3-256(salt || window)`,
/// returning all `floor((len - w) / p) + 1` digests in window order.
pub fn window_hashes(
    qbytes: &[u8],
    window: usize,
    step: usize,
    salt: &Salt,
) -> Result<Vec<HashDigest>, FingerprintError> {
    assert!(step >= 1, "sliding step must be positive");
    let n = window_count(qbytes.len(), window, step).ok_or(FingerprintError::InputTooSmall {
        len: qbytes.len(),
        window,
    })?;
    let keyed = Sha3_256::new_with_prefix(salt.as_bytes());
    let digests = (0..n)
        .map(|k| {
            let start = k * step;
            let out = keyed
                .clone()
                .chain_update(&qbytes[start..start + window])
                .finalize();
            HashDigest(out.into())
        })
        .collect();
    Ok(digests)
}

/// Deduplicates the window digests and keeps the `size` largest, descending.
pub fn select_fingerprint(hashes: &[HashDigest], size: usize) -> Fingerprint {
    assert!(!hashes.is_empty(), "cannot fingerprint an empty hash set");
    assert!(size >= 1, "fingerprint size must be positive");
    let mut work = hashes.to_vec();
    let desc = |a: &HashDigest, b: &HashDigest| b.cmp(a);

    // Partial selection first; only fall back to a full sort when duplicates
    // inside the selected prefix leave fewer than `size` distinct values.
    if work.len() > size {
        work.select_nth_unstable_by(size - 1, desc);
        let mut head = work[..size].to_vec();
        head.sort_unstable_by(desc);
        head.dedup();
        if head.len() == size {
            return Fingerprint {
                digests: head,
                source_n: hashes.len(),
            };
        }
    }
    work.sort_unstable_by(desc);
    work.dedup();
    work.truncate(size);
    Fingerprint {
        digests: work,
        source_n: hashes.len(),
    }
}

/// Full pipeline: quantize, hash windows under the config's salt, select top `S`.
pub fn fingerprint(
    img: &QueryImage,
    cfg: &DetectorConfig,
) -> Result<Fingerprint, FingerprintError> {
    cfg.validate()?;
    let q = quantize(img, cfg.quant_step);
    let hashes = window_hashes(&q, cfg.window, cfg.step, &cfg.salt)?;
    Ok(select_fingerprint(&hashes, cfg.fingerprint_size))
}
