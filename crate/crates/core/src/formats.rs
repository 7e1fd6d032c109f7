//! Binary formats (all integers big-endian):
//!
//! * `BLFP` fingerprint: magic, version `u8`, count `u16`, then 32-byte digests.
//! * `BLDB` store snapshot: magic, version `u8`, epoch `u32`, salt (16 bytes),
//!   count `u64`, then per fingerprint: id `u64`, length `u16`, digests.
//! * `BLQS` query stream: magic, version `u8`, count `u32`, then per record:
//!   label `u8` (0 benign, 1 attack), trace id `u32`, step `u32`, height `u16`,
//!   width `u16`, channels `u8`, pixel bytes.
//!
//! Images are read from and written to binary PGM (`P5`) and PPM (`P6`).

use thiserror::Error;

use crate::config::{Salt, SALT_LEN};
use crate::detector::{Label, QueryRecord};
use crate::fingerprint::{Fingerprint, HashDigest, QueryImage, DIGEST_LEN};
use crate::store::{FingerprintIndex, QueryId};

pub const FORMAT_VERSION: u8 = 1;
pub const BLFP_MAGIC: &[u8; 4] = b"BLFP";
pub const BLDB_MAGIC: &[u8; 4] = b"BLDB";
pub const BLQS_MAGIC: &[u8; 4] = b"BLQS";
/// Magic plus version plus count.
pub const BLFP_HEADER_LEN: usize = 7;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("not a {0} file")]
    BadMagic(&'static str),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("unexpected end of data")]
    Truncated,
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("invalid data: {0}")]
    Invalid(String),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
}

/// Kind of a file, judged by its leading bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileKind {
    Fingerprint,
    Store,
    Stream,
    Pgm,
    Ppm,
}

pub fn sniff(bytes: &[u8]) -> Result<FileKind, FormatError> {
    match bytes {
        [b'B', b'L', b'F', b'P', ..] => Ok(FileKind::Fingerprint),
        [b'B', b'L', b'D', b'B', ..] => Ok(FileKind::Store),
        [b'B', b'L', b'Q', b'S', ..] => Ok(FileKind::Stream),
        [b'P', b'5', ..] => Ok(FileKind::Pgm),
        [b'P', b'6', ..] => Ok(FileKind::Ppm),
        _ => Err(FormatError::UnsupportedFormat(
            "expected PGM (P5), PPM (P6), BLFP, BLDB or BLQS".into(),
        )),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).ok_or(FormatError::Truncated)?;
        let out = self.buf.get(self.pos..end).ok_or(FormatError::Truncated)?;
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], FormatError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        self.array().map(u16::from_be_bytes)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        self.array().map(u32::from_be_bytes)
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        self.array().map(u64::from_be_bytes)
    }

    fn header(&mut self, magic: &[u8; 4], name: &'static str) -> Result<(), FormatError> {
        if self.take(4).map_err(|_| FormatError::BadMagic(name))? != magic {
            return Err(FormatError::BadMagic(name));
        }
        match self.u8()? {
            FORMAT_VERSION => Ok(()),
            v => Err(FormatError::UnsupportedVersion(v)),
        }
    }

    fn digests(&mut self, count: usize) -> Result<Vec<HashDigest>, FormatError> {
        (0..count).map(|_| self.array().map(HashDigest)).collect()
    }

    fn finish(self) -> Result<(), FormatError> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            n => Err(FormatError::TrailingBytes(n)),
        }
    }
}

fn fingerprint_from(digests: Vec<HashDigest>) -> Result<Fingerprint, FormatError> {
    Fingerprint::from_sorted(digests, 0).map_err(|_| {
        FormatError::Invalid("digests must be non-empty and strictly descending".into())
    })
}

pub fn encode_fingerprint(fp: &Fingerprint) -> Vec<u8> {
    let count = u16::try_from(fp.len()).expect("fingerprint size fits in u16");
    let mut out = Vec::with_capacity(BLFP_HEADER_LEN + fp.payload_len());
    out.extend_from_slice(BLFP_MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&count.to_be_bytes());
    for d in fp.digests() {
        out.extend_from_slice(d.as_bytes());
    }
    out
}

/// The decoded fingerprint reports a source window count of 0 (unknown).
pub fn decode_fingerprint(bytes: &[u8]) -> Result<Fingerprint, FormatError> {
    let mut r = Reader::new(bytes);
    r.header(BLFP_MAGIC, "BLFP")?;
    let count = r.u16()? as usize;
    let digests = r.digests(count)?;
    r.finish()?;
    fingerprint_from(digests)
}

pub fn encode_store(index: &FingerprintIndex) -> Vec<u8> {
    let records = index.stored_fingerprints();
    let payload: usize = records.iter().map(|(_, d)| 10 + d.len() * DIGEST_LEN).sum();
    let mut out = Vec::with_capacity(5 + 4 + SALT_LEN + 8 + payload);
    out.extend_from_slice(BLDB_MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&index.epoch().to_be_bytes());
    out.extend_from_slice(index.salt().as_bytes());
    out.extend_from_slice(&(records.len() as u64).to_be_bytes());
    for (id, digests) in &records {
        out.extend_from_slice(&id.0.to_be_bytes());
        let len = u16::try_from(digests.len()).expect("fingerprint size fits in u16");
        out.extend_from_slice(&len.to_be_bytes());
        for d in digests {
            out.extend_from_slice(d.as_bytes());
        }
    }
    out
}

/// Restores a snapshot; new ids continue after the largest stored one.
pub fn decode_store(bytes: &[u8], threshold: usize) -> Result<FingerprintIndex, FormatError> {
    let mut r = Reader::new(bytes);
    r.header(BLDB_MAGIC, "BLDB")?;
    let epoch = r.u32()?;
    let salt = Salt(r.array()?);
    let count = r.u64()?;
    let mut records = Vec::new();
    let mut last: Option<u64> = None;
    for _ in 0..count {
        let id = r.u64()?;
        if last.is_some_and(|l| l >= id) {
            return Err(FormatError::Invalid(
                "fingerprint ids must be strictly increasing".into(),
            ));
        }
        last = Some(id);
        let len = r.u16()? as usize;
        let digests = fingerprint_from(r.digests(len)?)?.digests().to_vec();
        records.push((QueryId(id), digests));
    }
    r.finish()?;
    Ok(FingerprintIndex::from_parts(
        threshold, salt, epoch, records,
    ))
}

pub fn encode_stream(records: &[QueryRecord]) -> Result<Vec<u8>, FormatError> {
    let count = u32::try_from(records.len())
        .map_err(|_| FormatError::Invalid("too many records".into()))?;
    let mut out = Vec::new();
    out.extend_from_slice(BLQS_MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&count.to_be_bytes());
    for rec in records {
        let (tag, trace_id, step) = match rec.label {
            Label::Benign => (0u8, 0u32, 0u32),
            Label::Attack { trace_id, step } => (1, trace_id, step),
        };
        let img = &rec.image;
        let dim = |v: usize| {
            u16::try_from(v).map_err(|_| FormatError::Invalid(format!("dimension {v} too large")))
        };
        out.push(tag);
        out.extend_from_slice(&trace_id.to_be_bytes());
        out.extend_from_slice(&step.to_be_bytes());
        out.extend_from_slice(&dim(img.height())?.to_be_bytes());
        out.extend_from_slice(&dim(img.width())?.to_be_bytes());
        out.push(img.channels() as u8);
        out.extend_from_slice(img.pixels());
    }
    Ok(out)
}

/// Timestamps of decoded records are their positions in the stream.
pub fn decode_stream(bytes: &[u8]) -> Result<Vec<QueryRecord>, FormatError> {
    let mut r = Reader::new(bytes);
    r.header(BLQS_MAGIC, "BLQS")?;
    let count = r.u32()?;
    let mut out = Vec::new();
    for pos in 0..u64::from(count) {
        let tag = r.u8()?;
        let trace_id = r.u32()?;
        let step = r.u32()?;
        let label = match tag {
            0 => Label::Benign,
            1 => Label::Attack { trace_id, step },
            t => {
                return Err(FormatError::Invalid(format!(
                    "record {pos}: unknown label {t}"
                )))
            }
        };
        let h = r.u16()? as usize;
        let w = r.u16()? as usize;
        let c = r.u8()? as usize;
        let pixels = r.take(h * w * c)?.to_vec();
        let image = QueryImage::new(h, w, c, pixels)
            .map_err(|e| FormatError::Invalid(format!("record {pos}: {e}")))?;
        out.push(QueryRecord {
            image,
            label,
            timestamp: pos,
        });
    }
    r.finish()?;
    Ok(out)
}

/// Binary PGM for one channel, binary PPM for three.
pub fn encode_netpbm(img: &QueryImage) -> Vec<u8> {
    let magic = if img.channels() == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.pixels());
    out
}

/// Reads binary PGM (`P5`) or PPM (`P6`) with a maximum value of 255.
pub fn decode_netpbm(bytes: &[u8]) -> Result<QueryImage, FormatError> {
    let channels = match sniff(bytes)? {
        FileKind::Pgm => 1,
        FileKind::Ppm => 3,
        _ => {
            return Err(FormatError::UnsupportedFormat(
                "expected PGM (P5) or PPM (P6)".into(),
            ))
        }
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(FormatError::Truncated),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| FormatError::Invalid("malformed image header".into()))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(FormatError::UnsupportedFormat(format!(
            "maximum value {maxval}, only 255 is supported"
        )));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(FormatError::Invalid("malformed image header".into())),
    }
    let mut r = Reader::new(&bytes[pos..]);
    let pixels = r.take(width * height * channels)?.to_vec();
    r.finish()?;
    QueryImage::new(height, width, channels, pixels)
        .map_err(|e| FormatError::Invalid(e.to_string()))
}
