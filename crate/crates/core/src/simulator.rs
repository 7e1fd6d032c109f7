//! Synthetic labeled query streams: smoothed-noise benign images and
//! model-free attack traces whose queries stay close to earlier queries.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::{ChaCha20Rng, ChaCha8Rng};
use rand_distr::StandardNormal;
use serde::Serialize;
use thiserror::Error;

use crate::config::{kv_pairs, ConfigError, DetectorConfig, Salt, SALT_LEN};
use crate::detector::{
    compute_metrics_with_budgets, process_stream, DetectError, DetectionReport, Label, Mitigation,
    QueryRecord, Verdict,
};
use crate::fingerprint::{fingerprint, Dims, FingerprintError, QueryImage};
use crate::store::FingerprintIndex;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("budget {0} is below one intensity unit")]
    BudgetInfeasible(u8),
    #[error("invalid trace: {0}")]
    InvalidTrace(String),
    #[error("invalid experiment: {0}")]
    InvalidExperiment(String),
    #[error("query {step} is farther than {budget} from every earlier query")]
    InvariantViolated { step: usize, budget: u8 },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Fingerprint(#[from] FingerprintError),
    #[error(transparent)]
    Detect(#[from] DetectError),
}

/// Standard deviation of each antithetic probe, in intensity units.
pub const PROBE_SIGMA: f64 = 0.255;
/// Probe pairs spent estimating each step direction.
pub const PROBE_PAIRS_PER_STEP: usize = 25;
/// Per-pixel magnitude of each descent step, in intensity units.
pub const PROBE_STEP: f64 = 2.55;
/// Interpolation step sizes halve this many times, then start over.
pub const INTERPOLATION_RESTART: usize = 8;
/// Side length of the square blocks toggled by patch-flip traces.
pub const PATCH_SIZE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum TraceKind {
    /// Antithetic random probes around a slowly moving center.
    ProbePair,
    /// Walk from a distant image toward the source along the segment between them.
    Interpolation,
    /// One small block flipped per query.
    PatchFlip,
}

impl fmt::Display for TraceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TraceKind::ProbePair => "probe-pair",
            TraceKind::Interpolation => "interpolation",
            TraceKind::PatchFlip => "patch-flip",
        })
    }
}

impl FromStr for TraceKind {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "probe-pair" => Ok(TraceKind::ProbePair),
            "interpolation" => Ok(TraceKind::Interpolation),
            "patch-flip" => Ok(TraceKind::PatchFlip),
            other => Err(SimError::InvalidTrace(format!(
                "unknown trace kind `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TraceSpec {
    pub kind: TraceKind,
    pub length: usize,
    /// L-infinity bound in 8-bit intensity units.
    pub budget: u8,
    pub seed: u64,
    pub dims: Dims,
}

impl TraceSpec {
    pub fn new(kind: TraceKind, length: usize, budget: u8, seed: u64, dims: Dims) -> Self {
        TraceSpec {
            kind,
            length,
            budget,
            seed,
            dims,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.budget < 1 {
            return Err(SimError::BudgetInfeasible(self.budget));
        }
        if self.length < 2 {
            return Err(SimError::InvalidTrace(format!(
                "length {} is below 2",
                self.length
            )));
        }
        if self.dims.is_empty() || !matches!(self.dims.channels, 1 | 3) {
            return Err(SimError::InvalidTrace(format!(
                "unsupported dims {}",
                self.dims
            )));
        }
        Ok(())
    }
}

/// Uniform noise smoothed by a 3x3 box filter (edges clamped) in each channel.
pub fn smooth_noise<R: Rng>(dims: Dims, rng: &mut R) -> QueryImage {
    let Dims {
        height: h,
        width: w,
        channels: c,
    } = dims;
    let mut noise = vec![0u8; dims.len()];
    rng.fill_bytes(&mut noise);
    let mut out = vec![0u8; dims.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut sum = 0u32;
                for dy in [-1isize, 0, 1] {
                    for dx in [-1isize, 0, 1] {
                        let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                        let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                        sum += u32::from(noise[(yy * w + xx) * c + ch]);
                    }
                }
                out[(y * w + x) * c + ch] = ((sum + 4) / 9) as u8;
            }
        }
    }
    QueryImage::new(h, w, c, out).expect("dims match pixel count")
}

/// `count` benign queries, timestamps `0..count`.
pub fn gen_benign(count: usize, dims: Dims, seed: u64) -> Vec<QueryRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| QueryRecord {
            image: smooth_noise(dims, &mut rng),
            label: Label::Benign,
            timestamp: i as u64,
        })
        .collect()
}

/// Generates the trace and labels it `trace_id`; timestamps are step indices.
pub fn gen_attack_trace(spec: &TraceSpec, trace_id: u32) -> Result<Vec<QueryRecord>, SimError> {
    let images = trace_images(spec)?;
    Ok(images
        .into_iter()
        .enumerate()
        .map(|(step, image)| QueryRecord {
            image,
            label: Label::Attack {
                trace_id,
                step: step as u32,
            },
            timestamp: step as u64,
        })
        .collect())
}

/// The trace's query images, checked against the closeness invariant.
pub fn trace_images(spec: &TraceSpec) -> Result<Vec<QueryImage>, SimError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let source = smooth_noise(spec.dims, &mut rng);
    let images = match spec.kind {
        TraceKind::ProbePair => probe_pairs(&source, spec, &mut rng),
        TraceKind::Interpolation => interpolation(&source, spec, &mut rng),
        TraceKind::PatchFlip => patch_flips(&source, spec, &mut rng),
    };
    check_closeness(&images, spec.budget)?;
    Ok(images)
}

/// Per-pixel bounds `[x0 - budget, x0 + budget]` clipped to the valid range.
fn budget_box(source: &QueryImage, budget: u8) -> (Vec<f64>, Vec<f64>) {
    source
        .pixels()
        .iter()
        .map(|&v| {
            (
                f64::from(v.saturating_sub(budget)),
                f64::from(v.saturating_add(budget)),
            )
        })
        .unzip()
}

fn with_pixels(source: &QueryImage, pixels: Vec<u8>) -> QueryImage {
    QueryImage::new(source.height(), source.width(), source.channels(), pixels).expect("same shape")
}

fn probe_pairs<R: Rng>(source: &QueryImage, spec: &TraceSpec, rng: &mut R) -> Vec<QueryImage> {
    let (lo, hi) = budget_box(source, spec.budget);
    let mut center: Vec<f64> = source.pixels().iter().map(|&v| f64::from(v)).collect();
    let mut out = Vec::with_capacity(spec.length);
    out.push(source.clone());
    let mut pairs = 0usize;
    while out.len() < spec.length {
        if pairs > 0 && pairs.is_multiple_of(PROBE_PAIRS_PER_STEP) {
            for (i, c) in center.iter_mut().enumerate() {
                let dir = if rng.gen::<bool>() {
                    PROBE_STEP
                } else {
                    -PROBE_STEP
                };
                *c = (*c + dir).clamp(lo[i], hi[i]);
            }
        }
        let noise: Vec<f64> = (0..center.len())
            .map(|_| PROBE_SIGMA * rng.sample::<f64, _>(StandardNormal))
            .collect();
        for sign in [1.0, -1.0] {
            if out.len() == spec.length {
                break;
            }
            let px = center
                .iter()
                .zip(&noise)
                .enumerate()
                .map(|(i, (c, n))| (c + sign * n).round().clamp(lo[i], hi[i]) as u8)
                .collect();
            out.push(with_pixels(source, px));
        }
        pairs += 1;
    }
    out
}

fn interpolation<R: Rng>(source: &QueryImage, spec: &TraceSpec, rng: &mut R) -> Vec<QueryImage> {
    let target = smooth_noise(spec.dims, rng);
    let dist = target.linf_distance(source);
    let base_step = if dist == 0 {
        1.0
    } else {
        // keep consecutive queries within budget despite float error
        (f64::from(spec.budget) / f64::from(dist) * (1.0 - 1e-9)).min(1.0)
    };
    let mut alpha = 0.0f64;
    let mut out = Vec::with_capacity(spec.length);
    for i in 0..spec.length {
        let px = target
            .pixels()
            .iter()
            .zip(source.pixels())
            .map(|(&t, &s)| ((1.0 - alpha) * f64::from(t) + alpha * f64::from(s)).round() as u8)
            .collect();
        out.push(with_pixels(source, px));
        let step = base_step / f64::from(1u32 << (i % INTERPOLATION_RESTART));
        alpha = (alpha + step).min(1.0);
    }
    out
}

fn patch_flips<R: Rng>(source: &QueryImage, spec: &TraceSpec, rng: &mut R) -> Vec<QueryImage> {
    let Dims {
        height: h,
        width: w,
        channels: c,
    } = spec.dims;
    let (bh, bw) = (PATCH_SIZE.min(h), PATCH_SIZE.min(w));
    let base = source.pixels();
    let up: Vec<u8> = base.iter().map(|v| v.saturating_add(spec.budget)).collect();
    let down: Vec<u8> = base.iter().map(|v| v.saturating_sub(spec.budget)).collect();
    let mut current = base.to_vec();
    let mut out = Vec::with_capacity(spec.length);
    out.push(source.clone());
    while out.len() < spec.length {
        let y0 = rng.gen_range(0..=h - bh);
        let x0 = rng.gen_range(0..=w - bw);
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                for ch in 0..c {
                    let i = (y * w + x) * c + ch;
                    current[i] = if current[i] == up[i] { down[i] } else { up[i] };
                }
            }
        }
        out.push(with_pixels(source, current.clone()));
    }
    out
}

/// Every query after the first lies within `budget` (L-infinity) of some
/// earlier query. The previous query and the first query are tried before a
/// full scan.
pub fn check_closeness(images: &[QueryImage], budget: u8) -> Result<(), SimError> {
    for i in 1..images.len() {
        let close = |j: usize| images[i].linf_distance(&images[j]) <= budget;
        if !(close(i - 1) || close(0) || (1..i - 1).any(close)) {
            return Err(SimError::InvariantViolated { step: i, budget });
        }
    }
    Ok(())
}

/// Merges benign records and attack traces with a seeded uniform shuffle of
/// source slots; each trace keeps its internal order. Timestamps become
/// stream positions.
pub fn interleave(
    benign: Vec<QueryRecord>,
    traces: Vec<Vec<QueryRecord>>,
    seed: u64,
) -> Vec<QueryRecord> {
    let mut slots: Vec<usize> = Vec::new();
    slots.extend(std::iter::repeat_n(0, benign.len()));
    for (i, t) in traces.iter().enumerate() {
        slots.extend(std::iter::repeat_n(i + 1, t.len()));
    }
    slots.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut sources: Vec<std::vec::IntoIter<QueryRecord>> = Vec::with_capacity(traces.len() + 1);
    sources.push(benign.into_iter());
    sources.extend(traces.into_iter().map(Vec::into_iter));
    slots
        .into_iter()
        .enumerate()
        .map(|(pos, src)| {
            let mut rec = sources[src].next().expect("slot counts match sources");
            rec.timestamp = pos as u64;
            rec
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub benign_count: usize,
    pub benign_seed: u64,
    pub dims: Dims,
    /// Trace `i` is labeled with trace id `i + 1`.
    pub traces: Vec<TraceSpec>,
    pub interleave_seed: u64,
    pub detector: DetectorConfig,
    pub mitigation: Mitigation,
    /// Seeds the salts drawn at each store reset.
    pub salt_seed: u64,
}

impl ExperimentSpec {
    pub fn new(detector: DetectorConfig) -> Self {
        ExperimentSpec {
            benign_count: 0,
            benign_seed: 0,
            dims: Dims::CIFAR,
            traces: Vec::new(),
            interleave_seed: 0,
            detector,
            mitigation: Mitigation::Reject,
            salt_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.detector.validate()?;
        for t in &self.traces {
            t.validate()?;
        }
        Ok(())
    }

    /// Parses flat `key=value` text. Experiment keys are `benign_count`,
    /// `benign_seed`, `dims`, `interleave_seed`, `mitigation` (`on`/`off`),
    /// `salt_seed` and repeated `trace=kind:length:budget:seed`. Detector
    /// keys override the defaults; the salt defaults to one derived from
    /// `salt_seed`.
    pub fn parse_kv(text: &str) -> Result<Self, SimError> {
        let mut spec = ExperimentSpec::new(DetectorConfig::new(Salt::from_seed(0)));
        let mut detector_lines = String::new();
        let mut raw_traces = Vec::new();
        for (line, key, value) in kv_pairs(text)? {
            let bad = |what: &str| {
                SimError::InvalidExperiment(format!(
                    "line {line}: `{key}` expects {what}, got `{value}`"
                ))
            };
            let num = |v: &str| v.parse::<u64>().map_err(|_| bad("an unsigned integer"));
            match key {
                "benign_count" => spec.benign_count = num(value)? as usize,
                "benign_seed" => spec.benign_seed = num(value)?,
                "interleave_seed" => spec.interleave_seed = num(value)?,
                "salt_seed" => spec.salt_seed = num(value)?,
                "dims" => spec.dims = value.parse().map_err(|_| bad("HxWxC"))?,
                "mitigation" => {
                    spec.mitigation = match value {
                        "on" => Mitigation::Reject,
                        "off" => Mitigation::Off,
                        _ => return Err(bad("`on` or `off`")),
                    }
                }
                "trace" => raw_traces.push((line, value)),
                "q" | "w" | "p" | "s" | "t" | "salt_hex" | "reset_interval" => {
                    detector_lines.push_str(&format!("{key}={value}\n"));
                }
                other => {
                    return Err(SimError::InvalidExperiment(format!(
                        "line {line}: unknown key `{other}`"
                    )));
                }
            }
        }
        let defaults = DetectorConfig::new(Salt::from_seed(spec.salt_seed)).to_kv();
        spec.detector = DetectorConfig::parse_kv(&(defaults + &detector_lines))?;
        for (line, value) in raw_traces {
            let fields: Vec<&str> = value.split(':').collect();
            let [kind, length, budget, seed] = fields.as_slice() else {
                return Err(SimError::InvalidExperiment(format!(
                    "line {line}: trace expects kind:length:budget:seed, got `{value}`"
                )));
            };
            let parse_err =
                || SimError::InvalidExperiment(format!("line {line}: bad trace `{value}`"));
            let t = TraceSpec::new(
                kind.parse()?,
                length.parse().map_err(|_| parse_err())?,
                budget.parse().map_err(|_| parse_err())?,
                seed.parse().map_err(|_| parse_err())?,
                spec.dims,
            );
            t.validate()?;
            spec.traces.push(t);
        }
        Ok(spec)
    }

    pub fn to_kv(&self) -> String {
        let mut out = format!(
            "benign_count={}\nbenign_seed={}\ndims={}\ninterleave_seed={}\nmitigation={}\nsalt_seed={}\n",
            self.benign_count,
            self.benign_seed,
            self.dims,
            self.interleave_seed,
            if self.mitigation == Mitigation::Reject { "on" } else { "off" },
            self.salt_seed
        );
        out.push_str(&self.detector.to_kv());
        for t in &self.traces {
            out.push_str(&format!(
                "trace={}:{}:{}:{}\n",
                t.kind, t.length, t.budget, t.seed
            ));
        }
        out
    }

    /// The labeled stream this experiment feeds to the detector.
    pub fn build_stream(&self) -> Result<Vec<QueryRecord>, SimError> {
        self.validate()?;
        let benign = gen_benign(self.benign_count, self.dims, self.benign_seed);
        let traces = self
            .traces
            .iter()
            .enumerate()
            .map(|(i, t)| gen_attack_trace(t, i as u32 + 1))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(interleave(benign, traces, self.interleave_seed))
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentRun {
    pub stream: Vec<QueryRecord>,
    pub verdicts: Vec<Verdict>,
    pub report: DetectionReport,
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<DetectionReport, SimError> {
    Ok(run_experiment_full(spec)?.report)
}

/// As [`run_experiment`], keeping the stream and per-query verdicts.
pub fn run_experiment_full(spec: &ExperimentSpec) -> Result<ExperimentRun, SimError> {
    let stream = spec.build_stream()?;
    let verdicts = process_stream(&stream, &spec.detector, spec.mitigation, spec.salt_seed)?;
    let labels: Vec<Label> = stream.iter().map(|r| r.label).collect();
    let budgets: BTreeMap<u32, u64> = spec
        .traces
        .iter()
        .enumerate()
        .map(|(i, t)| (i as u32 + 1, t.length as u64))
        .collect();
    let report = compute_metrics_with_budgets(&verdicts, &labels, &budgets)?;
    Ok(ExperimentRun {
        stream,
        verdicts,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PauseResumeReport {
    /// Store epochs each trace needed to get all its queries forwarded.
    pub cycles: Vec<u64>,
    pub mean_cycles: f64,
    /// Queries submitted across all traces, rejected ones included.
    pub total_queries: u64,
}

/// An attacker that submits its trace in order, pauses at the first rejected
/// query and resumes with that query once the store is reset. The store is
/// reset every `reset_interval` queries. Returns `(epochs, queries submitted)`.
pub fn pause_resume_images(
    images: &[QueryImage],
    cfg: &DetectorConfig,
    reset_interval: u64,
    salt_seed: u64,
) -> Result<(u64, u64), SimError> {
    if reset_interval == 0 {
        return Err(SimError::InvalidExperiment(
            "reset interval must be at least 1".into(),
        ));
    }
    cfg.validate()?;
    let mut salts = ChaCha20Rng::seed_from_u64(salt_seed);
    let mut epoch_cfg = cfg.clone();
    let (mut pos, mut cycles, mut queries) = (0usize, 0u64, 0u64);
    while pos < images.len() {
        cycles += 1;
        if cycles > 1 {
            let mut salt = [0u8; SALT_LEN];
            salts.fill_bytes(&mut salt);
            epoch_cfg.salt = Salt(salt);
        }
        let mut store = FingerprintIndex::new(cfg.threshold, epoch_cfg.salt);
        let mut submitted = 0u64;
        while submitted < reset_interval && pos < images.len() {
            let fp = fingerprint(&images[pos], &epoch_cfg)?;
            let m = store
                .check_and_insert(&fp)
                .map_err(|e| SimError::InvalidExperiment(e.to_string()))?;
            submitted += 1;
            if m.flagged {
                break;
            }
            pos += 1;
        }
        queries += submitted;
    }
    Ok((cycles, queries))
}

/// Runs [`pause_resume_images`] on every trace of the experiment.
pub fn pause_resume(
    spec: &ExperimentSpec,
    reset_interval: u64,
) -> Result<PauseResumeReport, SimError> {
    if spec.mitigation != Mitigation::Reject {
        return Err(SimError::InvalidExperiment(
            "pause and resume needs reject mitigation".into(),
        ));
    }
    let mut cycles = Vec::with_capacity(spec.traces.len());
    let mut total_queries = 0;
    for t in &spec.traces {
        let images = trace_images(t)?;
        let (c, q) = pause_resume_images(&images, &spec.detector, reset_interval, spec.salt_seed)?;
        cycles.push(c);
        total_queries += q;
    }
    let mean_cycles = if cycles.is_empty() {
        0.0
    } else {
        cycles.iter().sum::<u64>() as f64 / cycles.len() as f64
    };
    Ok(PauseResumeReport {
        cycles,
        mean_cycles,
        total_queries,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Budget {
    /// Largest per-pixel deviation, in intensity units.
    Linf(u8),
    /// Root-mean-square deviation over all pixel elements, as a fraction of 255.
    L2Normalized(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvasionCost {
    /// Windows one pixel change disturbs.
    pub windows_per_change: usize,
    /// Windows each query must change to keep at most K fingerprint entries in common.
    pub changed_windows: usize,
    pub pixels_per_query: usize,
    /// First query that cannot be made within budget; `None` if none ever is.
    pub queries: Option<u64>,
    /// Accumulated perturbation, in the budget's units, when that query was attempted.
    pub perturbation: f64,
}

/// Cost of an attacker who, per query, perturbs just enough fresh pixels by
/// the quantization step for at most `k` of the fingerprint entries to
/// survive. Changes are spaced a window apart so each disturbs
/// `w/p - 1` distinct windows. When every pixel has been used, pixels are
/// pushed one more quantization step away from the source.
pub fn guided_evasion_cost(
    cfg: &DetectorConfig,
    dims: Dims,
    k: usize,
    budget: Budget,
) -> Result<EvasionCost, SimError> {
    cfg.validate()?;
    if k > cfg.fingerprint_size {
        return Err(SimError::InvalidExperiment(format!(
            "K={k} exceeds fingerprint size {}",
            cfg.fingerprint_size
        )));
    }
    let len = dims.len();
    let n = cfg
        .window_count(len)
        .ok_or(FingerprintError::InputTooSmall {
            len,
            window: cfg.window,
        })?;
    let windows_per_change = (cfg.window / cfg.step).saturating_sub(1).max(1);
    let keep = k as f64 / cfg.fingerprint_size as f64;
    let changed_windows = (n as f64 * (1.0 - keep)).ceil() as usize;
    let pixels_per_query = changed_windows.div_ceil(windows_per_change);
    let mut cost = EvasionCost {
        windows_per_change,
        changed_windows,
        pixels_per_query,
        queries: None,
        perturbation: 0.0,
    };
    if pixels_per_query == 0 {
        return Ok(cost);
    }

    let q = f64::from(cfg.quant_step);
    let (mut level, mut used, mut sum_sq) = (1u32, 0usize, 0f64);
    for query in 1u64.. {
        let mut need = pixels_per_query;
        while need > 0 {
            if used == len {
                level += 1;
                used = 0;
            }
            if f64::from(level) * q > 255.0 {
                cost.queries = Some(query);
                return Ok(cost);
            }
            let take = need.min(len - used);
            // each touched pixel moves from (level-1)q to level*q away from the source
            sum_sq += take as f64 * (2.0 * f64::from(level) - 1.0) * q * q;
            used += take;
            need -= take;
        }
        let (spent, limit) = match budget {
            Budget::Linf(b) => (f64::from(level) * q, f64::from(b)),
            Budget::L2Normalized(b) => ((sum_sq / len as f64).sqrt() / 255.0, b),
        };
        cost.perturbation = spent;
        if spent > limit {
            cost.queries = Some(query);
            return Ok(cost);
        }
    }
    unreachable!("the level cap ends the loop")
}
