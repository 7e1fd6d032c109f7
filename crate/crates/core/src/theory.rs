//! Flagging-probability bounds for a pair of inputs whose full hash sets
//! differ in `D` entries per side, plus a Monte-Carlo estimator of the
//! true probability.
//!
//! Everything is evaluated in log space so that `C(150479, 50)` and friends
//! stay representable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TheoryError {
    #[error("domain error: {0}")]
    Domain(String),
}

fn domain<T>(msg: impl Into<String>) -> Result<T, TheoryError> {
    Err(TheoryError::Domain(msg.into()))
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for `x > 0` (Lanczos approximation).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS[0];
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Above this many factors the product form gives way to log-gamma.
const DIRECT_SUM_LIMIT: u64 = 2048;

/// `ln C(n, k)`.
pub fn log_binomial(n: u64, k: u64) -> Result<f64, TheoryError> {
    if k > n {
        return domain(format!("C({n}, {k}) requires k <= n"));
    }
    Ok(ln_choose(n, k))
}

/// `ln C(n, k)`, or negative infinity when `k > n`.
fn ln_choose(n: u64, k: u64) -> f64 {
    if k > n {
        return f64::NEG_INFINITY;
    }
    let k = k.min(n - k);
    if k == 0 {
        return 0.0;
    }
    if k <= DIRECT_SUM_LIMIT {
        let mut acc = Neumaier::default();
        let base = (n - k) as f64;
        for i in 1..=k {
            acc.add(((base + i as f64) / i as f64).ln());
        }
        acc.total()
    } else {
        ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
    }
}

/// Compensated summation.
#[derive(Debug, Default, Clone, Copy)]
struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn total(&self) -> f64 {
        self.sum + self.comp
    }
}

/// `ln Σ exp(v)`; negative infinity for an empty or all-zero sum.
fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let mut acc = Neumaier::default();
    for v in values {
        acc.add((v - max).exp());
    }
    max + acc.total().ln()
}

/// Pair model: full hash sets of size `n` sharing `n - d` entries, fingerprints
/// of size `s`, flag when more than `t` fingerprint entries coincide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BoundParams {
    pub n: u64,
    pub d: u64,
    pub s: u64,
    pub t: u64,
}

impl BoundParams {
    pub fn new(n: u64, d: u64, s: u64, t: u64) -> Result<Self, TheoryError> {
        let p = BoundParams { n, d, s, t };
        p.validate()?;
        Ok(p)
    }

    pub fn with_d(self, d: u64) -> Self {
        BoundParams { d, ..self }
    }

    pub fn validate(&self) -> Result<(), TheoryError> {
        if self.d > self.n {
            return domain(format!("D={} exceeds N={}", self.d, self.n));
        }
        if self.s == 0 || self.s > self.n {
            return domain(format!("S={} must be in 1..=N={}", self.s, self.n));
        }
        if self.t >= self.s {
            return domain(format!("T={} must be below S={}", self.t, self.s));
        }
        Ok(())
    }

    fn shared(&self) -> u64 {
        self.n - self.d
    }

    fn max_shared_in_fingerprint(&self) -> u64 {
        self.s.min(self.shared())
    }
}

/// Upper bound on the flagging probability.
pub fn q_upper(p: &BoundParams) -> Result<f64, TheoryError> {
    p.validate()?;
    let m = p.max_shared_in_fingerprint();
    if p.t + 1 > m {
        return Ok(0.0);
    }
    let ln_total = ln_choose(p.n, p.s);
    let term = |k: u64| {
        if p.s - k > p.d {
            0.0
        } else {
            (ln_choose(p.shared(), k) + ln_choose(p.d, p.s - k) - ln_total).exp()
        }
    };
    let mut upper = Neumaier::default();
    for k in p.t + 1..=m {
        upper.add(term(k));
    }
    let upper = upper.total();
    if upper <= 0.5 {
        return Ok(upper.clamp(0.0, 1.0));
    }
    // Near 1 the complement is the accurate side.
    let mut lower = Neumaier::default();
    for k in 0..=p.t.min(m) {
        lower.add(term(k));
    }
    Ok((1.0 - lower.total()).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LowerBound {
    pub value: f64,
    /// Every term of the normalizer vanished; `value` is reported as 0.
    pub degenerate: bool,
}

/// Lower bound on the flagging probability, term for term as published.
pub fn q_lower(p: &BoundParams) -> Result<LowerBound, TheoryError> {
    lower_bound(p, |p, i, _t| ln_choose(p.d, p.s - i))
}

/// Variant of [`q_lower`] whose inner factor follows the summation index.
pub fn q_lower_alt(p: &BoundParams) -> Result<LowerBound, TheoryError> {
    lower_bound(p, |p, _i, t| ln_choose(p.d, p.s - t))
}

fn lower_bound(
    p: &BoundParams,
    inner: impl Fn(&BoundParams, u64, u64) -> f64,
) -> Result<LowerBound, TheoryError> {
    p.validate()?;
    let m = p.max_shared_in_fingerprint();
    let shared = p.shared();
    let mut ln_a = Vec::with_capacity(m as usize + 1);
    for i in 0..=m {
        let outer = ln_choose(p.d, p.s - i);
        if outer == f64::NEG_INFINITY {
            ln_a.push(f64::NEG_INFINITY);
            continue;
        }
        // outer + 2 * sum_t C(shared - i, t - i) * inner(t)
        let mut parts = Vec::with_capacity((m - i) as usize + 1);
        parts.push(outer);
        for t in i + 1..=m {
            parts.push(std::f64::consts::LN_2 + ln_choose(shared - i, t - i) + inner(p, i, t));
        }
        ln_a.push(outer + ln_choose(shared, i) + log_sum_exp(&parts));
    }
    let ln_den = log_sum_exp(&ln_a);
    if ln_den == f64::NEG_INFINITY {
        return Ok(LowerBound {
            value: 0.0,
            degenerate: true,
        });
    }
    let from = (p.t + 1).min(m + 1) as usize;
    let ln_num = log_sum_exp(&ln_a[from..]);
    Ok(LowerBound {
        value: (ln_num - ln_den).exp().clamp(0.0, 1.0),
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub stderr: f64,
    pub trials: u64,
    pub hits: u64,
}

pub const MIN_MC_TRIALS: u64 = 1000;

/// Empirical flagging probability. Each trial orders `N - D` shared and
/// `2D` side-specific digests uniformly at random, takes the largest `S` on
/// each side, and checks whether more than `T` coincide.
///
/// Only the relative order of 256-bit uniform digests matters, so each digest
/// is its high 64 bits with ties broken by a unique index.
pub fn monte_carlo_q(p: &BoundParams, trials: u64, seed: u64) -> Result<McEstimate, TheoryError> {
    p.validate()?;
    if trials < MIN_MC_TRIALS {
        return domain(format!(
            "at least {MIN_MC_TRIALS} trials required, got {trials}"
        ));
    }
    let hits: u64 = (0..trials)
        .into_par_iter()
        .map_init(McScratch::default, |scratch, trial| {
            u64::from(mc_trial(p, seed, trial, scratch))
        })
        .sum();
    let estimate = hits as f64 / trials as f64;
    Ok(McEstimate {
        estimate,
        stderr: (estimate * (1.0 - estimate) / trials as f64).sqrt(),
        trials,
        hits,
    })
}

#[derive(Default)]
struct McScratch {
    shared: Vec<(u64, u64)>,
    x: Vec<(u64, u64)>,
    y: Vec<(u64, u64)>,
}

fn top_s(v: &mut Vec<(u64, u64)>, s: usize) {
    if v.len() > s {
        v.select_nth_unstable_by(s - 1, |a, b| b.cmp(a));
        v.truncate(s);
    }
    v.sort_unstable_by(|a, b| b.cmp(a));
}

/// Number of entries of sorted `shared` among the top `s` of `shared ∪ own`.
fn shared_in_top(shared: &[(u64, u64)], own: &[(u64, u64)], s: usize) -> usize {
    let (mut i, mut j, mut taken) = (0, 0, 0);
    while i + j < s && (i < shared.len() || j < own.len()) {
        let take_shared = match (shared.get(i), own.get(j)) {
            (Some(a), Some(b)) => a > b,
            (Some(_), None) => true,
            _ => false,
        };
        if take_shared {
            i += 1;
            taken += 1;
        } else {
            j += 1;
        }
    }
    taken
}

fn mc_trial(p: &BoundParams, seed: u64, trial: u64, scratch: &mut McScratch) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    let s = p.s as usize;
    let mut id = 0u64;
    let mut draw = |v: &mut Vec<(u64, u64)>, count: u64, rng: &mut ChaCha8Rng| {
        v.clear();
        v.extend((0..count).map(|_| {
            id += 1;
            (rng.gen::<u64>(), id)
        }));
        top_s(v, s);
    };
    draw(&mut scratch.shared, p.shared(), &mut rng);
    draw(&mut scratch.x, p.d, &mut rng);
    draw(&mut scratch.y, p.d, &mut rng);
    let cx = shared_in_top(&scratch.shared, &scratch.x, s);
    let cy = shared_in_top(&scratch.shared, &scratch.y, s);
    cx.min(cy) as u64 > p.t
}

/// Typical hash-set distance for benign pairs and for attack pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DeltaModel {
    pub delta_benign: u64,
    pub delta_attack: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bounds {
    pub lower: f64,
    pub upper: f64,
}

impl Bounds {
    fn at(p: &BoundParams) -> Result<Self, TheoryError> {
        Ok(Bounds {
            lower: q_lower(p)?.value,
            upper: q_upper(p)?,
        })
    }
}

/// Bounds on the false-positive probability (benign pairs) and on the
/// per-pair detection probability (attack pairs). `base.d` is ignored.
pub fn fpr_and_detection(
    model: &DeltaModel,
    base: &BoundParams,
) -> Result<(Bounds, Bounds), TheoryError> {
    if model.delta_benign <= model.delta_attack {
        return domain(format!(
            "benign distance {} must exceed attack distance {}",
            model.delta_benign, model.delta_attack
        ));
    }
    Ok((
        Bounds::at(&base.with_d(model.delta_benign))?,
        Bounds::at(&base.with_d(model.delta_attack))?,
    ))
}
