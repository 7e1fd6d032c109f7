//! Independent reference implementations used to check the library.

#![allow(dead_code)]

use blacklight::fingerprint::{Fingerprint, HashDigest};
use num_bigint::BigUint;
use num_traits::{One, ToPrimitive};

/// Exact `C(n, k)`.
pub fn binomial_exact(n: u64, k: u64) -> BigUint {
    let k = k.min(n - k);
    let mut acc = BigUint::one();
    for i in 0..k {
        acc = acc * BigUint::from(n - i) / BigUint::from(i + 1);
    }
    acc
}

/// Natural log of a big integer, correct to double precision.
pub fn ln_big(x: &BigUint) -> f64 {
    let bits = x.bits();
    if bits <= 1000 {
        return x.to_f64().expect("fits in f64").ln();
    }
    let shift = bits - 1000;
    (x >> shift).to_f64().expect("fits in f64").ln() + shift as f64 * std::f64::consts::LN_2
}

/// Flagging probability by enumerating every `s`-subset of `n` elements
/// whose first `n - d` are shared.
pub fn enumerate_flag_probability(n: u32, d: u32, s: u32, t: u32) -> f64 {
    assert!(n <= 20);
    let shared = if n - d == 32 {
        u32::MAX
    } else {
        (1u32 << (n - d)) - 1
    };
    let (mut total, mut hit) = (0u64, 0u64);
    for subset in 0u32..(1 << n) {
        if subset.count_ones() != s {
            continue;
        }
        total += 1;
        if (subset & shared).count_ones() > t {
            hit += 1;
        }
    }
    hit as f64 / total as f64
}

/// Intersection size of two digest sets by hashing.
pub fn intersection(a: &Fingerprint, b: &Fingerprint) -> usize {
    let set: std::collections::HashSet<&HashDigest> = a.digests().iter().collect();
    b.digests().iter().filter(|d| set.contains(d)).count()
}

/// Largest intersection of `probe` with any of `stored`, and the first index reaching it.
pub fn brute_force_max_overlap(
    stored: &[Fingerprint],
    probe: &Fingerprint,
) -> (usize, Option<usize>) {
    let mut best = (0, None);
    for (i, fp) in stored.iter().enumerate() {
        let o = intersection(fp, probe);
        if o > best.0 {
            best = (o, Some(i));
        }
    }
    best
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    a == b || (a - b).abs() <= tol * a.abs().max(b.abs())
}
