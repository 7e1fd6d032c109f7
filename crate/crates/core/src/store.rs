//! Inverted index over stored fingerprints.
//!
//! Every digest maps to the ids of the stored queries whose fingerprint
//! contains it. The maximum overlap of an incoming fingerprint with any stored
//! one is the highest multiplicity of a single id across the posting lists of
//! its digests, so a lookup touches only `S` lists, independent of how many
//! fingerprints are stored.

use std::collections::HashMap;
use std::mem;

use parking_lot::RwLock;
use serde::Serialize;
use smallvec::SmallVec;
use thiserror::Error;

use crate::config::{Salt, DEFAULT_MAX_FINGERPRINTS};
use crate::fingerprint::{DigestBuildHasher, Fingerprint, HashDigest};

/// Declared upper bound on index bookkeeping per stored digest, beyond the
/// 32-byte digest itself. Covers the posting list, the table control byte and
/// the table's worst-case load factor.
pub const POSTING_OVERHEAD_BOUND: usize = 112;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StoreError {
    #[error("fingerprint store is full ({0} fingerprints); reset policy is too lax")]
    CapacityExceeded(u64),
}

/// Sequence number of a stored query within one reset epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct QueryId(pub u64);

/// Outcome of comparing a fingerprint against the store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MatchResult {
    /// Largest number of digests shared with a single stored fingerprint.
    pub max_overlap: usize,
    /// Stored query reaching `max_overlap`; lowest id on ties.
    pub best_match: Option<QueryId>,
    /// `max_overlap > threshold`.
    pub flagged: bool,
}

type Postings = SmallVec<[QueryId; 1]>;

#[derive(Debug, Clone)]
pub struct FingerprintIndex {
    postings: HashMap<HashDigest, Postings, DigestBuildHasher>,
    threshold: usize,
    count: u64,
    next_id: u64,
    epoch: u32,
    salt: Salt,
    max_fingerprints: u64,
    stored_digests: u64,
}

impl FingerprintIndex {
    pub fn new(threshold: usize, salt: Salt) -> Self {
        FingerprintIndex {
            postings: HashMap::default(),
            threshold,
            count: 0,
            next_id: 0,
            epoch: 0,
            salt,
            max_fingerprints: DEFAULT_MAX_FINGERPRINTS,
            stored_digests: 0,
        }
    }

    /// Pre-sizes the table for `digests` stored digests so that inserts never
    /// rehash a large table mid-stream.
    pub fn with_capacity(threshold: usize, salt: Salt, digests: usize) -> Self {
        let mut index = Self::new(threshold, salt);
        index.postings.reserve(digests);
        index
    }

    pub fn with_max_fingerprints(mut self, max: u64) -> Self {
        self.max_fingerprints = max;
        self
    }

    pub fn threshold(&self) -> usize {
        self.threshold
    }

    /// Number of fingerprints stored in the current epoch.
    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn salt(&self) -> &Salt {
        &self.salt
    }

    /// Sum of posting-list lengths, equal to the total length of stored fingerprints.
    pub fn stored_digests(&self) -> u64 {
        self.stored_digests
    }

    /// Number of distinct digests in the index.
    pub fn distinct_digests(&self) -> usize {
        self.postings.len()
    }

    /// Exact maximum overlap with any stored fingerprint. Does not modify the store.
    pub fn max_overlap(&self, fp: &Fingerprint) -> MatchResult {
        let mut hits: Vec<QueryId> = Vec::with_capacity(fp.len());
        for d in fp.digests() {
            if let Some(list) = self.postings.get(d) {
                hits.extend_from_slice(list);
            }
        }
        hits.sort_unstable();

        let mut best: Option<(usize, QueryId)> = None;
        let mut i = 0;
        while i < hits.len() {
            let id = hits[i];
            let mut j = i + 1;
            while j < hits.len() && hits[j] == id {
                j += 1;
            }
            let run = j - i;
            // ids ascend, so strict comparison keeps the lowest id on ties
            if best.is_none_or(|(n, _)| run > n) {
                best = Some((run, id));
            }
            i = j;
        }

        let max_overlap = best.map_or(0, |(n, _)| n);
        MatchResult {
            max_overlap,
            best_match: best.map(|(_, id)| id),
            flagged: max_overlap > self.threshold,
        }
    }

    /// Stores `fp` under the next query id.
    pub fn insert(&mut self, fp: &Fingerprint) -> Result<QueryId, StoreError> {
        if self.count >= self.max_fingerprints {
            return Err(StoreError::CapacityExceeded(self.max_fingerprints));
        }
        let id = QueryId(self.next_id);
        self.next_id += 1;
        self.count += 1;
        for d in fp.digests() {
            self.postings.entry(*d).or_default().push(id);
        }
        self.stored_digests += fp.len() as u64;
        Ok(id)
    }

    /// Matches `fp` against prior queries, then stores it. The returned result
    /// never reflects `fp` itself.
    pub fn check_and_insert(&mut self, fp: &Fingerprint) -> Result<MatchResult, StoreError> {
        self.check_and_maybe_insert(fp, true)
    }

    /// Like [`check_and_insert`](Self::check_and_insert), but flagged
    /// fingerprints are only stored when `insert_flagged` is set.
    pub fn check_and_maybe_insert(
        &mut self,
        fp: &Fingerprint,
        insert_flagged: bool,
    ) -> Result<MatchResult, StoreError> {
        if self.count >= self.max_fingerprints {
            return Err(StoreError::CapacityExceeded(self.max_fingerprints));
        }
        let result = self.max_overlap(fp);
        if !result.flagged || insert_flagged {
            self.insert(fp)?;
        }
        Ok(result)
    }

    /// Forgets every stored fingerprint, starts a new epoch and installs `new_salt`.
    pub fn reset(&mut self, new_salt: Salt) {
        self.postings = HashMap::default();
        self.count = 0;
        self.next_id = 0;
        self.stored_digests = 0;
        self.epoch += 1;
        self.salt = new_salt;
    }

    /// Stored fingerprints grouped by id, ascending, digests descending.
    pub fn stored_fingerprints(&self) -> Vec<(QueryId, Vec<HashDigest>)> {
        let mut pairs: Vec<(QueryId, HashDigest)> = self
            .postings
            .iter()
            .flat_map(|(d, ids)| ids.iter().map(move |id| (*id, *d)))
            .collect();
        pairs.sort_unstable_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));
        let mut out: Vec<(QueryId, Vec<HashDigest>)> = Vec::new();
        for (id, d) in pairs {
            match out.last_mut() {
                Some((last, ds)) if *last == id => ds.push(d),
                _ => out.push((id, vec![d])),
            }
        }
        out
    }

    /// Rebuilds an index from `(id, digests)` records, e.g. a loaded snapshot.
    pub fn from_parts(
        threshold: usize,
        salt: Salt,
        epoch: u32,
        records: Vec<(QueryId, Vec<HashDigest>)>,
    ) -> Self {
        let total: usize = records.iter().map(|(_, d)| d.len()).sum();
        let mut index = Self::with_capacity(threshold, salt, total);
        index.epoch = epoch;
        for (id, digests) in records {
            for d in &digests {
                index.postings.entry(*d).or_default().push(id);
            }
            index.stored_digests += digests.len() as u64;
            index.count += 1;
            index.next_id = index.next_id.max(id.0 + 1);
        }
        for list in index.postings.values_mut() {
            list.sort_unstable();
        }
        index
    }

    /// Estimated heap footprint of the index table and spilled posting lists.
    pub fn heap_bytes(&self) -> usize {
        let slot = mem::size_of::<(HashDigest, Postings)>() + 1;
        let spilled: usize = self
            .postings
            .values()
            .filter(|p| p.spilled())
            .map(|p| p.capacity() * mem::size_of::<QueryId>())
            .sum();
        // the table rounds buckets up to a power of two at 7/8 load
        let buckets = (self.postings.capacity() * 8 / 7).next_power_of_two();
        buckets * slot + spilled
    }
}

/// Thread-safe wrapper: concurrent `max_overlap` reads, serialized mutations.
#[derive(Debug)]
pub struct SharedIndex {
    inner: RwLock<FingerprintIndex>,
}

impl SharedIndex {
    pub fn new(index: FingerprintIndex) -> Self {
        SharedIndex {
            inner: RwLock::new(index),
        }
    }

    pub fn max_overlap(&self, fp: &Fingerprint) -> MatchResult {
        self.inner.read().max_overlap(fp)
    }

    /// Linearization point: the match and the insert happen under one write lock.
    pub fn check_and_insert(&self, fp: &Fingerprint) -> Result<MatchResult, StoreError> {
        self.inner.write().check_and_insert(fp)
    }

    pub fn reset(&self, new_salt: Salt) {
        self.inner.write().reset(new_salt);
    }

    pub fn count(&self) -> u64 {
        self.inner.read().count()
    }

    pub fn into_inner(self) -> FingerprintIndex {
        self.inner.into_inner()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn digest(v: u64) -> HashDigest {
        let mut b = [0u8; 32];
        b[24..].copy_from_slice(&v.to_be_bytes());
        HashDigest(b)
    }

    fn fp(values: &[u64]) -> Fingerprint {
        let mut v: Vec<u64> = values.to_vec();
        v.sort_unstable_by(|a, b| b.cmp(a));
        Fingerprint::from_sorted(v.into_iter().map(digest).collect(), values.len()).unwrap()
    }

    fn range_fp(start: u64, len: u64) -> Fingerprint {
        fp(&(start..start + len).collect::<Vec<_>>())
    }

    #[test]
    fn empty_store_never_matches() {
        let index = FingerprintIndex::new(25, Salt::from_seed(0));
        let r = index.max_overlap(&range_fp(0, 50));
        assert_eq!(
            r,
            MatchResult {
                max_overlap: 0,
                best_match: None,
                flagged: false
            }
        );
    }

    #[test]
    fn self_match_flags() {
        let mut index = FingerprintIndex::new(25, Salt::from_seed(0));
        let f = range_fp(0, 50);
        let id = index.insert(&f).unwrap();
        let r = index.max_overlap(&f);
        assert_eq!(r.max_overlap, 50);
        assert_eq!(r.best_match, Some(id));
        assert!(r.flagged);
    }

    #[test]
    fn threshold_is_strict() {
        let mut index = FingerprintIndex::new(25, Salt::from_seed(0));
        index.insert(&range_fp(0, 50)).unwrap();
        // shares exactly 25 digests
        let r = index.max_overlap(&range_fp(25, 50));
        assert_eq!(r.max_overlap, 25);
        assert!(!r.flagged);
        // shares 26
        let r = index.max_overlap(&range_fp(24, 50));
        assert_eq!(r.max_overlap, 26);
        assert!(r.flagged);
    }

    #[test]
    fn ties_report_lowest_id() {
        let mut index = FingerprintIndex::new(1, Salt::from_seed(0));
        let a = index.insert(&fp(&[1, 2, 3])).unwrap();
        let _b = index.insert(&fp(&[4, 5, 6])).unwrap();
        let r = index.max_overlap(&fp(&[1, 2, 4, 5]));
        assert_eq!(r.max_overlap, 2);
        assert_eq!(r.best_match, Some(a));
    }

    #[test]
    fn check_and_insert_excludes_self() {
        let mut index = FingerprintIndex::new(25, Salt::from_seed(0));
        let f = range_fp(100, 50);
        let first = index.check_and_insert(&f).unwrap();
        assert!(!first.flagged);
        assert_eq!(first.max_overlap, 0);
        let second = index.check_and_insert(&f).unwrap();
        assert!(second.flagged);
        assert_eq!(second.max_overlap, 50);
        assert_eq!(second.best_match, Some(QueryId(0)));
        assert_eq!(index.count(), 2);
    }

    #[test]
    fn flag_and_drop_skips_insert() {
        let mut index = FingerprintIndex::new(25, Salt::from_seed(0));
        let f = range_fp(0, 50);
        index.check_and_maybe_insert(&f, false).unwrap();
        let r = index.check_and_maybe_insert(&f, false).unwrap();
        assert!(r.flagged);
        assert_eq!(index.count(), 1);
    }

    #[test]
    fn counts_and_posting_sums() {
        let mut index = FingerprintIndex::new(25, Salt::from_seed(0));
        for i in 0..10 {
            index.insert(&range_fp(i * 10, 30)).unwrap();
        }
        assert_eq!(index.count(), 10);
        assert_eq!(index.stored_digests(), 300);
        let posting_total: usize = index.postings.values().map(|p| p.len()).sum();
        assert_eq!(posting_total as u64, index.stored_digests());
    }

    #[test]
    fn capacity_exceeded() {
        let mut index = FingerprintIndex::new(25, Salt::from_seed(0)).with_max_fingerprints(2);
        index.insert(&range_fp(0, 5)).unwrap();
        index.insert(&range_fp(5, 5)).unwrap();
        assert_eq!(
            index.insert(&range_fp(10, 5)),
            Err(StoreError::CapacityExceeded(2))
        );
        assert_eq!(
            index.check_and_insert(&range_fp(10, 5)),
            Err(StoreError::CapacityExceeded(2))
        );
        assert_eq!(index.count(), 2);
    }

    #[test]
    fn reset_clears_and_rotates() {
        let mut index = FingerprintIndex::new(25, Salt::from_seed(0));
        let f = range_fp(0, 50);
        index.insert(&f).unwrap();
        index.reset(Salt::from_seed(1));
        assert_eq!(index.max_overlap(&f).max_overlap, 0);
        assert_eq!(index.count(), 0);
        assert_eq!(index.epoch(), 1);
        assert_eq!(index.salt(), &Salt::from_seed(1));
        assert_eq!(index.insert(&f).unwrap(), QueryId(0));
        index.reset(Salt::from_seed(2));
        assert_eq!(index.epoch(), 2);
    }

    #[test]
    fn parts_round_trip() {
        let mut index = FingerprintIndex::new(3, Salt::from_seed(0));
        index.insert(&fp(&[1, 2, 3, 4])).unwrap();
        index.insert(&fp(&[3, 4, 5])).unwrap();
        index.insert(&fp(&[9])).unwrap();
        let parts = index.stored_fingerprints();
        assert_eq!(parts.len(), 3);
        assert_eq!(parts[1].1, vec![digest(5), digest(4), digest(3)]);
        let rebuilt = FingerprintIndex::from_parts(3, *index.salt(), index.epoch(), parts.clone());
        assert_eq!(rebuilt.stored_fingerprints(), parts);
        assert_eq!(rebuilt.count(), 3);
        let probe = fp(&[1, 3, 4, 5]);
        assert_eq!(rebuilt.max_overlap(&probe), index.max_overlap(&probe));
    }

    #[test]
    fn shared_index_serializes_writers() {
        use std::sync::Arc;
        let shared = Arc::new(SharedIndex::new(FingerprintIndex::new(
            25,
            Salt::from_seed(0),
        )));
        let handles: Vec<_> = (0..4)
            .map(|t| {
                let s = Arc::clone(&shared);
                std::thread::spawn(move || {
                    for i in 0..50 {
                        s.check_and_insert(&range_fp(t * 10_000 + i * 100, 50))
                            .unwrap();
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(shared.count(), 200);
        // all distinct, so every id appears exactly once
        let index = Arc::try_unwrap(shared).unwrap().into_inner();
        let ids: Vec<_> = index
            .stored_fingerprints()
            .into_iter()
            .map(|(id, _)| id.0)
            .collect();
        assert_eq!(ids, (0..200).collect::<Vec<_>>());
    }
}
