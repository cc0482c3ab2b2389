//! FIFO bank of recent embeddings used to build negative relation tuples.

use std::collections::VecDeque;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::RelationTuple;
use crate::nn::ParamStore;
use crate::relation::{Embedding, RelationHead, Source};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankRecord {
    pub teacher: Vec<f64>,
    pub student: Vec<f64>,
    pub label: Option<usize>,
    pub sample_id: usize,
    pub insertion_step: u64,
}

impl BankRecord {
    pub fn teacher_embedding(&self) -> Embedding {
        Embedding { values: self.teacher.clone(), source: Source::Teacher, sample_id: self.sample_id, label: self.label }
    }

    pub fn student_embedding(&self) -> Embedding {
        Embedding { values: self.student.clone(), source: Source::Student, sample_id: self.sample_id, label: self.label }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Any record whose id differs from the anchor's.
    Unsupervised,
    /// Any record whose label differs from the anchor's.
    Supervised,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingPolicy {
    pub mode: SamplingMode,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Anchor {
    pub sample_id: usize,
    pub label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativeBank {
    capacity: usize,
    entries: VecDeque<BankRecord>,
    pushes: u64,
}

impl NegativeBank {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::contract("bank capacity must be positive"));
        }
        Ok(Self { capacity, entries: VecDeque::with_capacity(capacity), pushes: 0 })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total records ever pushed.
    pub fn pushes(&self) -> u64 {
        self.pushes
    }

    pub fn get(&self, i: usize) -> &BankRecord {
        &self.entries[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &BankRecord> {
        self.entries.iter()
    }

    /// Appends a record, evicting the oldest one at capacity. Returns the
    /// record's insertion step.
    pub fn push(&mut self, teacher: Vec<f64>, student: Vec<f64>, sample_id: usize, label: Option<usize>) -> Result<u64> {
        if teacher.iter().chain(&student).any(|v| !v.is_finite()) {
            return Err(Error::contract(format!("bank record {sample_id} is not finite")));
        }
        if let Some(first) = self.entries.front() {
            if first.teacher.len() != teacher.len() || first.student.len() != student.len() {
                return Err(Error::contract("bank record dims differ from existing records"));
            }
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        let step = self.pushes;
        self.entries.push_back(BankRecord { teacher, student, label, sample_id, insertion_step: step });
        self.pushes += 1;
        Ok(step)
    }

    fn is_eligible(mode: SamplingMode, anchor: &Anchor, r: &BankRecord) -> Result<bool> {
        Ok(match mode {
            SamplingMode::Unsupervised => r.sample_id != anchor.sample_id,
            SamplingMode::Supervised => {
                let a = anchor.label.ok_or_else(|| Error::contract("supervised sampling needs an anchor label"))?;
                let l = r.label.ok_or_else(|| Error::contract("supervised sampling needs labelled records"))?;
                l != a && r.sample_id != anchor.sample_id
            }
        })
    }

    /// Bank positions eligible as negatives for `anchor`, oldest first.
    pub fn eligible(&self, mode: SamplingMode, anchor: &Anchor) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for (i, r) in self.entries.iter().enumerate() {
            if Self::is_eligible(mode, anchor, r)? {
                out.push(i);
            }
        }
        Ok(out)
    }

    /// `policy.n` distinct eligible positions drawn uniformly.
    pub fn sample_indices<R: Rng + ?Sized>(&self, policy: &SamplingPolicy, anchor: &Anchor, rng: &mut R) -> Result<Vec<usize>> {
        let pool = self.eligible(policy.mode, anchor)?;
        if pool.len() < policy.n {
            return Err(Error::InsufficientNegatives { pool: pool.len(), requested: policy.n });
        }
        Ok(index::sample(rng, pool.len(), policy.n).into_iter().map(|i| pool[i]).collect())
    }

    pub fn sample_negatives<R: Rng + ?Sized>(
        &self,
        policy: &SamplingPolicy,
        anchor: &Anchor,
        rng: &mut R,
    ) -> Result<Vec<&BankRecord>> {
        Ok(self.sample_indices(policy, anchor, rng)?.into_iter().map(|i| &self.entries[i]).collect())
    }

    /// Like [`sample_indices`](Self::sample_indices), but while the eligible
    /// pool is smaller than `n` draws with replacement from whatever exists
    /// (nothing when the pool is empty). The flag reports warm-up.
    pub fn sample_with_warmup<R: Rng + ?Sized>(
        &self,
        policy: &SamplingPolicy,
        anchor: &Anchor,
        rng: &mut R,
    ) -> Result<(Vec<usize>, bool)> {
        let pool = self.eligible(policy.mode, anchor)?;
        if pool.len() >= policy.n {
            let picked = index::sample(rng, pool.len(), policy.n).into_iter().map(|i| pool[i]).collect();
            return Ok((picked, false));
        }
        if pool.is_empty() {
            return Ok((Vec::new(), true));
        }
        let picked = (0..policy.n).map(|_| pool[rng.random_range(0..pool.len())]).collect();
        Ok((picked, true))
    }
}

/// Relation tuples for one anchor `i` with partner `j`.
///
/// The joint tuple pairs `v_t(i, j)` with `v_ts(i, j)`; each marginal tuple
/// pairs the same `v_t(i, j)` with `v_ts(i, k)` for a bank record `k ≠ j`.
pub fn build_tuples(
    store: &ParamStore,
    teacher_head: &RelationHead,
    cross_head: &RelationHead,
    anchor: &Embedding,
    partner_teacher: &Embedding,
    partner_student: &Embedding,
    negatives: &[&BankRecord],
) -> Result<(RelationTuple, Vec<RelationTuple>)> {
    if partner_teacher.sample_id != partner_student.sample_id {
        return Err(Error::contract("partner views must share a sample id"));
    }
    if let Some(k) = negatives.iter().find(|r| r.sample_id == partner_teacher.sample_id) {
        return Err(Error::contract(format!("negative {} reuses the positive partner", k.sample_id)));
    }
    let v_t = teacher_head.relate(store, anchor, partner_teacher)?;
    let v_ts = cross_head.relate(store, anchor, partner_student)?;
    let students: Vec<Embedding> = negatives.iter().map(|r| r.student_embedding()).collect();
    let anchors = vec![anchor.clone(); students.len()];
    let cross = cross_head.relate_batch(store, &anchors, &students)?;
    let negs = cross
        .into_iter()
        .map(|v| RelationTuple { v_t: v_t.clone(), v_ts: v, joint: false })
        .collect();
    Ok((RelationTuple { v_t, v_ts, joint: true }, negs))
}
