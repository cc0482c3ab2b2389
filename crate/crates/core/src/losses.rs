//! Training objectives.
//!
//! * relation contrastive loss: `−Σ_pos log h − w·Σ_neg log(1 − h)`
//! * softened distillation loss: `ρ²·H(softmax(z_t/ρ), softmax(z_s/ρ))`
//! * classification loss: cross-entropy or additive angular margin
//! * total: `cls + α·kd + β·rcd`
//!
//! Batch reductions are per-positive (per-sample) means.

use serde::{Deserialize, Serialize};

pub use crate::autograd::stable_sum;
use crate::autograd::{Matrix, Tape, Var};
use crate::critic::{Critic, SCORE_EPS};
use crate::error::{ensure_dim, Error, Result};
use crate::nn::ParamStore;
use crate::relation::RelationVector;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub rho: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.5, beta: 2.0, rho: 4.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            bad.push(format!("loss.alpha must be ≥ 0, got {}", self.alpha));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            bad.push(format!("loss.beta must be ≥ 0, got {}", self.beta));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            bad.push(format!("loss.rho must be > 0, got {}", self.rho));
        }
        bad
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub kd: f64,
    pub rcd: f64,
    pub total: f64,
}

/// How the negative sum is weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeWeighting {
    /// `n · Σ_neg`, the objective exactly as written.
    #[default]
    Printed,
    /// `n · mean_neg` per positive, i.e. a plain sum over its `n` negatives.
    Mean,
}

impl NegativeWeighting {
    fn factor(self, n: usize) -> f64 {
        match self {
            NegativeWeighting::Printed => n as f64,
            NegativeWeighting::Mean => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClsMode {
    CrossEntropy,
    /// Logits are cosines from a normalized classifier head.
    ArcFace { scale: f64, margin: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelationTuple {
    pub v_t: RelationVector,
    pub v_ts: RelationVector,
    /// `true` for joint (b = 1) tuples.
    pub joint: bool,
}

/// Relation contrastive loss from critic scores, averaged over positives.
pub fn rcd_from_scores(positive: &[f64], negative: &[f64], n: usize, weighting: NegativeWeighting) -> Result<f64> {
    if positive.is_empty() {
        return Err(Error::contract("rcd loss needs at least one positive"));
    }
    let pos = stable_sum(positive.iter().map(|h| -h.clamp(SCORE_EPS, 1.0 - SCORE_EPS).ln()));
    let neg = stable_sum(negative.iter().map(|h| -(1.0 - h.clamp(SCORE_EPS, 1.0 - SCORE_EPS)).ln()));
    Ok((pos + weighting.factor(n) * neg) / positive.len() as f64)
}

/// Relation contrastive loss over explicit tuples.
pub fn rcd_loss(
    critic: &Critic,
    store: &ParamStore,
    positives: &[RelationTuple],
    negatives: &[RelationTuple],
    weighting: NegativeWeighting,
) -> Result<f64> {
    if positives.is_empty() {
        return Err(Error::contract("rcd loss needs at least one positive"));
    }
    if positives.iter().any(|t| !t.joint) || negatives.iter().any(|t| t.joint) {
        return Err(Error::contract("positive/negative tuples carry the wrong latent tag"));
    }
    if !negatives.is_empty() && negatives.len() != positives.len() * critic.n_negatives {
        return Err(Error::contract(format!(
            "expected {} negatives per positive, got {} for {} positives",
            critic.n_negatives,
            negatives.len(),
            positives.len()
        )));
    }
    let score = |t: &RelationTuple| critic.critic_score(store, &t.v_t, &t.v_ts);
    let pos = positives.iter().map(score).collect::<Result<Vec<_>>>()?;
    let neg = negatives.iter().map(score).collect::<Result<Vec<_>>>()?;
    rcd_from_scores(&pos, &neg, critic.n_negatives, weighting)
}

/// Differentiable relation contrastive loss. `positive` is `P×1` and
/// `negative`, when present, holds all negative scores as one column.
pub fn rcd_loss_tape(
    tape: &mut Tape,
    positive: Var,
    negative: Option<Var>,
    n: usize,
    weighting: NegativeWeighting,
) -> Var {
    let p = tape.shape(positive).0 as f64;
    let lp = tape.ln(positive);
    let pos = tape.sum(lp);
    let mut loss = tape.scale(pos, -1.0);
    if let Some(neg) = negative {
        let one_minus = tape.scale(neg, -1.0);
        let one_minus = tape.add_scalar(one_minus, 1.0);
        let ln = tape.ln(one_minus);
        let s = tape.sum(ln);
        let s = tape.scale(s, -weighting.factor(n));
        loss = tape.add(loss, s);
    }
    tape.scale(loss, 1.0 / p)
}

fn softmax(z: &[f64], rho: f64) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| ((v - max) / rho).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_softmax(z: &[f64], rho: f64) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = z.iter().map(|v| ((v - max) / rho).exp()).sum::<f64>().ln();
    z.iter().map(|v| (v - max) / rho - lse).collect()
}

/// Softened teacher/student cross-entropy scaled by `ρ²`.
pub fn kd_loss(z_t: &[f64], z_s: &[f64], rho: f64) -> Result<f64> {
    ensure_dim("kd logits", z_t.len(), z_s.len())?;
    if z_t.len() < 2 {
        return Err(Error::contract("kd loss needs at least two classes"));
    }
    if !(rho > 0.0) {
        return Err(Error::contract("kd temperature must be positive"));
    }
    let p = softmax(z_t, rho);
    let lq = log_softmax(z_s, rho);
    Ok(-rho * rho * stable_sum(p.iter().zip(&lq).map(|(a, b)| a * b)))
}

/// Batch-mean softened distillation loss with constant teacher logits.
pub fn kd_loss_tape(tape: &mut Tape, z_t: &Matrix, z_s: Var, rho: f64) -> Var {
    let b = z_t.nrows() as f64;
    let mut p = z_t / rho;
    for mut row in p.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    let p = tape.constant(p);
    let zs = tape.scale(z_s, 1.0 / rho);
    let lq = tape.log_softmax(zs);
    let prod = tape.mul(p, lq);
    let s = tape.sum(prod);
    tape.scale(s, -rho * rho / b)
}

/// Classification loss for one sample.
pub fn cls_loss(z_s: &[f64], label: usize, mode: ClsMode) -> Result<f64> {
    if label >= z_s.len() {
        return Err(Error::contract(format!("label {label} out of range for {} classes", z_s.len())));
    }
    let mut tape = Tape::new();
    let z = tape.constant(Matrix::from_shape_vec((1, z_s.len()), z_s.to_vec()).expect("row"));
    let l = match mode {
        ClsMode::CrossEntropy => cross_entropy_tape(&mut tape, z, &[label]),
        ClsMode::ArcFace { scale, margin } => arcface_tape(&mut tape, z, &[label], scale, margin),
    };
    Ok(tape.scalar(l))
}

/// Batch-mean cross-entropy on raw logits.
pub fn cross_entropy_tape(tape: &mut Tape, logits: Var, labels: &[usize]) -> Var {
    let ls = tape.log_softmax(logits);
    let picked = tape.pick(ls, labels.to_vec());
    let s = tape.sum(picked);
    tape.scale(s, -1.0 / labels.len() as f64)
}

/// Batch-mean additive-angular-margin loss on cosine logits.
pub fn arcface_tape(tape: &mut Tape, cosines: Var, labels: &[usize], scale: f64, margin: f64) -> Var {
    let logits = tape.arc_margin(cosines, labels.to_vec(), margin, scale);
    cross_entropy_tape(tape, logits, labels)
}

pub fn total_loss(cls: f64, kd: f64, rcd: f64, w: &LossWeights) -> LossBreakdown {
    LossBreakdown { cls, kd, rcd, total: cls + w.alpha * kd + w.beta * rcd }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_positive_half() {
        let l = rcd_from_scores(&[0.5], &[], 1, NegativeWeighting::Printed).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn printed_weighting_multiplies_by_n() {
        let l = rcd_from_scores(&[0.9], &[0.1, 0.1], 2, NegativeWeighting::Printed).unwrap();
        let expect = -(0.9f64).ln() - 2.0 * (2.0 * (0.9f64).ln());
        assert!((l - expect).abs() < 1e-14);
        assert!((l - 0.5268).abs() < 1e-4);
        let m = rcd_from_scores(&[0.9], &[0.1, 0.1], 2, NegativeWeighting::Mean).unwrap();
        assert!((m - 3.0 * -(0.9f64).ln()).abs() < 1e-14);
    }

    #[test]
    fn empty_positives_rejected() {
        assert!(rcd_from_scores(&[], &[0.1], 1, NegativeWeighting::Mean).is_err());
    }

    #[test]
    fn kd_examples() {
        assert!((kd_loss(&[0.0, 0.0], &[0.0, 0.0], 1.0).unwrap() - 2f64.ln()).abs() < 1e-15);
        let p = [1.0 / (1.0 + (-2f64).exp()), 1.0 / (1.0 + 2f64.exp())];
        let expect = -(p[0] * p[1].ln() + p[1] * p[0].ln());
        let got = kd_loss(&[2.0, 0.0], &[0.0, 2.0], 1.0).unwrap();
        assert!((got - expect).abs() < 1e-14);
        assert!((got - 1.888522).abs() < 1e-5);
        assert!(kd_loss(&[0.0], &[0.0], 1.0).is_err());
        assert!(kd_loss(&[0.0, 1.0], &[0.0], 1.0).is_err());
    }

    #[test]
    fn cls_examples() {
        let mut z = vec![0.0; 5];
        z[2] = 30.0;
        assert!(cls_loss(&z, 2, ClsMode::CrossEntropy).unwrap() < 1e-9);
        let u = cls_loss(&[0.3; 7], 4, ClsMode::CrossEntropy).unwrap();
        assert!((u - 7f64.ln()).abs() < 1e-14);
        assert!(cls_loss(&[0.0, 0.0], 2, ClsMode::CrossEntropy).is_err());
    }

    #[test]
    fn total_examples() {
        let w = LossWeights::default();
        assert_eq!(total_loss(1.0, 1.0, 1.0, &w).total, 3.5);
        let w0 = LossWeights { alpha: 0.0, beta: 0.0, rho: 4.0 };
        assert_eq!(total_loss(1.25, 7.0, 9.0, &w0).total, 1.25);
        assert_eq!((w.alpha, w.beta, w.rho), (0.5, 2.0, 4.0));
    }

    #[test]
    fn stable_sum_is_order_free() {
        let v = [1e16, 1.0, -1e16, 3.0];
        assert_eq!(stable_sum(v), 4.0);
        assert_eq!(stable_sum(v.iter().rev().copied()), 4.0);
    }
}
