//! Critic estimating the probability that a (teacher relation, cross
//! relation) tuple comes from the joint distribution.
//!
//! ```text
//! s = ⟨ĥ1(v_t), ĥ2(v_ts)⟩            ĥ = l2-normalized bias-free linear map
//! h = e^{s/τ} / (e^{s/τ} + n/m)
//! ```
//!
//! `n` is the number of negatives per positive and `m` the number of
//! training samples. Outputs are clamped to `[ε, 1 − ε]` so downstream
//! logarithms stay finite.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Matrix, Tape, Var};
use crate::error::{ensure_dim, Error, Result};
use ndarray::Axis;

use crate::losses::{rcd_loss_tape, NegativeWeighting};
use crate::nn::{Bound, Linear, ParamStore, Sgd, NORM_EPS};
use crate::relation::RelationVector;

/// Clamp applied to critic probabilities.
pub const SCORE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Critic {
    pub h1: Linear,
    pub h2: Linear,
    pub tau: f64,
    pub n_negatives: usize,
    pub dataset_cardinality: usize,
}

impl Critic {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        relation_dim: usize,
        proj_dim: usize,
        tau: f64,
        n_negatives: usize,
        dataset_cardinality: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut bad = Vec::new();
        if !(tau > 0.0 && tau.is_finite()) {
            bad.push(format!("tau must be a positive real, got {tau}"));
        }
        if n_negatives == 0 {
            bad.push("n_negatives must be at least 1".to_string());
        }
        if dataset_cardinality == 0 {
            bad.push("dataset_cardinality must be at least 1".to_string());
        }
        if !bad.is_empty() {
            return Err(Error::Validation(bad));
        }
        Ok(Self {
            h1: Linear::new(store, &format!("{name}.h1"), relation_dim, proj_dim, false, rng),
            h2: Linear::new(store, &format!("{name}.h2"), relation_dim, proj_dim, false, rng),
            tau,
            n_negatives,
            dataset_cardinality,
        })
    }

    /// Prior offset `n/m` in the denominator.
    pub fn offset(&self) -> f64 {
        self.n_negatives as f64 / self.dataset_cardinality as f64
    }

    pub fn project_teacher(&self, tape: &mut Tape, bound: &Bound, v_t: Var) -> Var {
        let p = self.h1.forward(tape, bound, v_t);
        tape.row_normalize(p, NORM_EPS)
    }

    pub fn project_cross(&self, tape: &mut Tape, bound: &Bound, v_ts: Var) -> Var {
        let p = self.h2.forward(tape, bound, v_ts);
        tape.row_normalize(p, NORM_EPS)
    }

    /// Clamped scores for aligned rows of already normalized projections.
    pub fn score_projected(&self, tape: &mut Tape, u: Var, w: Var) -> Var {
        let s = tape.row_dot(u, w);
        let s = tape.scale(s, 1.0 / self.tau);
        let e = tape.exp(s);
        let denom = tape.add_scalar(e, self.offset());
        let h = tape.div(e, denom);
        tape.clamp(h, SCORE_EPS, 1.0 - SCORE_EPS)
    }

    /// Scores for aligned rows of `v_t` and `v_ts`, shape `rows × 1`.
    pub fn scores(&self, tape: &mut Tape, bound: &Bound, v_t: Var, v_ts: Var) -> Var {
        let u = self.project_teacher(tape, bound, v_t);
        let w = self.project_cross(tape, bound, v_ts);
        self.score_projected(tape, u, w)
    }

    pub fn critic_score(&self, store: &ParamStore, v_t: &RelationVector, v_ts: &RelationVector) -> Result<f64> {
        ensure_dim("critic teacher relation", self.h1.in_dim, v_t.values.len())?;
        ensure_dim("critic cross relation", self.h2.in_dim, v_ts.values.len())?;
        if v_t.values.iter().chain(&v_ts.values).any(|v| !v.is_finite()) {
            return Err(Error::contract("critic_score on non-finite relation"));
        }
        let mut tape = Tape::new();
        let bound = store.bind_frozen(&mut tape);
        let a = tape.constant(row(&v_t.values));
        let b = tape.constant(row(&v_ts.values));
        let h = self.scores(&mut tape, &bound, a, b);
        Ok(tape.scalar(h))
    }

    /// `log n + mean(log score)` over positive-tuple scores.
    pub fn mi_lower_bound(&self, positive_scores: &[f64]) -> Result<f64> {
        mi_lower_bound(self.n_negatives, positive_scores)
    }
}

/// Settings for [`fit_critic`].
#[derive(Debug, Clone)]
pub struct FitSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub weighting: NegativeWeighting,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self { steps: 2000, batch_size: 64, lr: 0.05, momentum: 0.9, weight_decay: 0.0, weighting: NegativeWeighting::Mean }
    }
}

/// Trains only the critic projections on fixed relation pairs. Row `i` of
/// `v_t` and `v_ts` is a positive tuple; negatives pair `v_t[i]` with
/// `n_negatives` other rows of `v_ts` drawn uniformly. Returns the loss of
/// every step.
pub fn fit_critic<R: Rng + ?Sized>(
    critic: &Critic,
    store: &mut ParamStore,
    v_t: &Matrix,
    v_ts: &Matrix,
    settings: &FitSettings,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let rows = v_t.nrows();
    if rows != v_ts.nrows() || rows < 2 {
        return Err(Error::contract(format!("fit_critic needs ≥ 2 aligned rows, got {rows} and {}", v_ts.nrows())));
    }
    ensure_dim("critic teacher relation", critic.h1.in_dim, v_t.ncols())?;
    ensure_dim("critic cross relation", critic.h2.in_dim, v_ts.ncols())?;
    let n = critic.n_negatives;
    let b = settings.batch_size.clamp(1, rows);
    let mut opt = Sgd::new(store, settings.momentum, settings.weight_decay);
    let mut losses = Vec::with_capacity(settings.steps);
    for _ in 0..settings.steps {
        let idx = rand::seq::index::sample(rng, rows, b).into_vec();
        let mut anchor_rows = Vec::with_capacity(b * n);
        let mut neg_rows = Vec::with_capacity(b * n);
        for (q, &i) in idx.iter().enumerate() {
            for _ in 0..n {
                // uniform over rows other than i
                let k = rng.random_range(0..rows - 1);
                neg_rows.push(if k >= i { k + 1 } else { k });
                anchor_rows.push(q);
            }
        }
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let a = tape.constant(v_t.select(Axis(0), &idx));
        let c = tape.constant(v_ts.select(Axis(0), &idx));
        let u = critic.project_teacher(&mut tape, &bound, a);
        let w = critic.project_cross(&mut tape, &bound, c);
        let pos = critic.score_projected(&mut tape, u, w);
        let cn = tape.constant(v_ts.select(Axis(0), &neg_rows));
        let wn = critic.project_cross(&mut tape, &bound, cn);
        let un = tape.gather_rows(u, anchor_rows);
        let neg = critic.score_projected(&mut tape, un, wn);
        let loss = rcd_loss_tape(&mut tape, pos, Some(neg), n, settings.weighting);
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Divergence { step: losses.len() as u64, epoch: 0 });
        }
        losses.push(value);
        let grads = store.gradients(&bound, &tape.backward(loss));
        opt.step(store, &grads, settings.lr);
    }
    Ok(losses)
}

/// Scores of aligned rows under the current parameters.
pub fn positive_scores(critic: &Critic, store: &ParamStore, v_t: &Matrix, v_ts: &Matrix) -> Result<Vec<f64>> {
    ensure_dim("critic teacher relation", critic.h1.in_dim, v_t.ncols())?;
    ensure_dim("critic cross relation", critic.h2.in_dim, v_ts.ncols())?;
    let mut tape = Tape::new();
    let bound = store.bind_frozen(&mut tape);
    let a = tape.constant(v_t.clone());
    let c = tape.constant(v_ts.clone());
    let h = critic.scores(&mut tape, &bound, a, c);
    Ok(tape.value(h).iter().copied().collect())
}

/// Closed form of the critic for a given inner product.
pub fn score_from_inner(inner: f64, tau: f64, n: usize, m: usize) -> f64 {
    let e = (inner / tau).exp();
    (e / (e + n as f64 / m as f64)).clamp(SCORE_EPS, 1.0 - SCORE_EPS)
}

pub fn mi_lower_bound(n: usize, positive_scores: &[f64]) -> Result<f64> {
    if positive_scores.is_empty() {
        return Err(Error::contract("mi_lower_bound needs at least one positive score"));
    }
    if n == 0 {
        return Err(Error::contract("mi_lower_bound needs n ≥ 1"));
    }
    let mut acc = 0.0;
    for &s in positive_scores {
        if !(s > 0.0 && s <= 1.0) {
            return Err(Error::contract(format!("score {s} outside (0, 1]")));
        }
        acc += s.clamp(SCORE_EPS, 1.0 - SCORE_EPS).ln();
    }
    Ok((n as f64).ln() + acc / positive_scores.len() as f64)
}

/// `map(v) / max(‖map(v)‖₂, ε)` for a single vector.
pub fn project_normalize(store: &ParamStore, map: &Linear, v: &[f64]) -> Result<Vec<f64>> {
    ensure_dim("projection input", map.in_dim, v.len())?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::contract("project_normalize on non-finite input"));
    }
    let mut tape = Tape::new();
    let bound = store.bind_frozen(&mut tape);
    let x = tape.constant(row(v));
    let p = map.forward(&mut tape, &bound, x);
    let n = tape.row_normalize(p, NORM_EPS);
    Ok(tape.value(n).row(0).to_vec())
}

fn row(v: &[f64]) -> Matrix {
    Matrix::from_shape_vec((1, v.len()), v.to_vec()).expect("row")
}
