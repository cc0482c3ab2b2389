//! Learnable relation heads.
//!
//! A head maps an (anchor, other) embedding pair to a relation vector:
//!
//! ```text
//! v = W_out · relu(A · e_anchor − B · e_other) + b_out
//! ```
//!
//! `A` and `B` are separate bias-free maps into the hidden space. One head
//! lives in teacher space (teacher anchor, teacher other) and another in the
//! cross-resolution space (teacher anchor, student other); they never share
//! parameters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Matrix, Tape, Var};
use crate::error::{ensure_dim, Error, Result};
use crate::nn::{Bound, Linear, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Teacher,
    Student,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationSpace {
    TeacherTeacher,
    TeacherStudent,
}

impl RelationSpace {
    fn sources(self) -> (Source, Source) {
        match self {
            RelationSpace::TeacherTeacher => (Source::Teacher, Source::Teacher),
            RelationSpace::TeacherStudent => (Source::Teacher, Source::Student),
        }
    }
}

/// Backbone feature vector for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub values: Vec<f64>,
    pub source: Source,
    pub sample_id: usize,
    pub label: Option<usize>,
}

impl Embedding {
    pub fn new(values: Vec<f64>, source: Source, sample_id: usize, label: Option<usize>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract(format!("embedding {sample_id} has non-finite entries")));
        }
        Ok(Self { values, source, sample_id, label })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelationVector {
    pub values: Vec<f64>,
    pub space: RelationSpace,
    pub anchor_id: usize,
    pub other_id: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelationHead {
    pub space: RelationSpace,
    pub anchor_map: Linear,
    pub other_map: Linear,
    pub out_map: Linear,
}

impl RelationHead {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        space: RelationSpace,
        anchor_dim: usize,
        other_dim: usize,
        hidden_dim: usize,
        relation_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            space,
            anchor_map: Linear::new(store, &format!("{name}.anchor"), anchor_dim, hidden_dim, false, rng),
            other_map: Linear::new(store, &format!("{name}.other"), other_dim, hidden_dim, false, rng),
            out_map: Linear::new(store, &format!("{name}.out"), hidden_dim, relation_dim, true, rng),
        }
    }

    pub fn anchor_dim(&self) -> usize {
        self.anchor_map.in_dim
    }

    pub fn other_dim(&self) -> usize {
        self.other_map.in_dim
    }

    pub fn relation_dim(&self) -> usize {
        self.out_map.out_dim
    }

    pub fn project_anchor(&self, tape: &mut Tape, bound: &Bound, anchors: Var) -> Var {
        self.anchor_map.forward(tape, bound, anchors)
    }

    pub fn project_other(&self, tape: &mut Tape, bound: &Bound, others: Var) -> Var {
        self.other_map.forward(tape, bound, others)
    }

    /// Output stage applied to already projected rows.
    pub fn combine(&self, tape: &mut Tape, bound: &Bound, anchor_proj: Var, other_proj: Var) -> Var {
        let diff = tape.sub(anchor_proj, other_proj);
        let h = tape.relu(diff);
        self.out_map.forward(tape, bound, h)
    }

    /// Row-wise relation vectors for aligned `anchors` and `others`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, anchors: Var, others: Var) -> Var {
        let pa = self.project_anchor(tape, bound, anchors);
        let po = self.project_other(tape, bound, others);
        self.combine(tape, bound, pa, po)
    }

    fn check_pair(&self, e_i: &Embedding, e_j: &Embedding) -> Result<()> {
        ensure_dim("relation anchor", self.anchor_dim(), e_i.dim())?;
        ensure_dim("relation other", self.other_dim(), e_j.dim())?;
        let (si, sj) = self.space.sources();
        if e_i.source != si || e_j.source != sj {
            return Err(Error::contract(format!(
                "{:?} head expects ({si:?}, {sj:?}) embeddings, got ({:?}, {:?})",
                self.space, e_i.source, e_j.source
            )));
        }
        Ok(())
    }

    pub fn relate(&self, store: &ParamStore, e_i: &Embedding, e_j: &Embedding) -> Result<RelationVector> {
        let mut out = self.relate_batch(store, std::slice::from_ref(e_i), std::slice::from_ref(e_j))?;
        Ok(out.pop().expect("one relation"))
    }

    pub fn relate_batch(
        &self,
        store: &ParamStore,
        anchors: &[Embedding],
        others: &[Embedding],
    ) -> Result<Vec<RelationVector>> {
        if anchors.len() != others.len() {
            return Err(Error::contract(format!(
                "relate_batch: {} anchors vs {} others",
                anchors.len(),
                others.len()
            )));
        }
        if anchors.is_empty() {
            return Ok(Vec::new());
        }
        for (a, o) in anchors.iter().zip(others) {
            self.check_pair(a, o)?;
        }
        let mut tape = Tape::new();
        let bound = store.bind_frozen(&mut tape);
        let a = tape.constant(stack(anchors));
        let o = tape.constant(stack(others));
        let v = self.forward(&mut tape, &bound, a, o);
        let values = tape.value(v);
        Ok(anchors
            .iter()
            .zip(others)
            .zip(values.rows())
            .map(|((a, o), row)| RelationVector {
                values: row.to_vec(),
                space: self.space,
                anchor_id: a.sample_id,
                other_id: o.sample_id,
            })
            .collect())
    }
}

/// Stacks embeddings as matrix rows.
pub fn stack(embeddings: &[Embedding]) -> Matrix {
    let d = embeddings.first().map(|e| e.dim()).unwrap_or(0);
    let flat: Vec<f64> = embeddings.iter().flat_map(|e| e.values.iter().copied()).collect();
    Matrix::from_shape_vec((embeddings.len(), d), flat).expect("uniform embedding dims")
}
