//! Parameters, layers and the optimizer shared by backbones, relation heads
//! and the critic.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Matrix, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Flat, named collection of parameter matrices.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

/// Parameters of a store registered on a tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    /// Registers every parameter as a trainable tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound { vars: self.values.iter().map(|v| tape.param(v.clone())).collect() }
    }

    /// Registers every parameter as a constant (frozen forward pass).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound { vars: self.values.iter().map(|v| tape.constant(v.clone())).collect() }
    }

    /// Per-parameter gradients in store order; zeros where nothing flowed.
    pub fn gradients(&self, bound: &Bound, grads: &Gradients) -> Vec<Matrix> {
        self.values
            .iter()
            .zip(&bound.vars)
            .map(|(v, var)| grads.get_or_zeros(*var, v.dim()))
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|m| m.iter().all(|v| v.is_finite()))
    }

    /// SHA-256 over names, shapes and little-endian parameter bytes.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, v) in self.names.iter().zip(&self.values) {
            h.update(name.as_bytes());
            h.update((v.nrows() as u64).to_le_bytes());
            h.update((v.ncols() as u64).to_le_bytes());
            for x in v.iter() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Copies values from `other`, which must have the same layout.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::contract("parameter layout differs from checkpoint"));
        }
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            if dst.dim() != src.dim() {
                return Err(Error::contract("parameter shape differs from checkpoint"));
            }
            dst.assign(src);
        }
        Ok(())
    }
}

/// `U(-1/√fan_in, 1/√fan_in)` initialization.
pub fn fan_in_uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, shape: (usize, usize)) -> Matrix {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array2::from_shape_simple_fn(shape, || rng.random_range(-bound..bound))
}

/// Affine map `x · W (+ b)` with `W: in × out`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), fan_in_uniform(rng, in_dim, (in_dim, out_dim)));
        let bias = bias.then(|| store.add(format!("{name}.bias"), fan_in_uniform(rng, in_dim, (1, out_dim))));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        let y = tape.matmul(x, bound.var(self.weight));
        match self.bias {
            Some(b) => tape.add_row(y, bound.var(b)),
            None => y,
        }
    }
}

/// Parsed backbone architecture: `mlp:<w1>-<w2>-...`. Hidden layers use a
/// rectifier; the last width is the linear embedding layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchSpec {
    pub widths: Vec<usize>,
}

impl ArchSpec {
    pub fn parse(id: &str) -> Result<Self> {
        let rest = id
            .strip_prefix("mlp:")
            .ok_or_else(|| Error::contract(format!("unknown architecture `{id}` (expected mlp:<w1>-<w2>...)")))?;
        let widths = rest
            .split('-')
            .map(|w| w.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::contract(format!("bad layer widths in architecture `{id}`")))?;
        if widths.is_empty() || widths.contains(&0) {
            return Err(Error::contract(format!("architecture `{id}` needs positive widths")));
        }
        Ok(Self { widths })
    }

    pub fn embedding_dim(&self) -> usize {
        *self.widths.last().expect("nonempty")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    /// Affine classifier producing raw logits.
    Linear,
    /// Bias-free classifier over normalized embeddings and weights (cosine
    /// logits), used by the angular-margin loss.
    Cosine,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Classifier {
    Linear(Linear),
    /// `classes × dim` weight rows.
    Cosine { weight: ParamId, scale: f64 },
}

/// Feature extractor plus classification layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Backbone {
    pub input_dim: usize,
    pub layers: Vec<Linear>,
    pub classifier: Classifier,
    pub classes: usize,
}

pub const NORM_EPS: f64 = 1e-12;

impl Backbone {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        arch: &ArchSpec,
        input_dim: usize,
        classes: usize,
        classifier: ClassifierKind,
        cosine_scale: f64,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(arch.widths.len());
        let mut prev = input_dim;
        for (i, &w) in arch.widths.iter().enumerate() {
            layers.push(Linear::new(store, &format!("{prefix}.layer{i}"), prev, w, true, rng));
            prev = w;
        }
        let classifier = match classifier {
            ClassifierKind::Linear => Classifier::Linear(Linear::new(store, &format!("{prefix}.fc"), prev, classes, true, rng)),
            ClassifierKind::Cosine => Classifier::Cosine {
                weight: store.add(format!("{prefix}.fc.weight"), fan_in_uniform(rng, prev, (classes, prev))),
                scale: cosine_scale,
            },
        };
        Self { input_dim, layers, classifier, classes }
    }

    pub fn embedding_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(self.input_dim)
    }

    pub fn embed(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        let mut h = x;
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, bound, h);
            if i < last {
                h = tape.relu(h);
            }
        }
        h
    }

    /// Cosine similarity between embeddings and class weights. Only defined
    /// for the cosine classifier.
    pub fn cosines(&self, tape: &mut Tape, bound: &Bound, emb: Var) -> Option<Var> {
        match &self.classifier {
            Classifier::Cosine { weight, .. } => {
                let e = tape.row_normalize(emb, NORM_EPS);
                let w = tape.row_normalize(bound.var(*weight), NORM_EPS);
                Some(tape.matmul_nt(e, w))
            }
            Classifier::Linear(_) => None,
        }
    }

    /// Margin-free logits.
    pub fn logits(&self, tape: &mut Tape, bound: &Bound, emb: Var) -> Var {
        match &self.classifier {
            Classifier::Linear(l) => l.forward(tape, bound, emb),
            Classifier::Cosine { scale, .. } => {
                let c = self.cosines(tape, bound, emb).expect("cosine classifier");
                tape.scale(c, *scale)
            }
        }
    }

    /// Frozen forward pass returning `(embeddings, logits)`.
    pub fn infer(&self, store: &ParamStore, x: &Matrix) -> (Matrix, Matrix) {
        let mut tape = Tape::new();
        let bound = store.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let e = self.embed(&mut tape, &bound, xv);
        let z = self.logits(&mut tape, &bound, e);
        (tape.value(e).clone(), tape.value(z).clone())
    }
}

/// SGD with momentum and L2 weight decay: `v ← μv + (g + λp)`, `p ← p − lr·v`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<Matrix>,
    /// Per-tensor learning-rate multipliers; missing entries mean 1.
    #[serde(default)]
    pub lr_scale: Vec<f64>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        let velocity = store.values().iter().map(|v| Matrix::zeros(v.dim())).collect();
        Self { momentum, weight_decay, velocity, lr_scale: Vec::new() }
    }

    pub fn set_lr_scale(&mut self, id: ParamId, scale: f64) {
        if self.lr_scale.len() <= id.0 {
            self.lr_scale.resize(id.0 + 1, 1.0);
        }
        self.lr_scale[id.0] = scale;
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Matrix], lr: f64) {
        assert_eq!(grads.len(), store.len());
        for (i, g) in grads.iter().enumerate() {
            let p = &mut store.values[i];
            let v = &mut self.velocity[i];
            let (mu, wd) = (self.momentum, self.weight_decay);
            let lr = lr * self.lr_scale.get(i).copied().unwrap_or(1.0);
            ndarray::Zip::from(&mut *v).and(&*p).and(g).for_each(|v, &p, &g| {
                *v = mu * *v + g + wd * p;
            });
            p.zip_mut_with(v, |p, &v| *p -= lr * v);
        }
    }
}
