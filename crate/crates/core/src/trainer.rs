//! Teacher pretraining, plain low-resolution training and relation
//! contrastive distillation.
//!
//! A [`Trainer`] advances one mini-batch per [`Trainer::step`]. Its full
//! state (parameters, momentum, sampler generator, negative bank, metric
//! history) is captured by [`Trainer::checkpoint`], so a resumed run emits
//! the same metric stream as an uninterrupted one.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Matrix, Tape, Var};
use crate::checkpoint::{Checkpoint, RngState};
use crate::config::{ClsKind, ExperimentConfig};
use crate::critic::Critic;
use crate::data::{Dataset, StudentInput};
use crate::error::{Error, Result};
use crate::evaluator;
use crate::losses::{self, arcface_tape, cross_entropy_tape, kd_loss_tape, rcd_loss_tape};
use crate::negatives::{Anchor, NegativeBank, SamplingPolicy};
use crate::nn::{ArchSpec, Backbone, Bound, ClassifierKind, ParamStore, Sgd};
use crate::relation::{RelationHead, RelationSpace};

// Generator streams derived from the run seed.
const TEACHER_INIT: u64 = 1;
const STUDENT_INIT: u64 = 2;
const SAMPLER: u64 = 3;
const RELATION_INIT: u64 = 4;
const SHUFFLE_BASE: u64 = 1 << 16;

/// Subtracted from every pixel before it reaches a backbone.
pub const PIXEL_CENTER: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// High-resolution supervised pretraining.
    Teacher,
    /// Low-resolution supervised training without a teacher.
    Plain,
    /// Low-resolution training with KD and relation contrastive terms.
    Distill,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Teacher => "teacher",
            Phase::Plain => "plain",
            Phase::Distill => "distill",
        }
    }
}

/// Which view of a sample a model consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputView {
    Hires,
    Lowres(StudentInput),
}

/// Relation heads and critic trained alongside a distilled student.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelationModules {
    pub teacher_head: RelationHead,
    pub cross_head: RelationHead,
    pub critic: Critic,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model {
    pub phase: Phase,
    pub input: InputView,
    pub backbone: Backbone,
    pub relation: Option<RelationModules>,
    pub store: ParamStore,
}

impl Model {
    /// Input rows for every sample of `ds`, pixels centred on zero.
    pub fn inputs(&self, ds: &Dataset) -> Matrix {
        let x = match self.input {
            InputView::Hires => ds.teacher_matrix(),
            InputView::Lowres(mode) => ds.student_matrix(mode),
        };
        x - PIXEL_CENTER
    }

    pub fn input_dim(&self, ds: &Dataset) -> usize {
        let (c, h, w) = ds.hires_shape();
        match self.input {
            InputView::Hires => c * h * w,
            InputView::Lowres(mode) => ds.student_input_dim(mode),
        }
    }

    /// `(embeddings, logits)` for every sample of `ds`.
    pub fn infer(&self, ds: &Dataset) -> Result<(Matrix, Matrix)> {
        if ds.is_empty() {
            return Ok((Matrix::zeros((0, self.backbone.embedding_dim())), Matrix::zeros((0, self.backbone.classes))));
        }
        crate::error::ensure_dim("model input", self.backbone.input_dim, self.input_dim(ds))?;
        Ok(self.backbone.infer(&self.store, &self.inputs(ds)))
    }

    pub fn embeddings(&self, ds: &Dataset) -> Result<Matrix> {
        Ok(self.infer(ds)?.0)
    }

    /// Arg-max class per sample (lowest index on ties).
    pub fn predict(&self, ds: &Dataset) -> Result<Vec<usize>> {
        let (_, z) = self.infer(ds)?;
        Ok(z.rows().into_iter().map(|r| evaluator::argmax(r.as_slice().expect("contiguous"))).collect())
    }

    /// Hash of every parameter value.
    pub fn content_hash(&self) -> String {
        self.store.content_hash()
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub cls: f64,
    pub kd: f64,
    pub rcd: f64,
    pub total: f64,
    pub warmup: bool,
}

pub const METRICS_HEADER: &str = "step,epoch,lr,cls,kd,rcd,total,warmup";

/// CSV rendering; floats use the shortest round-trip form.
pub fn render_metrics(rows: &[MetricRow]) -> String {
    let mut s = String::with_capacity(64 * (rows.len() + 1));
    s.push_str(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{},{},{}", r.step, r.epoch, r.lr, r.cls, r.kd, r.rcd, r.total, r.warmup);
    }
    s
}

pub fn parse_metrics(text: &str, origin: &str) -> Result<Vec<MetricRow>> {
    let mut lines = text.lines().enumerate();
    let err = |line: usize, m: &str| Error::Parse { path: origin.to_string(), line, message: m.to_string() };
    match lines.next() {
        Some((_, h)) if h.trim() == METRICS_HEADER => {}
        _ => return Err(err(1, "missing metrics header")),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(err(i + 1, "expected 8 columns"));
        }
        let num = |k: usize| f[k].parse::<f64>().map_err(|_| err(i + 1, "bad number"));
        out.push(MetricRow {
            step: f[0].parse().map_err(|_| err(i + 1, "bad step"))?,
            epoch: f[1].parse().map_err(|_| err(i + 1, "bad epoch"))?,
            lr: num(2)?,
            cls: num(3)?,
            kd: num(4)?,
            rcd: num(5)?,
            total: num(6)?,
            warmup: f[7].parse().map_err(|_| err(i + 1, "bad warmup flag"))?,
        });
    }
    Ok(out)
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    std::fs::write(path, render_metrics(rows)).map_err(|e| Error::io(path, e))
}

/// SHA-256 over labels, ids and high-resolution pixels.
pub fn dataset_fingerprint(ds: &Dataset) -> String {
    let mut h = Sha256::new();
    h.update((ds.classes as u64).to_le_bytes());
    for s in &ds.samples {
        h.update((s.sample_id as u64).to_le_bytes());
        h.update((s.label as u64).to_le_bytes());
        for v in &s.x_h.data {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mini-batches of one epoch (0-based). Batches shorter than two samples
/// are dropped since every anchor needs a distinct partner.
pub fn epoch_batches(seed: u64, epoch: usize, samples: usize, batch_size: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..samples).collect();
    order.shuffle(&mut seeded(seed, SHUFFLE_BASE + epoch as u64));
    order.chunks(batch_size.max(1)).filter(|c| c.len() >= 2).map(|c| c.to_vec()).collect()
}

pub fn steps_per_epoch(samples: usize, batch_size: usize) -> usize {
    let b = batch_size.max(1);
    let full = samples / b;
    full + usize::from(samples % b >= 2)
}

fn classifier_kind(config: &ExperimentConfig) -> ClassifierKind {
    match config.loss.cls {
        ClsKind::CrossEntropy => ClassifierKind::Linear,
        ClsKind::Arcface => ClassifierKind::Cosine,
    }
}

/// Fresh model for `phase`. Student backbones are initialised from the same
/// stream for the plain and distill phases, so both start identical.
pub fn init_model(config: &ExperimentConfig, ds: &Dataset, phase: Phase, teacher: Option<&Model>) -> Result<Model> {
    let (c, h, w) = ds.hires_shape();
    let (arch, input, stream, prefix) = match phase {
        Phase::Teacher => (&config.teacher.arch, InputView::Hires, TEACHER_INIT, "teacher"),
        Phase::Plain | Phase::Distill => (&config.student.arch, InputView::Lowres(config.student.input), STUDENT_INIT, "student"),
    };
    let input_dim = match input {
        InputView::Hires => c * h * w,
        InputView::Lowres(mode) => ds.student_input_dim(mode),
    };
    let arch = ArchSpec::parse(arch)?;
    let mut store = ParamStore::new();
    let mut rng = seeded(config.seed, stream);
    let backbone = Backbone::new(
        &mut store,
        prefix,
        &arch,
        input_dim,
        ds.classes,
        classifier_kind(config),
        config.loss.arcface_scale,
        &mut rng,
    );
    let relation = if phase == Phase::Distill {
        let teacher = teacher.ok_or_else(|| Error::contract("distillation needs a teacher"))?;
        let d_t = teacher.backbone.embedding_dim();
        let d_s = backbone.embedding_dim();
        let cc = &config.critic;
        let mut rng = seeded(config.seed, RELATION_INIT);
        let teacher_head =
            RelationHead::new(&mut store, "rel_tt", RelationSpace::TeacherTeacher, d_t, d_t, cc.hidden(), cc.relation_dim, &mut rng);
        let cross_head =
            RelationHead::new(&mut store, "rel_ts", RelationSpace::TeacherStudent, d_t, d_s, cc.hidden(), cc.relation_dim, &mut rng);
        let m = cc.dataset_cardinality.unwrap_or(ds.len().max(1));
        let critic = Critic::new(&mut store, "critic", cc.relation_dim, cc.proj(), cc.tau, cc.n_negatives, m, &mut rng)?;
        Some(RelationModules { teacher_head, cross_head, critic })
    } else {
        None
    };
    Ok(Model { phase, input, backbone, relation, store })
}

fn is_relation_param(name: &str) -> bool {
    ["rel_tt.", "rel_ts.", "critic."].iter().any(|p| name.starts_with(p))
}

/// Stepwise trainer for any [`Phase`].
pub struct Trainer<'a> {
    config: ExperimentConfig,
    data: &'a Dataset,
    teacher: Option<&'a Model>,
    teacher_hash: Option<String>,
    /// Frozen teacher `(embeddings, logits)` over the training split.
    teacher_out: Option<(Matrix, Matrix)>,
    inputs: Matrix,
    labels: Vec<usize>,
    ids: Vec<usize>,
    model: Model,
    opt: Sgd,
    rng: ChaCha8Rng,
    bank: Option<NegativeBank>,
    step: u64,
    epochs: usize,
    metrics: Vec<MetricRow>,
    batches: Option<(usize, Vec<Vec<usize>>)>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: &ExperimentConfig, data: &'a Dataset, phase: Phase, teacher: Option<&'a Model>) -> Result<Self> {
        config.validate()?;
        let model = init_model(config, data, phase, teacher)?;
        let mut opt = Sgd::new(&model.store, config.optimizer.momentum, config.optimizer.weight_decay);
        if model.relation.is_some() {
            for id in model.store.ids() {
                if is_relation_param(model.store.name(id)) {
                    opt.set_lr_scale(id, config.critic.lr_scale);
                }
            }
        }
        Self::assemble(config, data, teacher, model, opt, seeded(config.seed, SAMPLER), None, 0, Vec::new())
    }

    pub fn teacher(config: &ExperimentConfig, data: &'a Dataset) -> Result<Self> {
        Self::new(config, data, Phase::Teacher, None)
    }

    pub fn plain(config: &ExperimentConfig, data: &'a Dataset) -> Result<Self> {
        Self::new(config, data, Phase::Plain, None)
    }

    pub fn distill(config: &ExperimentConfig, data: &'a Dataset, teacher: &'a Model) -> Result<Self> {
        Self::new(config, data, Phase::Distill, Some(teacher))
    }

    /// Continues a run from `ckpt`. The supplied config must hash to the
    /// checkpoint's, the data must match its fingerprint and, for
    /// distillation, the teacher must match its parameter hash.
    pub fn resume(ckpt: Checkpoint, config: &ExperimentConfig, data: &'a Dataset, teacher: Option<&'a Model>) -> Result<Self> {
        config.validate()?;
        let found = config.hash();
        if found != ckpt.config_hash {
            return Err(Error::ConfigHashMismatch { expected: ckpt.config_hash, found });
        }
        if dataset_fingerprint(data) != ckpt.dataset_fingerprint {
            return Err(Error::contract("dataset differs from the one the checkpoint was trained on"));
        }
        if ckpt.model.phase == Phase::Distill {
            let t = teacher.ok_or_else(|| Error::contract("resuming distillation needs the teacher"))?;
            if Some(t.content_hash()) != ckpt.teacher_hash {
                return Err(Error::contract("teacher parameters differ from the checkpoint's teacher hash"));
            }
        }
        let rng = ckpt.rng.restore()?;
        Self::assemble(config, data, teacher, ckpt.model, ckpt.optimizer, rng, ckpt.bank, ckpt.step, ckpt.metrics)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        config: &ExperimentConfig,
        data: &'a Dataset,
        teacher: Option<&'a Model>,
        model: Model,
        opt: Sgd,
        rng: ChaCha8Rng,
        bank: Option<NegativeBank>,
        step: u64,
        metrics: Vec<MetricRow>,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::contract("training split is empty"));
        }
        crate::error::ensure_dim("model input", model.backbone.input_dim, model.input_dim(data))?;
        let phase = model.phase;
        let (teacher, teacher_hash, teacher_out) = if phase == Phase::Distill {
            let t = teacher.ok_or_else(|| Error::contract("distillation needs a teacher"))?;
            if t.backbone.classes != data.classes {
                return Err(Error::contract("teacher class count differs from the dataset's"));
            }
            let out = t.infer(data)?;
            (Some(t), Some(t.content_hash()), Some(out))
        } else {
            (None, None, None)
        };
        let bank = match (phase, bank) {
            (Phase::Distill, Some(b)) => Some(b),
            (Phase::Distill, None) => Some(NegativeBank::new(config.bank.capacity)?),
            _ => None,
        };
        let epochs = if phase == Phase::Teacher { config.teacher.epochs } else { config.epochs };
        Ok(Self {
            config: config.clone(),
            data,
            teacher,
            teacher_hash,
            teacher_out,
            inputs: model.inputs(data),
            labels: data.labels(),
            ids: data.ids(),
            model,
            opt,
            rng,
            bank,
            step,
            epochs,
            metrics,
            batches: None,
        })
    }

    pub fn phase(&self) -> Phase {
        self.model.phase
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn steps_per_epoch(&self) -> usize {
        steps_per_epoch(self.data.len(), self.config.batch_size)
    }

    pub fn total_steps(&self) -> u64 {
        (self.steps_per_epoch() * self.epochs) as u64
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.total_steps()
    }

    pub fn metrics(&self) -> &[MetricRow] {
        &self.metrics
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn bank(&self) -> Option<&NegativeBank> {
        self.bank.as_ref()
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    /// Runs until finished, or until `stop_at` steps have been taken.
    pub fn run(&mut self, stop_at: Option<u64>) -> Result<()> {
        let end = stop_at.map_or(self.total_steps(), |s| s.min(self.total_steps()));
        while self.step < end {
            self.step()?;
        }
        Ok(())
    }

    /// One optimizer step on the next mini-batch.
    pub fn step(&mut self) -> Result<MetricRow> {
        let spe = self.steps_per_epoch();
        let epoch = (self.step / spe as u64) as usize;
        let within = (self.step % spe as u64) as usize;
        if self.batches.as_ref().map(|(e, _)| *e) != Some(epoch) {
            self.batches = Some((epoch, epoch_batches(self.config.seed, epoch, self.data.len(), self.config.batch_size)));
        }
        let batch = self.batches.as_ref().expect("batches").1[within].clone();
        let lr = self.config.optimizer.lr_at(epoch + 1);

        let mut tape = Tape::new();
        let bound = self.model.store.bind(&mut tape);
        let out = self.forward(&mut tape, &bound, &batch)?;
        let row = MetricRow {
            step: self.step,
            epoch: epoch + 1,
            lr,
            cls: out.cls,
            kd: out.kd,
            rcd: out.rcd,
            total: out.total,
            warmup: out.warmup,
        };
        if !row.total.is_finite() {
            return Err(Error::Divergence { step: self.step, epoch: epoch + 1 });
        }
        let grads = tape.backward(out.root);
        let grads = self.model.store.gradients(&bound, &grads);
        self.opt.step(&mut self.model.store, &grads, lr);
        if !self.model.store.all_finite() {
            return Err(Error::Divergence { step: self.step, epoch: epoch + 1 });
        }
        if let (Some(bank), Some((t_emb, _))) = (self.bank.as_mut(), self.teacher_out.as_ref()) {
            let student = tape.value(out.student_emb);
            for (r, &i) in batch.iter().enumerate() {
                bank.push(t_emb.row(i).to_vec(), student.row(r).to_vec(), self.ids[i], Some(self.labels[i]))?;
            }
        }
        self.metrics.push(row);
        self.step += 1;
        Ok(row)
    }

    fn forward(&mut self, tape: &mut Tape, bound: &Bound, batch: &[usize]) -> Result<StepOutput> {
        let labels: Vec<usize> = batch.iter().map(|&i| self.labels[i]).collect();
        let inputs = self.inputs.select(Axis(0), batch);
        let (relation, warmup) = if self.teacher_out.is_some() && self.config.loss.beta > 0.0 {
            let (r, warm) = self.sample_relations(batch)?;
            (Some(r), warm)
        } else {
            (None, false)
        };
        let terms = self.teacher_out.as_ref().map(|(t_emb, t_logits)| DistillTerms {
            teacher_emb: t_emb.select(Axis(0), batch),
            teacher_logits: t_logits.select(Axis(0), batch),
            relation,
        });
        let obj = objective(tape, bound, &self.model, &self.config, &inputs, &labels, terms.as_ref());
        let b = obj.breakdown;
        Ok(StepOutput { root: obj.root, student_emb: obj.student_emb, cls: b.cls, kd: b.kd, rcd: b.rcd, total: b.total, warmup })
    }

    /// Draws the partner shift and the bank negatives for one batch. Row `i`
    /// is paired with `(i + r) mod B` for a uniform shift `r ∈ [1, B)`.
    fn sample_relations(&mut self, batch: &[usize]) -> Result<(RelationSample, bool)> {
        let b = batch.len();
        let shift = self.rng.random_range(1..b);
        let partner: Vec<usize> = (0..b).map(|i| (i + shift) % b).collect();
        let bank = self.bank.as_ref().expect("distill trainer owns a bank");
        let policy = SamplingPolicy { mode: self.config.bank.policy, n: self.config.critic.n_negatives };
        let mut anchor_rows = Vec::new();
        let mut bank_rows = Vec::new();
        let mut warm = false;
        for (i, &p) in partner.iter().enumerate() {
            let j = batch[p];
            let anchor = Anchor { sample_id: self.ids[j], label: Some(self.labels[j]) };
            let (picked, w) = bank.sample_with_warmup(&policy, &anchor, &mut self.rng)?;
            warm |= w;
            anchor_rows.extend(std::iter::repeat_n(i, picked.len()));
            bank_rows.extend(picked);
        }
        let negatives = if bank_rows.is_empty() {
            None
        } else {
            // Each distinct bank record is projected once and then gathered.
            let mut distinct = bank_rows.clone();
            distinct.sort_unstable();
            distinct.dedup();
            let mut slot = vec![0usize; bank.len()];
            for (s, &k) in distinct.iter().enumerate() {
                slot[k] = s;
            }
            let d_s = bank.get(distinct[0]).student.len();
            let mut students = Matrix::zeros((distinct.len(), d_s));
            for (s, &k) in distinct.iter().enumerate() {
                students.row_mut(s).assign(&ndarray::ArrayView1::from(&bank.get(k).student));
            }
            let student_rows = bank_rows.iter().map(|&k| slot[k]).collect();
            Some(NegativeSet { anchor_rows, student_rows, students })
        };
        Ok((RelationSample { partner, negatives }, warm))
    }

    /// Snapshot of the complete run state.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            config_hash: self.config.hash(),
            config: self.config.to_toml(),
            teacher_hash: self.teacher_hash.clone(),
            dataset_fingerprint: dataset_fingerprint(self.data),
            model: self.model.clone(),
            optimizer: self.opt.clone(),
            rng: RngState::capture(&self.rng),
            bank: self.bank.clone(),
            metrics: self.metrics.clone(),
        }
    }

    /// Checks the frozen teacher is untouched and returns the trained model
    /// with its metric history.
    pub fn finish(self) -> Result<(Model, Vec<MetricRow>)> {
        if let (Some(t), Some(h)) = (self.teacher, &self.teacher_hash) {
            if &t.content_hash() != h {
                return Err(Error::contract("teacher parameters changed during distillation"));
            }
        }
        Ok((self.model, self.metrics))
    }
}

struct StepOutput {
    root: Var,
    student_emb: Var,
    cls: f64,
    kd: f64,
    rcd: f64,
    total: f64,
    warmup: bool,
}

/// Negative tuples of one batch. Negative `q` pairs batch row
/// `anchor_rows[q]` with student embedding `students[student_rows[q]]`.
#[derive(Debug, Clone)]
pub struct NegativeSet {
    pub anchor_rows: Vec<usize>,
    pub student_rows: Vec<usize>,
    pub students: Matrix,
}

/// Partner assignment and negatives for the relation term.
#[derive(Debug, Clone)]
pub struct RelationSample {
    /// Batch row paired with each anchor row; never the row itself.
    pub partner: Vec<usize>,
    pub negatives: Option<NegativeSet>,
}

/// Teacher-side inputs of a distillation step.
#[derive(Debug, Clone)]
pub struct DistillTerms {
    pub teacher_emb: Matrix,
    pub teacher_logits: Matrix,
    /// `None` skips the relation term.
    pub relation: Option<RelationSample>,
}

pub struct Objective {
    pub root: Var,
    pub student_emb: Var,
    pub breakdown: losses::LossBreakdown,
}

/// Loss of one mini-batch. Without `terms` this is the plain supervised
/// loss; with them it adds `α·kd` and, when a relation sample is given,
/// `β·rcd`. The kd value is always reported.
pub fn objective(
    tape: &mut Tape,
    bound: &Bound,
    model: &Model,
    config: &ExperimentConfig,
    inputs: &Matrix,
    labels: &[usize],
    terms: Option<&DistillTerms>,
) -> Objective {
    let backbone = &model.backbone;
    let x = tape.constant(inputs.clone());
    let e_s = backbone.embed(tape, bound, x);
    let z_s = backbone.logits(tape, bound, e_s);
    let cls = match config.loss.cls {
        ClsKind::CrossEntropy => cross_entropy_tape(tape, z_s, labels),
        ClsKind::Arcface => {
            let cos = backbone.cosines(tape, bound, e_s).expect("cosine classifier");
            arcface_tape(tape, cos, labels, config.loss.arcface_scale, config.loss.arcface_margin)
        }
    };
    let Some(terms) = terms else {
        let c = tape.scalar(cls);
        let breakdown = losses::LossBreakdown { cls: c, kd: 0.0, rcd: 0.0, total: c };
        return Objective { root: cls, student_emb: e_s, breakdown };
    };
    let w = config.loss.weights();
    let kd = kd_loss_tape(tape, &terms.teacher_logits, z_s, w.rho);
    let mut root = cls;
    if w.alpha > 0.0 {
        let k = tape.scale(kd, w.alpha);
        root = tape.add(root, k);
    }
    let mut rcd_value = 0.0;
    if let (Some(sample), Some(rel)) = (&terms.relation, &model.relation) {
        let rcd = relation_loss(
            tape,
            bound,
            rel,
            &terms.teacher_emb,
            e_s,
            sample,
            config.critic.n_negatives,
            config.loss.negative_weighting,
        );
        rcd_value = tape.scalar(rcd);
        if w.beta > 0.0 {
            let r = tape.scale(rcd, w.beta);
            root = tape.add(root, r);
        }
    }
    let mut breakdown = losses::total_loss(tape.scalar(cls), tape.scalar(kd), rcd_value, &w);
    breakdown.total = tape.scalar(root);
    Objective { root, student_emb: e_s, breakdown }
}

/// Relation contrastive loss of one batch given teacher embeddings
/// `teacher_emb` (constants) and student embeddings `e_s` (rows aligned).
#[allow(clippy::too_many_arguments)]
pub fn relation_loss(
    tape: &mut Tape,
    bound: &Bound,
    rel: &RelationModules,
    teacher_emb: &Matrix,
    e_s: Var,
    sample: &RelationSample,
    n: usize,
    weighting: losses::NegativeWeighting,
) -> Var {
    let (th, xh, critic) = (&rel.teacher_head, &rel.cross_head, &rel.critic);
    let partner = &sample.partner;
    let anchors = tape.constant(teacher_emb.clone());
    let partners_t = tape.constant(teacher_emb.select(Axis(0), partner));
    let v_t = th.forward(tape, bound, anchors, partners_t);
    let anchor_proj = xh.project_anchor(tape, bound, anchors);
    let partners_s = tape.gather_rows(e_s, partner.clone());
    let partner_proj = xh.project_other(tape, bound, partners_s);
    let v_ts = xh.combine(tape, bound, anchor_proj, partner_proj);
    let u = critic.project_teacher(tape, bound, v_t);
    let w = critic.project_cross(tape, bound, v_ts);
    let positive = critic.score_projected(tape, u, w);
    let negative = sample.negatives.as_ref().map(|neg| {
        let students = tape.constant(neg.students.clone());
        let proj = xh.project_other(tape, bound, students);
        let proj = tape.gather_rows(proj, neg.student_rows.clone());
        let anchor_rep = tape.gather_rows(anchor_proj, neg.anchor_rows.clone());
        let v_neg = xh.combine(tape, bound, anchor_rep, proj);
        let w_neg = critic.project_cross(tape, bound, v_neg);
        let u_rep = tape.gather_rows(u, neg.anchor_rows.clone());
        critic.score_projected(tape, u_rep, w_neg)
    });
    rcd_loss_tape(tape, positive, negative, n, weighting)
}

/// A trained high-resolution teacher.
#[derive(Debug, Clone)]
pub struct TrainedTeacher {
    pub model: Model,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    pub metrics: Vec<MetricRow>,
}

pub fn train_teacher(config: &ExperimentConfig, train: &Dataset, val: Option<&Dataset>) -> Result<TrainedTeacher> {
    let mut t = Trainer::teacher(config, train)?;
    t.run(None)?;
    let (model, metrics) = t.finish()?;
    let train_accuracy = evaluator::top1(&model, train)?;
    let val_accuracy = val.map(|v| evaluator::top1(&model, v)).transpose()?;
    Ok(TrainedTeacher { model, train_accuracy, val_accuracy, metrics })
}

/// Student trained on low-resolution inputs with no teacher signal.
pub fn train_plain(config: &ExperimentConfig, train: &Dataset) -> Result<(Model, Vec<MetricRow>)> {
    let mut t = Trainer::plain(config, train)?;
    t.run(None)?;
    t.finish()
}

pub fn distill_student(config: &ExperimentConfig, teacher: &Model, train: &Dataset) -> Result<(Model, Vec<MetricRow>)> {
    let mut t = Trainer::distill(config, train, teacher)?;
    t.run(None)?;
    t.finish()
}
