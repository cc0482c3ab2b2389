//! Helpers shared by the integration and acceptance targets.
#![allow(dead_code)]

use crrcd::autograd::{Matrix, Tape, Var};
use crrcd::config::ExperimentConfig;
use crrcd::critic::Critic;
use crrcd::data::{make_synthetic_split, Dataset, Split, SyntheticSpec};
use crrcd::losses::{arcface_tape, cross_entropy_tape, kd_loss_tape, rcd_loss_tape, NegativeWeighting};
use crrcd::nn::{Bound, ParamStore};
use crrcd::relation::{RelationHead, RelationSpace};
use crrcd::trainer::{init_model, objective, DistillTerms, Model, NegativeSet, Phase, RelationSample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_shape_simple_fn((rows, cols), || rng.random_range(-scale..scale))
}

/// Largest relative error `‖a − n‖ / max(‖a‖, ‖n‖)` over the parameter
/// tensors of `store`, comparing reverse-mode gradients of `f` against
/// central differences with step `h`.
pub fn gradient_error<F>(store: &ParamStore, h: f64, f: F) -> f64
where
    F: Fn(&mut Tape, &Bound, &ParamStore) -> Var,
{
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let root = f(&mut tape, &bound, store);
    let grads = store.gradients(&bound, &tape.backward(root));
    let eval = |s: &ParamStore| {
        let mut t = Tape::new();
        let b = s.bind_frozen(&mut t);
        let r = f(&mut t, &b, s);
        t.scalar(r)
    };
    let mut worst: f64 = 0.0;
    let mut probe = store.clone();
    for id in store.ids() {
        let analytic = &grads[id.0];
        let mut numeric = Matrix::zeros(analytic.dim());
        for idx in 0..analytic.len() {
            let (r, c) = (idx / analytic.ncols(), idx % analytic.ncols());
            let orig = store.get(id)[[r, c]];
            probe.get_mut(id)[[r, c]] = orig + h;
            let up = eval(&probe);
            probe.get_mut(id)[[r, c]] = orig - h;
            let down = eval(&probe);
            probe.get_mut(id)[[r, c]] = orig;
            numeric[[r, c]] = (up - down) / (2.0 * h);
        }
        let diff = (analytic - &numeric).mapv(|v| v * v).sum().sqrt();
        let scale = analytic.mapv(|v| v * v).sum().sqrt().max(numeric.mapv(|v| v * v).sum().sqrt());
        if scale > 1e-10 {
            worst = worst.max(diff / scale);
        }
    }
    worst
}

/// Relation heads of both spaces with random inputs and a random linear
/// read-out of the relation vectors.
pub fn relation_head_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let (d_t, d_s, hid, d_r, rows) = (5, 4, 6, 3, 4);
    let tt = RelationHead::new(&mut store, "tt", RelationSpace::TeacherTeacher, d_t, d_t, hid, d_r, &mut r);
    let ts = RelationHead::new(&mut store, "ts", RelationSpace::TeacherStudent, d_t, d_s, hid, d_r, &mut r);
    let anchors = store.add("anchors", random_matrix(&mut r, rows, d_t, 1.0));
    let others_t = store.add("others_t", random_matrix(&mut r, rows, d_t, 1.0));
    let others_s = store.add("others_s", random_matrix(&mut r, rows, d_s, 1.0));
    let readout = random_matrix(&mut r, rows, d_r, 1.0);
    gradient_error(&store, 1e-6, |t, b, _| {
        let a = b.var(anchors);
        let v1 = tt.forward(t, b, a, b.var(others_t));
        let v2 = ts.forward(t, b, a, b.var(others_s));
        let v = t.add(v1, v2);
        let w = t.constant(readout.clone());
        let p = t.mul(v, w);
        t.sum(p)
    })
}

/// Critic scores with random relation vectors; the objective mixes
/// `log h` and `log(1 − h)` terms.
pub fn critic_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let (d_r, d_c, rows) = (4, 3, 5);
    let tau = r.random_range(0.3..1.0);
    let critic = Critic::new(&mut store, "critic", d_r, d_c, tau, 8, 50, &mut r).unwrap();
    let v_t = store.add("v_t", random_matrix(&mut r, rows, d_r, 1.0));
    let v_ts = store.add("v_ts", random_matrix(&mut r, rows, d_r, 1.0));
    let mask: Vec<f64> = (0..rows).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect();
    gradient_error(&store, 1e-6, |t, b, _| {
        let h = critic.scores(t, b, b.var(v_t), b.var(v_ts));
        let lh = t.ln(h);
        let om = t.scale(h, -1.0);
        let om = t.add_scalar(om, 1.0);
        let lom = t.ln(om);
        let m = t.constant(Matrix::from_shape_vec((rows, 1), mask.clone()).unwrap());
        let inv = t.constant(Matrix::from_shape_vec((rows, 1), mask.iter().map(|v| 1.0 - v).collect()).unwrap());
        let a = t.mul(lh, m);
        let c = t.mul(lom, inv);
        let s = t.add(a, c);
        t.sum(s)
    })
}

/// Relation contrastive loss with respect to the scores themselves.
pub fn rcd_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let (p, n) = (3, 4);
    let pos = store.add("pos", Matrix::from_shape_simple_fn((p, 1), || r.random_range(0.05..0.95)));
    let neg = store.add("neg", Matrix::from_shape_simple_fn((p * n, 1), || r.random_range(0.05..0.95)));
    let weighting = if seed % 2 == 0 { NegativeWeighting::Printed } else { NegativeWeighting::Mean };
    gradient_error(&store, 1e-7, |t, b, _| rcd_loss_tape(t, b.var(pos), Some(b.var(neg)), n, weighting))
}

pub fn kd_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let z_s = store.add("z_s", random_matrix(&mut r, 3, 5, 3.0));
    let z_t = random_matrix(&mut r, 3, 5, 3.0);
    let rho = r.random_range(1.0..5.0);
    gradient_error(&store, 1e-6, |t, b, _| kd_loss_tape(t, &z_t, b.var(z_s), rho))
}

pub fn cross_entropy_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let z = store.add("z", random_matrix(&mut r, 4, 6, 3.0));
    let labels: Vec<usize> = (0..4).map(|_| r.random_range(0..6)).collect();
    gradient_error(&store, 1e-6, |t, b, _| cross_entropy_tape(t, b.var(z), &labels))
}

pub fn arcface_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let cos = store.add("cos", Matrix::from_shape_simple_fn((4, 5), || r.random_range(-0.9..0.9)));
    let labels: Vec<usize> = (0..4).map(|_| r.random_range(0..5)).collect();
    gradient_error(&store, 1e-7, |t, b, _| arcface_tape(t, b.var(cos), &labels, 4.0, 0.3))
}

/// Small corpus plus a config sized for fast tests.
pub fn toy_setup(seed: u64) -> (ExperimentConfig, Dataset) {
    let mut c = ExperimentConfig::default();
    c.seed = seed;
    c.teacher.arch = "mlp:7-5".into();
    c.student.arch = "mlp:6-4".into();
    c.teacher.epochs = 1;
    c.epochs = 2;
    c.batch_size = 6;
    c.critic.n_negatives = 3;
    c.critic.relation_dim = 4;
    c.critic.hidden_dim = Some(5);
    c.critic.proj_dim = Some(3);
    c.critic.tau = 0.5;
    c.bank.capacity = 24;
    c.data.hires = 8;
    let spec = SyntheticSpec::new(3, 6, 8, seed);
    let ds = Dataset::new("train", 3, 4, make_synthetic_split(&spec, Split::Train).unwrap()).unwrap();
    (c, ds)
}

/// Full distillation objective on a two-layer student with random teacher
/// outputs, a random partner shift and random negatives; gradients with
/// respect to every student, relation head and critic parameter.
pub fn end_to_end_instance(seed: u64) -> f64 {
    let (config, ds) = toy_setup(seed);
    let teacher = init_model(&config, &ds, Phase::Teacher, None).unwrap();
    let model: Model = init_model(&config, &ds, Phase::Distill, Some(&teacher)).unwrap();
    let mut r = rng(seed ^ 0xfeed);
    let b = 5;
    let rows: Vec<usize> = (0..b).map(|_| r.random_range(0..ds.len())).collect();
    let inputs = model.inputs(&ds).select(ndarray::Axis(0), &rows);
    let labels: Vec<usize> = rows.iter().map(|&i| ds.samples[i].label).collect();
    let shift = r.random_range(1..b);
    let n = config.critic.n_negatives;
    let d_t = teacher.backbone.embedding_dim();
    let d_s = model.backbone.embedding_dim();
    let students = random_matrix(&mut r, 7, d_s, 1.0);
    let terms = DistillTerms {
        teacher_emb: random_matrix(&mut r, b, d_t, 1.5),
        teacher_logits: random_matrix(&mut r, b, ds.classes, 3.0),
        relation: Some(RelationSample {
            partner: (0..b).map(|i| (i + shift) % b).collect(),
            negatives: Some(NegativeSet {
                anchor_rows: (0..b * n).map(|q| q / n).collect(),
                student_rows: (0..b * n).map(|_| r.random_range(0..7)).collect(),
                students,
            }),
        }),
    };
    gradient_error(&model.store, 1e-6, |t, bound, _| {
        objective(t, bound, &model, &config, &inputs, &labels, Some(&terms)).root
    })
}

pub const INSTANCES: u64 = 20;

/// Worst error of each gradient family over [`INSTANCES`] seeds.
pub fn gradient_suite() -> Vec<(&'static str, f64, f64)> {
    let worst = |f: fn(u64) -> f64| (0..INSTANCES).map(f).fold(0.0f64, f64::max);
    vec![
        ("relation heads", worst(relation_head_instance), 1e-4),
        ("critic", worst(critic_instance), 1e-4),
        ("rcd loss", worst(rcd_instance), 1e-4),
        ("kd loss", worst(kd_instance), 1e-4),
        ("cross-entropy", worst(cross_entropy_instance), 1e-4),
        ("arcface", worst(arcface_instance), 1e-4),
        ("end-to-end", worst(end_to_end_instance), 1e-3),
    ]
}

// ---------------------------------------------------------------------------
// Scalar and loop oracles
// ---------------------------------------------------------------------------

/// `x · W` for a row vector, by explicit loops.
pub fn vec_mat(x: &[f64], w: &Matrix) -> Vec<f64> {
    (0..w.ncols()).map(|j| (0..w.nrows()).map(|i| x[i] * w[[i, j]]).sum()).collect()
}

pub fn l2_normalized(x: &[f64]) -> Vec<f64> {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    x.iter().map(|v| v / n).collect()
}

/// Critic probability written out term by term, clamped to
/// `[1e-7, 1 − 1e-7]`.
pub fn scalar_critic(v_t: &[f64], v_ts: &[f64], w1: &Matrix, w2: &Matrix, tau: f64, n: usize, m: usize) -> f64 {
    let u = l2_normalized(&vec_mat(v_t, w1));
    let w = l2_normalized(&vec_mat(v_ts, w2));
    let s: f64 = u.iter().zip(&w).map(|(a, b)| a * b).sum();
    let e = (s / tau).exp();
    (e / (e + n as f64 / m as f64)).clamp(1e-7, 1.0 - 1e-7)
}

/// Relation contrastive loss for unclamped, interior scores.
pub fn scalar_rcd(pos: &[f64], neg: &[f64], neg_weight: f64) -> f64 {
    let mut l = 0.0;
    for h in pos {
        l -= h.ln();
    }
    let mut s = 0.0;
    for h in neg {
        s -= (1.0 - h).ln();
    }
    (l + neg_weight * s) / pos.len() as f64
}

/// Softened distillation loss from first principles.
pub fn scalar_kd(z_t: &[f64], z_s: &[f64], rho: f64) -> f64 {
    let soft = |z: &[f64]| {
        let e: Vec<f64> = z.iter().map(|v| (v / rho).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect::<Vec<f64>>()
    };
    let (p, q) = (soft(z_t), soft(z_s));
    -rho * rho * p.iter().zip(&q).map(|(a, b)| a * b.ln()).sum::<f64>()
}

/// Best number of correct calls over every threshold `t` of the rule
/// `same ⇔ score > t`, trying each score value and −∞.
pub fn exhaustive_verify(scores: &[f64], same: &[bool]) -> usize {
    let correct = |t: f64| scores.iter().zip(same).filter(|(s, same)| (**s > t) == **same).count();
    scores.iter().map(|&t| correct(t)).chain([correct(f64::NEG_INFINITY)]).max().unwrap_or(0)
}

pub fn loop_cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Rank-k hit rate by comparing every probe with every gallery item. A
/// gallery item outranks another when its score is higher, or equal with a
/// lower index.
pub fn loop_retrieval(gallery: &Matrix, g_labels: &[usize], probes: &Matrix, p_labels: &[usize], k: usize) -> f64 {
    let mut hits = 0;
    for p in 0..probes.nrows() {
        let probe = probes.row(p).to_vec();
        let scores: Vec<f64> = (0..gallery.nrows()).map(|g| loop_cosine(&probe, &gallery.row(g).to_vec())).collect();
        let mut best_rank = usize::MAX;
        for g in 0..gallery.nrows() {
            if g_labels[g] != p_labels[p] {
                continue;
            }
            let mut rank = 0;
            for o in 0..gallery.nrows() {
                if scores[o] > scores[g] || (scores[o] == scores[g] && o < g) {
                    rank += 1;
                }
            }
            best_rank = best_rank.min(rank);
        }
        if best_rank < k {
            hits += 1;
        }
    }
    hits as f64 / probes.nrows() as f64
}

/// Top-1 accuracy from a logit matrix, first maximum wins.
pub fn loop_top1(logits: &Matrix, labels: &[usize]) -> f64 {
    let mut hits = 0;
    for r in 0..logits.nrows() {
        let mut best = 0;
        for c in 1..logits.ncols() {
            if logits[[r, c]] > logits[[r, best]] {
                best = c;
            }
        }
        if best == labels[r] {
            hits += 1;
        }
    }
    hits as f64 / labels.len() as f64
}

/// Bank contents a sliding window predicts after pushing ids `0..pushes`.
pub fn fifo_window(pushes: usize, capacity: usize) -> Vec<usize> {
    (pushes.saturating_sub(capacity)..pushes).collect()
}

// ---------------------------------------------------------------------------
// Desk-scale runs
// ---------------------------------------------------------------------------

pub const DESK_SEEDS: [u64; 3] = [5, 6, 7];
pub const DESK_TRAIN_PER_CLASS: usize = 30;
pub const DESK_TEST_PER_CLASS: usize = 100;

pub fn desk_config() -> ExperimentConfig {
    ExperimentConfig::from_toml(include_str!("../../configs/desk.toml")).expect("bundled config parses")
}

pub fn desk_corpus(seed: u64) -> (Dataset, Dataset) {
    let spec = SyntheticSpec::new(10, DESK_TRAIN_PER_CLASS, 32, seed);
    crrcd::data::synthetic_datasets(&spec, DESK_TEST_PER_CLASS).expect("synthetic corpus")
}

/// Test top-1 of the teacher and of the three students (no distillation,
/// distillation only, distillation plus relation contrast) for one seed.
pub fn desk_variants(base: &ExperimentConfig, seed: u64) -> crrcd::Result<[f64; 4]> {
    use crrcd::evaluator::top1;
    use crrcd::trainer::{distill_student, train_plain, train_teacher};
    let mut config = base.clone();
    config.seed = seed;
    let (train, test) = desk_corpus(seed);
    let teacher = train_teacher(&config, &train, None)?;
    let mut plain = config.clone();
    plain.loss.alpha = 0.0;
    plain.loss.beta = 0.0;
    let (p, _) = train_plain(&plain, &train)?;
    let mut kd = config.clone();
    kd.loss.beta = 0.0;
    let (k, _) = distill_student(&kd, &teacher.model, &train)?;
    let (c, _) = distill_student(&config, &teacher.model, &train)?;
    Ok([top1(&teacher.model, &test)?, top1(&p, &test)?, top1(&k, &test)?, top1(&c, &test)?])
}
