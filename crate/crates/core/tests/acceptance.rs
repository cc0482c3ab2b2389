//! Acceptance criteria AC-1 .. AC-7. Prints one PASS/FAIL line per
//! criterion and exits non-zero if any fails.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::*;
use crrcd::autograd::Matrix;
use crrcd::critic::{fit_critic, mi_lower_bound, positive_scores, Critic, FitSettings};
use crrcd::evaluator::{retrieve_embeddings, top1, verify_scores};
use crrcd::losses::{kd_loss, rcd_loss, total_loss, LossWeights, NegativeWeighting, RelationTuple};
use crrcd::negatives::{Anchor, NegativeBank, SamplingMode, SamplingPolicy};
use crrcd::nn::ParamStore;
use crrcd::relation::{RelationSpace, RelationVector};
use crrcd::trainer::{init_model, Phase};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ChiSquared, ContinuousCDF};

// Tolerances and budgets.
const FIDELITY_TOL: f64 = 1e-9;
const FIDELITY_BUDGET: Duration = Duration::from_secs(10);
const DIRECTIONAL_MARGIN_PTS: f64 = 1.0;
const DIRECTIONAL_BUDGET: Duration = Duration::from_secs(30 * 60);
const GRADIENT_BUDGET: Duration = Duration::from_secs(120);
const MI_SLACK_NATS: f64 = 0.1;
const MI_BUDGET: Duration = Duration::from_secs(5 * 60);
const FIFO_PUSHES: usize = 10_000;
const UNIFORM_DRAWS: usize = 10_000;
const UNIFORM_P_MIN: f64 = 0.01;
const RESUME_TOL_PTS: f64 = 0.5;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rel_vec(values: Vec<f64>, space: RelationSpace) -> RelationVector {
    RelationVector { values, space, anchor_id: 0, other_id: 1 }
}

fn ac1() -> Outcome {
    let start = Instant::now();
    let mut worst = [0.0f64; 4];
    for seed in 0..200u64 {
        let mut r = rng(seed);
        let (d_r, d_c) = (r.random_range(2..9), r.random_range(2..9));
        let n = r.random_range(1..6);
        let m = r.random_range(1..500);
        let tau = r.random_range(0.05..1.0);
        let mut store = ParamStore::new();
        let critic = Critic::new(&mut store, "critic", d_r, d_c, tau, n, m, &mut r).unwrap();
        let (w1, w2) = (store.get(critic.h1.weight).clone(), store.get(critic.h2.weight).clone());
        let vec = |r: &mut ChaCha8Rng| (0..d_r).map(|_| r.random_range(-2.0..2.0)).collect::<Vec<f64>>();

        let rows = r.random_range(1..4);
        let mut positives = Vec::new();
        let mut negatives = Vec::new();
        let (mut pos_s, mut neg_s) = (Vec::new(), Vec::new());
        for _ in 0..rows {
            let (a, b) = (vec(&mut r), vec(&mut r));
            pos_s.push(scalar_critic(&a, &b, &w1, &w2, tau, n, m));
            let t = RelationTuple {
                v_t: rel_vec(a.clone(), RelationSpace::TeacherTeacher),
                v_ts: rel_vec(b, RelationSpace::TeacherStudent),
                joint: true,
            };
            let got = critic.critic_score(&store, &t.v_t, &t.v_ts).unwrap();
            worst[0] = worst[0].max((got - pos_s.last().unwrap()).abs());
            positives.push(t);
            for _ in 0..n {
                let c = vec(&mut r);
                neg_s.push(scalar_critic(&a, &c, &w1, &w2, tau, n, m));
                negatives.push(RelationTuple {
                    v_t: rel_vec(a.clone(), RelationSpace::TeacherTeacher),
                    v_ts: rel_vec(c, RelationSpace::TeacherStudent),
                    joint: false,
                });
            }
        }
        for (w, factor) in [(NegativeWeighting::Printed, n as f64), (NegativeWeighting::Mean, 1.0)] {
            let got = rcd_loss(&critic, &store, &positives, &negatives, w).unwrap();
            worst[1] = worst[1].max((got - scalar_rcd(&pos_s, &neg_s, factor)).abs());
        }

        let k = r.random_range(2..12);
        let z_t: Vec<f64> = (0..k).map(|_| r.random_range(-6.0..6.0)).collect();
        let z_s: Vec<f64> = (0..k).map(|_| r.random_range(-6.0..6.0)).collect();
        let rho = r.random_range(0.5..8.0);
        let kd = kd_loss(&z_t, &z_s, rho).unwrap();
        worst[2] = worst[2].max((kd - scalar_kd(&z_t, &z_s, rho)).abs());

        let (cls, rcd) = (r.random_range(0.0..5.0), r.random_range(0.0..5.0));
        let w = LossWeights { alpha: 0.5, beta: 2.0, rho };
        let total = total_loss(cls, kd, rcd, &w).total;
        worst[3] = worst[3].max((total - (cls + 0.5 * kd + 2.0 * rcd)).abs());
    }
    let elapsed = start.elapsed();
    let pass = worst.iter().all(|&e| e <= FIDELITY_TOL) && elapsed < FIDELITY_BUDGET;
    check(
        pass,
        format!(
            "max |err| critic {:.1e}, rcd {:.1e}, kd {:.1e}, total {:.1e} (tol {FIDELITY_TOL:e}); {:.2}s",
            worst[0],
            worst[1],
            worst[2],
            worst[3],
            elapsed.as_secs_f64()
        ),
    )
}

fn ac2() -> Outcome {
    let start = Instant::now();
    let base = desk_config();
    let runs: Vec<crrcd::Result<[f64; 4]>> = std::thread::scope(|s| {
        let handles: Vec<_> = DESK_SEEDS.iter().map(|&seed| s.spawn({
            let base = &base;
            move || desk_variants(base, seed)
        })).collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut mean = [0.0; 4];
    for r in runs {
        match r {
            Ok(acc) => mean.iter_mut().zip(acc).for_each(|(m, a)| *m += a / DESK_SEEDS.len() as f64),
            Err(e) => return check(false, format!("run failed: {e}")),
        }
    }
    let [teacher, plain, kd, full] = mean;
    let elapsed = start.elapsed();
    let margin = 100.0 * (full - plain);
    let pass = full >= kd && kd >= plain && margin >= DIRECTIONAL_MARGIN_PTS && elapsed < DIRECTIONAL_BUDGET;
    check(
        pass,
        format!(
            "mean test top-1 over seeds {DESK_SEEDS:?}: crrcd {full:.4} ≥ kd {kd:.4} ≥ plain {plain:.4}, \
             margin {margin:.2} pts (need ≥ {DIRECTIONAL_MARGIN_PTS}); teacher {teacher:.4}; {:.0}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn ac3() -> Outcome {
    let start = Instant::now();
    let suite = gradient_suite();
    let elapsed = start.elapsed();
    let pass = suite.iter().all(|(_, err, tol)| err < tol) && elapsed < GRADIENT_BUDGET;
    let parts: Vec<String> = suite.iter().map(|(name, err, tol)| format!("{name} {err:.1e}<{tol:.0e}")).collect();
    check(pass, format!("{} instances each: {}; {:.1}s", INSTANCES, parts.join(", "), elapsed.as_secs_f64()))
}

fn correlated_pairs(rows: usize, dim: usize, rho: f64, r: &mut ChaCha8Rng) -> (Matrix, Matrix) {
    let x = Matrix::from_shape_simple_fn((rows, dim), || StandardNormal.sample(r));
    let noise = Matrix::from_shape_simple_fn((rows, dim), || StandardNormal.sample(r));
    let y = &x * rho + &noise * (1.0 - rho * rho).sqrt();
    (x, y)
}

fn ac4() -> Outcome {
    let start = Instant::now();
    let (dim, rows, n) = (4, 4096, 64);
    let settings = FitSettings { weighting: NegativeWeighting::Mean, ..FitSettings::default() };
    let mut estimates = Vec::new();
    let mut over = f64::NEG_INFINITY;
    for (k, rho) in [0.2, 0.5, 0.8].into_iter().enumerate() {
        let mut r = rng(17 + k as u64);
        let (x, y) = correlated_pairs(rows, dim, rho, &mut r);
        let (xh, yh) = correlated_pairs(rows, dim, rho, &mut r);
        let mut store = ParamStore::new();
        let critic = Critic::new(&mut store, "critic", dim, 16, 0.1, n, 1, &mut r).unwrap();
        fit_critic(&critic, &mut store, &x, &y, &settings, &mut r).unwrap();
        let est = mi_lower_bound(n, &positive_scores(&critic, &store, &xh, &yh).unwrap()).unwrap();
        let analytic = -(dim as f64) / 2.0 * (1.0 - rho * rho).ln();
        over = over.max(est - analytic);
        estimates.push((rho, analytic, est));
    }
    let elapsed = start.elapsed();
    let monotone = estimates.windows(2).all(|w| w[0].2 < w[1].2);
    let pass = monotone && over <= MI_SLACK_NATS && elapsed < MI_BUDGET;
    let parts: Vec<String> = estimates.iter().map(|(r, a, e)| format!("ρ={r}: {e:.3} vs {a:.3}")).collect();
    check(
        pass,
        format!(
            "held-out bound {}; monotone {monotone}, max excess {over:.3} nats (≤ {MI_SLACK_NATS}); {:.1}s",
            parts.join(", "),
            elapsed.as_secs_f64()
        ),
    )
}

fn ac5() -> Outcome {
    let mut r = rng(55);
    // Sliding-window oracle after every push.
    let capacity = 1000;
    let mut bank = NegativeBank::new(capacity).unwrap();
    let mut fifo_ok = true;
    for id in 0..FIFO_PUSHES {
        bank.push(vec![id as f64], vec![-(id as f64)], id, Some(id % 10)).unwrap();
        let got: Vec<usize> = bank.iter().map(|rec| rec.sample_id).collect();
        fifo_ok &= got == fifo_window(id + 1, capacity);
    }

    // Every supervised draw avoids the anchor's label and id.
    let mut drawn = 0usize;
    let mut excluded_ok = true;
    let policy = SamplingPolicy { mode: SamplingMode::Supervised, n: 16 };
    for _ in 0..2000 {
        let anchor = Anchor { sample_id: r.random_range(0..FIFO_PUSHES), label: Some(r.random_range(0..10)) };
        for rec in bank.sample_negatives(&policy, &anchor, &mut r).unwrap() {
            excluded_ok &= rec.label != anchor.label && rec.sample_id != anchor.sample_id;
            drawn += 1;
        }
    }

    // Uniformity over an eligible pool.
    let anchor = Anchor { sample_id: usize::MAX, label: Some(3) };
    let pool = bank.eligible(SamplingMode::Supervised, &anchor).unwrap();
    let one = SamplingPolicy { mode: SamplingMode::Supervised, n: 1 };
    let mut counts = vec![0usize; bank.len()];
    for _ in 0..UNIFORM_DRAWS {
        counts[bank.sample_indices(&one, &anchor, &mut r).unwrap()[0]] += 1;
    }
    let expected = UNIFORM_DRAWS as f64 / pool.len() as f64;
    let stat: f64 = pool.iter().map(|&i| (counts[i] as f64 - expected).powi(2) / expected).sum();
    let outside = counts.iter().enumerate().filter(|(i, &c)| c > 0 && !pool.contains(i)).count();
    let p = 1.0 - ChiSquared::new((pool.len() - 1) as f64).unwrap().cdf(stat);

    let pass = fifo_ok && excluded_ok && outside == 0 && p > UNIFORM_P_MIN;
    check(
        pass,
        format!(
            "FIFO exact over {FIFO_PUSHES} pushes: {fifo_ok}; label exclusion on {drawn} draws: {excluded_ok}; \
             chi-square over {} cells at {UNIFORM_DRAWS} draws p = {p:.3} (> {UNIFORM_P_MIN})",
            pool.len()
        ),
    )
}

fn ac6() -> Outcome {
    let mut r = rng(66);
    let mut verify_ok = true;
    for _ in 0..500 {
        let len = r.random_range(2..40);
        // A coarse grid forces ties.
        let scores: Vec<f64> = (0..len).map(|_| (r.random_range(-10i32..=10) as f64) / 10.0).collect();
        let mut same: Vec<bool> = (0..len).map(|_| r.random_bool(0.5)).collect();
        same[0] = true;
        same[1] = false;
        let rep = verify_scores(&scores, &same, 10).unwrap();
        let best = exhaustive_verify(&scores, &same);
        let at_threshold = scores.iter().zip(&same).filter(|(s, same)| (**s > rep.threshold) == **same).count();
        verify_ok &= rep.accuracy == best as f64 / len as f64 && at_threshold == best;
    }

    let mut retrieval_ok = true;
    for _ in 0..20 {
        let (items, dim) = (50, 4);
        let mut gallery = Matrix::from_shape_simple_fn((items, dim), || r.random_range(-1.0..1.0));
        // Duplicate rows produce exact score ties.
        for i in 0..10 {
            let src = gallery.row(i).to_owned();
            gallery.row_mut(items - 1 - i).assign(&src);
        }
        let probes = Matrix::from_shape_simple_fn((items, dim), || r.random_range(-1.0..1.0));
        let gl: Vec<usize> = (0..items).map(|_| r.random_range(0..8)).collect();
        let pl: Vec<usize> = (0..items).map(|_| r.random_range(0..9)).collect();
        let ks: Vec<usize> = (1..=items).collect();
        let rep = retrieve_embeddings(&gallery, &gl, &probes, &pl, &ks).unwrap();
        for (&k, &acc) in ks.iter().zip(&rep.accuracy) {
            retrieval_ok &= acc == loop_retrieval(&gallery, &gl, &probes, &pl, k);
        }
    }

    let mut top1_ok = true;
    for seed in 0..10 {
        let (config, ds) = toy_setup(seed);
        for phase in [Phase::Teacher, Phase::Plain] {
            let model = init_model(&config, &ds, phase, None).unwrap();
            let (_, logits) = model.infer(&ds).unwrap();
            top1_ok &= top1(&model, &ds).unwrap() == loop_top1(&logits, &ds.labels());
        }
    }
    check(
        verify_ok && retrieval_ok && top1_ok,
        format!(
            "threshold sweep = exhaustive on 500 tied instances: {verify_ok}; rank-1..50 = O(N·M) loop on 20 \
             instances of 50: {retrieval_ok}; top-1 = loop on 20 models: {top1_ok}"
        ),
    )
}

fn crrcd(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_crrcd")).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!("crrcd {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_default()
}

fn val_top1(run: &Path) -> f64 {
    crrcd::cli::RunManifest::load(&run.join("run.json")).map_or(f64::NAN, |m| m.results["val_top1"])
}

/// Each variant of the desk run twice through the command line, the second
/// time from the first run's manifest; then the full variant stopped half
/// way and resumed.
fn ac7_pipeline(root: &Path) -> Result<Outcome, String> {
    let s = |p: &Path| p.to_str().expect("utf-8 path").to_string();
    let data = root.join("data");
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/desk.toml");
    let (train, test) = (s(&data.join("train")), s(&data.join("test")));
    crrcd(&["make-data", "--synthetic", "--seed", "5", "--per-class", "30", "--test-per-class", "100", "--out", &s(&data)])?;

    let variants: [(&str, &str, &[&str]); 4] = [
        ("teacher", "teacher", &[]),
        ("plain", "plain", &["loss.alpha=0", "loss.beta=0"]),
        ("kd", "distill", &["loss.beta=0"]),
        ("full", "distill", &[]),
    ];
    let teacher_ckpt = s(&root.join("teacher-a").join("checkpoint.ckpt"));
    let mut identical = Vec::new();
    for (name, mode, overrides) in variants {
        let (a, b) = (root.join(format!("{name}-a")), root.join(format!("{name}-b")));
        let mut first = vec!["train", "--mode", mode, "--data", &train, "--val", &test];
        if mode == "distill" {
            first.extend(["--teacher", &teacher_ckpt]);
        }
        let mut second = first.clone();
        let (ca, cb, manifest) = (s(&config), s(&a), s(&a.join("run.json")));
        first.extend(["--config", &ca, "--out", &cb]);
        if !overrides.is_empty() {
            first.push("--override");
            first.extend(overrides.iter().copied());
        }
        crrcd(&first)?;
        let bb = s(&b);
        second.extend(["--from-manifest", &manifest, "--out", &bb]);
        crrcd(&second)?;
        let (ma, mb) = (read(&a.join("metrics.csv")), read(&b.join("metrics.csv")));
        identical.push((name, !ma.is_empty() && ma == mb));
    }

    let full = root.join("full-a");
    let manifest = s(&full.join("run.json"));
    let stopped = root.join("full-stopped");
    let half = crrcd::cli::RunManifest::load(&full.join("run.json")).map_err(|e| e.to_string())?.results["steps"] as u64 / 2;
    let common = ["train", "--mode", "distill", "--data", &train, "--val", &test, "--teacher", &teacher_ckpt, "--from-manifest", &manifest];
    let (st, half_s) = (s(&stopped), half.to_string());
    let mut stop = common.to_vec();
    stop.extend(["--stop-at", &half_s, "--out", &st]);
    crrcd(&stop)?;
    let resumed = root.join("full-resumed");
    let (ckpt, rs) = (s(&stopped.join("checkpoint.ckpt")), s(&resumed));
    let mut resume = common.to_vec();
    resume.extend(["--resume", &ckpt, "--out", &rs]);
    crrcd(&resume)?;

    let (straight, again) = (val_top1(&full), val_top1(&resumed));
    let gap = 100.0 * (straight - again).abs();
    let all_identical = identical.iter().all(|(_, same)| *same);
    let parts: Vec<String> = identical.iter().map(|(n, same)| format!("{n} {same}")).collect();
    Ok(check(
        all_identical && gap <= RESUME_TOL_PTS,
        format!(
            "identical metrics CSVs from one manifest: {}; resume at step {half}: top-1 {again:.4} vs {straight:.4} \
             uninterrupted ({gap:.2} pts, ≤ {RESUME_TOL_PTS})",
            parts.join(", ")
        ),
    ))
}

fn ac7() -> Outcome {
    let dir = tempfile::tempdir().expect("temp dir");
    ac7_pipeline(dir.path()).unwrap_or_else(|e| check(false, e))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("AC-1 equation fidelity", ac1),
        ("AC-2 directional distillation", ac2),
        ("AC-3 gradient suite", ac3),
        ("AC-4 MI-bound sanity", ac4),
        ("AC-5 bank and sampler semantics", ac5),
        ("AC-6 protocol oracles", ac6),
        ("AC-7 reproducibility", ac7),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let o = f();
        failed += usize::from(!o.pass);
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
