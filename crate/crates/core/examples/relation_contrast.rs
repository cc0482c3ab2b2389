//! Relation vectors, critic scores and the objective terms for a handful of
//! random embeddings.
//!
//!     cargo run --example relation_contrast

use crrcd::critic::Critic;
use crrcd::losses::{kd_loss, rcd_loss, total_loss, LossWeights, NegativeWeighting};
use crrcd::negatives::{build_tuples, NegativeBank};
use crrcd::nn::ParamStore;
use crrcd::relation::{Embedding, RelationHead, RelationSpace, Source};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn embedding(rng: &mut ChaCha8Rng, dim: usize, source: Source, id: usize, label: usize) -> Embedding {
    let values = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    Embedding::new(values, source, id, Some(label)).expect("finite")
}

fn main() -> crrcd::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (d_t, d_s, hidden, d_r, n) = (16, 8, 32, 12, 4);

    let mut store = ParamStore::new();
    let tt = RelationHead::new(&mut store, "rel_tt", RelationSpace::TeacherTeacher, d_t, d_t, hidden, d_r, &mut rng);
    let ts = RelationHead::new(&mut store, "rel_ts", RelationSpace::TeacherStudent, d_t, d_s, hidden, d_r, &mut rng);
    let critic = Critic::new(&mut store, "critic", d_r, d_r, 0.1, n, 1, &mut rng)?;

    let anchor = embedding(&mut rng, d_t, Source::Teacher, 0, 0);
    let partner_t = embedding(&mut rng, d_t, Source::Teacher, 1, 1);
    let partner_s = embedding(&mut rng, d_s, Source::Student, 1, 1);

    let v_t = tt.relate(&store, &anchor, &partner_t)?;
    let v_ts = ts.relate(&store, &anchor, &partner_s)?;
    println!("v_t  (0→1) = {:.3?}", &v_t.values[..4]);
    println!("v_ts (0→1) = {:.3?}", &v_ts.values[..4]);

    // Negatives come from a bank of earlier student embeddings.
    let mut bank = NegativeBank::new(16)?;
    for id in 2..12 {
        let t = embedding(&mut rng, d_t, Source::Teacher, id, id % 3);
        let s = embedding(&mut rng, d_s, Source::Student, id, id % 3);
        bank.push(t.values, s.values, id, Some(id % 3))?;
    }
    let negatives: Vec<_> = (0..n).map(|i| bank.get(i)).collect();
    let (positive, marginals) = build_tuples(&store, &tt, &ts, &anchor, &partner_t, &partner_s, &negatives)?;

    println!("critic on the joint tuple      {:.4}", critic.critic_score(&store, &positive.v_t, &positive.v_ts)?);
    for m in &marginals {
        println!("critic on marginal with id {:>2}  {:.4}", m.v_ts.other_id, critic.critic_score(&store, &m.v_t, &m.v_ts)?);
    }
    let positives = [positive];
    for w in [NegativeWeighting::Printed, NegativeWeighting::Mean] {
        println!("rcd ({w:?}) = {:.4}", rcd_loss(&critic, &store, &positives, &marginals, w)?);
    }

    let z_t = [2.0, 0.5, -1.0];
    let z_s = [1.0, 1.0, 0.0];
    let kd = kd_loss(&z_t, &z_s, 4.0)?;
    let rcd = rcd_loss(&critic, &store, &positives, &marginals, NegativeWeighting::Mean)?;
    let total = total_loss(0.7, kd, rcd, &LossWeights::default());
    println!("kd = {kd:.4}, total = {:.4} (cls 0.7 + 0.5·kd + 2·rcd)", total.total);
    Ok(())
}
