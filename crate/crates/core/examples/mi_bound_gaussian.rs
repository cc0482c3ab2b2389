//! Fits the critic on correlated Gaussian pairs and compares the resulting
//! mutual information lower bound on held-out pairs with the closed form
//! `−d/2 · log(1 − ρ²)`.
//!
//!     cargo run --release --example mi_bound_gaussian -- [dim] [rhos...]

use crrcd::autograd::Matrix;
use crrcd::critic::{fit_critic, mi_lower_bound, positive_scores, Critic, FitSettings};
use crrcd::nn::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn correlated_pairs(rows: usize, dim: usize, rho: f64, rng: &mut ChaCha8Rng) -> (Matrix, Matrix) {
    let x = Matrix::from_shape_simple_fn((rows, dim), || StandardNormal.sample(rng));
    let noise = Matrix::from_shape_simple_fn((rows, dim), || StandardNormal.sample(rng));
    let y = &x * rho + &noise * (1.0 - rho * rho).sqrt();
    (x, y)
}

fn main() -> crrcd::Result<()> {
    let args: Vec<f64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let dim = args.first().map_or(4, |&d| d as usize);
    let rhos = if args.len() > 1 { args[1..].to_vec() } else { vec![0.2, 0.5, 0.8] };
    let (rows, n) = (4096, 64);

    println!("rho    analytic  estimate");
    for (k, &rho) in rhos.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(17 + k as u64);
        let (x, y) = correlated_pairs(rows, dim, rho, &mut rng);
        let (xh, yh) = correlated_pairs(rows, dim, rho, &mut rng);
        let mut store = ParamStore::new();
        // m = 1: offset n, so h is the posterior of the positive against n
        // noise draws. A dataset-sized m pins every estimate near log n.
        let critic = Critic::new(&mut store, "critic", dim, 16, 0.1, n, 1, &mut rng)?;
        fit_critic(&critic, &mut store, &x, &y, &FitSettings::default(), &mut rng)?;
        let scores = positive_scores(&critic, &store, &xh, &yh)?;
        let estimate = mi_lower_bound(n, &scores)?;
        let analytic = -(dim as f64) / 2.0 * (1.0 - rho * rho).ln();
        println!("{rho:<6} {analytic:<9.4} {estimate:.4}");
    }
    Ok(())
}
