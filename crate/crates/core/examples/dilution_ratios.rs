//! Positive-to-negative gradient ratios as the vocabulary grows, and the
//! boost obtained by keeping only a short list of categories.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use vastvocab::dilution::{eta, rebalance_factor, rho, rho_generalized, DilutionConfig};
use vastvocab::losses::{LabeledLogits, LossConfig};

fn instance(c: usize, rng: &mut ChaCha8Rng) -> LabeledLogits {
    let normal = Normal::new(-2.0, 1.0).unwrap();
    let logits: Vec<f64> = (0..c).map(|_| normal.sample(rng)).collect();
    let mut labels = vec![false; c];
    labels[0] = true;
    LabeledLogits::new(logits, labels).unwrap()
}

fn main() -> vastvocab::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ce = LossConfig::sigmoid_ce();
    let focal = LossConfig::focal(0.25, 2.0);

    println!("{:>7} {:>12} {:>12} {:>12} {:>15}", "C", "rho(ce)", "eta(ce)", "rho(focal)", "rho_gen 10/1000");
    for c in [80, 1203, 13204] {
        let item = instance(c, &mut rng);
        let general = rho_generalized(&DilutionConfig::new(c, ce), &item)?;
        println!(
            "{c:>7} {:>12.4e} {:>12.4} {:>12.4e} {:>15.4e}",
            rho(&item, &ce)?,
            eta(&item, &ce, 0.1)?,
            rho(&item, &focal)?,
            general
        );
    }

    // Uniform negative activations: the boost is exactly (C - 1) / (C' - 1).
    let c = 10_000;
    let mut labels = vec![false; c];
    labels[0] = true;
    let item = LabeledLogits::new(vec![-3.0; c], labels)?;
    let keep: Vec<usize> = (0..100).collect();
    println!(
        "\nkeeping 100 of {c} categories multiplies rho by {:.3}",
        rebalance_factor(&item, &keep, &ce)?
    );
    Ok(())
}
