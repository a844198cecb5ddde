//! Finite-difference check of a multi-head attention block followed by a
//! layer norm.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use vastvocab::tensor::gradcheck::{check_gradients, probe, GradCheckOptions};
use vastvocab::tensor::{AttentionConfig, LayerNorm, Matrix, MultiHeadAttention, ParamStore};

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let normal = Normal::new(0.0, 1.0).unwrap();
    Matrix::new(rows, cols, (0..rows * cols).map(|_| normal.sample(rng)).collect()).unwrap()
}

fn main() -> vastvocab::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dim = 8;
    let mut store = ParamStore::new();
    let attn = MultiHeadAttention::new(&mut store, "attn", AttentionConfig::new(2, dim)?, 0.5, &mut rng);
    let norm = LayerNorm::new(&mut store, "norm", dim);
    let queries = random(5, dim, &mut rng);
    let memory = random(7, dim, &mut rng);
    let weights = random(5, dim, &mut rng);

    let report = check_gradients(
        &store,
        |tape, params| {
            let q = tape.leaf(queries.clone());
            let m = tape.leaf(memory.clone());
            let a = attn.forward(tape, params, q, m, m)?;
            let out = norm.forward(tape, params, a)?;
            probe(tape, out, &weights)
        },
        GradCheckOptions::default(),
    )?;
    for p in &report.params {
        println!("{:<20} {:>4} coords  rel error {:.2e}", p.name, p.coords, p.rel_error);
    }
    println!("worst: {:.2e}", report.max_rel_error());
    Ok(())
}
