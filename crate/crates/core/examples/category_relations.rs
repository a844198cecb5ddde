//! Learned relations between category queries when no taxonomy exists.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use vastvocab::taxonomy::{self_attention_relations, CategoryQuerySet, CategoryRelations};
use vastvocab::tensor::{AttentionConfig, Matrix, ParamStore};

fn main() -> vastvocab::Result<()> {
    let (categories, dim) = (12, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let data: Vec<f64> = (0..categories * dim).map(|_| normal.sample(&mut rng)).collect();
    let queries = CategoryQuerySet::sequential(Matrix::new(categories, dim, data)?);

    let mut store = ParamStore::new();
    let block = CategoryRelations::new(&mut store, "relations", AttentionConfig::new(4, dim)?, 0.1, &mut rng);
    let related = self_attention_relations(&block, &store, &queries)?;

    println!("{} parameters in the relation block", store.num_scalars());
    for c in 0..categories {
        let row = related.embeddings().row(c);
        let mean = row.iter().sum::<f64>() / dim as f64;
        let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / dim as f64;
        println!("category {c:>2}: mean {mean:+.2e}  var {var:.4}");
    }
    Ok(())
}
