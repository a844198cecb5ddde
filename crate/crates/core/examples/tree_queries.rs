//! Hierarchical query aggregation and parent masking on a small taxonomy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vastvocab::taxonomy::{
    build_hierarchical_queries, mask_parent_labels, CategoryQuerySet, CategoryTree, WeightForm, WeightPolicy,
};

const TAXONOMY: &str = r#"[
  {"id": 1, "name": "animal", "parent": null},
  {"id": 2, "name": "dog", "parent": 1},
  {"id": 3, "name": "cat", "parent": 1},
  {"id": 4, "name": "poodle", "parent": 2},
  {"id": 5, "name": "beagle", "parent": 2},
  {"id": 6, "name": "terrier", "parent": 2},
  {"id": 7, "name": "vehicle", "parent": null},
  {"id": 8, "name": "car", "parent": 7}
]"#;

fn main() -> vastvocab::Result<()> {
    let tree = CategoryTree::from_json(TAXONOMY)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let initial = CategoryQuerySet::random_for_tree(&tree, 4, 1.0, &mut rng);

    for policy in [
        WeightPolicy::default(),
        WeightPolicy::new(WeightForm::Additive, 0.5)?,
    ] {
        let enhanced = build_hierarchical_queries(&tree, &initial, &policy)?;
        println!("{:?} form, w = {}", policy.form(), policy.w());
        for v in 0..tree.len() {
            let moved: f64 = initial
                .embeddings()
                .row(v)
                .iter()
                .zip(enhanced.embeddings().row(v))
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            println!(
                "  {:<8} children {}  alpha {:.3}  shift {:.3}",
                tree.name(v),
                tree.child_count(v),
                tree.adaptive_weight(v, &policy),
                moved
            );
        }
    }

    // An image annotated "beagle" should not be penalised for scoring "dog".
    let masked = mask_parent_labels(&tree, &[5])?;
    println!("\nground truth [beagle] masks ids {masked:?}");
    Ok(())
}
