//! Generates a hierarchical synthetic world and exports it in the formats the
//! CLI reads back.

use vastvocab::synth::{generate_dataset, generate_prototypes, generate_taxonomy, read_dataset, write_dataset, WorldConfig};

fn main() -> vastvocab::Result<()> {
    let mut cfg = WorldConfig::new(120, 128);
    cfg.tree_depth = 3;
    cfg.branching = (2, 5);
    cfg.zipf_exponent = 1.0;
    cfg.noise_std = 0.1;
    cfg.seed = 2024;

    let tree = generate_taxonomy(&cfg)?;
    let leaves: Vec<usize> = (0..tree.len()).filter(|&v| tree.is_leaf(v)).collect();
    let roots = tree.roots().count();
    println!("{} categories, {roots} roots, {} leaves, max {} children", tree.len(), leaves.len(), tree.max_children());

    let prototypes = generate_prototypes(&cfg)?;
    let data = generate_dataset(&cfg, &prototypes, 0, 200, Some(&leaves))?;
    let mut freq = vec![0usize; tree.len()];
    for s in &data {
        for &g in &s.ground_truth {
            freq[g] += 1;
        }
    }
    freq.sort_unstable_by(|a, b| b.cmp(a));
    println!("label counts, most frequent first: {:?}", &freq[..10]);

    let dir = std::env::temp_dir().join("vastvocab-world");
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("taxonomy.json"), tree.to_json()?)?;
    let mut buf = Vec::new();
    write_dataset(&mut buf, &data)?;
    std::fs::write(dir.join("dataset.jsonl"), &buf)?;
    let back = read_dataset(buf.as_slice())?;
    assert_eq!(back.len(), data.len());
    println!("wrote {} ({} bytes of dataset)", dir.display(), buf.len());
    Ok(())
}
