//! Trains the category-query selection stage on a separable synthetic world
//! and reports recall of the ground-truth categories among the top K.

use std::time::Instant;

use vastvocab::selection::{recall_at_ks, train_selection_stage, QueryRelations, SelectionConfig, SelectionModule, TrainConfig};
use vastvocab::synth::{generate_dataset, generate_prototypes, WorldConfig};

fn main() -> vastvocab::Result<()> {
    let (categories, dim) = (200, 200);
    let world = WorldConfig::new(categories, dim);
    let prototypes = generate_prototypes(&world)?;
    let train = generate_dataset(&world, &prototypes, 0, 64, None)?;
    let held_out = generate_dataset(&world, &prototypes, 64, 256, None)?;

    let mut module = SelectionModule::new(SelectionConfig::new(categories, dim), QueryRelations::Independent)?;
    let mut cfg = TrainConfig::new(20);
    cfg.epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(cfg.epochs);

    let start = Instant::now();
    let report = train_selection_stage(&mut module, &train, &cfg, None)?;
    for r in &report.records {
        println!("epoch {:>3}  loss {:.5}  AR^C@20 {:.4}", r.epoch, r.loss, r.arc_recall);
    }
    println!("trained in {:.1?}", start.elapsed());

    let ks = [5, 10, 20, 50];
    for (k, r) in ks.iter().zip(recall_at_ks(&module, &held_out, &ks)?) {
        println!("held-out AR^C@{k:<3} {:.4} +/- {:.4}", r.mean, r.std_error);
    }
    Ok(())
}
