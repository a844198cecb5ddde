//! Stability of focal-loss training over an alpha x gamma grid, using the
//! logit-level simulation. Pass an iteration count to shorten the run.

use vastvocab::dilution::{simulate_trace, DilutionConfig};
use vastvocab::losses::LossConfig;

fn main() -> vastvocab::Result<()> {
    let iters = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let categories = 13204;
    let alphas = [0.25, 0.35, 0.5, 0.75];
    let gammas = [2.0, 3.0, 5.0];

    let cells: Vec<(f64, f64)> = alphas.iter().flat_map(|&a| gammas.iter().map(move |&g| (a, g))).collect();
    let traces: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = cells
            .iter()
            .map(|&(a, g)| {
                s.spawn(move || {
                    let mut cfg = DilutionConfig::new(categories, LossConfig::focal(a, g));
                    cfg.iters = iters;
                    simulate_trace(&cfg)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker")).collect()
    });

    println!("C = {categories}, {iters} iterations");
    println!("{:>6} {:>6} {:>14} {:>12}", "alpha", "gamma", "mean rho(500)", "status");
    for ((a, g), trace) in cells.iter().zip(traces) {
        let trace = trace?;
        let status = match trace.diverged_at {
            Some(i) => format!("diverged@{i}"),
            None => "stable".to_string(),
        };
        println!("{a:>6} {g:>6} {:>14.4e} {status:>12}", trace.mean_rho(500));
    }
    Ok(())
}
