//! Learns `dx/dt = a x(t)(1 - x(⌊t⌋))` at `a = 2` from `[0, 3]` and scores
//! free-running predictions on `(3, 13]`.

use pcdde::experiments::population::{run, PopulationConfig};

fn main() -> pcdde::Result<()> {
    let mut cfg = PopulationConfig {
        regimes: vec![2.0],
        n_traj: 20,
        n_seeds: 1,
        eval_every: 1000,
        ..PopulationConfig::default()
    };
    cfg.models.retain(|m| m.name == "npcdde" || m.name == "node");
    cfg.train.iterations = 500;
    let out = run(&cfg, None)?;
    for r in &out.runs {
        println!(
            "{:7} train {:.3e}  test h1 {:.3e}  h10 {:.3e}",
            r.model, r.final_train_loss, r.test_losses[0], r.test_losses[3]
        );
    }
    Ok(())
}
