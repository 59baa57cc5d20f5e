//! Disk versus surrounding annulus with a linear readout on `z(T)`. One seed
//! of each model, six epochs of minibatch Adam.

use pcdde::experiments::annuli::{run, AnnuliConfig};

fn main() -> pcdde::Result<()> {
    let cfg = AnnuliConfig {
        n_seeds: 1,
        snapshot_epochs: Vec::new(),
        ..AnnuliConfig::default()
    };
    let out = run(&cfg, None)?;
    for r in &out.runs {
        println!(
            "{:12} params {:3}  loss {:.4e}  accuracy {:.3}",
            r.model, r.n_params, r.final_loss, r.accuracy
        );
    }
    Ok(())
}
