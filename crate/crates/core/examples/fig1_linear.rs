//! Fits `F(x) = 16x` with `dz/dt = a z(⌊t⌋) + b` over one and two unit
//! intervals. Two intervals only need `1 + a = 4`.

use pcdde::experiments::fig1::{run, Fig1Config};

fn main() -> pcdde::Result<()> {
    let cfg = Fig1Config { n_seeds: 1, ..Fig1Config::default() };
    let out = run(&cfg, None)?;
    for r in &out.runs {
        println!(
            "T={}tau  a={:.4}  b={:.4}  loss {:.3e} -> {:.3e}  first below {:.0e}: {:?}",
            r.n_intervals, r.a, r.b, r.initial_loss, r.final_loss, cfg.threshold, r.first_below
        );
    }
    Ok(())
}
