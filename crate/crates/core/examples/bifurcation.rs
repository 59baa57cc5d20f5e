//! Period of the sampled population map `x -> x e^{a(1-x)}` across growth
//! rates.

use pcdde::experiments::map::{run, MapConfig};

fn main() -> pcdde::Result<()> {
    let cfg = MapConfig { a_steps: 16, ..MapConfig::default() };
    let out = run(&cfg, None)?;
    for r in &out.rows {
        let tail: Vec<String> = r.orbit.iter().rev().take(4).map(|x| format!("{x:.4}")).collect();
        match r.period {
            Some(p) => println!("a = {:6.4}  period {p:2}  orbit tail {}", r.a, tail.join(" ")),
            None => println!("a = {:6.4}  no period up to {}", r.a, cfg.max_period),
        }
    }
    Ok(())
}
