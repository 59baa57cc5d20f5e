//! Adjoint gradients against a recorded tape and against central differences
//! on a handful of random models.

use pcdde::experiments::gradcheck::{run, GradcheckConfig};

fn main() -> pcdde::Result<()> {
    let cfg = GradcheckConfig { cases: 12, ..GradcheckConfig::default() };
    let out = run(&cfg, None)?;
    println!("{:>4} {:>16} {:>20} {:>4} {:>3} {:>10} {:>10}", "case", "kind", "integrator", "dim", "n", "vs tape", "vs fd");
    for c in &out.cases {
        println!(
            "{:>4} {:>16} {:>20} {:>4} {:>3} {:>10.2e} {:>10.2e}",
            c.case,
            c.kind.to_string(),
            format!("{:?}", c.integrator),
            c.state_dim,
            c.n_intervals,
            c.err_bptt,
            c.err_fd
        );
    }
    println!("all passed: {}", out.report.passed());
    Ok(())
}
