//! Condensation of the outer parameters near blow-up.
//!
//! Tracks the full value matrix against a random direction `v` and prints,
//! along the trajectory, the condition rates and the alignment of the
//! row products with `W^[2]`; at the end, every column of `W_V` in the
//! diverging class points along `v`.
//!
//! cargo run --release --example condensation [seed]

use smallinit::effective::IntegrateConfig;
use smallinit::runner::experiments::{condensation_outcome, effective_run};

fn main() -> smallinit::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let cfg = IntegrateConfig::default();
    let traj = effective_run(seed, 16, 16, 1.0, true, &cfg)?;
    println!("{:>10} {:>12} {:>7} {:>7} {:>11} {:>11} {:>5}", "t", "||theta||", "A1", "A2", "min|cos phi|", "min cos xi", "|C1|");
    let stride = traj.frames.len() / 12 + 1;
    for f in traj.frames.iter().step_by(stride).chain(traj.frames.last()) {
        println!(
            "{:>10.5} {:>12.4e} {:>7.3} {:>7.3} {:>11.6} {:>11.6} {:>5}",
            f.t,
            f.param_norm,
            f.rate_a1,
            f.rate_a2,
            f.min_abs_phi_c1.unwrap_or(f64::NAN),
            f.min_xi_c1.unwrap_or(f64::NAN),
            f.c1_size
        );
    }
    let o = condensation_outcome(seed, &traj, cfg.class_threshold);
    println!(
        "\nqualified at norm midpoint: {}, persisted: {}, termination {:?}",
        o.qualified, o.persisted, o.termination
    );
    let cos: Vec<String> = o.tracked_cos.iter().map(|c| format!("{:.4}", c.unwrap_or(f64::NAN))).collect();
    println!("|cos(W_V column, v)| at termination: [{}]", cos.join(", "));
    Ok(())
}
