//! Finite-time blow-up of the effective dynamics.
//!
//! Integrates the symmetric scalar start `(1, 1, 1)`, whose energy is
//! `1 / (1 - t)^3`, and a handful of Gaussian starts, printing the fitted
//! blow-up time next to the energy lower bound.
//!
//! cargo run --release --example effective_blowup

use nalgebra::{DMatrix, DVector};
use smallinit::effective::{energy_lower_bound, integrate, EffectiveState, IntegrateConfig};
use smallinit::runner::experiments::{blowup_outcome, effective_run};

fn main() -> smallinit::Result<()> {
    let one = DVector::from_element(1, 1.0);
    let sym = EffectiveState::new(one.clone(), DMatrix::from_element(1, 1, 1.0), one)?;
    let traj = integrate(&sym, &IntegrateConfig::default());
    println!("symmetric start: termination {:?}, fitted T* = {:.9}", traj.termination, traj.t_star.unwrap_or(f64::NAN));
    println!("{:>10} {:>14} {:>14} {:>10}", "t", "E", "(1-t)^-3", "Edot/E^4/3");
    for f in traj.frames.iter().step_by(traj.frames.len() / 8 + 1) {
        println!(
            "{:>10.6} {:>14.6e} {:>14.6e} {:>10.6}",
            f.t,
            f.energy,
            energy_lower_bound(1.0, f.t).unwrap_or(f64::NAN),
            f.riccati_ratio.unwrap_or(f64::NAN)
        );
    }

    println!("\nGaussian starts, d_m = 8, std 0.1:");
    println!("{:>6} {:>12} {:>12} {:>14} {:>14}", "seed", "E(0)", "T*", "min E/bound", "min Edot/E^4/3");
    let cfg = IntegrateConfig::default();
    for seed in 0..8 {
        let o = blowup_outcome(seed, &effective_run(seed, 8, 8, 0.1, false, &cfg)?);
        println!(
            "{:>6} {:>12.4e} {:>12.4} {:>14.12} {:>14.10}",
            seed,
            o.initial_energy,
            o.t_star.unwrap_or(f64::NAN),
            o.min_bound_ratio.unwrap_or(f64::NAN),
            o.min_riccati_ratio.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
