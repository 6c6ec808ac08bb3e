//! Key-query rank collapse under the linear flow driven by F.
//!
//! Compares RK4 against the closed form, then follows the closed form to
//! larger growth and reports when the normalized `W_Q` becomes numerically
//! rank one (or rank two for a doubly repeated top singular value).
//!
//! cargo run --release --example kq_collapse

use smallinit::keyquery::{kq_closed_form, rank_collapse_verdict};
use smallinit::runner::experiments::{kq_instance, kq_outcome, rank_claim_holds, time_to_growth};

fn main() -> smallinit::Result<()> {
    for (label, degenerate) in [("distinct top value", false), ("double top value", true)] {
        let (f, st) = kq_instance(1, 6, degenerate, 1e-3)?;
        let (o, _) = kq_outcome(1, &f, &st, 1e3, 1e-3, 0)?;
        let sig: Vec<String> = f.svd.sigma.iter().map(|s| format!("{s:.3}")).collect();
        println!("{label}: sigma(F) = [{}], top multiplicity {}", sig.join(", "), f.top_multiplicity);
        println!("  RK4 vs closed form at 100x growth: relative error {:.3e}", o.closed_form_error);
        println!("  {:>10} {:>10} {:>9} {:>14}", "growth", "erank", "rank", "claim holds");
        for k in 0..=9 {
            let g = 10f64.powi(3 + k);
            let Some(t) = time_to_growth(&f, &st, g) else { break };
            let v = rank_collapse_verdict(&st.wq, &kq_closed_form(&st, &f, t).wq, &f)?;
            println!("  {:>10.0e} {:>10.6} {:>9} {:>14}", g, v.effective_rank, v.measured_rank, rank_claim_holds(&v));
        }
        println!();
    }
    Ok(())
}
