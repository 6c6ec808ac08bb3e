//! Two-stage training on the anchor task.
//!
//! Trains the desk-scale setup (d_m = 64, d_ff = 128, 2000 anchor
//! sequences) and prints the probe diagnostics: condition rates, group
//! relative changes, attention effective ranks and the detected stages.
//! Pass `--quick` for a 200-step run.
//!
//! cargo run --release --example train_synthetic [--quick]

use smallinit::metrics::Stage;
use smallinit::runner::experiments::{run_synthetic, synthetic_verdict, SyntheticSetup};

fn main() -> smallinit::Result<()> {
    let mut setup = SyntheticSetup::desk_scale();
    if std::env::args().any(|a| a == "--quick") {
        setup.train.steps = 200;
    }
    let run = run_synthetic(0, &setup)?;
    println!(
        "{:>6} {:>9} {:>6} {:>6} {:>10} {:>10} {:>8} {:>8}  stage",
        "step", "loss", "A1", "A2", "outer chg", "attn chg", "erank Q", "erank K"
    );
    let mut last_stage = None;
    for (i, f) in run.frames.iter().enumerate() {
        if i % 10 != 0 && last_stage == Some(f.stage) && i + 1 != run.frames.len() {
            continue;
        }
        last_stage = Some(f.stage);
        let er = |n: &str| f.matrix(n).map_or(f64::NAN, |m| m.eff_rank);
        let stage = match f.stage {
            Stage::Condensation => "1 condensation",
            Stage::KqCollapse => "2 key-query",
            Stage::Further => "3 further",
            Stage::Undetermined => "-",
        };
        println!(
            "{:>6} {:>9.5} {:>6.3} {:>6.3} {:>10.3e} {:>10.3e} {:>8.2} {:>8.2}  {stage}",
            f.step,
            f.loss,
            f.rate_a1,
            f.rate_a2,
            f.outer_rel_change.unwrap_or(f64::NAN),
            f.attn_rel_change.unwrap_or(f64::NAN),
            er("wq"),
            er("wk")
        );
    }
    let v = synthetic_verdict(&run);
    println!("\n{v:#?}\npass: {}", v.pass());
    Ok(())
}
