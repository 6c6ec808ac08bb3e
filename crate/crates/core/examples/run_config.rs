//! Driving the runner from a TOML config.
//!
//! Runs a small blow-up sweep into a directory, prints the summary verdict
//! and the manifest's file list, and shows the scenario card.
//!
//! cargo run --release --example run_config [output_dir]

use smallinit::runner::config::ExperimentConfig;
use smallinit::runner::{describe, run};

const CONFIG: &str = r#"
scenario = "blowup_sweep"
seeds = [0, 1]

[model]
d_m = 8
epsilon = 0.1

[sweep]
count = 20
"#;

fn main() -> smallinit::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "runs/example_blowup_sweep".into());
    let mut cfg = ExperimentConfig::from_toml_str(CONFIG)?;
    cfg.output_dir = Some(out.into());
    println!("{}\n", describe("blowup_sweep")?);
    let report = run(&cfg)?;
    println!("blowup_fraction = {}", report.summary["blowup_fraction"]);
    println!("verdict = {}", report.summary["verdict"]);
    println!("content hash {}", report.content_hash);
    for f in std::fs::read_dir(&report.output_dir).map_err(|e| smallinit::Error::Domain(e.to_string()))? {
        println!("  {}", f.map_err(|e| smallinit::Error::Domain(e.to_string()))?.path().display());
    }
    Ok(())
}
