//! Dataset generators: separable binary sequences and the anchor task.
//!
//! cargo run --release --example datagen

use smallinit::datagen::{embed_tokens, gen_anchor, gen_binary, AnchorConfig, BinaryConfig, EmbeddingConfig};
use smallinit::effective::compute_condensation_direction;

fn main() -> smallinit::Result<()> {
    let bin = gen_binary(&BinaryConfig { n: 32, s: 4, d_m: 8, margin: 0.1, seed: 0 })?;
    let dir = compute_condensation_direction(&bin)?;
    let labels = bin.labels.binary().expect("binary labels");
    println!(
        "binary: {} sequences of {}x{}, {} positive, condensation scale {:.4}",
        bin.len(),
        bin.meta.s,
        bin.meta.d_m,
        labels.iter().filter(|&&y| y > 0.0).count(),
        dir.scale
    );
    let v: Vec<String> = dir.v.iter().map(|x| format!("{x:+.3}")).collect();
    println!("condensation direction v = [{}]", v.join(", "));

    let cfg = AnchorConfig { n: 8, ..AnchorConfig::default() };
    let data = gen_anchor(&cfg)?;
    println!("\nanchor task (synonym rule), vocabulary needs {} tokens:", cfg.min_vocab());
    for ((x, y), p) in data.inputs.iter().zip(&data.targets).zip(&data.anchor_positions) {
        println!("  {x:?} -> {y}   (anchor {} at position {p})", x[*p]);
    }
    let (set, emb) = embed_tokens(&data, &EmbeddingConfig { vocab: 201, d_m: 16, seed: 0 })?;
    println!(
        "embedded: {} sequences of {}x{}, unembed {}x{}",
        set.len(),
        set.meta.s,
        set.meta.d_m,
        emb.unembed.nrows(),
        emb.unembed.ncols()
    );
    Ok(())
}
