//! Central-difference check of the hand-written backward pass.
//!
//! cargo run --release --example gradcheck

use smallinit::transformer::{gradient_check, random_instance, Activation, LossKind};

fn main() -> smallinit::Result<()> {
    println!("{:>14} {:>10} {:>5} {:>10} {:>10} {:>10} {:>10} {:>10}", "loss", "activation", "seed", "W_Q", "W_K", "W_V", "W1", "W2");
    for kind in [LossKind::Exponential, LossKind::CrossEntropy] {
        for act in [Activation::Identity, Activation::Tanh] {
            for seed in 0..3 {
                let (set, p) = random_instance(kind, act, seed)?;
                let c = gradient_check(&set, &p, 1e-5)?;
                let e: Vec<String> = c.rel_errors.iter().map(|x| format!("{x:>10.2e}")).collect();
                println!("{:>14} {:>10} {:>5} {}", format!("{kind:?}"), format!("{act:?}"), seed, e.join(" "));
            }
        }
    }
    Ok(())
}
