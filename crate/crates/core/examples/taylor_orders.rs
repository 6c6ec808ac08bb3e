//! Orders of the loss decomposition and the gradient split.
//!
//! At the criticality proxy, scaling `W_Q` and `W_K` by delta leaves a
//! decomposition residual of order delta^4, attention gradients of order
//! delta and outer gradients of order delta^2.
//!
//! cargo run --release --example taylor_orders

use smallinit::runner::config::TaylorConfig;
use smallinit::runner::experiments::taylor_outcome;

fn main() -> smallinit::Result<()> {
    let cfg = TaylorConfig {
        deltas: vec![1e-1, 3e-2, 1e-2, 3e-3, 1e-3, 3e-4, 1e-4],
        ..TaylorConfig::default()
    };
    let o = taylor_outcome(0, &cfg)?;
    println!("L1 gradient norm at the proxy: {:.3e}", o.l1_gradient_norm);
    println!("{:>8} {:>12} {:>12} {:>12} {:>12}", "delta", "residual", "|ln L2|", "grad attn", "grad outer");
    for i in 0..o.deltas.len() {
        println!(
            "{:>8.0e} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e}",
            o.deltas[i], o.residual[i], o.log_l2[i], o.grad_attention[i], o.grad_outer[i]
        );
    }
    println!(
        "slopes: residual {:.3}, |ln L2| {:.3}, attention {:.3}, outer {:.3}",
        o.residual_slope, o.log_l2_slope, o.attention_slope, o.outer_slope
    );
    Ok(())
}
