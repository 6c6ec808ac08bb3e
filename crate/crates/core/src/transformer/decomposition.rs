//! Expansion of the exponential loss around uniform attention.
//!
//! With centered scores `ẑ_j = z_j − mean(z)` the attention row is
//! `1/s + ẑ/s + O(ẑ²)`. Each per-sample loss then factors as
//! `L1 · L2 · exp(−y g)`, where `L1` is the loss under uniform attention,
//! `L2` carries the first-order score correction and `g = O(ẑ²)`.
//! All three pieces are computed without subtracting nearby O(1)
//! quantities so the residual stays accurate down to `|ẑ| ~ 1e-8`.

use nalgebra::{DMatrix, DVector, RowDVector};

use super::{Activation, GradientBundle, TransformerParams};
use crate::datagen::LabeledSequenceSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleDecomposition {
    /// `exp(−y f₀)` with `f₀` the output under uniform attention.
    pub l1: f64,
    /// `exp(−y c)` with `c` the first-order attention correction.
    pub l2: f64,
    /// Exact loss minus `l1 · l2`.
    pub residual: f64,
    pub exact: f64,
}

pub fn loss_decomposition(set: &LabeledSequenceSet, params: &TransformerParams) -> Result<Vec<SampleDecomposition>> {
    let y = set
        .labels
        .binary()
        .ok_or_else(|| Error::Domain("loss decomposition needs binary labels".into()))?;
    if params.out_dim() != 1 {
        return Err(Error::DimensionMismatch("loss decomposition needs a scalar output".into()));
    }
    Ok(set
        .sequences
        .iter()
        .zip(y)
        .map(|(x, &yi)| decompose(x, yi, params))
        .collect())
}

fn decompose(x: &DMatrix<f64>, y: f64, p: &TransformerParams) -> SampleDecomposition {
    let s = x.nrows();
    let sf = s as f64;
    let sqrt_d = (p.d_m() as f64).sqrt();
    let q = x.row(s - 1) * &p.wq;
    let k = x * &p.wk;
    let z: DVector<f64> = (&k * q.transpose()) / sqrt_d;
    let zc = z.add_scalar(-z.mean());
    let rho = zc.map(|v| v.exp_m1() - v);
    let rho_sum = rho.sum();
    let rho_mean = rho_sum / sf;
    // a_j − 1/s − ẑ_j/s, exactly
    let second = DVector::from_fn(s, |j, _| {
        (sf * (rho[j] - rho_mean) - zc[j] * rho_sum) / (sf * (sf + rho_sum))
    });

    let pre0 = x.row_mean() * &p.wv * &p.w1;
    let b_lin: RowDVector<f64> = (zc.tr_mul(x) / sf) * &p.wv * &p.w1;
    let b2: RowDVector<f64> = second.tr_mul(x) * &p.wv * &p.w1;
    let w2 = p.w2.column(0);

    let (f0, c, g) = match p.activation {
        Activation::Identity => {
            let f0 = pre0.dot(&w2.transpose());
            let c = b_lin.dot(&w2.transpose());
            let g = b2.dot(&w2.transpose());
            (f0, c, g)
        }
        Activation::Tanh => {
            let mut f0 = 0.0;
            let mut c = 0.0;
            let mut g = 0.0;
            for j in 0..pre0.len() {
                let t = pre0[j].tanh();
                let sech2 = 1.0 - t * t;
                let b = b_lin[j] + b2[j];
                let u = b.tanh();
                // tanh(p + b) − tanh(p) − sech²(p)·b_lin
                let d = sech2 * ((u - b) + b2[j] - b_lin[j] * t * u) / (1.0 + t * u);
                f0 += t * w2[j];
                c += sech2 * b_lin[j] * w2[j];
                g += d * w2[j];
            }
            (f0, c, g)
        }
    };
    let l1 = (-y * f0).exp();
    let l2 = (-y * c).exp();
    SampleDecomposition {
        l1,
        l2,
        residual: l1 * l2 * (-y * g).exp_m1(),
        exact: l1 * l2 * (-y * g).exp(),
    }
}

/// Gradient of `(1/n) Σ L1_i` with respect to the outer parameters; the
/// attention entries of the returned bundle are zero. `L1` is the loss
/// under uniform attention, so this is the ordinary gradient of the model
/// with `W_Q = W_K = 0`.
pub fn l1_gradient(set: &LabeledSequenceSet, params: &TransformerParams) -> Result<GradientBundle> {
    let mut uniform = params.clone();
    uniform.wq.fill(0.0);
    uniform.wk.fill(0.0);
    let mut g = super::backward(set, &uniform)?;
    g.wq.fill(0.0);
    g.wk.fill(0.0);
    Ok(g)
}

/// Minimizer of `w ↦ (1/n) Σ exp(−y_i x̄_i·w)` by damped Newton steps.
/// Fails when the pooled data are linearly separable (no finite minimizer).
pub fn pooled_exp_minimizer(set: &LabeledSequenceSet) -> Result<DVector<f64>> {
    let y = set
        .labels
        .binary()
        .ok_or_else(|| Error::Domain("needs binary labels".into()))?;
    let m: Vec<DVector<f64>> = set.sequences.iter().map(|x| x.row_mean().transpose()).collect();
    let d = set.meta.d_m;
    let n = set.len() as f64;
    let objective = |w: &DVector<f64>| m.iter().zip(y).map(|(mi, yi)| (-yi * mi.dot(w)).exp()).sum::<f64>() / n;
    let mut w = DVector::zeros(d);
    for _ in 0..200 {
        let mut grad = DVector::zeros(d);
        let mut hess = DMatrix::zeros(d, d);
        for (mi, yi) in m.iter().zip(y) {
            let e = (-yi * mi.dot(&w)).exp();
            grad -= (yi * e / n) * mi;
            hess += (e / n) * (mi * mi.transpose());
        }
        if grad.norm() < 1e-14 {
            return Ok(w);
        }
        let step = hess
            .cholesky()
            .ok_or_else(|| Error::Domain("pooled tokens do not span the model space".into()))?
            .solve(&grad);
        let f = objective(&w);
        let mut t = 1.0;
        loop {
            let cand = &w - t * &step;
            if objective(&cand) <= f - 1e-4 * t * grad.dot(&step) || t < 1e-12 {
                w = cand;
                break;
            }
            t *= 0.5;
        }
        if w.norm() > 1e6 {
            return Err(Error::Domain("pooled data are separable; no finite minimizer".into()));
        }
    }
    Ok(w)
}

/// Shifts `W_V` along `p = W^[1] W^[2]` so that `W_V W^[1] W^[2]` equals
/// the pooled exponential-loss minimizer, which zeroes the `L1` gradient
/// for the identity activation.
pub fn make_l1_critical(set: &LabeledSequenceSet, params: &mut TransformerParams) -> Result<()> {
    if params.activation != Activation::Identity {
        return Err(Error::Domain("criticality construction needs the identity activation".into()));
    }
    let w_star = pooled_exp_minimizer(set)?;
    let p = (&params.w1 * &params.w2).column(0).into_owned();
    let pp = p.norm_squared();
    if pp < 1e-28 {
        return Err(Error::ZeroMatrix);
    }
    let current = &params.wv * &p;
    params.wv += (w_star - current) * p.transpose() / pp;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::{init_params, loss, InitScale};
    use super::*;
    use crate::datagen::{gen_binary, BinaryConfig};

    fn setup(act: Activation) -> (LabeledSequenceSet, TransformerParams) {
        let set = gen_binary(&BinaryConfig {
            n: 6,
            s: 4,
            d_m: 4,
            margin: 0.0,
            seed: 11,
        })
        .unwrap();
        let p = init_params(4, 4, 1, InitScale::Epsilon(0.6), act, 12).unwrap();
        (set, p)
    }

    #[test]
    fn exact_matches_forward_loss() {
        for act in [Activation::Identity, Activation::Tanh] {
            let (set, p) = setup(act);
            let dec = loss_decomposition(&set, &p).unwrap();
            let mean: f64 = dec.iter().map(|d| d.exact).sum::<f64>() / dec.len() as f64;
            let direct = loss(&set, &p, None).unwrap();
            assert!((mean - direct).abs() < 1e-13 * direct);
            for d in &dec {
                assert!((d.exact - d.l1 * d.l2 - d.residual).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_attention_has_unit_l2() {
        for act in [Activation::Identity, Activation::Tanh] {
            let (set, mut p) = setup(act);
            p.scale_attention(0.0);
            for d in loss_decomposition(&set, &p).unwrap() {
                assert_eq!(d.l2, 1.0);
                assert!(d.residual.abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn l1_gradient_matches_uniform_backward() {
        let (set, p) = setup(Activation::Tanh);
        let g = l1_gradient(&set, &p).unwrap();
        assert_eq!(g.wq.norm() + g.wk.norm(), 0.0);
        assert!(g.outer_norm() > 0.0);
    }

    #[test]
    fn critical_point_zeroes_l1_gradient() {
        let set = gen_binary(&BinaryConfig {
            n: 32,
            s: 3,
            d_m: 4,
            margin: 0.0,
            seed: 5,
        })
        .unwrap();
        // random labels make the pooled problem non-separable
        let mut set = set;
        let labels: Vec<f64> = (0..32).map(|i| if (i * 7 + 3) % 5 < 2 { 1.0 } else { -1.0 }).collect();
        set.labels = crate::datagen::Labels::Binary(labels);
        let mut p = init_params(4, 4, 1, InitScale::Epsilon(0.5), Activation::Identity, 3).unwrap();
        make_l1_critical(&set, &mut p).unwrap();
        let g = l1_gradient(&set, &p).unwrap();
        assert!(g.outer_norm() < 1e-12, "{}", g.outer_norm());
    }
}
