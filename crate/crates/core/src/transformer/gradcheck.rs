//! Central finite-difference check of the analytic gradient.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{backward, init_params, loss, params_as_bundle_mut, Activation, InitScale, LossKind, TransformerParams};
use crate::datagen::{LabeledSequenceSet, Labels};
use crate::error::Result;
use crate::linalg;

/// Relative Frobenius error `‖g_fd − g‖ / max(‖g_fd‖, ‖g‖)` per matrix,
/// in the order `W_Q, W_K, W_V, W^[1], W^[2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub rel_errors: [f64; 5],
}

impl GradCheck {
    pub fn max_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

pub fn gradient_check(set: &LabeledSequenceSet, params: &TransformerParams, h: f64) -> Result<GradCheck> {
    let analytic = backward(set, params)?;
    let mut work = params.clone();
    let mut rel_errors = [0.0; 5];
    for (k, g) in analytic.iter().enumerate() {
        let (rows, cols) = g.shape();
        let mut fd = DMatrix::zeros(rows, cols);
        for c in 0..cols {
            for r in 0..rows {
                let orig = params_as_bundle_mut(&mut work)[k][(r, c)];
                params_as_bundle_mut(&mut work)[k][(r, c)] = orig + h;
                let up = loss(set, &work, None)?;
                params_as_bundle_mut(&mut work)[k][(r, c)] = orig - h;
                let down = loss(set, &work, None)?;
                params_as_bundle_mut(&mut work)[k][(r, c)] = orig;
                fd[(r, c)] = (up - down) / (2.0 * h);
            }
        }
        let scale = fd.norm().max(g.norm());
        rel_errors[k] = if scale == 0.0 { 0.0 } else { (&fd - g).norm() / scale };
    }
    Ok(GradCheck { rel_errors })
}

/// Small random instance of the given loss kind: `n = 2`, `s = 3`,
/// `d_m = d_ff = 4`, O(1) Gaussian weights; cross-entropy uses a frozen
/// `4 × 5` unembedding.
pub fn random_instance(kind: LossKind, activation: Activation, seed: u64) -> Result<(LabeledSequenceSet, TransformerParams)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, s, d, vocab) = (2, 3, 4, 5);
    let sequences: Vec<DMatrix<f64>> = (0..n).map(|_| linalg::gaussian_matrix(&mut rng, s, d, 1.0)).collect();
    let param_seed = rng.random();
    match kind {
        LossKind::Exponential => {
            let labels = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
            let set = LabeledSequenceSet::binary(sequences, labels)?;
            Ok((set, init_params(d, d, 1, InitScale::Epsilon(0.5), activation, param_seed)?))
        }
        LossKind::CrossEntropy => {
            let targets = (0..n).map(|_| rng.random_range(0..vocab)).collect();
            let set = LabeledSequenceSet::token(sequences, targets)?;
            let unembed = linalg::gaussian_matrix(&mut rng, d, vocab, 1.0);
            let p = init_params(d, d, d, InitScale::Epsilon(0.5), activation, param_seed)?.with_unembed(unembed);
            debug_assert!(matches!(set.labels, Labels::Tokens(_)));
            Ok((set, p))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_instances_pass() {
        for kind in [LossKind::Exponential, LossKind::CrossEntropy] {
            for act in [Activation::Tanh, Activation::Identity] {
                for seed in 0..5 {
                    let (set, p) = random_instance(kind, act, seed).unwrap();
                    let c = gradient_check(&set, &p, 1e-5).unwrap();
                    assert!(c.max_error() < 1e-5, "{kind:?} {act:?} {seed}: {c:?}");
                }
            }
        }
    }

    #[test]
    fn chunked_gradient_is_mean_of_single_samples() {
        let data = crate::datagen::gen_binary(&crate::datagen::BinaryConfig {
            n: 150,
            s: 5,
            d_m: 6,
            margin: 0.0,
            seed: 4,
        })
        .unwrap();
        let p = init_params(6, 7, 1, InitScale::Epsilon(0.4), Activation::Tanh, 8).unwrap();
        let (l, g) = super::super::loss_and_gradient(&data, &p, None).unwrap();
        let mut mean = super::super::GradientBundle::zeros_like(&p);
        let mut lm = 0.0;
        for i in 0..150 {
            let (li, gi) = super::super::loss_and_gradient(&data, &p, Some(&[i])).unwrap();
            lm += li / 150.0;
            let mut gi = gi;
            gi.scale(1.0 / 150.0);
            mean.add_assign(&gi);
        }
        assert!((l - lm).abs() < 1e-13);
        for (a, b) in g.iter().zip(mean.iter()) {
            assert!((a - b).norm() < 1e-13 * (1.0 + b.norm()));
        }
    }
}
