//! Second-stage dynamics of the key and query matrices.
//!
//! With the outer parameters frozen, `Ẇ_Q = F W_K` and `Ẇ_K = Fᵀ W_Q`.
//! Then `Ẅ_Q = F Fᵀ W_Q`, so in the left singular basis of `F` every mode
//! evolves as `cosh(σt)` and `sinh(σt)/σ`, and the normalized matrices
//! concentrate on the top singular subspace of `F`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::datagen::LabeledSequenceSet;
use crate::error::{Error, Result};
use crate::linalg::{self, SortedSvd};
use crate::metrics::effective_rank;
use crate::ode::{rk4_step, OdeSystem};
use crate::transformer::{loss_decomposition, TransformerParams};

pub const TOP_MULTIPLICITY_RTOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct DrivingMatrix {
    pub f: DMatrix<f64>,
    pub svd: SortedSvd,
    /// Number of singular values within relative 1e-9 of the largest.
    pub top_multiplicity: usize,
}

impl DrivingMatrix {
    pub fn new(f: DMatrix<f64>) -> Result<Self> {
        if f.nrows() != f.ncols() {
            return Err(Error::DimensionMismatch("driving matrix must be square".into()));
        }
        let svd = SortedSvd::new(&f);
        let s0 = svd.sigma.get(0).copied().unwrap_or(0.0);
        let top_multiplicity = svd
            .sigma
            .iter()
            .take_while(|&&s| s0 - s <= TOP_MULTIPLICITY_RTOL * s0)
            .count();
        Ok(DrivingMatrix {
            f,
            svd,
            top_multiplicity,
        })
    }

    pub fn dim(&self) -> usize {
        self.f.nrows()
    }

    /// Left singular vectors of the top `k` modes, as columns.
    pub fn top_left(&self, k: usize) -> DMatrix<f64> {
        self.svd.u.columns(0, k).into_owned()
    }

    fn v(&self) -> DMatrix<f64> {
        self.svd.v_t.transpose()
    }
}

/// `F = (1/(s√d_m)) Σ_i y_i L1_i x_{i,s}ᵀ (M_i w)ᵀ` with
/// `w = W_V W^[1] W^[2]` and `M_i = Σ_j X_{i,j}ᵀ (X_{i,j} − x̄_i)`.
pub fn compute_f(params: &TransformerParams, set: &LabeledSequenceSet) -> Result<DrivingMatrix> {
    let y = set
        .labels
        .binary()
        .ok_or_else(|| Error::Domain("driving matrix needs binary labels".into()))?;
    let weights: Vec<f64> = loss_decomposition(set, params)?.iter().map(|d| d.l1).collect();
    compute_f_weighted(params, set, y, &weights)
}

/// `compute_f` with caller-supplied per-sample weights in place of `L1_i`.
pub fn compute_f_weighted(
    params: &TransformerParams,
    set: &LabeledSequenceSet,
    y: &[f64],
    weights: &[f64],
) -> Result<DrivingMatrix> {
    let d = params.d_m();
    if set.meta.d_m != d || params.out_dim() != 1 || weights.len() != set.len() || y.len() != set.len() {
        return Err(Error::DimensionMismatch("driving matrix inputs disagree in shape".into()));
    }
    let w = params.outer_product().column(0).into_owned();
    let s = set.meta.s as f64;
    let mut f = DMatrix::zeros(d, d);
    for ((x, &yi), &li) in set.sequences.iter().zip(y).zip(weights) {
        let centered = x - DMatrix::from_fn(x.nrows(), x.ncols(), |_, c| x.column(c).mean());
        let mw = x.tr_mul(&(centered * &w));
        let last = x.row(x.nrows() - 1).transpose();
        f += (yi * li) * last * mw.transpose();
    }
    f /= s * (d as f64).sqrt();
    DrivingMatrix::new(f)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KqState {
    pub wq: DMatrix<f64>,
    pub wk: DMatrix<f64>,
    pub t: f64,
}

/// `(F W_K, Fᵀ W_Q)`.
pub fn kq_rhs(state: &KqState, f: &DrivingMatrix) -> (DMatrix<f64>, DMatrix<f64>) {
    (&f.f * &state.wk, f.f.tr_mul(&state.wq))
}

fn sinhc(sigma: f64, t: f64) -> f64 {
    if sigma == 0.0 {
        t
    } else {
        (sigma * t).sinh() / sigma
    }
}

/// Exact solution at time `state0.t + t`.
pub fn kq_closed_form(state0: &KqState, f: &DrivingMatrix, t: f64) -> KqState {
    let u = &f.svd.u;
    let v = f.v();
    let sig = &f.svd.sigma;
    let ch = DVector::from_fn(sig.len(), |i, _| (sig[i] * t).cosh());
    let sh = DVector::from_fn(sig.len(), |i, _| sinhc(sig[i], t));
    let mut a = u.tr_mul(&state0.wq);
    let mut a_dot = u.tr_mul(&(&f.f * &state0.wk));
    let mut b = v.tr_mul(&state0.wk);
    let mut b_dot = v.tr_mul(&f.f.tr_mul(&state0.wq));
    for i in 0..sig.len() {
        a.row_mut(i).scale_mut(ch[i]);
        a_dot.row_mut(i).scale_mut(sh[i]);
        b.row_mut(i).scale_mut(ch[i]);
        b_dot.row_mut(i).scale_mut(sh[i]);
    }
    KqState {
        wq: u * (a + a_dot),
        wk: v * (b + b_dot),
        t: state0.t + t,
    }
}

struct KqFlow<'a> {
    f: &'a DrivingMatrix,
}

impl OdeSystem for KqFlow<'_> {
    fn dim(&self) -> usize {
        2 * self.f.dim() * self.f.dim()
    }

    fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) {
        let d = self.f.dim();
        let n = d * d;
        let wq = DMatrix::from_column_slice(d, d, &y[..n]);
        let wk = DMatrix::from_column_slice(d, d, &y[n..]);
        dy[..n].copy_from_slice((&self.f.f * wk).as_slice());
        dy[n..].copy_from_slice(self.f.f.tr_mul(&wq).as_slice());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KqFrame {
    pub t: f64,
    pub norm_q: f64,
    pub norm_k: f64,
    pub erank_q: f64,
    pub erank_k: f64,
    /// Largest principal angle between the top-`k` left singular subspace
    /// of `W_Q` and that of `F`, `k` the top multiplicity.
    pub angle_q: f64,
}

#[derive(Debug, Clone)]
pub struct KqTrajectory {
    pub frames: Vec<KqFrame>,
    pub initial: KqState,
    pub last: KqState,
    /// Set when a norm passed 1e12 and integration was cut short.
    pub overflow: bool,
}

pub const KQ_OVERFLOW_NORM: f64 = 1e12;

fn kq_frame(st: &KqState, f: &DrivingMatrix) -> KqFrame {
    let k = f.top_multiplicity.max(1);
    let angle_q = if st.wq.norm() < linalg::ZERO_NORM {
        std::f64::consts::FRAC_PI_2
    } else {
        let svd = SortedSvd::new(&st.wq);
        linalg::largest_principal_angle(&svd.u.columns(0, k).into_owned(), &f.top_left(k))
    };
    KqFrame {
        t: st.t,
        norm_q: st.wq.norm(),
        norm_k: st.wk.norm(),
        erank_q: effective_rank(&st.wq).unwrap_or(0.0),
        erank_k: effective_rank(&st.wk).unwrap_or(0.0),
        angle_q,
    }
}

/// Fixed-step RK4 from `state0` to `t_max`, recording a frame every
/// `record_every` steps and at the end.
pub fn integrate_kq(state0: &KqState, f: &DrivingMatrix, dt: f64, t_max: f64, record_every: usize) -> Result<KqTrajectory> {
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("time step must be positive, got {dt}")));
    }
    let d = f.dim();
    let n = d * d;
    let sys = KqFlow { f };
    let mut y: Vec<f64> = state0.wq.iter().chain(state0.wk.iter()).copied().collect();
    let mut next = vec![0.0; y.len()];
    let steps = ((t_max - state0.t) / dt).round().max(0.0) as usize;
    let unpack = |y: &[f64], t: f64| KqState {
        wq: DMatrix::from_column_slice(d, d, &y[..n]),
        wk: DMatrix::from_column_slice(d, d, &y[n..]),
        t,
    };
    let mut frames = vec![kq_frame(state0, f)];
    let mut overflow = false;
    let mut t = state0.t;
    for k in 1..=steps {
        rk4_step(&sys, t, &y, dt, &mut next);
        std::mem::swap(&mut y, &mut next);
        t = state0.t + k as f64 * dt;
        let st = unpack(&y, t);
        let big = st.wq.norm() > KQ_OVERFLOW_NORM || st.wk.norm() > KQ_OVERFLOW_NORM;
        if big || k == steps || (record_every > 0 && k % record_every == 0) {
            frames.push(kq_frame(&st, f));
        }
        if big {
            overflow = true;
            break;
        }
    }
    Ok(KqTrajectory {
        frames,
        initial: state0.clone(),
        last: unpack(&y, t),
        overflow,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankVerdict {
    pub predicted_rank_bound: usize,
    pub measured_rank: usize,
    pub aligned: bool,
    pub growth: f64,
    pub principal_angle: f64,
    pub effective_rank: f64,
    /// Index of the singular mode of `F` best aligned with the top left
    /// singular vector of `W_Q`; 0 for a generic start.
    pub realized_mode: usize,
}

pub const RANK_THRESHOLD: f64 = 1e-6;
pub const ALIGNMENT_ANGLE: f64 = 1e-3;
pub const REQUIRED_GROWTH: f64 = 1e3;

/// Rank-collapse verdict for `W_Q` between a start and an end snapshot.
pub fn rank_collapse_verdict(wq_start: &DMatrix<f64>, wq_end: &DMatrix<f64>, f: &DrivingMatrix) -> Result<RankVerdict> {
    let growth = wq_end.norm() / wq_start.norm();
    if !(growth >= REQUIRED_GROWTH) {
        return Err(Error::InsufficientGrowth {
            growth,
            required: REQUIRED_GROWTH,
        });
    }
    let normalized = wq_end / wq_end.norm();
    let svd = SortedSvd::new(&normalized);
    let measured_rank = svd.sigma.iter().filter(|&&s| s > RANK_THRESHOLD).count();
    let k = f.top_multiplicity;
    let m = measured_rank.clamp(1, k.max(1));
    let principal_angle = linalg::largest_principal_angle(&svd.u.columns(0, m).into_owned(), &f.top_left(k));
    let top = svd.u.column(0);
    let realized_mode = (0..f.dim())
        .max_by(|&a, &b| {
            let ca = f.svd.u.column(a).dot(&top).abs();
            let cb = f.svd.u.column(b).dot(&top).abs();
            ca.partial_cmp(&cb).unwrap_or(std::cmp::Ordering::Equal).then(b.cmp(&a))
        })
        .unwrap_or(0);
    Ok(RankVerdict {
        predicted_rank_bound: k,
        measured_rank,
        aligned: measured_rank <= k && principal_angle < ALIGNMENT_ANGLE,
        growth,
        principal_angle,
        effective_rank: effective_rank(&normalized)?,
        realized_mode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::LabeledSequenceSet;
    use crate::transformer::{init_params, Activation, InitScale};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn diag(xs: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(xs))
    }

    #[test]
    fn f_vanishes_for_constant_sequences() {
        let row = [0.3, -1.2, 0.7];
        let x = DMatrix::from_fn(4, 3, |_, c| row[c]);
        let set = LabeledSequenceSet::binary(vec![x.clone(), x * 2.0], vec![1.0, -1.0]).unwrap();
        let p = init_params(3, 3, 1, InitScale::Epsilon(0.5), Activation::Tanh, 1).unwrap();
        assert!(compute_f(&p, &set).unwrap().f.norm() < 1e-15);
    }

    #[test]
    fn f_matches_sum_of_outer_products() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -0.5, 0.25]);
        let set = LabeledSequenceSet::binary(vec![x.clone()], vec![1.0]).unwrap();
        // W_V W1 W2 = e_1
        let p = TransformerParams {
            wq: DMatrix::zeros(2, 2),
            wk: DMatrix::zeros(2, 2),
            wv: DMatrix::identity(2, 2),
            w1: DMatrix::identity(2, 2),
            w2: DMatrix::from_column_slice(2, 1, &[1.0, 0.0]),
            activation: Activation::Identity,
            unembed: None,
        };
        let f = compute_f(&p, &set).unwrap();
        let l1 = loss_decomposition(&set, &p).unwrap()[0].l1;
        let w = [1.0, 0.0];
        let mean = [(1.0 - 0.5) / 2.0, (2.0 + 0.25) / 2.0];
        let mut oracle = DMatrix::zeros(2, 2);
        for a in 0..2 {
            for b in 0..2 {
                let mut mw = 0.0;
                for j in 0..2 {
                    for c in 0..2 {
                        mw += x[(j, b)] * (x[(j, c)] - mean[c]) * w[c];
                    }
                }
                oracle[(a, b)] = l1 * x[(1, a)] * mw / (2.0 * 2f64.sqrt());
            }
        }
        assert!((f.f - oracle).norm() < 1e-14);
    }

    #[test]
    fn f_is_linear_in_weights() {
        let set = crate::datagen::gen_binary(&crate::datagen::BinaryConfig {
            n: 5,
            s: 3,
            d_m: 3,
            margin: 0.0,
            seed: 1,
        })
        .unwrap();
        let p = init_params(3, 3, 1, InitScale::Epsilon(0.5), Activation::Tanh, 2).unwrap();
        let y = set.labels.binary().unwrap().to_vec();
        let w: Vec<f64> = (0..5).map(|i| 0.1 + i as f64).collect();
        let w3: Vec<f64> = w.iter().map(|v| 3.0 * v).collect();
        let a = compute_f_weighted(&p, &set, &y, &w).unwrap();
        let b = compute_f_weighted(&p, &set, &y, &w3).unwrap();
        assert!((b.f - 3.0 * a.f).norm() < 1e-12);
    }

    #[test]
    fn rhs_examples() {
        let f = DrivingMatrix::new(DMatrix::identity(3, 3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let st = KqState {
            wq: linalg::gaussian_matrix(&mut rng, 3, 3, 1.0),
            wk: linalg::gaussian_matrix(&mut rng, 3, 3, 1.0),
            t: 0.0,
        };
        let (dq, dk) = kq_rhs(&st, &f);
        assert_eq!(dq, st.wk);
        assert_eq!(dk, st.wq);
        let zero_k = KqState {
            wk: DMatrix::zeros(3, 3),
            ..st.clone()
        };
        assert_eq!(kq_rhs(&zero_k, &f).0, DMatrix::zeros(3, 3));
        let fr = DrivingMatrix::new(linalg::gaussian_matrix(&mut rng, 3, 3, 1.0)).unwrap();
        let (dq, dk) = kq_rhs(&st, &fr);
        assert!((dq - &fr.f * &st.wk).norm() < 1e-12);
        assert!((dk - fr.f.transpose() * &st.wq).norm() < 1e-12);
    }

    #[test]
    fn closed_form_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = DrivingMatrix::new(linalg::gaussian_matrix(&mut rng, 3, 3, 1.0)).unwrap();
        let st = KqState {
            wq: linalg::gaussian_matrix(&mut rng, 3, 3, 1.0),
            wk: linalg::gaussian_matrix(&mut rng, 3, 3, 1.0),
            t: 0.0,
        };
        let same = kq_closed_form(&st, &f, 0.0);
        assert!((same.wq - &st.wq).norm() < 1e-14 && (same.wk - &st.wk).norm() < 1e-14);

        let zero = DrivingMatrix::new(DMatrix::zeros(3, 3)).unwrap();
        let c = kq_closed_form(&st, &zero, 7.0);
        assert!((c.wq - &st.wq).norm() < 1e-14);

        let delta = 0.01;
        let f = DrivingMatrix::new(diag(&[1.0, 0.0])).unwrap();
        let st = KqState {
            wq: DMatrix::identity(2, 2) * delta,
            wk: DMatrix::identity(2, 2) * delta,
            t: 0.0,
        };
        let out = kq_closed_form(&st, &f, 5.0);
        let expect = diag(&[delta * 5f64.exp(), delta]);
        assert!((out.wq - &expect).norm() / expect.norm() < 1e-12);
        let num = integrate_kq(&st, &f, 1e-3, 5.0, 0).unwrap();
        assert!((num.last.wq - &expect).norm() / expect.norm() < 1e-9);
    }

    #[test]
    fn integrator_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let f = DrivingMatrix::new(linalg::gaussian_matrix(&mut rng, 4, 4, 0.5)).unwrap();
            let st = KqState {
                wq: linalg::gaussian_matrix(&mut rng, 4, 4, 1.0),
                wk: linalg::gaussian_matrix(&mut rng, 4, 4, 1.0),
                t: 0.0,
            };
            let num = integrate_kq(&st, &f, 1e-3, 5.0, 0).unwrap();
            let exact = kq_closed_form(&st, &f, 5.0);
            assert!((&num.last.wq - &exact.wq).norm() / exact.wq.norm() < 1e-6);
            assert!((&num.last.wk - &exact.wk).norm() / exact.wk.norm() < 1e-6);
        }
    }

    #[test]
    fn growth_rate_tracks_top_singular_value() {
        let f = DrivingMatrix::new(diag(&[1.0, 2.0])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let st = KqState {
            wq: linalg::gaussian_matrix(&mut rng, 2, 2, 1.0),
            wk: linalg::gaussian_matrix(&mut rng, 2, 2, 1.0),
            t: 0.0,
        };
        let traj = integrate_kq(&st, &f, 1e-3, 8.0, 100).unwrap();
        let n = traj.frames.len();
        let (a, b) = (traj.frames[n - 2], traj.frames[n - 1]);
        let rate = (b.norm_q.ln() - a.norm_q.ln()) / (b.t - a.t);
        assert!((rate - 2.0).abs() < 0.02, "{rate}");
    }

    #[test]
    fn zero_drive_keeps_diagnostics_constant() {
        let f = DrivingMatrix::new(DMatrix::zeros(3, 3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let st = KqState {
            wq: linalg::gaussian_matrix(&mut rng, 3, 3, 1.0),
            wk: linalg::gaussian_matrix(&mut rng, 3, 3, 1.0),
            t: 0.0,
        };
        let traj = integrate_kq(&st, &f, 0.01, 1.0, 10).unwrap();
        let f0 = traj.frames[0];
        for fr in &traj.frames {
            assert_eq!((fr.norm_q, fr.norm_k, fr.erank_q), (f0.norm_q, f0.norm_k, f0.erank_q));
        }
    }

    #[test]
    fn verdict_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q0 = linalg::gaussian_matrix(&mut rng, 3, 3, 1.0);
        let k0 = linalg::gaussian_matrix(&mut rng, 3, 3, 1.0);
        let st = KqState {
            wq: q0.clone(),
            wk: k0,
            t: 0.0,
        };
        let f = DrivingMatrix::new(diag(&[2.0, 1.0, 0.5])).unwrap();
        assert_eq!(f.top_multiplicity, 1);
        // long enough that the second mode is below 1e-6 of the first
        let end = kq_closed_form(&st, &f, 16.0);
        let v = rank_collapse_verdict(&q0, &end.wq, &f).unwrap();
        assert_eq!(v.measured_rank, 1);
        assert!(v.aligned);

        let short = kq_closed_form(&st, &f, 0.1);
        assert!(matches!(rank_collapse_verdict(&q0, &short.wq, &f), Err(Error::InsufficientGrowth { .. })));

        let iso = DrivingMatrix::new(DMatrix::identity(3, 3) * 1.5).unwrap();
        assert_eq!(iso.top_multiplicity, 3);
        let end = kq_closed_form(&st, &iso, 8.0);
        let v = rank_collapse_verdict(&q0, &end.wq, &iso).unwrap();
        assert_eq!(v.predicted_rank_bound, 3);
        assert!(v.aligned);
    }

    #[test]
    fn orthogonal_start_reports_realized_mode() {
        // W_Q and W_K have no component on the top mode of F
        let f = DrivingMatrix::new(diag(&[2.0, 1.0, 0.5])).unwrap();
        let q0 = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 1.0, 0.2, 0.0, 0.3, 1.0, 0.1]);
        let k0 = q0.clone();
        let st = KqState { wq: q0.clone(), wk: k0, t: 0.0 };
        let end = kq_closed_form(&st, &f, 20.0);
        let v = rank_collapse_verdict(&q0, &end.wq, &f).unwrap();
        assert_eq!(v.realized_mode, 1);
        assert!(!v.aligned);
    }
}
