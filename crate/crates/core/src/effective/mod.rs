//! Leading-order gradient flow of the outer parameters at small
//! initialization.
//!
//! After absorbing the initialization scale and rescaling time, the value,
//! first and second feed-forward weights follow gradient *ascent* on the
//! trilinear energy `E = W_v W^[1] W^[2]`, where `W_v = vᵀ W_V` is the
//! projection of the value matrix on the condensation direction `v`.
//! This module holds that system, its conserved quantities, the energy
//! bounds that certify finite-time blow-up, and the alignment diagnostics
//! used to study condensation. Integration lives in [`integrate`].

mod integrate;

pub use integrate::{
    advance, energy_lower_bound, fit_blowup_time, integrate, EffectiveFrame, EffectiveTrajectory, IntegrateConfig,
    Termination,
};

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::datagen::LabeledSequenceSet;
use crate::error::{Error, Result};
use crate::linalg::{self, cosine};

/// Unit direction of the label-weighted token sum, plus its norm which
/// sets the time rescaling `t̄ = (ε / n s) · scale · t`.
#[derive(Debug, Clone, PartialEq)]
pub struct CondensationDirection {
    pub v: DVector<f64>,
    pub scale: f64,
}

impl CondensationDirection {
    /// Rescaled time corresponding to gradient-flow time `t` at init scale `epsilon`.
    pub fn rescaled_time(&self, t: f64, epsilon: f64, n: usize, s: usize) -> f64 {
        epsilon / (n * s) as f64 * self.scale * t
    }
}

pub fn compute_condensation_direction(dataset: &LabeledSequenceSet) -> Result<CondensationDirection> {
    let sum = dataset
        .signed_token_sum()
        .ok_or_else(|| Error::Domain("condensation direction needs binary labels".into()))?;
    let scale = sum.norm();
    if !(scale >= 1e-14) {
        return Err(Error::ZeroDirection { norm: scale });
    }
    Ok(CondensationDirection { v: sum / scale, scale })
}

/// The full value matrix, carried along when the caller wants to watch its
/// columns condense. Only the `v` component of each column moves.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackedValue {
    pub wv: DMatrix<f64>,
    pub v: DVector<f64>,
}

/// Reduced parameter triple `(W_v, W^[1], W^[2])` in normalized units.
///
/// `w_v` has length `d_m`, `w1` is `d_m × d_ff`, `w2` has length `d_ff`.
/// The theory takes `d_ff = d_m`; the rectangular case is supported so
/// that trained models with a wider feed-forward layer can be probed.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveState {
    pub w_v: DVector<f64>,
    pub w1: DMatrix<f64>,
    pub w2: DVector<f64>,
    pub tracked: Option<TrackedValue>,
}

/// Time derivative of an [`EffectiveState`].
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveRate {
    pub w_v: DVector<f64>,
    pub w1: DMatrix<f64>,
    pub w2: DVector<f64>,
    pub wv: Option<DMatrix<f64>>,
}

impl EffectiveState {
    pub fn new(w_v: DVector<f64>, w1: DMatrix<f64>, w2: DVector<f64>) -> Result<Self> {
        if w1.nrows() != w_v.len() || w1.ncols() != w2.len() {
            return Err(Error::DimensionMismatch(format!(
                "w_v has {} entries, w1 is {}x{}, w2 has {} entries",
                w_v.len(),
                w1.nrows(),
                w1.ncols(),
                w2.len()
            )));
        }
        Ok(EffectiveState {
            w_v,
            w1,
            w2,
            tracked: None,
        })
    }

    /// Builds the state from a full value matrix; `w_v = vᵀ W_V`.
    pub fn with_full_value(wv: DMatrix<f64>, w1: DMatrix<f64>, w2: DVector<f64>, v: DVector<f64>) -> Result<Self> {
        if wv.nrows() != v.len() || wv.ncols() != w1.nrows() {
            return Err(Error::DimensionMismatch("value matrix does not match v or w1".into()));
        }
        let w_v = wv.tr_mul(&v);
        let mut st = EffectiveState::new(w_v, w1, w2)?;
        st.tracked = Some(TrackedValue { wv, v });
        Ok(st)
    }

    /// Gaussian initialization with i.i.d. `N(0, std²)` entries. When `v` is
    /// given the full `d_m × d_m` value matrix is drawn and tracked.
    pub fn gaussian<R: Rng + ?Sized>(rng: &mut R, d_m: usize, d_ff: usize, std: f64, v: Option<&DVector<f64>>) -> Self {
        match v {
            Some(v) => {
                let wv = linalg::gaussian_matrix(rng, d_m, d_m, std);
                let w1 = linalg::gaussian_matrix(rng, d_m, d_ff, std);
                let w2 = linalg::gaussian_vector(rng, d_ff, std);
                EffectiveState::with_full_value(wv, w1, w2, v.clone()).expect("shapes agree")
            }
            None => {
                let w_v = linalg::gaussian_vector(rng, d_m, std);
                let w1 = linalg::gaussian_matrix(rng, d_m, d_ff, std);
                let w2 = linalg::gaussian_vector(rng, d_ff, std);
                EffectiveState::new(w_v, w1, w2).expect("shapes agree")
            }
        }
    }

    pub fn d_m(&self) -> usize {
        self.w_v.len()
    }

    pub fn d_ff(&self) -> usize {
        self.w2.len()
    }

    pub fn is_finite(&self) -> bool {
        self.w_v.iter().chain(self.w1.iter()).chain(self.w2.iter()).all(|x| x.is_finite())
    }

    /// `sqrt(||W_v||² + ||W^[1]||_F² + ||W^[2]||²)`.
    pub fn param_norm(&self) -> f64 {
        (self.w_v.norm_squared() + self.w1.norm_squared() + self.w2.norm_squared()).sqrt()
    }

    pub(crate) fn flat_len(&self) -> usize {
        let base = self.w_v.len() + self.w1.len() + self.w2.len();
        base + self.tracked.as_ref().map_or(0, |t| t.wv.len())
    }

    pub(crate) fn write_flat(&self, out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(self.w_v.as_slice());
        out.extend_from_slice(self.w1.as_slice());
        out.extend_from_slice(self.w2.as_slice());
        if let Some(t) = &self.tracked {
            out.extend_from_slice(t.wv.as_slice());
        }
    }

    /// Inverse of `write_flat`, reusing `self` for shapes and `v`.
    pub(crate) fn rebuild_from_flat(&self, y: &[f64]) -> Self {
        let (dm, dff) = (self.d_m(), self.d_ff());
        let mut off = 0;
        let mut take = |len: usize| {
            let s = &y[off..off + len];
            off += len;
            s
        };
        let w_v = DVector::from_column_slice(take(dm));
        let w1 = DMatrix::from_column_slice(dm, dff, take(dm * dff));
        let w2 = DVector::from_column_slice(take(dff));
        let tracked = self.tracked.as_ref().map(|t| TrackedValue {
            wv: DMatrix::from_column_slice(t.wv.nrows(), t.wv.ncols(), take(t.wv.len())),
            v: t.v.clone(),
        });
        EffectiveState { w_v, w1, w2, tracked }
    }
}

/// Gradient of `E = W_v W^[1] W^[2]` with respect to each factor:
/// `(W^[1] W^[2], W_vᵀ W^[2]ᵀ, (W_v W^[1])ᵀ)`. The tracked value matrix
/// moves as `v (W^[1] W^[2])ᵀ`.
pub fn effective_rhs(state: &EffectiveState) -> EffectiveRate {
    let w1w2 = &state.w1 * &state.w2;
    let w1 = linalg::outer(&state.w_v, &state.w2);
    let w2 = state.w1.tr_mul(&state.w_v);
    let wv = state.tracked.as_ref().map(|t| linalg::outer(&t.v, &w1w2));
    EffectiveRate {
        w_v: w1w2,
        w1,
        w2,
        wv,
    }
}

pub fn energy(state: &EffectiveState) -> f64 {
    state.w_v.dot(&(&state.w1 * &state.w2))
}

/// `Ė = ||Ẇ_v||² + ||Ẇ^[2]||² + ||W_v||² ||W^[2]||²`.
pub fn energy_rate(state: &EffectiveState) -> f64 {
    let dv = &state.w1 * &state.w2;
    let d2 = state.w1.tr_mul(&state.w_v);
    dv.norm_squared() + d2.norm_squared() + state.w_v.norm_squared() * state.w2.norm_squared()
}

/// Per-index conserved quantities: `W_{v,k}² − ||W^[1]_k||²` over rows and
/// `(W^[2]_k)² − ||W^[1],k||²` over columns.
pub fn conserved_quantities(state: &EffectiveState) -> (Vec<f64>, Vec<f64>) {
    let rows = (0..state.d_m())
        .map(|k| state.w_v[k] * state.w_v[k] - state.w1.row(k).norm_squared())
        .collect();
    let cols = (0..state.d_ff())
        .map(|k| state.w2[k] * state.w2[k] - state.w1.column(k).norm_squared())
        .collect();
    (rows, cols)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NondegeneracyReport {
    pub nondegenerate: bool,
    /// `||W_v||² − ||W^[2]||²`
    pub norm_gap: f64,
    /// `||Ẇ_v||² − ||Ẇ^[2]||² + min(||W_v||², ||W^[2]||²) · norm_gap`
    pub rate_gap: f64,
}

pub const NONDEGENERACY_TOL: f64 = 1e-12;

pub fn is_nondegenerate(state: &EffectiveState, tol: f64) -> NondegeneracyReport {
    let nv = state.w_v.norm_squared();
    let n2 = state.w2.norm_squared();
    let norm_gap = nv - n2;
    let dv = (&state.w1 * &state.w2).norm_squared();
    let d2 = state.w1.tr_mul(&state.w_v).norm_squared();
    let rate_gap = dv - d2 + nv.min(n2) * norm_gap;
    NondegeneracyReport {
        nondegenerate: norm_gap.abs() > tol && rate_gap.abs() > tol,
        norm_gap,
        rate_gap,
    }
}

/// Satisfaction of the condensation condition.
///
/// Column test for `j ∈ [d_ff]`: `W^[2]_j · (W_v W^[1],j) > 0`.
/// Row test for `k ∈ [d_m]`: `W_{v,k} · (W^[1]_k W^[2]) > 0`.
/// Pair tests: `⟨W^[2]_i W^[1],i, W^[2]_j W^[1],j⟩ > 0` over column pairs
/// and `⟨W_{v,i} W^[1]_i, W_{v,j} W^[1]_j⟩ > 0` over row pairs.
///
/// In the square case an index (pair) belongs to `A1` (`A2`) when both of
/// its tests pass and the rates are `|A1|/d_m`, `|A2|/d_m²`. For a
/// rectangular `W^[1]` the two families have different index sets, so each
/// rate is the smaller of the two family pass fractions and the index lists
/// are left empty.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionReport {
    pub a1_indices: Vec<usize>,
    pub a2_pairs: Vec<(usize, usize)>,
    pub rate_a1: f64,
    pub rate_a2: f64,
}

pub fn condensation_condition(state: &EffectiveState) -> ConditionReport {
    let (dm, dff) = (state.d_m(), state.d_ff());
    let col_drive = state.w1.tr_mul(&state.w_v); // (W_v W^[1])ᵀ
    let row_drive = &state.w1 * &state.w2;
    let col_ok: Vec<bool> = (0..dff).map(|j| state.w2[j] * col_drive[j] > 0.0).collect();
    let row_ok: Vec<bool> = (0..dm).map(|k| state.w_v[k] * row_drive[k] > 0.0).collect();

    let col_gram = state.w1.tr_mul(&state.w1);
    let row_gram = &state.w1 * state.w1.transpose();
    let col_pair = |i: usize, j: usize| state.w2[i] * state.w2[j] * col_gram[(i, j)] > 0.0;
    let row_pair = |i: usize, j: usize| state.w_v[i] * state.w_v[j] * row_gram[(i, j)] > 0.0;

    if dm == dff {
        let a1_indices: Vec<usize> = (0..dm).filter(|&i| col_ok[i] && row_ok[i]).collect();
        let mut a2_pairs = Vec::new();
        for i in 0..dm {
            for j in 0..dm {
                if col_pair(i, j) && row_pair(i, j) {
                    a2_pairs.push((i, j));
                }
            }
        }
        let rate_a1 = a1_indices.len() as f64 / dm as f64;
        let rate_a2 = a2_pairs.len() as f64 / (dm * dm) as f64;
        ConditionReport {
            a1_indices,
            a2_pairs,
            rate_a1,
            rate_a2,
        }
    } else {
        let frac = |ok: &[bool]| ok.iter().filter(|&&b| b).count() as f64 / ok.len() as f64;
        let pair_frac = |d: usize, f: &dyn Fn(usize, usize) -> bool| {
            let mut c = 0usize;
            for i in 0..d {
                for j in 0..d {
                    if f(i, j) {
                        c += 1;
                    }
                }
            }
            c as f64 / (d * d) as f64
        };
        ConditionReport {
            a1_indices: Vec::new(),
            a2_pairs: Vec::new(),
            rate_a1: frac(&col_ok).min(frac(&row_ok)),
            rate_a2: pair_frac(dff, &col_pair).min(pair_frac(dm, &row_pair)),
        }
    }
}

/// Cosines among the row products `r_i = W_{v,i} W^[1]_i`, `W^[2]` and
/// `Ẇ^[2]`. Undefined cosines (a vector with norm below 1e-14) are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleFrame {
    /// `cos ξ_ij` between `r_i` and `r_j`.
    pub xi: DMatrix<f64>,
    /// `cos ψ_i` between `Ẇ^[2]` and `r_i`.
    pub psi: DVector<f64>,
    /// `cos φ_i` between `W^[2]` and `r_i`.
    pub phi: DVector<f64>,
    /// `cos ζ` between `W^[2]` and `Ẇ^[2]`.
    pub zeta: f64,
    /// Indices with `|W_{v,i}|` above `class_threshold · max_k |W_{v,k}|`,
    /// a finite-time stand-in for the diverging class.
    pub class_c1: Vec<usize>,
    pub class_c2: Vec<usize>,
}

pub const DEFAULT_CLASS_THRESHOLD: f64 = 0.5;

impl AngleFrame {
    /// Minimum of the defined `cos ξ_ij` over `C1 × C1`.
    pub fn min_xi_c1(&self) -> Option<f64> {
        min_defined(self.class_c1.iter().flat_map(|&i| self.class_c1.iter().map(move |&j| (i, j))).map(|(i, j)| self.xi[(i, j)]))
    }

    pub fn min_psi_c1(&self) -> Option<f64> {
        min_defined(self.class_c1.iter().map(|&i| self.psi[i]))
    }

    pub fn min_abs_phi_c1(&self) -> Option<f64> {
        min_defined(self.class_c1.iter().map(|&i| self.phi[i].abs()))
    }
}

fn min_defined(it: impl Iterator<Item = f64>) -> Option<f64> {
    it.filter(|x| !x.is_nan()).fold(None, |acc, x| Some(acc.map_or(x, |a: f64| a.min(x))))
}

pub fn angle_frame(state: &EffectiveState, class_threshold: f64) -> AngleFrame {
    let dm = state.d_m();
    let rows: Vec<DVector<f64>> = (0..dm).map(|i| state.w_v[i] * linalg::row(&state.w1, i)).collect();
    let w2_dot = state.w1.tr_mul(&state.w_v);
    let nan = f64::NAN;
    let xi = DMatrix::from_fn(dm, dm, |i, j| cosine(&rows[i], &rows[j]).unwrap_or(nan));
    let psi = DVector::from_fn(dm, |i, _| cosine(&w2_dot, &rows[i]).unwrap_or(nan));
    let phi = DVector::from_fn(dm, |i, _| cosine(&state.w2, &rows[i]).unwrap_or(nan));
    let zeta = cosine(&state.w2, &w2_dot).unwrap_or(nan);
    let max_abs = state.w_v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let (class_c1, class_c2) = if max_abs < linalg::ZERO_NORM {
        (Vec::new(), (0..dm).collect())
    } else {
        (0..dm).partition(|&i| state.w_v[i].abs() > class_threshold * max_abs)
    };
    AngleFrame {
        xi,
        psi,
        phi,
        zeta,
        class_c1,
        class_c2,
    }
}

/// `|⟨row / ||row||, v⟩|` for each row of `rows`; `None` marks rows whose
/// norm is below 1e-14. For the value matrix pass its transpose: under the
/// effective flow each *column* of `W_V` gains a multiple of `v`.
pub fn condensation_metric(rows: &DMatrix<f64>, v: &DVector<f64>) -> Vec<Option<f64>> {
    (0..rows.nrows())
        .map(|i| cosine(&linalg::row(rows, i), v).map(f64::abs))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vec(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn scalar(a: f64, b: f64, c: f64) -> EffectiveState {
        EffectiveState::new(vec(&[a]), DMatrix::from_element(1, 1, b), vec(&[c])).unwrap()
    }

    #[test]
    fn direction_single_vector() {
        let set = LabeledSequenceSet::binary(vec![DMatrix::from_row_slice(1, 2, &[1.0, 0.0])], vec![1.0]).unwrap();
        let d = compute_condensation_direction(&set).unwrap();
        assert_eq!(d.v, vec(&[1.0, 0.0]));
        assert_eq!(d.scale, 1.0);
    }

    #[test]
    fn direction_exact_cancellation() {
        let x = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let set = LabeledSequenceSet::binary(vec![x.clone(), x], vec![1.0, -1.0]).unwrap();
        assert!(matches!(compute_condensation_direction(&set), Err(Error::ZeroDirection { .. })));
    }

    #[test]
    fn direction_two_orthogonal_tokens() {
        let set = LabeledSequenceSet::binary(
            vec![DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), DMatrix::from_row_slice(1, 2, &[0.0, 1.0])],
            vec![1.0, 1.0],
        )
        .unwrap();
        let d = compute_condensation_direction(&set).unwrap();
        let r = 0.5f64.sqrt();
        assert!((&d.v - vec(&[r, r])).norm() < 1e-15);
        assert!((d.scale - 2f64.sqrt()).abs() < 1e-15);
        assert!((d.v.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rhs_zero_state_is_fixed_point() {
        let st = EffectiveState::new(DVector::zeros(3), DMatrix::zeros(3, 3), DVector::zeros(3)).unwrap();
        let r = effective_rhs(&st);
        assert_eq!(r.w_v.norm() + r.w1.norm() + r.w2.norm(), 0.0);
    }

    #[test]
    fn rhs_scalar_chain_rule() {
        let r = effective_rhs(&scalar(2.0, 3.0, 5.0));
        assert_eq!((r.w_v[0], r.w1[(0, 0)], r.w2[0]), (15.0, 10.0, 6.0));
    }

    /// Central differences of E as an independent oracle for the gradient.
    fn fd_gradient(st: &EffectiveState) -> (DVector<f64>, DMatrix<f64>, DVector<f64>) {
        let h = 1e-6;
        let mut base = Vec::new();
        st.write_flat(&mut base);
        let grad: Vec<f64> = (0..base.len())
            .map(|k| {
                let mut p = base.clone();
                let mut m = base.clone();
                p[k] += h;
                m[k] -= h;
                (energy(&st.rebuild_from_flat(&p)) - energy(&st.rebuild_from_flat(&m))) / (2.0 * h)
            })
            .collect();
        let g = st.rebuild_from_flat(&grad);
        (g.w_v, g.w1, g.w2)
    }

    #[test]
    fn rhs_matches_finite_difference_gradient() {
        let st = EffectiveState::new(vec(&[1.0, 0.0]), DMatrix::identity(2, 2), vec(&[0.0, 1.0])).unwrap();
        let r = effective_rhs(&st);
        assert_eq!(r.w_v, vec(&[0.0, 1.0]));
        assert_eq!(r.w1, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]));
        assert_eq!(r.w2, vec(&[1.0, 0.0]));
        let (gv, g1, g2) = fd_gradient(&st);
        assert!((gv - r.w_v).norm() < 1e-9);
        assert!((g1 - r.w1).norm() < 1e-9);
        assert!((g2 - r.w2).norm() < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let st = EffectiveState::gaussian(&mut rng, 4, 3, 1.0, None);
        let r = effective_rhs(&st);
        let (gv, g1, g2) = fd_gradient(&st);
        assert!((gv - r.w_v).norm() < 1e-8);
        assert!((g1 - r.w1).norm() < 1e-8);
        assert!((g2 - r.w2).norm() < 1e-8);
    }

    #[test]
    fn tracked_value_moves_along_v_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = linalg::unit_vector(&mut rng, 3);
        let st = EffectiveState::gaussian(&mut rng, 3, 3, 1.0, Some(&v));
        let r = effective_rhs(&st);
        let dwv = r.wv.unwrap();
        // vᵀ (dW_V) equals the projected rate
        assert!((dwv.tr_mul(&v) - &r.w_v).norm() < 1e-14);
        for j in 0..3 {
            let col = dwv.column(j).into_owned();
            let resid = &col - &v * v.dot(&col);
            assert!(resid.norm() < 1e-14);
        }
    }

    #[test]
    fn energy_examples() {
        let st = EffectiveState::new(vec(&[1.0, 0.0]), DMatrix::identity(2, 2), vec(&[1.0, 0.0])).unwrap();
        assert_eq!(energy(&st), 1.0);
        let one = scalar(1.0, 1.0, 1.0);
        assert_eq!(energy(&one), 1.0);
        assert_eq!(energy_rate(&one), 3.0);
        let zero = scalar(0.0, 0.0, 0.0);
        assert_eq!((energy(&zero), energy_rate(&zero)), (0.0, 0.0));
    }

    #[test]
    fn energy_rate_is_directional_derivative() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let st = EffectiveState::gaussian(&mut rng, 5, 5, 0.7, None);
        let r = effective_rhs(&st);
        let h = 1e-6;
        let shift = |sgn: f64| {
            EffectiveState::new(&st.w_v + sgn * h * &r.w_v, &st.w1 + sgn * h * &r.w1, &st.w2 + sgn * h * &r.w2).unwrap()
        };
        let fd = (energy(&shift(1.0)) - energy(&shift(-1.0))) / (2.0 * h);
        assert!((fd - energy_rate(&st)).abs() < 1e-7 * energy_rate(&st).max(1.0));
    }

    #[test]
    fn nondegeneracy_examples() {
        let zero = scalar(0.0, 0.0, 0.0);
        assert!(!is_nondegenerate(&zero, NONDEGENERACY_TOL).nondegenerate);

        let eq = EffectiveState::new(vec(&[1.0, 0.0]), DMatrix::identity(2, 2), vec(&[1.0, 0.0])).unwrap();
        let rep = is_nondegenerate(&eq, NONDEGENERACY_TOL);
        assert!(!rep.nondegenerate);
        assert_eq!(rep.norm_gap, 0.0);

        // a=2, b=1, c=1: norm gap 3, but the rate gap
        // (bc)² − (ab)² + min(a², c²)(a² − c²) = 1 − 4 + 3 vanishes.
        let rep = is_nondegenerate(&scalar(2.0, 1.0, 1.0), NONDEGENERACY_TOL);
        assert_eq!(rep.norm_gap, 3.0);
        assert_eq!(rep.rate_gap, 0.0);
        assert!(!rep.nondegenerate);

        // a=2, b=1, c=0.5: (0.5)² − 4 + 0.25·3.75 = −2.8125
        let rep = is_nondegenerate(&scalar(2.0, 1.0, 0.5), NONDEGENERACY_TOL);
        assert!(rep.nondegenerate);
        assert!((rep.rate_gap + 2.8125).abs() < 1e-15);
    }

    #[test]
    fn gaussian_inits_are_nondegenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let st = EffectiveState::gaussian(&mut rng, 8, 8, 1.0, None);
            assert!(is_nondegenerate(&st, NONDEGENERACY_TOL).nondegenerate);
        }
    }

    #[test]
    fn condition_examples() {
        let st = EffectiveState::new(vec(&[1.0, 1.0]), DMatrix::identity(2, 2), vec(&[1.0, 1.0])).unwrap();
        let rep = condensation_condition(&st);
        assert_eq!(rep.a1_indices, vec![0, 1]);
        assert_eq!(rep.a2_pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(rep.rate_a1, 1.0);
        assert_eq!(rep.rate_a2, 0.5);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut st = EffectiveState::gaussian(&mut rng, 4, 4, 1.0, None);
        st.w2.fill(0.0);
        assert_eq!(condensation_condition(&st).rate_a1, 0.0);

        let rep = condensation_condition(&scalar(1.0, 1.0, 1.0));
        assert_eq!((rep.rate_a1, rep.rate_a2), (1.0, 1.0));
    }

    /// Brute-force enumeration straight from the defining inequalities.
    #[test]
    fn condition_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let st = EffectiveState::gaussian(&mut rng, 5, 5, 1.0, None);
            let rep = condensation_condition(&st);
            let d = 5;
            let mut a1 = Vec::new();
            for i in 0..d {
                let mut c1 = 0.0;
                let mut c2 = 0.0;
                for k in 0..d {
                    c1 += st.w_v[k] * st.w1[(k, i)];
                    c2 += st.w1[(i, k)] * st.w2[k];
                }
                if st.w2[i] * c1 > 0.0 && st.w_v[i] * c2 > 0.0 {
                    a1.push(i);
                }
            }
            let mut a2 = Vec::new();
            for i in 0..d {
                for j in 0..d {
                    let mut p = 0.0;
                    let mut q = 0.0;
                    for k in 0..d {
                        p += st.w2[i] * st.w1[(k, i)] * st.w2[j] * st.w1[(k, j)];
                        q += st.w_v[i] * st.w1[(i, k)] * st.w_v[j] * st.w1[(j, k)];
                    }
                    if p > 0.0 && q > 0.0 {
                        a2.push((i, j));
                    }
                }
            }
            assert_eq!(rep.a1_indices, a1);
            assert_eq!(rep.a2_pairs, a2);
        }
    }

    #[test]
    fn angles_scalar_and_antipodal() {
        let f = angle_frame(&scalar(1.0, 2.0, 3.0), DEFAULT_CLASS_THRESHOLD);
        assert_eq!((f.xi[(0, 0)], f.psi[0], f.phi[0], f.zeta), (1.0, 1.0, 1.0, 1.0));

        // rows 0 and 1 of w1 opposite with equal w_v signs
        let st = EffectiveState::new(
            vec(&[1.0, 1.0]),
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -1.0, -2.0]),
            vec(&[1.0, 0.5]),
        )
        .unwrap();
        let f = angle_frame(&st, DEFAULT_CLASS_THRESHOLD);
        assert!((f.xi[(0, 1)] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn angles_match_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let st = EffectiveState::gaussian(&mut rng, 4, 4, 1.0, None);
        let f = angle_frame(&st, DEFAULT_CLASS_THRESHOLD);
        let d = 4;
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let r: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|k| st.w_v[i] * st.w1[(i, k)]).collect()).collect();
        let w2: Vec<f64> = st.w2.iter().copied().collect();
        let w2dot: Vec<f64> = (0..d).map(|k| (0..d).map(|i| st.w_v[i] * st.w1[(i, k)]).sum()).collect();
        for i in 0..d {
            for j in 0..d {
                assert!((f.xi[(i, j)] - cos(&r[i], &r[j])).abs() < 1e-12);
            }
            assert!((f.psi[i] - cos(&w2dot, &r[i])).abs() < 1e-12);
            assert!((f.phi[i] - cos(&w2, &r[i])).abs() < 1e-12);
        }
        assert!((f.zeta - cos(&w2, &w2dot)).abs() < 1e-12);
        let mut all: Vec<usize> = f.class_c1.iter().chain(&f.class_c2).copied().collect();
        all.sort();
        assert_eq!(all, (0..d).collect::<Vec<_>>());
    }

    #[test]
    fn angles_zero_state_uses_sentinel() {
        let st = EffectiveState::new(DVector::zeros(2), DMatrix::zeros(2, 2), DVector::zeros(2)).unwrap();
        let f = angle_frame(&st, DEFAULT_CLASS_THRESHOLD);
        assert!(f.xi.iter().all(|x| x.is_nan()));
        assert!(f.zeta.is_nan());
        assert!(f.class_c1.is_empty());
        assert_eq!(f.min_xi_c1(), None);
    }

    #[test]
    fn condensation_metric_examples() {
        let v = vec(&[0.6, 0.8]);
        let aligned = &v * v.transpose();
        assert!(condensation_metric(&aligned, &v).iter().all(|c| (c.unwrap() - 1.0).abs() < 1e-15));
        let perp = DMatrix::identity(2, 2) - &v * v.transpose();
        assert!(condensation_metric(&perp, &v).iter().all(|c| c.unwrap().abs() < 1e-15));
        let with_zero = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.6, 0.8]);
        assert_eq!(condensation_metric(&with_zero, &v)[0], None);
    }

    #[test]
    fn conserved_quantities_have_zero_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let st = EffectiveState::gaussian(&mut rng, 4, 6, 1.0, None);
        let r = effective_rhs(&st);
        for k in 0..4 {
            let d = 2.0 * st.w_v[k] * r.w_v[k] - 2.0 * st.w1.row(k).dot(&r.w1.row(k));
            assert!(d.abs() < 1e-12);
        }
        for k in 0..6 {
            let d = 2.0 * st.w2[k] * r.w2[k] - 2.0 * st.w1.column(k).dot(&r.w1.column(k));
            assert!(d.abs() < 1e-12);
        }
    }
}
