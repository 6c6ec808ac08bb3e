//! Diagnostics computed from parameter snapshots: similarity heatmaps with
//! spectral ordering, effective rank, relative change, singular-vector
//! stability, condensation-condition rates and stage boundaries.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::effective::{condensation_condition, EffectiveState};
use crate::error::{Error, Result};
use crate::linalg::{self, SortedSvd};
use crate::transformer::TransformerParams;

/// Row-wise cosine similarities. Rows with norm below 1e-14 give zero rows
/// and columns, including the diagonal entry.
pub fn cosine_similarity_matrix(w: &DMatrix<f64>) -> DMatrix<f64> {
    let n = w.nrows();
    let mut normed = w.clone();
    let mut live = vec![true; n];
    for (i, alive) in live.iter_mut().enumerate() {
        let norm = w.row(i).norm();
        if norm < linalg::ZERO_NORM {
            *alive = false;
            normed.row_mut(i).fill(0.0);
        } else {
            normed.row_mut(i).unscale_mut(norm);
        }
    }
    let mut s = &normed * normed.transpose();
    for i in 0..n {
        if live[i] {
            s[(i, i)] = 1.0;
        }
        for j in 0..n {
            s[(i, j)] = s[(i, j)].clamp(-1.0, 1.0);
        }
    }
    s
}

/// Ordering by the principal eigenvector of `S`, sign-fixed so that its
/// largest-magnitude entry is positive. When the top eigenvalue is
/// repeated the ramp `(1, 2, …, n)` is projected onto the top eigenspace
/// and that projection is sorted instead, so `S = I` keeps the identity
/// order. Ties keep index order.
pub fn spectral_reorder(s: &DMatrix<f64>) -> Vec<usize> {
    let n = s.nrows();
    if n == 0 {
        return Vec::new();
    }
    let sym = (s + s.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let lmax = eig.eigenvalues.max();
    let tol = 1e-9 * lmax.abs().max(1.0);
    let top: Vec<usize> = (0..n).filter(|&i| (eig.eigenvalues[i] - lmax).abs() <= tol).collect();
    let key: DVector<f64> = if top.len() == 1 {
        eig.eigenvectors.column(top[0]).into_owned()
    } else {
        let ramp = DVector::from_fn(n, |i, _| (i + 1) as f64);
        let mut proj = DVector::zeros(n);
        for &k in &top {
            let e = eig.eigenvectors.column(k);
            proj += e * e.dot(&ramp);
        }
        proj
    };
    let imax = key.iamax();
    let key = if key[imax] < 0.0 { -key } else { key };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| key[a].partial_cmp(&key[b]).unwrap_or(std::cmp::Ordering::Equal));
    order
}

/// Applies a permutation to rows and columns of a square matrix.
pub fn permute_symmetric(s: &DMatrix<f64>, perm: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(perm.len(), perm.len(), |i, j| s[(perm[i], perm[j])])
}

/// Entropy effective rank `exp(−Σ p_i ln p_i)` with `p_i = σ_i / Σ σ_j`.
pub fn effective_rank(w: &DMatrix<f64>) -> Result<f64> {
    let sv = w.singular_values();
    effective_rank_from_singular_values(sv.as_slice())
}

pub fn effective_rank_from_singular_values(sv: &[f64]) -> Result<f64> {
    let total: f64 = sv.iter().sum();
    if !(total > 0.0) {
        return Err(Error::ZeroMatrix);
    }
    let h: f64 = sv
        .iter()
        .map(|&s| s / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    Ok(h.exp())
}

/// `||W_t − W_prev||_F / (||W_prev||_F + 1e-12)`.
pub fn relative_change(w_t: &DMatrix<f64>, w_prev: &DMatrix<f64>) -> f64 {
    (w_t - w_prev).norm() / (w_prev.norm() + 1e-12)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvStability {
    pub left: f64,
    pub right: f64,
}

/// Mean `|cos|` between index-matched singular vectors of two matrices.
pub fn singular_vector_stability(w_t: &DMatrix<f64>, w_next: &DMatrix<f64>) -> Result<SvStability> {
    if w_t.shape() != w_next.shape() {
        return Err(Error::DimensionMismatch("singular-vector stability needs equal shapes".into()));
    }
    let a = SortedSvd::new(w_t);
    let b = SortedSvd::new(w_next);
    let k = a.sigma.len();
    if k == 0 {
        return Ok(SvStability { left: 1.0, right: 1.0 });
    }
    let mut left = 0.0;
    let mut right = 0.0;
    for i in 0..k {
        left += a.u.column(i).dot(&b.u.column(i)).abs();
        right += a.v_t.row(i).dot(&b.v_t.row(i)).abs();
    }
    Ok(SvStability {
        left: left / k as f64,
        right: right / k as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Condensation,
    KqCollapse,
    Further,
    Undetermined,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub window: usize,
    pub plateau_tol: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            window: 50,
            plateau_tol: 1e-3,
        }
    }
}

/// Indices into the probe series; `None` when a boundary is not found.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageBoundaries {
    pub first: Option<usize>,
    pub second: Option<usize>,
}

impl StageBoundaries {
    pub fn stage_at(&self, i: usize) -> Stage {
        match (self.first, self.second) {
            (None, _) => Stage::Undetermined,
            (Some(b1), _) if i < b1 => Stage::Condensation,
            (Some(_), Some(b2)) if i >= b2 => Stage::Further,
            _ => Stage::KqCollapse,
        }
    }
}

/// Stage boundaries from a probed loss series and per-group relative
/// changes.
///
/// The first boundary is the first probe `i ≥ window` at which the mean
/// of `|Δloss| / loss` over the preceding `window` probes is below
/// `plateau_tol` and the attention group's relative change exceeds the
/// outer group's. The second is the first later probe from which the loss
/// falls over the next `window` probes by more than `plateau_tol` per
/// probe on average, with every one of those probes below the starting loss.
pub fn stage_detect(loss: &[f64], attn_change: &[f64], outer_change: &[f64], cfg: &StageConfig) -> StageBoundaries {
    let n = loss.len().min(attn_change.len()).min(outer_change.len());
    let w = cfg.window.max(1);
    let rel_step = |i: usize| (loss[i] - loss[i - 1]).abs() / loss[i - 1].abs().max(1e-300);
    let mut first = None;
    for i in w..n {
        let mean = (i + 1 - w..=i).map(rel_step).sum::<f64>() / w as f64;
        if mean < cfg.plateau_tol && attn_change[i] > outer_change[i] {
            first = Some(i);
            break;
        }
    }
    let second = first.and_then(|b1| {
        (b1 + 1..n.saturating_sub(w)).find(|&j| {
            let l0 = loss[j];
            let drop = (l0 - loss[j + w]) / l0.abs().max(1e-300);
            drop > cfg.plateau_tol * w as f64 && (j + 1..=j + w).all(|k| loss[k] < l0)
        })
    });
    StageBoundaries { first, second }
}

/// Reduced triple read off a trained model: with `(v, u)` the top singular
/// pair of `P = W_V W^[1] W^[2]` (or the supplied `v` and `u = 1` for a
/// scalar output), `w_v = vᵀ W_V`, `W^[1]` unchanged and `w2 = W^[2] u`.
pub fn outer_effective_state(params: &TransformerParams, v: Option<&DVector<f64>>) -> Result<EffectiveState> {
    let (v, u) = match v {
        Some(v) if params.out_dim() == 1 => (v.clone(), DVector::from_element(1, 1.0)),
        _ => {
            let p = params.outer_product();
            if p.norm() < linalg::ZERO_NORM {
                return Err(Error::ZeroMatrix);
            }
            let svd = SortedSvd::new(&p);
            (svd.u.column(0).into_owned(), svd.v_t.row(0).transpose())
        }
    };
    EffectiveState::new(params.wv.tr_mul(&v), params.w1.clone(), &params.w2 * u)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixStats {
    pub name: String,
    pub frobenius: f64,
    pub eff_rank: f64,
    pub rel_change: Option<f64>,
    pub sv_stability: Option<SvStability>,
}

/// One probe's metric bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsFrame {
    pub step: usize,
    pub loss: f64,
    pub matrices: Vec<MatrixStats>,
    pub rate_a1: f64,
    pub rate_a2: f64,
    /// Relative change of the concatenated `(W_Q, W_K)` block.
    pub attn_rel_change: Option<f64>,
    /// Relative change of the concatenated `(W_V, W^[1], W^[2])` block.
    pub outer_rel_change: Option<f64>,
    pub stage: Stage,
}

pub const MATRIX_NAMES: [&str; 5] = ["wq", "wk", "wv", "w1", "w2"];

fn named(p: &TransformerParams) -> [&DMatrix<f64>; 5] {
    [&p.wq, &p.wk, &p.wv, &p.w1, &p.w2]
}

fn group_change(cur: &[&DMatrix<f64>], prev: &[&DMatrix<f64>]) -> f64 {
    let num: f64 = cur.iter().zip(prev).map(|(a, b)| (*a - *b).norm_squared()).sum();
    let den: f64 = prev.iter().map(|b| b.norm_squared()).sum();
    num.sqrt() / (den.sqrt() + 1e-12)
}

impl DiagnosticsFrame {
    /// Frame for `params`, comparing against the previous probe when given.
    /// `v` selects the condensation direction for a scalar-output model.
    pub fn from_snapshot(
        step: usize,
        loss: f64,
        params: &TransformerParams,
        prev: Option<&TransformerParams>,
        v: Option<&DVector<f64>>,
    ) -> Result<Self> {
        let cur = named(params);
        let prev_m = prev.map(named);
        let mut matrices = Vec::with_capacity(5);
        for (k, m) in cur.iter().enumerate() {
            let before = prev_m.map(|p| p[k]);
            matrices.push(MatrixStats {
                name: MATRIX_NAMES[k].to_string(),
                frobenius: m.norm(),
                eff_rank: effective_rank(m).unwrap_or(0.0),
                rel_change: before.map(|b| relative_change(m, b)),
                sv_stability: before.map(|b| singular_vector_stability(b, m)).transpose()?,
            });
        }
        let rates = outer_effective_state(params, v).map(|st| condensation_condition(&st));
        let (rate_a1, rate_a2) = rates.map_or((0.0, 0.0), |r| (r.rate_a1, r.rate_a2));
        Ok(DiagnosticsFrame {
            step,
            loss,
            matrices,
            rate_a1,
            rate_a2,
            attn_rel_change: prev_m.map(|p| group_change(&cur[..2], &p[..2])),
            outer_rel_change: prev_m.map(|p| group_change(&cur[2..], &p[2..])),
            stage: Stage::Undetermined,
        })
    }

    pub fn matrix(&self, name: &str) -> Option<&MatrixStats> {
        self.matrices.iter().find(|m| m.name == name)
    }
}

/// Fills in `stage` for every frame from the detected boundaries.
pub fn label_stages(frames: &mut [DiagnosticsFrame], cfg: &StageConfig) -> StageBoundaries {
    let loss: Vec<f64> = frames.iter().map(|f| f.loss).collect();
    let attn: Vec<f64> = frames.iter().map(|f| f.attn_rel_change.unwrap_or(0.0)).collect();
    let outer: Vec<f64> = frames.iter().map(|f| f.outer_rel_change.unwrap_or(0.0)).collect();
    let b = stage_detect(&loss, &attn, &outer, cfg);
    for (i, f) in frames.iter_mut().enumerate() {
        f.stage = b.stage_at(i);
    }
    b
}
