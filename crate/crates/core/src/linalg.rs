//! Small dense linear-algebra helpers shared by the dynamics and metrics
//! modules. Everything is `f64` and backed by `nalgebra`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Norms below this are treated as zero when forming directions.
pub const ZERO_NORM: f64 = 1e-14;

/// Thin SVD with singular values sorted in non-increasing order.
#[derive(Debug, Clone)]
pub struct SortedSvd {
    /// Left singular vectors as columns, `rows × k`.
    pub u: DMatrix<f64>,
    pub sigma: DVector<f64>,
    /// Right singular vectors as rows, `k × cols`.
    pub v_t: DMatrix<f64>,
}

impl SortedSvd {
    pub fn new(m: &DMatrix<f64>) -> Self {
        let svd = m.clone().svd(true, true);
        let u = svd.u.expect("u requested");
        let v_t = svd.v_t.expect("v_t requested");
        let k = svd.singular_values.len();
        let mut order: Vec<usize> = (0..k).collect();
        // stable sort keeps the decomposition's own order on exact ties
        order.sort_by(|&a, &b| {
            svd.singular_values[b]
                .partial_cmp(&svd.singular_values[a])
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let sigma = DVector::from_iterator(k, order.iter().map(|&i| svd.singular_values[i]));
        let u = DMatrix::from_fn(u.nrows(), k, |r, c| u[(r, order[c])]);
        let v_t = DMatrix::from_fn(k, v_t.ncols(), |r, c| v_t[(order[r], c)]);
        SortedSvd { u, sigma, v_t }
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.u * DMatrix::from_diagonal(&self.sigma) * &self.v_t
    }
}

/// Cosine of the angle between two vectors; `None` when either norm is
/// below [`ZERO_NORM`].
pub fn cosine(a: &DVector<f64>, b: &DVector<f64>) -> Option<f64> {
    let na = a.norm();
    let nb = b.norm();
    if na < ZERO_NORM || nb < ZERO_NORM {
        return None;
    }
    Some((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn row(m: &DMatrix<f64>, i: usize) -> DVector<f64> {
    m.row(i).transpose()
}

pub fn column(m: &DMatrix<f64>, j: usize) -> DVector<f64> {
    m.column(j).into_owned()
}

pub fn gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> DMatrix<f64> {
    // column-major fill order; fixed so seeds reproduce bit-exactly
    DMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

pub fn gaussian_vector<R: Rng + ?Sized>(rng: &mut R, len: usize, std: f64) -> DVector<f64> {
    DVector::from_fn(len, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

pub fn unit_vector<R: Rng + ?Sized>(rng: &mut R, len: usize) -> DVector<f64> {
    loop {
        let g = gaussian_vector(rng, len, 1.0);
        let n = g.norm();
        if n > ZERO_NORM {
            return g / n;
        }
    }
}

/// Haar-distributed orthogonal matrix via QR of a Gaussian matrix with the
/// sign of `R`'s diagonal folded into `Q`.
pub fn random_orthogonal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DMatrix<f64> {
    let g = gaussian_matrix(rng, n, n, 1.0);
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Largest principal angle (radians) between the column spans of `a` and
/// `b`, measured from the span of `a` into the span of `b`. Both inputs must
/// have orthonormal columns; when `a` has more columns than `b` the result is
/// `π/2`.
pub fn largest_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    if a.ncols() == 0 {
        return 0.0;
    }
    if a.ncols() > b.ncols() {
        return std::f64::consts::FRAC_PI_2;
    }
    let m = b.transpose() * a;
    let s = m.singular_values();
    let min_cos = s.iter().copied().fold(f64::INFINITY, f64::min).clamp(0.0, 1.0);
    // acos loses accuracy near 1; use the sine of the residual instead
    let resid = a - b * (b.transpose() * a);
    let sin = resid.singular_values().iter().copied().fold(0.0_f64, f64::max).min(1.0);
    sin.atan2(min_cos)
}

pub fn outer(a: &DVector<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    a * b.transpose()
}
