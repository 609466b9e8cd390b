//! Dense linear-algebra helpers shared by the modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Column-stacking `vec(M)`.
pub fn vec(m: &Mat) -> Vector {
    DVector::from_column_slice(m.as_slice())
}

/// Inverse of [`vec`]: fills a `rows x cols` matrix column by column.
pub fn unvec(v: &Vector, rows: usize, cols: usize) -> Mat {
    assert_eq!(v.len(), rows * cols, "unvec length mismatch");
    DMatrix::from_column_slice(rows, cols, v.as_slice())
}

/// Commutation matrix `P` with `P vec(V) = vec(V^T)` for `V` of size `rows x cols`.
pub fn commutation(rows: usize, cols: usize) -> Mat {
    let n = rows * cols;
    let mut p = Mat::zeros(n, n);
    for i in 0..rows {
        for j in 0..cols {
            // V[i,j] sits at j*rows+i in vec(V) and at i*cols+j in vec(V^T)
            p[(i * cols + j, j * rows + i)] = 1.0;
        }
    }
    p
}

pub fn eye(n: usize) -> Mat {
    Mat::identity(n, n)
}

pub fn sym(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

pub fn block_diag(blocks: &[&Mat]) -> Mat {
    let r: usize = blocks.iter().map(|b| b.nrows()).sum();
    let c: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Mat::zeros(r, c);
    let (mut i, mut j) = (0, 0);
    for b in blocks {
        out.view_mut((i, j), b.shape()).copy_from(b);
        i += b.nrows();
        j += b.ncols();
    }
    out
}

pub fn hstack(blocks: &[&Mat]) -> Mat {
    let r = blocks[0].nrows();
    let c: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Mat::zeros(r, c);
    let mut j = 0;
    for b in blocks {
        assert_eq!(b.nrows(), r, "hstack row mismatch");
        out.view_mut((0, j), b.shape()).copy_from(b);
        j += b.ncols();
    }
    out
}

pub fn vstack(blocks: &[&Mat]) -> Mat {
    let c = blocks[0].ncols();
    let r: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = Mat::zeros(r, c);
    let mut i = 0;
    for b in blocks {
        assert_eq!(b.ncols(), c, "vstack column mismatch");
        out.view_mut((i, 0), b.shape()).copy_from(b);
        i += b.nrows();
    }
    out
}

/// Moore–Penrose pseudoinverse with singular values below `rtol * s_max` treated as zero.
pub fn pinv(m: &Mat, rtol: f64) -> Mat {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = rtol * smax.max(f64::MIN_POSITIVE);
    let u = svd.u.as_ref().unwrap();
    let vt = svd.v_t.as_ref().unwrap();
    let mut out = Mat::zeros(m.ncols(), m.nrows());
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > tol {
            out += vt.row(k).transpose() * u.column(k).transpose() / s;
        }
    }
    out
}

pub fn rank(m: &Mat, rtol: f64) -> usize {
    let s = m.singular_values();
    let smax = s.max();
    if smax == 0.0 {
        return 0;
    }
    s.iter().filter(|&&v| v > rtol * smax).count()
}

/// Symmetric eigendecomposition with eigenvalues sorted ascending.
pub fn sym_eig(m: &Mat) -> (Vector, Mat) {
    let e = SymmetricEigen::new(sym(m));
    let n = e.eigenvalues.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| e.eigenvalues[a].total_cmp(&e.eigenvalues[b]));
    let vals = Vector::from_iterator(n, idx.iter().map(|&i| e.eigenvalues[i]));
    let mut vecs = Mat::zeros(n, n);
    for (k, &i) in idx.iter().enumerate() {
        vecs.set_column(k, &e.eigenvectors.column(i));
    }
    (vals, vecs)
}

pub fn min_eig(m: &Mat) -> f64 {
    if m.is_empty() {
        return f64::INFINITY;
    }
    SymmetricEigen::new(sym(m)).eigenvalues.min()
}

pub fn max_eig(m: &Mat) -> f64 {
    if m.is_empty() {
        return f64::NEG_INFINITY;
    }
    SymmetricEigen::new(sym(m)).eigenvalues.max()
}

fn spectral_map(m: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    let (vals, vecs) = sym_eig(m);
    let d = Mat::from_diagonal(&vals.map(f));
    sym(&(&vecs * d * vecs.transpose()))
}

/// Symmetric square root of a PSD matrix (negative eigenvalues are truncated).
pub fn psd_sqrt(m: &Mat) -> Mat {
    spectral_map(m, |v| v.max(0.0).sqrt())
}

/// `M^{-1/2}` for SPD `M`.
pub fn spd_inv_sqrt(m: &Mat) -> Mat {
    spectral_map(m, |v| 1.0 / v.sqrt())
}

/// Projects the eigenvalues of a symmetric matrix onto `[lo, hi]`.
pub fn clip_eigs(m: &Mat, lo: f64, hi: f64) -> Mat {
    spectral_map(m, |v| v.clamp(lo, hi))
}

pub fn cholesky(m: &Mat) -> Option<Mat> {
    nalgebra::Cholesky::new(sym(m)).map(|c| c.l())
}

pub fn logdet_spd(m: &Mat) -> Option<f64> {
    let c = nalgebra::Cholesky::new(sym(m))?;
    Some(2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

pub fn inv_spd(m: &Mat) -> Option<Mat> {
    let c = nalgebra::Cholesky::new(sym(m))?;
    Some(sym(&c.inverse()))
}

pub fn spectral_radius(m: &Mat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn sigma_max(m: &Mat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// Lower-triangular entries, column by column.
pub fn vech(m: &Mat) -> Vector {
    let n = m.nrows();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for j in 0..n {
        for i in j..n {
            out.push(m[(i, j)]);
        }
    }
    Vector::from_vec(out)
}

/// Lower-triangular matrix from [`vech`] entries.
pub fn unvech_lower(v: &[f64], n: usize) -> Mat {
    assert_eq!(v.len(), n * (n + 1) / 2, "unvech length mismatch");
    let mut m = Mat::zeros(n, n);
    let mut k = 0;
    for j in 0..n {
        for i in j..n {
            m[(i, j)] = v[k];
            k += 1;
        }
    }
    m
}

/// Symmetric matrix from [`vech`] entries.
pub fn unvech_sym(v: &[f64], n: usize) -> Mat {
    let l = unvech_lower(v, n);
    let d = Mat::from_diagonal(&l.diagonal());
    &l + l.transpose() - d
}

/// Solves `X = A X A^T + Q` by squaring (Smith iteration). Requires `ρ(A) < 1`.
pub fn dlyap(a: &Mat, q: &Mat) -> Option<Mat> {
    if spectral_radius(a) >= 1.0 {
        return None;
    }
    let mut x = q.clone();
    let mut ak = a.clone();
    for _ in 0..64 {
        let step = &ak * &x * ak.transpose();
        x += &step;
        ak = &ak * &ak;
        if step.norm() <= 1e-17 * x.norm().max(f64::MIN_POSITIVE) || ak.norm() < 1e-30 {
            return Some(sym(&x));
        }
    }
    None
}

/// Stabilizing solution of `X = A'XA - A'XB (R + B'XB)^{-1} B'XA + Q` by the structured
/// doubling algorithm.
pub fn dare(a: &Mat, b: &Mat, q: &Mat, r: &Mat) -> Option<Mat> {
    let n = a.nrows();
    let rinv = inv_spd(r)?;
    let mut ak = a.clone();
    let mut gk = b * rinv * b.transpose();
    let mut hk = sym(q);
    let id = eye(n);
    for _ in 0..200 {
        let w = (&id + &gk * &hk).lu();
        let w_ak = w.solve(&ak)?;
        let w_gk = w.solve(&gk)?;
        let a_next = &ak * &w_ak;
        let g_next = sym(&(&gk + &ak * w_gk * ak.transpose()));
        let h_next = sym(&(&hk + ak.transpose() * &hk * &w_ak));
        let change = (&h_next - &hk).norm();
        ak = a_next;
        gk = g_next;
        hk = h_next;
        if !hk.iter().all(|v| v.is_finite()) {
            return None;
        }
        if change <= 1e-14 * hk.norm().max(1e-300) {
            return Some(hk);
        }
    }
    None
}

/// Gain `K` with `u = K x` for the DARE solution `X` (note the sign: `K = -(R+B'XB)^{-1}B'XA`).
pub fn lqr_gain(a: &Mat, b: &Mat, x: &Mat, r: &Mat) -> Option<Mat> {
    let s = r + b.transpose() * x * b;
    let k = sym(&s).cholesky()?.solve(&(b.transpose() * x * a));
    Some(-k)
}
