use nalgebra::DMatrix;

/// Affine scalar expression `sum_k c_k x_{i_k} + constant`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LinExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        Self { terms: Vec::new(), constant: c }
    }

    pub fn var(i: usize) -> Self {
        Self { terms: vec![(i, 1.0)], constant: 0.0 }
    }

    pub fn is_constant(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn scale(&self, a: f64) -> Self {
        if a == 0.0 {
            return Self::zero();
        }
        Self {
            terms: self.terms.iter().map(|&(i, c)| (i, a * c)).collect(),
            constant: a * self.constant,
        }
    }

    pub fn add(&self, other: &LinExpr) -> Self {
        lin_comb([(1.0, self), (1.0, other)])
    }

    pub fn sub(&self, other: &LinExpr) -> Self {
        lin_comb([(1.0, self), (-1.0, other)])
    }

    pub fn plus_const(mut self, c: f64) -> Self {
        self.constant += c;
        self
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(i, c)| c * x[i]).sum::<f64>() + self.constant
    }

    /// Sort terms by variable index and merge duplicates.
    pub fn compress(&mut self) {
        if self.terms.len() < 2 {
            return;
        }
        self.terms.sort_unstable_by_key(|t| t.0);
        let mut out: Vec<(usize, f64)> = Vec::with_capacity(self.terms.len());
        for &(i, c) in &self.terms {
            match out.last_mut() {
                Some(last) if last.0 == i => last.1 += c,
                _ => out.push((i, c)),
            }
        }
        self.terms = out;
    }
}

/// `sum_k a_k e_k` with merged terms.
pub fn lin_comb<'a, I>(items: I) -> LinExpr
where
    I: IntoIterator<Item = (f64, &'a LinExpr)>,
{
    let mut out = LinExpr::zero();
    for (a, e) in items {
        if a == 0.0 {
            continue;
        }
        out.constant += a * e.constant;
        out.terms.extend(e.terms.iter().map(|&(i, c)| (i, a * c)));
    }
    out.compress();
    out
}

/// Matrix whose entries are affine expressions, stored column-major.
#[derive(Clone, Debug)]
pub struct AffMat {
    rows: usize,
    cols: usize,
    data: Vec<LinExpr>,
}

impl AffMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![LinExpr::zero(); rows * cols] }
    }

    pub fn from_const(m: &DMatrix<f64>) -> Self {
        let (rows, cols) = m.shape();
        let data = m.iter().map(|&v| LinExpr::constant(v)).collect();
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_const(&DMatrix::identity(n, n))
    }

    /// `e * I_n` for a scalar expression `e`.
    pub fn scaled_identity(n: usize, e: &LinExpr) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { e.clone() } else { LinExpr::zero() })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> LinExpr) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for j in 0..cols {
            for i in 0..rows {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, i: usize, j: usize) -> &LinExpr {
        &self.data[j * self.rows + i]
    }

    pub fn set(&mut self, i: usize, j: usize, e: LinExpr) {
        self.data[j * self.rows + i] = e;
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i).clone())
    }

    pub fn scale(&self, a: f64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|e| e.scale(a)).collect() }
    }

    pub fn add(&self, other: &AffMat) -> Self {
        assert_eq!(self.shape(), other.shape(), "AffMat::add shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a.add(b)).collect();
        Self { rows: self.rows, cols: self.cols, data }
    }

    pub fn sub(&self, other: &AffMat) -> Self {
        assert_eq!(self.shape(), other.shape(), "AffMat::sub shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a.sub(b)).collect();
        Self { rows: self.rows, cols: self.cols, data }
    }

    pub fn add_const(&self, m: &DMatrix<f64>) -> Self {
        assert_eq!(self.shape(), m.shape(), "AffMat::add_const shape mismatch");
        let mut out = self.clone();
        for (e, &v) in out.data.iter_mut().zip(m.iter()) {
            e.constant += v;
        }
        out
    }

    /// `C * self` for a constant matrix `C`.
    pub fn left_mul(&self, c: &DMatrix<f64>) -> Self {
        assert_eq!(c.ncols(), self.rows, "AffMat::left_mul shape mismatch");
        Self::from_fn(c.nrows(), self.cols, |i, j| {
            lin_comb((0..self.rows).map(|k| (c[(i, k)], self.get(k, j))))
        })
    }

    /// `self * C` for a constant matrix `C`.
    pub fn right_mul(&self, c: &DMatrix<f64>) -> Self {
        assert_eq!(c.nrows(), self.cols, "AffMat::right_mul shape mismatch");
        Self::from_fn(self.rows, c.ncols(), |i, j| {
            lin_comb((0..self.cols).map(|k| (c[(k, j)], self.get(i, k))))
        })
    }

    /// `C * self * C^T`.
    pub fn congruence(&self, c: &DMatrix<f64>) -> Self {
        self.left_mul(c).right_mul(&c.transpose())
    }

    /// `self ⊗ I_m`.
    pub fn kron_identity(&self, m: usize) -> Self {
        Self::from_fn(self.rows * m, self.cols * m, |i, j| {
            if i % m == j % m {
                self.get(i / m, j / m).clone()
            } else {
                LinExpr::zero()
            }
        })
    }

    /// Assemble a block matrix; every row of blocks must agree in heights and every column in widths.
    pub fn block(blocks: &[Vec<AffMat>]) -> Self {
        let heights: Vec<usize> = blocks.iter().map(|r| r[0].rows).collect();
        let widths: Vec<usize> = blocks[0].iter().map(|b| b.cols).collect();
        for (bi, row) in blocks.iter().enumerate() {
            assert_eq!(row.len(), widths.len(), "ragged block row {bi}");
            for (bj, b) in row.iter().enumerate() {
                assert_eq!(b.shape(), (heights[bi], widths[bj]), "block ({bi},{bj}) has wrong shape");
            }
        }
        let rows: usize = heights.iter().sum();
        let cols: usize = widths.iter().sum();
        let mut out = Self::zeros(rows, cols);
        let mut r0 = 0;
        for (bi, row) in blocks.iter().enumerate() {
            let mut c0 = 0;
            for (bj, b) in row.iter().enumerate() {
                for j in 0..widths[bj] {
                    for i in 0..heights[bi] {
                        out.set(r0 + i, c0 + j, b.get(i, j).clone());
                    }
                }
                c0 += widths[bj];
            }
            r0 += heights[bi];
        }
        out
    }

    /// Symmetric completion from the upper triangle; used for blocks that are symmetric by construction.
    pub fn symmetrize(&self) -> Self {
        assert_eq!(self.rows, self.cols);
        Self::from_fn(self.rows, self.cols, |i, j| {
            if i == j {
                self.get(i, i).clone()
            } else {
                lin_comb([(0.5, self.get(i, j)), (0.5, self.get(j, i))])
            }
        })
    }

    pub fn trace(&self) -> LinExpr {
        assert_eq!(self.rows, self.cols);
        lin_comb((0..self.rows).map(|i| (1.0, self.get(i, i))))
    }

    pub fn column(&self, j: usize) -> Vec<LinExpr> {
        (0..self.rows).map(|i| self.get(i, j).clone()).collect()
    }

    pub fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, self.cols, |i, j| self.get(i, j).eval(x))
    }
}

/// `sum_k c_k e_k` for constant vector `c`.
pub fn dot_const(c: &[f64], e: &[LinExpr]) -> LinExpr {
    assert_eq!(c.len(), e.len());
    lin_comb(c.iter().copied().zip(e.iter()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn products_match_dense_arithmetic() {
        // X = [[x0, x1],[x1, x2]] evaluated at a point
        let x = AffMat::from_fn(2, 2, |i, j| LinExpr::var(i + j));
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -1.0, 0.5, 3.0, 0.0]);
        let pt = [0.3, -1.2, 2.0];
        let xv = x.eval(&pt);
        let got = x.congruence(&a).eval(&pt);
        let want = &a * &xv * a.transpose();
        assert!((got - want).abs().max() < 1e-14);
    }

    #[test]
    fn kron_identity_layout() {
        let l = AffMat::from_fn(2, 2, |i, j| LinExpr::constant((1 + i + 2 * j) as f64));
        let k = l.kron_identity(3).eval(&[]);
        let want = l.eval(&[]).kronecker(&DMatrix::<f64>::identity(3, 3));
        assert_eq!(k, want);
    }

    #[test]
    fn lin_comb_merges_duplicates() {
        let e = lin_comb([(1.0, &LinExpr::var(2)), (2.0, &LinExpr::var(2)), (1.0, &LinExpr::var(0))]);
        assert_eq!(e.terms, vec![(0, 1.0), (2, 3.0)]);
    }
}
