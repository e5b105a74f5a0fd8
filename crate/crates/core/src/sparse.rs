//! Compressed sparse row matrices for graph operators.

/// Square CSR matrix. Column indices within a row are strictly increasing.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            row_ptr: vec![0; n + 1],
            cols: Vec::new(),
            vals: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            n,
            row_ptr: (0..=n).collect(),
            cols: (0..n).collect(),
            vals: vec![1.0; n],
        }
    }

    /// Builds from `(row, col, value)` triplets; duplicates are summed and
    /// explicit zeros dropped.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(r, c, v) in triplets {
            assert!(r < n && c < n, "triplet ({r}, {c}) outside {n}×{n}");
            rows[r].push((c, v));
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|&(c, _)| c);
            let mut i = 0;
            while i < row.len() {
                let c = row[i].0;
                let mut v = 0.0;
                while i < row.len() && row[i].0 == c {
                    v += row[i].1;
                    i += 1;
                }
                if v != 0.0 {
                    cols.push(c);
                    vals.push(v);
                }
            }
            row_ptr.push(cols.len());
        }
        Self {
            n,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// Non-zero `(col, value)` pairs of one row.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.cols[span.clone()].iter().copied().zip(self.vals[span].iter().copied())
    }

    pub fn row_nnz(&self, r: usize) -> usize {
        self.row_ptr[r + 1] - self.row_ptr[r]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        match self.cols[span.clone()].binary_search(&c) {
            Ok(i) => self.vals[span.start + i],
            Err(_) => 0.0,
        }
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        (0..self.n)
            .flat_map(|r| self.row(r).map(move |(c, v)| (r, c, v)))
            .collect()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n * self.n];
        for (r, c, v) in self.triplets() {
            d[r * self.n + c] = v;
        }
        d
    }

    pub fn transpose(&self) -> Self {
        let t: Vec<_> = self.triplets().into_iter().map(|(r, c, v)| (c, r, v)).collect();
        Self::from_triplets(self.n, &t)
    }

    /// Sum of each row.
    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n).map(|r| self.row(r).map(|(_, v)| v).sum()).collect()
    }

    /// `out = self · x` for a dense row-major `[n, c]` matrix `x`.
    pub fn mul_dense(&self, x: &[f64], c: usize, out: &mut [f64]) {
        out.fill(0.0);
        for r in 0..self.n {
            let dst = &mut out[r * c..(r + 1) * c];
            for (col, v) in self.row(r) {
                for (d, s) in dst.iter_mut().zip(&x[col * c..(col + 1) * c]) {
                    *d += v * s;
                }
            }
        }
    }

    /// `out = selfᵀ · x` for a dense row-major `[n, c]` matrix `x`.
    pub fn transpose_mul_dense(&self, x: &[f64], c: usize, out: &mut [f64]) {
        out.fill(0.0);
        for r in 0..self.n {
            let src = &x[r * c..(r + 1) * c];
            for (col, v) in self.row(r) {
                for (d, s) in out[col * c..(col + 1) * c].iter_mut().zip(src) {
                    *d += v * s;
                }
            }
        }
    }

    /// `D_l · self · D_r` for diagonal scalings given as vectors.
    pub fn scale_rows_cols(&self, left: &[f64], right: &[f64]) -> Self {
        let mut out = self.clone();
        for r in 0..self.n {
            for i in self.row_ptr[r]..self.row_ptr[r + 1] {
                out.vals[i] *= left[r] * right[self.cols[i]];
            }
        }
        out
    }

    /// `self + I`.
    pub fn add_identity(&self) -> Self {
        let mut t = self.triplets();
        t.extend((0..self.n).map(|i| (i, i, 1.0)));
        Self::from_triplets(self.n, &t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplets_are_merged_and_sorted() {
        let m = SparseMatrix::from_triplets(3, &[(1, 2, 1.0), (1, 0, 2.0), (1, 2, 0.5), (0, 0, 0.0)]);
        assert_eq!(m.triplets(), vec![(1, 0, 2.0), (1, 2, 1.5)]);
        assert_eq!(m.get(1, 2), 1.5);
        assert_eq!(m.get(0, 0), 0.0);
    }

    #[test]
    fn products_match_dense() {
        let m = SparseMatrix::from_triplets(3, &[(0, 1, 2.0), (2, 0, -1.0), (1, 1, 3.0)]);
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut y = [0.0; 6];
        m.mul_dense(&x, 2, &mut y);
        assert_eq!(y, [6.0, 8.0, 9.0, 12.0, -1.0, -2.0]);
        let mut yt = [0.0; 6];
        m.transpose_mul_dense(&x, 2, &mut yt);
        let mut want = [0.0; 6];
        m.transpose().mul_dense(&x, 2, &mut want);
        assert_eq!(yt, want);
    }
}
