//! Sparse matrices for FEM assembly and a symmetric direct solver.
//!
//! Assembly goes through [`TripletBuilder`], which is compressed into a
//! [`CsrMatrix`]. Duplicate entries are summed in insertion order, so the
//! result is bit-identical across runs for a fixed assembly order.
//!
//! [`SkylineLdlt`] factors a symmetric matrix as `P A Pᵀ = L D Lᵀ` with a
//! reverse Cuthill-McKee ordering `P` and a variable-band (skyline) profile.
//! There is no pivoting: it handles SPD and nonsingular indefinite systems
//! that admit the factorization, and reports a zero pivot otherwise.

use std::collections::VecDeque;

use nalgebra::DVector;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct TripletBuilder {
    nrows: usize,
    ncols: usize,
    rows: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl TripletBuilder {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            ..Default::default()
        }
    }

    pub fn with_capacity(nrows: usize, ncols: usize, cap: usize) -> Self {
        Self {
            nrows,
            ncols,
            rows: Vec::with_capacity(cap),
            cols: Vec::with_capacity(cap),
            vals: Vec::with_capacity(cap),
        }
    }

    #[inline]
    pub fn push(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.nrows && c < self.ncols);
        self.rows.push(r);
        self.cols.push(c);
        self.vals.push(v);
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn build(self) -> CsrMatrix {
        // bucket by row, then stable-sort each row by column: duplicates keep
        // insertion order, so their sum is reproducible
        let mut start = vec![0usize; self.nrows + 1];
        for &r in &self.rows {
            start[r + 1] += 1;
        }
        for r in 0..self.nrows {
            start[r + 1] += start[r];
        }
        let mut next = start.clone();
        let mut order = vec![0usize; self.vals.len()];
        for (k, &r) in self.rows.iter().enumerate() {
            order[next[r]] = k;
            next[r] += 1;
        }

        let mut indptr = vec![0usize; self.nrows + 1];
        let mut indices = Vec::with_capacity(order.len());
        let mut values: Vec<f64> = Vec::with_capacity(order.len());
        for r in 0..self.nrows {
            let row = &mut order[start[r]..start[r + 1]];
            row.sort_by_key(|&k| self.cols[k]);
            let mut last = None;
            for &k in row.iter() {
                let c = self.cols[k];
                if last == Some(c) {
                    *values.last_mut().unwrap() += self.vals[k];
                } else {
                    indices.push(c);
                    values.push(self.vals[k]);
                    last = Some(c);
                }
            }
            indptr[r + 1] = indices.len();
        }
        CsrMatrix {
            nrows: self.nrows,
            ncols: self.ncols,
            indptr,
            indices,
            values,
        }
    }
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            indptr: vec![0; nrows + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column indices and values of row `r`.
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let span = self.indptr[r]..self.indptr[r + 1];
        (&self.indices[span.clone()], &self.values[span])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        match cols.binary_search(&c) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows).flat_map(move |r| {
            let (cols, vals) = self.row(r);
            cols.iter().zip(vals).map(move |(&c, &v)| (r, c, v))
        })
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.ncols);
        DVector::from_iterator(
            self.nrows,
            (0..self.nrows).map(|r| {
                let (cols, vals) = self.row(r);
                cols.iter().zip(vals).map(|(&c, &v)| v * x[c]).sum::<f64>()
            }),
        )
    }

    /// `selfᵀ · y`
    pub fn tr_mul_vec(&self, y: &DVector<f64>) -> DVector<f64> {
        assert_eq!(y.len(), self.nrows);
        let mut out = DVector::zeros(self.ncols);
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                out[c] += v * y[r];
            }
        }
        out
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut t = TripletBuilder::with_capacity(self.ncols, self.nrows, self.nnz());
        for (r, c, v) in self.triplets() {
            t.push(c, r, v);
        }
        t.build()
    }

    pub fn diagonal(&self) -> DVector<f64> {
        DVector::from_iterator(self.nrows.min(self.ncols), (0..self.nrows.min(self.ncols)).map(|i| self.get(i, i)))
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Restrict to the given row and column index sets (both in ascending order).
    pub fn submatrix(&self, rows: &[usize], cols: &[usize]) -> CsrMatrix {
        let mut col_map = vec![usize::MAX; self.ncols];
        for (k, &c) in cols.iter().enumerate() {
            col_map[c] = k;
        }
        let mut t = TripletBuilder::new(rows.len(), cols.len());
        for (kr, &r) in rows.iter().enumerate() {
            let (cs, vs) = self.row(r);
            for (&c, &v) in cs.iter().zip(vs) {
                if col_map[c] != usize::MAX {
                    t.push(kr, col_map[c], v);
                }
            }
        }
        t.build()
    }

    /// Adds `shift` to every diagonal entry (inserting missing ones).
    pub fn add_diagonal(&self, shift: &DVector<f64>) -> CsrMatrix {
        let mut t = TripletBuilder::with_capacity(self.nrows, self.ncols, self.nnz() + self.nrows);
        for (r, c, v) in self.triplets() {
            t.push(r, c, v);
        }
        for i in 0..shift.len() {
            if shift[i] != 0.0 {
                t.push(i, i, shift[i]);
            }
        }
        t.build()
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.values {
            *v *= s;
        }
    }

    /// Entrywise sum of two matrices of the same shape.
    pub fn add(&self, other: &CsrMatrix) -> CsrMatrix {
        assert_eq!((self.nrows, self.ncols), (other.nrows, other.ncols), "shape mismatch");
        let mut t = TripletBuilder::with_capacity(self.nrows, self.ncols, self.nnz() + other.nnz());
        for (r, c, v) in self.triplets().chain(other.triplets()) {
            t.push(r, c, v);
        }
        t.build()
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.nrows, self.ncols);
        for (r, c, v) in self.triplets() {
            m[(r, c)] += v;
        }
        m
    }

    /// Largest absolute entry of `self - selfᵀ`.
    pub fn asymmetry(&self) -> f64 {
        self.triplets()
            .map(|(r, c, v)| (v - self.get(c, r)).abs())
            .fold(0.0, f64::max)
    }
}

/// Reverse Cuthill-McKee ordering of the symmetric sparsity pattern.
/// Returns `perm` with `perm[new] = old`.
pub fn reverse_cuthill_mckee(a: &CsrMatrix) -> Vec<usize> {
    let n = a.nrows();
    let adj: Vec<Vec<usize>> = (0..n)
        .map(|r| a.row(r).0.iter().copied().filter(|&c| c != r).collect())
        .collect();
    let degree: Vec<usize> = adj.iter().map(Vec::len).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);

    let mut seeds: Vec<usize> = (0..n).collect();
    seeds.sort_by_key(|&i| (degree[i], i));
    for &seed in &seeds {
        if visited[seed] {
            continue;
        }
        let start = pseudo_peripheral(seed, &adj, &degree);
        visited[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut nbrs: Vec<usize> = adj[v].iter().copied().filter(|&u| !visited[u]).collect();
            nbrs.sort_by_key(|&u| (degree[u], u));
            for u in nbrs {
                visited[u] = true;
                queue.push_back(u);
            }
        }
    }
    order.reverse();
    order
}

fn pseudo_peripheral(seed: usize, adj: &[Vec<usize>], degree: &[usize]) -> usize {
    let mut current = seed;
    let mut ecc = 0;
    for _ in 0..8 {
        let levels = bfs_levels(current, adj);
        let depth = *levels.iter().filter_map(|l| l.as_ref()).max().unwrap_or(&0);
        if depth <= ecc && ecc > 0 {
            break;
        }
        ecc = depth;
        let far = (0..adj.len())
            .filter(|&i| levels[i] == Some(depth))
            .min_by_key(|&i| (degree[i], i))
            .unwrap_or(current);
        if far == current {
            break;
        }
        current = far;
    }
    current
}

fn bfs_levels(start: usize, adj: &[Vec<usize>]) -> Vec<Option<usize>> {
    let mut level = vec![None; adj.len()];
    level[start] = Some(0);
    let mut queue = VecDeque::from([start]);
    while let Some(v) = queue.pop_front() {
        let l = level[v].unwrap();
        for &u in &adj[v] {
            if level[u].is_none() {
                level[u] = Some(l + 1);
                queue.push_back(u);
            }
        }
    }
    level
}

/// Skyline `L D Lᵀ` factorization of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SkylineLdlt {
    n: usize,
    /// `perm[new] = old`
    perm: Vec<usize>,
    /// first column of each (permuted) row profile
    first: Vec<usize>,
    /// start offsets of each row in `lower`
    offset: Vec<usize>,
    /// strictly-lower entries of L, row-wise from `first[i]` to `i - 1`
    lower: Vec<f64>,
    diag: Vec<f64>,
}

/// Pivots smaller than this fraction of the largest diagonal entry are treated as zero.
const PIVOT_RTOL: f64 = 1e-13;

impl SkylineLdlt {
    pub fn factor(a: &CsrMatrix) -> Result<Self> {
        let n = a.nrows();
        if n != a.ncols() {
            return Err(Error::DimensionMismatch { expected: n, got: a.ncols() });
        }
        let perm = reverse_cuthill_mckee(a);
        let mut inv = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }

        let mut first: Vec<usize> = (0..n).collect();
        for old_r in 0..n {
            let r = inv[old_r];
            for &old_c in a.row(old_r).0 {
                let c = inv[old_c];
                if c < r {
                    first[r] = first[r].min(c);
                } else if r < c {
                    first[c] = first[c].min(r);
                }
            }
        }
        let mut offset = vec![0usize; n + 1];
        for i in 0..n {
            offset[i + 1] = offset[i] + (i - first[i]);
        }
        let mut lower = vec![0.0; offset[n]];
        let mut diag = vec![0.0; n];
        for old_r in 0..n {
            let r = inv[old_r];
            let (cols, vals) = a.row(old_r);
            for (&old_c, &v) in cols.iter().zip(vals) {
                let c = inv[old_c];
                if c < r {
                    lower[offset[r] + c - first[r]] = v;
                } else if c == r {
                    diag[r] = v;
                }
            }
        }

        let scale = diag.iter().fold(0.0f64, |m, d| m.max(d.abs())).max(f64::MIN_POSITIVE);
        // Crout, row by row: on entry lower holds A; on exit L.
        let mut work = vec![0.0; n];
        for i in 0..n {
            let fi = first[i];
            let row_i = offset[i]..offset[i + 1];
            for j in fi..i {
                let fj = first[j];
                let k0 = fi.max(fj);
                let mut s = lower[offset[i] + j - fi];
                for k in k0..j {
                    s -= work[k] * lower[offset[j] + k - fj];
                }
                // work[j] = L_ij * d_j
                work[j] = s;
            }
            let mut d = diag[i];
            for j in fi..i {
                let l = work[j] / diag[j];
                d -= work[j] * l;
                lower[row_i.start + j - fi] = l;
            }
            if !d.is_finite() || d.abs() <= PIVOT_RTOL * scale {
                return Err(Error::LinearSolveFailure(format!(
                    "zero pivot at row {} (pivot {d:e}, scale {scale:e})",
                    perm[i]
                )));
            }
            diag[i] = d;
        }

        Ok(Self {
            n,
            perm,
            first,
            offset,
            lower,
            diag,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Number of negative pivots, i.e. negative eigenvalues of the factored matrix.
    pub fn negative_pivots(&self) -> usize {
        self.diag.iter().filter(|&&d| d < 0.0).count()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        assert_eq!(b.len(), self.n);
        let mut y: Vec<f64> = self.perm.iter().map(|&old| b[old]).collect();
        for i in 0..self.n {
            let fi = self.first[i];
            let row = &self.lower[self.offset[i]..self.offset[i + 1]];
            let s: f64 = row.iter().zip(&y[fi..i]).map(|(l, v)| l * v).sum();
            y[i] -= s;
        }
        for i in 0..self.n {
            y[i] /= self.diag[i];
        }
        for i in (0..self.n).rev() {
            let fi = self.first[i];
            let yi = y[i];
            let row = &self.lower[self.offset[i]..self.offset[i + 1]];
            for (k, l) in row.iter().enumerate() {
                y[fi + k] -= l * yi;
            }
        }
        let mut x = DVector::zeros(self.n);
        for (new, &old) in self.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }
}
