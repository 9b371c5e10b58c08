//! Compressed sparse row matrices and bandwidth-reducing orderings.

use std::collections::VecDeque;

use faer::Mat;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a matrix from per-row `(column, value)` lists. Columns inside a
    /// row must be strictly increasing.
    pub fn from_rows(ncols: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let nrows = rows.len();
        let mut row_ptr = Vec::with_capacity(nrows + 1);
        let nnz = rows.iter().map(Vec::len).sum();
        let mut col_idx = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        row_ptr.push(0);
        for row in rows {
            debug_assert!(row.windows(2).all(|w| w[0].0 < w[1].0));
            for (c, v) in row {
                debug_assert!(c < ncols);
                col_idx.push(c);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        Self { nrows, ncols, row_ptr, col_idx, values }
    }

    /// Builds from raw CSR arrays.
    pub fn from_parts(
        nrows: usize,
        ncols: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        values: Vec<f64>,
    ) -> Self {
        assert_eq!(row_ptr.len(), nrows + 1);
        assert_eq!(col_idx.len(), values.len());
        Self { nrows, ncols, row_ptr, col_idx, values }
    }

    /// Builds from unsorted triplets; duplicates are summed.
    pub fn from_triplets(nrows: usize, ncols: usize, mut trip: Vec<(usize, usize, f64)>) -> Self {
        trip.sort_by_key(|t| (t.0, t.1));
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); nrows];
        for (r, c, v) in trip {
            let row = &mut rows[r];
            match row.last_mut() {
                Some(last) if last.0 == c => last.1 += v,
                _ => row.push((c, v)),
            }
        }
        Self::from_rows(ncols, rows)
    }

    pub fn identity(n: usize) -> Self {
        Self::from_parts(n, n, (0..=n).collect(), (0..n).collect(), vec![1.0; n])
    }

    #[inline]
    pub fn nrows(&self) -> usize {
        self.nrows
    }

    #[inline]
    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column indices and values of row `i`.
    #[inline]
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[r.clone()], &self.values[r])
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        cols.binary_search(&j).map(|k| vals[k]).unwrap_or(0.0)
    }

    /// `y = A x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        (0..self.nrows)
            .map(|i| {
                let (c, v) = self.row(i);
                c.iter().zip(v).map(|(&j, &a)| a * x[j]).sum()
            })
            .collect()
    }

    /// `y = A^T x`.
    pub fn mul_transpose_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nrows);
        let mut y = vec![0.0; self.ncols];
        for (i, &xi) in x.iter().enumerate() {
            let (c, v) = self.row(i);
            for (&j, &a) in c.iter().zip(v) {
                y[j] += a * xi;
            }
        }
        y
    }

    /// Submatrix formed by the rows listed in `rows` (strictly increasing).
    pub fn restrict_rows(&self, rows: &[usize]) -> Result<Self> {
        if let Some(w) = rows.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParameter(format!(
                "row indices must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.nrows) {
            return Err(Error::IndexOutOfRange { index: bad, len: self.nrows });
        }
        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for &r in rows {
            let (c, v) = self.row(r);
            col_idx.extend_from_slice(c);
            values.extend_from_slice(v);
            row_ptr.push(col_idx.len());
        }
        Ok(Self::from_parts(rows.len(), self.ncols, row_ptr, col_idx, values))
    }

    /// Keeps the listed columns (strictly increasing), renumbered in order.
    pub fn restrict_cols(&self, cols: &[usize]) -> Self {
        let mut map = vec![usize::MAX; self.ncols];
        for (k, &c) in cols.iter().enumerate() {
            map[c] = k;
        }
        let rows = (0..self.nrows)
            .map(|i| {
                let (c, v) = self.row(i);
                c.iter()
                    .zip(v)
                    .filter(|(&j, _)| map[j] != usize::MAX)
                    .map(|(&j, &a)| (map[j], a))
                    .collect()
            })
            .collect();
        Self::from_rows(cols.len(), rows)
    }

    /// Scales row `i` by `d[i]`.
    pub fn scale_rows(&self, d: &[f64]) -> Self {
        let mut out = self.clone();
        for i in 0..self.nrows {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                out.values[k] *= d[i];
            }
        }
        out
    }

    /// Shifts all column indices by `offset` inside a wider matrix of
    /// `ncols` columns.
    pub fn embed_columns(&self, offset: usize, ncols: usize) -> Self {
        assert!(offset + self.ncols <= ncols);
        Self::from_parts(
            self.nrows,
            ncols,
            self.row_ptr.clone(),
            self.col_idx.iter().map(|c| c + offset).collect(),
            self.values.clone(),
        )
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(blocks: &[&CsrMatrix]) -> Self {
        let ncols = blocks.first().map(|b| b.ncols).unwrap_or(0);
        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for b in blocks {
            assert_eq!(b.ncols, ncols);
            for i in 0..b.nrows {
                let (c, v) = b.row(i);
                col_idx.extend_from_slice(c);
                values.extend_from_slice(v);
                row_ptr.push(col_idx.len());
            }
        }
        Self::from_parts(row_ptr.len() - 1, ncols, row_ptr, col_idx, values)
    }

    /// Entrywise sum of matrices with identical shape.
    pub fn sum(terms: &[CsrMatrix]) -> Self {
        let (nrows, ncols) = (terms[0].nrows, terms[0].ncols);
        let rows = (0..nrows)
            .map(|i| {
                let mut row: Vec<(usize, f64)> = terms
                    .iter()
                    .flat_map(|t| {
                        let (c, v) = t.row(i);
                        c.iter().copied().zip(v.iter().copied())
                    })
                    .collect();
                row.sort_by_key(|e| e.0);
                let mut merged: Vec<(usize, f64)> = Vec::with_capacity(row.len());
                for (c, v) in row {
                    match merged.last_mut() {
                        Some(last) if last.0 == c => last.1 += v,
                        _ => merged.push((c, v)),
                    }
                }
                merged
            })
            .collect();
        Self::from_rows(ncols, rows)
    }

    pub fn to_dense(&self) -> Mat<f64> {
        let mut m = Mat::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            let (c, v) = self.row(i);
            for (&j, &a) in c.iter().zip(v) {
                m[(i, j)] += a;
            }
        }
        m
    }

    /// Transposed copy.
    pub fn transpose(&self) -> Self {
        let mut trip = Vec::with_capacity(self.nnz());
        for i in 0..self.nrows {
            let (c, v) = self.row(i);
            for (&j, &a) in c.iter().zip(v) {
                trip.push((j, i, a));
            }
        }
        Self::from_triplets(self.ncols, self.nrows, trip)
    }

    /// Symmetric permutation `P A P^T` with `perm[new] = old`.
    pub fn permute_symmetric(&self, perm: &[usize]) -> Self {
        assert_eq!(self.nrows, self.ncols);
        let mut inv = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let rows = perm
            .iter()
            .map(|&old| {
                let (c, v) = self.row(old);
                let mut r: Vec<(usize, f64)> = c.iter().zip(v).map(|(&j, &a)| (inv[j], a)).collect();
                r.sort_by_key(|e| e.0);
                r
            })
            .collect();
        Self::from_rows(self.ncols, rows)
    }

    /// Largest `|i - j|` over stored entries.
    pub fn bandwidth(&self) -> usize {
        (0..self.nrows)
            .flat_map(|i| self.row(i).0.iter().map(move |&j| i.abs_diff(j)))
            .max()
            .unwrap_or(0)
    }
}

/// Reverse Cuthill-McKee ordering of the symmetrised pattern of a square
/// matrix. Returns `perm` with `perm[new] = old`.
pub fn reverse_cuthill_mckee(a: &CsrMatrix) -> Vec<usize> {
    assert_eq!(a.nrows(), a.ncols());
    let n = a.nrows();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for &j in a.row(i).0 {
            if i != j {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
    }
    for list in &mut adj {
        list.sort_unstable();
        list.dedup();
    }
    let degree: Vec<usize> = adj.iter().map(Vec::len).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut queue = VecDeque::new();
    while order.len() < n {
        // each component starts from an unvisited vertex of minimum degree
        let start = (0..n).filter(|&v| !visited[v]).min_by_key(|&v| (degree[v], v)).unwrap();
        let start = pseudo_peripheral(&adj, &degree, start);
        visited[start] = true;
        queue.push_back(start);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut next: Vec<usize> = adj[v].iter().copied().filter(|&u| !visited[u]).collect();
            next.sort_by_key(|&u| (degree[u], u));
            for u in next {
                visited[u] = true;
                queue.push_back(u);
            }
        }
    }
    order.reverse();
    order
}

/// Walks to the far end of repeated breadth-first level structures.
fn pseudo_peripheral(adj: &[Vec<usize>], degree: &[usize], start: usize) -> usize {
    let mut root = start;
    let mut depth = 0;
    for _ in 0..8 {
        let levels = bfs_levels(adj, root);
        let max_level = *levels.iter().filter_map(|l| l.as_ref()).max().unwrap_or(&0);
        if max_level <= depth && depth > 0 {
            break;
        }
        depth = max_level;
        let candidate = levels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == Some(max_level))
            .min_by_key(|(v, _)| (degree[*v], *v))
            .map(|(v, _)| v)
            .unwrap();
        if candidate == root {
            break;
        }
        root = candidate;
    }
    root
}

fn bfs_levels(adj: &[Vec<usize>], root: usize) -> Vec<Option<usize>> {
    let mut level = vec![None; adj.len()];
    level[root] = Some(0);
    let mut queue = VecDeque::from([root]);
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
