//! Undirected graphs with self-loop augmented, symmetrically normalised
//! adjacency `Ã = D^{-1/2} (I + A) D^{-1/2}`.
//!
//! The CSR structure stores `Â = I + A` with ascending column ids per row,
//! so every row contains its own diagonal entry exactly once.

use std::collections::BTreeSet;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

const PAR_ROWS: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n: usize,
    edges: Vec<(u32, u32)>,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    degree: Vec<f64>,
    norm_values: Vec<f64>,
}

impl Graph {
    /// Builds the graph from an edge list that may contain duplicates, both
    /// orientations and self-loops.
    pub fn build(edge_list: &[(usize, usize)], n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyGraph);
        }
        if n > u32::MAX as usize {
            return Err(Error::invalid(format!("{n} nodes exceed the u32 id space")));
        }
        let mut set = BTreeSet::new();
        for &(u, v) in edge_list {
            for id in [u, v] {
                if id >= n {
                    return Err(Error::NodeOutOfRange { id, n });
                }
            }
            if u != v {
                set.insert((u.min(v) as u32, u.max(v) as u32));
            }
        }
        let edges: Vec<(u32, u32)> = set.into_iter().collect();

        let mut neighbours: Vec<Vec<u32>> = (0..n).map(|i| vec![i as u32]).collect();
        for &(u, v) in &edges {
            neighbours[u as usize].push(v);
            neighbours[v as usize].push(u);
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::with_capacity(n + 2 * edges.len());
        row_ptr.push(0);
        for list in &mut neighbours {
            list.sort_unstable();
            col_idx.extend_from_slice(list);
            row_ptr.push(col_idx.len());
        }
        let degree: Vec<f64> = neighbours.iter().map(|l| l.len() as f64).collect();
        let mut norm_values = Vec::with_capacity(col_idx.len());
        for i in 0..n {
            for &j in &col_idx[row_ptr[i]..row_ptr[i + 1]] {
                norm_values.push(1.0 / (degree[i] * degree[j as usize]).sqrt());
            }
        }
        Ok(Self {
            n,
            edges,
            row_ptr,
            col_idx,
            degree,
            norm_values,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// `|E|`: undirected edges counted once, self-loops excluded.
    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    /// `d_i = Σ_j Â_ij`, including the self-loop.
    pub fn degrees(&self) -> &[f64] {
        &self.degree
    }

    /// Column ids and `Ã` values of row `i`.
    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[span.clone()], &self.norm_values[span])
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    fn check_rows(&self, m: &DenseMatrix, op: &'static str) -> Result<()> {
        if m.rows() != self.n {
            return Err(Error::shape(
                op,
                format!("matrix has {} rows, graph has {} nodes", m.rows(), self.n),
            ));
        }
        Ok(())
    }

    /// `Ã · h`
    pub fn spmm(&self, h: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_rows(h, "spmm")?;
        let d = h.cols();
        let mut out = vec![0.0; self.n * d];
        let kernel = |(i, out_row): (usize, &mut [f64])| {
            let (cols, vals) = self.row(i);
            for (&j, &w) in cols.iter().zip(vals) {
                for (o, &x) in out_row.iter_mut().zip(h.row(j as usize)) {
                    *o += w * x;
                }
            }
        };
        if d > 0 {
            if self.n >= PAR_ROWS {
                out.par_chunks_mut(d).enumerate().for_each(kernel);
            } else {
                out.chunks_mut(d).enumerate().for_each(kernel);
            }
        }
        Ok(DenseMatrix::from_raw(self.n, d, out))
    }

    /// `tr(Mᵀ (I − Ã) M)`
    pub fn laplacian_quadratic(&self, m: &DenseMatrix) -> Result<f64> {
        let am = self.spmm(m)?;
        let total: f64 = m.data().iter().zip(am.data()).map(|(&x, &ax)| x * (x - ax)).sum();
        Ok(total)
    }

    /// Dense copy of `Ã`, for small-graph analysis and oracles.
    pub fn normalized_adjacency_dense(&self) -> DenseMatrix {
        let mut a = DenseMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            for (&j, &w) in cols.iter().zip(vals) {
                a.set(i, j as usize, w);
            }
        }
        a
    }

    /// Dense copy of `L̃ = I − Ã`.
    pub fn laplacian_dense(&self) -> DenseMatrix {
        let mut l = self.normalized_adjacency_dense().scale(-1.0);
        for i in 0..self.n {
            l.set(i, i, 1.0 + l.get(i, i));
        }
        l
    }
}
