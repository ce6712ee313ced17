//! Similarity graphs: adaptive k-nearest-neighbor construction, symmetric
//! normalization for graph convolutions, lifting view graphs to global index
//! space, and mask-informed fusion into a single graph over all samples.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Symmetric non-negative similarity graph with zero diagonal and entries in
/// `[0, 1]`. Each row has at most `2k` non-zeros after symmetrization.
#[derive(Debug, Clone)]
pub struct NeighborGraph<T> {
    pub weights: Array2<T>,
    pub k: usize,
}

/// Fused graph over all `N` samples; entries in `[0, 1]`, zero diagonal.
#[derive(Debug, Clone)]
pub struct FusedGraph<T> {
    pub weights: Array2<T>,
}

/// Row-wise adaptive neighbor weights, before symmetrization.
///
/// For each row, with squared Euclidean distances to the other rows sorted
/// ascending as `d_(1) <= ... <= d_(m-1)`, the k nearest neighbors get
/// `w = (d_(k+1) - d_(j)) / (k * d_(k+1) - sum_{h<=k} d_(h))` and everything
/// else is zero. Each row sums to 1 and lies in `[0, 1]`; when the
/// denominator degenerates (the k+1 nearest distances are all equal) the k
/// nearest share uniform weight `1/k`.
pub fn adaptive_knn_affinities<T: Scalar>(z: &Array2<T>, k: usize) -> Result<Array2<T>> {
    let m = z.nrows();
    if k < 1 {
        return Err(Error::InvalidParam("neighbor count k must be >= 1".into()));
    }
    if m < k + 2 {
        return Err(Error::InvalidParam(format!(
            "{m} rows are too few for k = {k}; need at least k + 2"
        )));
    }
    if z.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("matrix passed to neighbor graph".into()));
    }

    let d2 = pairwise_sq_dists(z);
    let mut w = Array2::zeros((m, m));
    let mut order: Vec<(T, usize)> = Vec::with_capacity(m - 1);
    for i in 0..m {
        order.clear();
        for j in 0..m {
            if j != i {
                order.push((d2[[i, j]], j));
            }
        }
        // Index tiebreak keeps the selection deterministic under equal distances.
        order.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let dk1 = order[k].0;
        let head_sum: T = order[..k].iter().map(|p| p.0).sum();
        let denom = T::of(k as f64) * dk1 - head_sum;
        if denom > T::zero() {
            for &(d, j) in &order[..k] {
                w[[i, j]] = (dk1 - d) / denom;
            }
        } else {
            let uniform = T::one() / T::of(k as f64);
            for &(_, j) in &order[..k] {
                w[[i, j]] = uniform;
            }
        }
    }
    Ok(w)
}

/// Adaptive neighbor graph: row affinities symmetrized as `(W + W^T) / 2`.
pub fn adaptive_knn_graph<T: Scalar>(z: &Array2<T>, k: usize) -> Result<NeighborGraph<T>> {
    let w = adaptive_knn_affinities(z, k)?;
    let half = T::of(0.5);
    let m = w.nrows();
    let mut sym = Array2::zeros((m, m));
    for i in 0..m {
        for j in 0..m {
            sym[[i, j]] = (w[[i, j]] + w[[j, i]]) * half;
        }
    }
    Ok(NeighborGraph { weights: sym, k })
}

fn pairwise_sq_dists<T: Scalar>(z: &Array2<T>) -> Array2<T> {
    let m = z.nrows();
    let gram = z.dot(&z.t());
    let mut out = Array2::zeros((m, m));
    for i in 0..m {
        for j in 0..m {
            let d = gram[[i, i]] + gram[[j, j]] - (gram[[i, j]] + gram[[i, j]]);
            out[[i, j]] = d.max(T::zero());
        }
    }
    out
}

/// Symmetric GCN normalization: `D^{-1/2} (A + I) D^{-1/2}` with `D` the
/// degree matrix of `A + I`. Degrees are at least 1, so this is total.
pub fn gcn_normalize<T: Scalar>(a: &Array2<T>) -> Array2<T> {
    let m = a.nrows();
    let mut degrees = Array1::<T>::zeros(m);
    for i in 0..m {
        let mut d = T::one(); // self loop
        for j in 0..m {
            d += a[[i, j]];
        }
        degrees[i] = d.sqrt().recip();
    }
    let mut out = Array2::zeros((m, m));
    for i in 0..m {
        for j in 0..m {
            let aij = if i == j {
                a[[i, j]] + T::one()
            } else {
                a[[i, j]]
            };
            out[[i, j]] = degrees[i] * aij * degrees[j];
        }
    }
    out
}

/// Scatter a view graph to global index space: entry `(i, j)` of the input
/// lands at `(observed[i], observed[j])`; rows and columns of missing samples
/// stay zero.
pub fn lift_graph<T: Scalar>(
    g: &NeighborGraph<T>,
    observed: &[usize],
    n: usize,
) -> Result<Array2<T>> {
    let m = g.weights.nrows();
    if m != observed.len() {
        return Err(Error::ShapeMismatch(format!(
            "graph is {m}x{m} but the view has {} observed samples",
            observed.len()
        )));
    }
    let mut out = Array2::zeros((n, n));
    for (i, &gi) in observed.iter().enumerate() {
        for (j, &gj) in observed.iter().enumerate() {
            out[[gi, gj]] = g.weights[[i, j]];
        }
    }
    Ok(out)
}

/// Mask-informed graph fusion. Per entry,
/// `(sum_v m_iv * m_jv * a^v_ij + s_ij) / (sum_v m_iv * m_jv + 1)`;
/// the view-common graph `s` always contributes, so the denominator is at
/// least 1. The diagonal is forced to zero. The per-view pair masks are
/// evaluated implicitly from mask columns and never materialized.
pub fn fuse_graphs<T: Scalar>(
    lifted: &[Array2<T>],
    mask: &Array2<u8>,
    s: &Array2<T>,
) -> Result<FusedGraph<T>> {
    let n = s.nrows();
    check_fusion_shapes(lifted, n, s)?;
    if mask.nrows() != n || mask.ncols() != lifted.len() {
        return Err(Error::ShapeMismatch(format!(
            "mask is {}x{}, expected {n}x{}",
            mask.nrows(),
            mask.ncols(),
            lifted.len()
        )));
    }
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let mut num = T::zero();
            let mut den = T::zero();
            for (v, a) in lifted.iter().enumerate() {
                if mask[[i, v]] == 1 && mask[[j, v]] == 1 {
                    num += a[[i, j]];
                    den += T::one();
                }
            }
            num += s[[i, j]];
            den += T::one();
            out[[i, j]] = num / den;
        }
    }
    Ok(FusedGraph { weights: out })
}

/// Unmasked fusion: plain mean of the lifted view graphs and the common
/// graph, used by the fusion-ablation variant.
pub fn mean_fuse_graphs<T: Scalar>(lifted: &[Array2<T>], s: &Array2<T>) -> Result<FusedGraph<T>> {
    let n = s.nrows();
    check_fusion_shapes(lifted, n, s)?;
    let den = T::of((lifted.len() + 1) as f64);
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let mut num = T::zero();
            for a in lifted {
                num += a[[i, j]];
            }
            num += s[[i, j]];
            out[[i, j]] = num / den;
        }
    }
    Ok(FusedGraph { weights: out })
}

fn check_fusion_shapes<T: Scalar>(lifted: &[Array2<T>], n: usize, s: &Array2<T>) -> Result<()> {
    if s.ncols() != n {
        return Err(Error::ShapeMismatch("common graph is not square".into()));
    }
    for (v, a) in lifted.iter().enumerate() {
        if a.dim() != (n, n) {
            return Err(Error::ShapeMismatch(format!(
                "lifted graph {v} is {}x{}, expected {n}x{n}",
                a.nrows(),
                a.ncols()
            )));
        }
    }
    Ok(())
}

/// Sparse symmetric matrix in row-compressed form. The normalized adjacency
/// has at most `2k + 1` non-zeros per row, so propagation through it is much
/// cheaper sparse than dense.
#[derive(Debug, Clone)]
pub struct CsrSym<T> {
    n: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    data: Vec<T>,
}

impl<T: Scalar> CsrSym<T> {
    pub fn from_dense(a: &Array2<T>) -> Self {
        let n = a.nrows();
        let mut indptr = Vec::with_capacity(n + 1);
        let mut indices = Vec::new();
        let mut data = Vec::new();
        indptr.push(0);
        for i in 0..n {
            for j in 0..n {
                let v = a[[i, j]];
                if v != T::zero() {
                    indices.push(j as u32);
                    data.push(v);
                }
            }
            indptr.push(indices.len());
        }
        CsrSym {
            n,
            indptr,
            indices,
            data,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn to_dense(&self) -> Array2<T> {
        let mut out = Array2::zeros((self.n, self.n));
        for i in 0..self.n {
            for p in self.indptr[i]..self.indptr[i + 1] {
                out[[i, self.indices[p] as usize]] = self.data[p];
            }
        }
        out
    }
}

/// Left-multiplication by a symmetric matrix: `A . X`. Implemented by both
/// dense matrices and [`CsrSym`], so graph layers can run on either.
pub trait Propagate<T: Scalar> {
    fn propagate(&self, x: &Array2<T>) -> Array2<T>;
    fn dim(&self) -> usize;
}

impl<T: Scalar> Propagate<T> for Array2<T> {
    fn propagate(&self, x: &Array2<T>) -> Array2<T> {
        self.dot(x)
    }

    fn dim(&self) -> usize {
        self.nrows()
    }
}

impl<T: Scalar> Propagate<T> for CsrSym<T> {
    fn propagate(&self, x: &Array2<T>) -> Array2<T> {
        let cols = x.ncols();
        let mut out = Array2::zeros((self.n, cols));
        let xs = x.as_slice().expect("row-major input");
        let os = out.as_slice_mut().expect("row-major output");
        for i in 0..self.n {
            let orow = &mut os[i * cols..(i + 1) * cols];
            for p in self.indptr[i]..self.indptr[i + 1] {
                let j = self.indices[p] as usize;
                let w = self.data[p];
                let xrow = &xs[j * cols..(j + 1) * cols];
                for (o, &xv) in orow.iter_mut().zip(xrow) {
                    *o += w * xv;
                }
            }
        }
        out
    }

    fn dim(&self) -> usize {
        self.n
    }
}

/// Dump a graph as `i,j,weight` coordinate rows (non-zeros only).
pub fn write_graph_csv<T: Scalar>(path: &Path, weights: &Array2<T>) -> Result<()> {
    let mut body = String::from("i,j,weight\n");
    for ((i, j), &w) in weights.indexed_iter() {
        if w != T::zero() {
            body.push_str(&format!("{i},{j},{w}\n"));
        }
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}
