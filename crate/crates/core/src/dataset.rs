//! Incomplete multi-view data: loading, feature scaling, mask generation and
//! the observed/missing index structures used to gather and scatter view rows.
//!
//! A dataset directory contains `manifest.json` (view names, sample count,
//! optional cluster count), one headerless numeric CSV per view
//! (`view_<name>.csv`), an optional `labels.csv` (one integer per line) and an
//! optional `mask.csv` (rows of 0/1 flags, one column per view). A missing
//! mask file means complete data.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A collection of per-view feature matrices over the same samples, with an
/// observation mask marking which samples exist in which views.
#[derive(Debug, Clone)]
pub struct MultiViewDataset<T> {
    views: Vec<Array2<T>>,
    names: Vec<String>,
    labels: Option<Vec<usize>>,
    mask: Array2<u8>,
    n_clusters: Option<usize>,
}

impl<T: Scalar> MultiViewDataset<T> {
    /// Build a dataset and validate every invariant: equal row counts across
    /// views, 0/1 mask with no empty rows, finite features. Raw labels are
    /// remapped to a contiguous `0..C-1` range.
    pub fn new(
        views: Vec<Array2<T>>,
        names: Vec<String>,
        labels: Option<Vec<i64>>,
        mask: Option<Array2<u8>>,
        n_clusters: Option<usize>,
    ) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::InvalidParam(
                "dataset needs at least one view".into(),
            ));
        }
        if names.len() != views.len() {
            return Err(Error::InvalidParam(format!(
                "{} view names for {} views",
                names.len(),
                views.len()
            )));
        }
        let n = views[0].nrows();
        for (name, view) in names.iter().zip(&views) {
            if view.nrows() != n {
                return Err(Error::ShapeMismatch(format!(
                    "view '{name}' has {} rows, expected {n}",
                    view.nrows()
                )));
            }
            if view.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("view '{name}' contains NaN/Inf")));
            }
        }
        let mask = match mask {
            Some(m) => {
                validate_mask(&m, n, views.len())?;
                m
            }
            None => Array2::ones((n, views.len())),
        };
        let (labels, label_clusters) = match labels {
            Some(raw) => {
                if raw.len() != n {
                    return Err(Error::ShapeMismatch(format!(
                        "{} labels for {n} samples",
                        raw.len()
                    )));
                }
                let (remapped, c) = remap_labels(&raw);
                if c < 2 {
                    return Err(Error::InvalidParam(
                        "labels must contain at least two distinct values".into(),
                    ));
                }
                (Some(remapped), Some(c))
            }
            None => (None, None),
        };
        Ok(Self {
            views,
            names,
            labels,
            mask,
            // The label-derived count wins over the manifest's.
            n_clusters: label_clusters.or(n_clusters),
        })
    }

    pub fn n_samples(&self) -> usize {
        self.views[0].nrows()
    }

    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    pub fn view(&self, v: usize) -> &Array2<T> {
        &self.views[v]
    }

    pub fn views(&self) -> &[Array2<T>] {
        &self.views
    }

    pub fn view_dims(&self) -> Vec<usize> {
        self.views.iter().map(|x| x.ncols()).collect()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn mask(&self) -> &Array2<u8> {
        &self.mask
    }

    /// Cluster count: derived from labels when present, otherwise the
    /// manifest value.
    pub fn n_clusters(&self) -> Option<usize> {
        self.n_clusters
    }

    /// Replace the observation mask, revalidating it.
    pub fn with_mask(mut self, mask: Array2<u8>) -> Result<Self> {
        validate_mask(&mask, self.n_samples(), self.n_views())?;
        self.mask = mask;
        Ok(self)
    }

    /// Per-view min-max scaling into `[0, 1]`. Column statistics come from
    /// observed rows only; rows missing in a view are zeroed placeholders.
    pub fn scaled(&self) -> Result<Self> {
        let part = ObservedPartition::from_mask(&self.mask);
        let mut scaled = Vec::with_capacity(self.views.len());
        for (v, view) in self.views.iter().enumerate() {
            scaled.push(scale_min_max_observed(view, part.observed(v))?);
        }
        Ok(Self {
            views: scaled,
            names: self.names.clone(),
            labels: self.labels.clone(),
            mask: self.mask.clone(),
            n_clusters: self.n_clusters,
        })
    }
}

fn validate_mask(mask: &Array2<u8>, n: usize, v: usize) -> Result<()> {
    if mask.nrows() != n || mask.ncols() != v {
        return Err(Error::ShapeMismatch(format!(
            "mask is {}x{}, expected {n}x{v}",
            mask.nrows(),
            mask.ncols()
        )));
    }
    for (i, row) in mask.rows().into_iter().enumerate() {
        if row.iter().any(|&m| m > 1) {
            return Err(Error::InvalidMask(format!(
                "row {i} has an entry not in {{0,1}}"
            )));
        }
        if row.iter().all(|&m| m == 0) {
            return Err(Error::InvalidMask(format!(
                "sample {i} is missing in every view"
            )));
        }
    }
    Ok(())
}

fn remap_labels(raw: &[i64]) -> (Vec<usize>, usize) {
    let mut map = BTreeMap::new();
    for &l in raw {
        let next = map.len();
        map.entry(l).or_insert(next);
    }
    (raw.iter().map(|l| map[l]).collect(), map.len())
}

/// Per-view lists of observed and missing global row indices. Gathering rows
/// at `observed` and scattering them back realizes the permutation between a
/// view's compact observed block and the global sample order.
#[derive(Debug, Clone)]
pub struct ObservedPartition {
    observed: Vec<Vec<usize>>,
    missing: Vec<Vec<usize>>,
}

impl ObservedPartition {
    pub fn from_mask(mask: &Array2<u8>) -> Self {
        let (n, v) = mask.dim();
        let mut observed = vec![Vec::new(); v];
        let mut missing = vec![Vec::new(); v];
        for i in 0..n {
            for j in 0..v {
                if mask[[i, j]] == 1 {
                    observed[j].push(i);
                } else {
                    missing[j].push(i);
                }
            }
        }
        Self { observed, missing }
    }

    pub fn n_views(&self) -> usize {
        self.observed.len()
    }

    pub fn observed(&self, v: usize) -> &[usize] {
        &self.observed[v]
    }

    pub fn missing(&self, v: usize) -> &[usize] {
        &self.missing[v]
    }

    pub fn n_observed(&self, v: usize) -> usize {
        self.observed[v].len()
    }
}

/// Collect rows of `x` at `idx`, in order.
pub fn gather_rows<T: Scalar>(x: &Array2<T>, idx: &[usize]) -> Array2<T> {
    let mut out = Array2::zeros((idx.len(), x.ncols()));
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).assign(&x.row(i));
    }
    out
}

/// Place rows of `z` at global indices `idx` in an `n`-row matrix, zeros
/// elsewhere.
pub fn scatter_rows<T: Scalar>(z: &Array2<T>, idx: &[usize], n: usize) -> Array2<T> {
    let mut out = Array2::zeros((n, z.ncols()));
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(i).assign(&z.row(r));
    }
    out
}

/// How missing cells are drawn when converting complete data to incomplete.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskScheme {
    /// Uniform draws over (sample, view) cells without replacement, skipping
    /// any removal that would leave a sample with no observed view.
    #[default]
    UniformRowConstrained,
}

/// Parameters for synthetic missingness injection.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MaskSpec {
    /// Fraction of (sample, view) cells to mask out, in `[0, (V-1)/V)`.
    pub missing_rate: f64,
    pub seed: u64,
    #[serde(default)]
    pub scheme: MaskScheme,
}

/// Draw a binary observation mask with exactly `round(rate * n * v)` zeros,
/// every row keeping at least one observed view. Pure function of
/// `(n, v, rate, seed)`.
pub fn generate_mask(n: usize, v: usize, spec: &MaskSpec) -> Result<Array2<u8>> {
    let rate = spec.missing_rate;
    if !(0.0..1.0).contains(&rate) || !rate.is_finite() {
        return Err(Error::InvalidParam(format!(
            "missing rate {rate} outside [0, 1)"
        )));
    }
    let bound = (v as f64 - 1.0) / v as f64;
    if rate >= bound {
        return Err(Error::InvalidParam(format!(
            "missing rate {rate} >= (V-1)/V = {bound}; some sample would lose every view"
        )));
    }
    let target = (rate * (n * v) as f64).round() as usize;
    let mut mask: Array2<u8> = Array2::ones((n, v));
    if target == 0 {
        return Ok(mask);
    }

    let mut cells: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..v).map(move |j| (i, j))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    cells.shuffle(&mut rng);

    // Walking the full shuffled cell list always reaches n*(v-1) removals,
    // which bounds the feasible target from above.
    let mut observed_per_row = vec![v; n];
    let mut removed = 0;
    for (i, j) in cells {
        if removed == target {
            break;
        }
        if observed_per_row[i] > 1 {
            mask[[i, j]] = 0;
            observed_per_row[i] -= 1;
            removed += 1;
        }
    }
    debug_assert_eq!(removed, target);
    Ok(mask)
}

/// Map each column affinely onto `[0, 1]`; constant columns map to 0.
pub fn scale_min_max<T: Scalar>(x: &Array2<T>) -> Result<Array2<T>> {
    let all: Vec<usize> = (0..x.nrows()).collect();
    scale_min_max_observed(x, &all)
}

/// Min-max scaling with column statistics taken over `observed` rows only.
/// Rows outside `observed` are zeroed: they are placeholders that must not
/// leak into downstream statistics.
pub fn scale_min_max_observed<T: Scalar>(x: &Array2<T>, observed: &[usize]) -> Result<Array2<T>> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix passed to min-max scaling".into()));
    }
    let mut out = Array2::zeros(x.dim());
    if observed.is_empty() {
        return Ok(out);
    }
    for c in 0..x.ncols() {
        let mut lo = T::infinity();
        let mut hi = T::neg_infinity();
        for &i in observed {
            let v = x[[i, c]];
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let span = hi - lo;
        if span > T::zero() {
            for &i in observed {
                out[[i, c]] = (x[[i, c]] - lo) / span;
            }
        }
        // Constant column: observed entries stay 0.
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub views: Vec<String>,
    pub n_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_clusters: Option<usize>,
}

/// Load a dataset directory (see module docs for the layout).
pub fn load_dataset<T: Scalar>(dir: &Path) -> Result<MultiViewDataset<T>> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::parse(manifest_path.display().to_string(), e.to_string()))?;
    if manifest.views.is_empty() {
        return Err(Error::parse(
            manifest_path.display().to_string(),
            "manifest lists no views".to_string(),
        ));
    }

    let mut views = Vec::with_capacity(manifest.views.len());
    for name in &manifest.views {
        let path = dir.join(format!("view_{name}.csv"));
        let m = read_matrix_csv::<T>(&path)?;
        if m.nrows() != manifest.n_samples {
            return Err(Error::ShapeMismatch(format!(
                "view '{name}' has {} rows but manifest says {}",
                m.nrows(),
                manifest.n_samples
            )));
        }
        views.push(m);
    }

    let labels_path = dir.join("labels.csv");
    let labels = if labels_path.exists() {
        Some(read_labels_csv(&labels_path)?)
    } else {
        None
    };

    let mask_path = dir.join("mask.csv");
    let mask = if mask_path.exists() {
        let m = read_matrix_csv::<f64>(&mask_path)?;
        let mut bin = Array2::zeros(m.dim());
        for ((i, j), &val) in m.indexed_iter() {
            bin[[i, j]] = if val == 0.0 {
                0
            } else if val == 1.0 {
                1
            } else {
                return Err(Error::InvalidMask(format!(
                    "mask entry ({i},{j}) is {val}, expected 0 or 1"
                )));
            };
        }
        Some(bin)
    } else {
        None
    };

    MultiViewDataset::new(views, manifest.views, labels, mask, manifest.n_clusters)
}

/// Write a dataset directory in the documented layout. The mask file is only
/// emitted when some entry is zero.
pub fn save_dataset<T: Scalar>(ds: &MultiViewDataset<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        views: ds.names().to_vec(),
        n_samples: ds.n_samples(),
        n_clusters: ds.n_clusters(),
    };
    let manifest_path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::parse("manifest", e.to_string()))?;
    fs::write(&manifest_path, text + "\n").map_err(|e| Error::io(&manifest_path, e))?;

    for (name, view) in ds.names().iter().zip(ds.views()) {
        write_matrix_csv(&dir.join(format!("view_{name}.csv")), view)?;
    }
    if let Some(labels) = ds.labels() {
        let path = dir.join("labels.csv");
        let body: String = labels.iter().map(|l| format!("{l}\n")).collect();
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    if ds.mask().iter().any(|&m| m == 0) {
        write_mask_csv(&dir.join("mask.csv"), ds.mask())?;
    }
    Ok(())
}

/// Parse a headerless CSV of decimal numbers into a dense matrix.
pub fn read_matrix_csv<T: Scalar>(path: &Path) -> Result<Array2<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Vec<T>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for (col, cell) in line.split(',').enumerate() {
            let val: f64 = cell.trim().parse().map_err(|_| {
                Error::parse(
                    path.display().to_string(),
                    format!(
                        "non-numeric cell '{}' at row {}, column {}",
                        cell.trim(),
                        lineno + 1,
                        col + 1
                    ),
                )
            })?;
            row.push(T::of(val));
        }
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::parse(
                    path.display().to_string(),
                    format!(
                        "row {} has {} columns, expected {}",
                        lineno + 1,
                        row.len(),
                        first.len()
                    ),
                ));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::parse(
            path.display().to_string(),
            "empty file".to_string(),
        ));
    }
    let ncols = rows[0].len();
    let flat: Vec<T> = rows.into_iter().flatten().collect();
    let nrows = flat.len() / ncols;
    Array2::from_shape_vec((nrows, ncols), flat)
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
}

fn read_labels_csv(path: &Path) -> Result<Vec<i64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let val: i64 = line.trim().parse().map_err(|_| {
            Error::parse(
                path.display().to_string(),
                format!("non-integer label '{}' at line {}", line.trim(), lineno + 1),
            )
        })?;
        labels.push(val);
    }
    Ok(labels)
}

/// Write a dense matrix as a headerless CSV with shortest-round-trip floats.
pub fn write_matrix_csv<T: Scalar>(path: &Path, m: &Array2<T>) -> Result<()> {
    let mut body = String::new();
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|x| format!("{x}")).collect();
        body.push_str(&line.join(","));
        body.push('\n');
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn write_mask_csv(path: &Path, mask: &Array2<u8>) -> Result<()> {
    let mut body = String::new();
    for row in mask.rows() {
        let line: Vec<String> = row.iter().map(|x| x.to_string()).collect();
        body.push_str(&line.join(","));
        body.push('\n');
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Column means restricted to observed rows; used by tests and diagnostics.
pub fn column_observed_means<T: Scalar>(x: &Array2<T>, observed: &[usize]) -> Array1<T> {
    let mut out = Array1::zeros(x.ncols());
    if observed.is_empty() {
        return out;
    }
    for &i in observed {
        out += &x.row(i);
    }
    out / T::of(observed.len() as f64)
}
