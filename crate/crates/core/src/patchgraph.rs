//! Patch extraction, overlap-average assembly, and k-NN Gaussian graph
//! construction over patch feature vectors.
//!
//! An image is cut into overlapping patches on a regular anchor grid; the
//! patch matrix X (one row-major vectorized patch per row) is the node
//! feature matrix of a graph whose edges connect similar patches. The
//! assemble step maps a patch matrix back to an image by averaging every
//! patch value covering a pixel, which inverts extraction exactly.

use ndarray::{Array1, Array2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::ImageGrid;
use crate::sparse::SparseMatrix;

// Floor for the Gaussian bandwidth when all retained distances vanish.
const SIGMA_FLOOR: f64 = 1e-8;
// exp(-x) underflows to zero near 745; clamping keeps weights positive.
const MAX_EXPONENT: f64 = 700.0;

/// Anchor grid and bookkeeping for a patch decomposition.
#[derive(Debug, Clone)]
pub struct PatchLayout {
    pub image_rows: usize,
    pub image_cols: usize,
    pub patch_rows: usize,
    pub patch_cols: usize,
    pub step_rows: usize,
    pub step_cols: usize,
    /// Top-left corners in row-major order.
    pub anchors: Vec<(usize, usize)>,
    /// How many patches cover each pixel; always at least one.
    pub overlap: Array2<f64>,
}

fn axis_anchors(extent: usize, patch: usize, step: usize) -> Vec<usize> {
    let last = extent - patch;
    let mut anchors: Vec<usize> = (0..=last).step_by(step).collect();
    if *anchors.last().expect("at least anchor zero") != last {
        anchors.push(last);
    }
    anchors
}

impl PatchLayout {
    /// Build the anchor grid {0, step, 2·step, ...} clipped to the last
    /// in-image position, which is appended when the stride misses it, so
    /// patches never leave the image and every pixel is covered.
    pub fn new(
        image_rows: usize,
        image_cols: usize,
        patch_rows: usize,
        patch_cols: usize,
        step_rows: usize,
        step_cols: usize,
    ) -> Result<Self> {
        for (what, patch, step, extent) in [
            ("rows", patch_rows, step_rows, image_rows),
            ("cols", patch_cols, step_cols, image_cols),
        ] {
            if patch == 0 || patch > extent {
                return Err(Error::config(format!(
                    "patch {what} must lie in [1, {extent}], got {patch}"
                )));
            }
            if step == 0 || step > patch {
                return Err(Error::config(format!(
                    "step {what} must lie in [1, patch {what} = {patch}], got {step}"
                )));
            }
        }
        let row_anchors = axis_anchors(image_rows, patch_rows, step_rows);
        let col_anchors = axis_anchors(image_cols, patch_cols, step_cols);
        let mut anchors = Vec::with_capacity(row_anchors.len() * col_anchors.len());
        let mut overlap = Array2::zeros((image_rows, image_cols));
        for &r in &row_anchors {
            for &c in &col_anchors {
                anchors.push((r, c));
                for dr in 0..patch_rows {
                    for dc in 0..patch_cols {
                        overlap[[r + dr, c + dc]] += 1.0;
                    }
                }
            }
        }
        if overlap.iter().any(|&v| v < 1.0) {
            return Err(Error::internal("anchor grid left a pixel uncovered"));
        }
        Ok(PatchLayout {
            image_rows,
            image_cols,
            patch_rows,
            patch_cols,
            step_rows,
            step_cols,
            anchors,
            overlap,
        })
    }

    pub fn n_patches(&self) -> usize {
        self.anchors.len()
    }

    /// Length of one vectorized patch.
    pub fn feature_len(&self) -> usize {
        self.patch_rows * self.patch_cols
    }

    fn check_image(&self, img: &ImageGrid) -> Result<()> {
        if img.values.dim() != (self.image_rows, self.image_cols) {
            return Err(Error::input(format!(
                "image is {:?}, layout expects {}x{}",
                img.values.dim(),
                self.image_rows,
                self.image_cols
            )));
        }
        Ok(())
    }

    fn check_patches(&self, x: &Array2<f64>) -> Result<()> {
        if x.dim() != (self.n_patches(), self.feature_len()) {
            return Err(Error::input(format!(
                "patch matrix is {:?}, layout expects {}x{}",
                x.dim(),
                self.n_patches(),
                self.feature_len()
            )));
        }
        Ok(())
    }
}

/// Cut the image into patches; row q holds the row-major vectorization of
/// the patch at anchor q.
pub fn extract_patches(img: &ImageGrid, layout: &PatchLayout) -> Result<Array2<f64>> {
    layout.check_image(img)?;
    let mut x = Array2::zeros((layout.n_patches(), layout.feature_len()));
    for (q, &(r, c)) in layout.anchors.iter().enumerate() {
        for dr in 0..layout.patch_rows {
            for dc in 0..layout.patch_cols {
                x[[q, dr * layout.patch_cols + dc]] = img.values[[r + dr, c + dc]];
            }
        }
    }
    Ok(x)
}

/// Map a patch matrix back to an image; each pixel averages every patch
/// value covering it, so assemble(extract(f)) = f.
pub fn assemble_patches(x: &Array2<f64>, layout: &PatchLayout) -> Result<ImageGrid> {
    layout.check_patches(x)?;
    let mut img = Array2::zeros((layout.image_rows, layout.image_cols));
    for (q, &(r, c)) in layout.anchors.iter().enumerate() {
        for dr in 0..layout.patch_rows {
            for dc in 0..layout.patch_cols {
                img[[r + dr, c + dc]] += x[[q, dr * layout.patch_cols + dc]];
            }
        }
    }
    img /= &layout.overlap;
    Ok(ImageGrid { values: img })
}

/// Adjoint of `extract_patches`: scatter-add patch values into an image.
pub fn extract_adjoint(patch_grad: &Array2<f64>, layout: &PatchLayout) -> Result<ImageGrid> {
    layout.check_patches(patch_grad)?;
    let mut img = Array2::zeros((layout.image_rows, layout.image_cols));
    for (q, &(r, c)) in layout.anchors.iter().enumerate() {
        for dr in 0..layout.patch_rows {
            for dc in 0..layout.patch_cols {
                img[[r + dr, c + dc]] += patch_grad[[q, dr * layout.patch_cols + dc]];
            }
        }
    }
    Ok(ImageGrid { values: img })
}

/// Adjoint of `assemble_patches`: divide by overlap, then extract.
pub fn assemble_adjoint(image_grad: &ImageGrid, layout: &PatchLayout) -> Result<Array2<f64>> {
    layout.check_image(image_grad)?;
    let scaled = ImageGrid {
        values: &image_grad.values / &layout.overlap,
    };
    extract_patches(&scaled, layout)
}

/// Similarity graph over patch nodes: symmetric Gaussian adjacency with
/// zero diagonal, node degrees, the bandwidth used, and the cached
/// renormalized propagation matrix.
#[derive(Debug, Clone)]
pub struct SparseGraph {
    pub adjacency: SparseMatrix,
    pub degrees: Array1<f64>,
    pub sigma: f64,
    propagation: SparseMatrix,
}

impl SparseGraph {
    /// Wrap an explicit adjacency; it must be square, symmetric, have a
    /// zero stored diagonal, and non-negative weights.
    pub fn from_adjacency(adjacency: SparseMatrix, sigma: f64) -> Result<Self> {
        let n = adjacency.n();
        if adjacency.max_asymmetry() > 0.0 {
            return Err(Error::input("adjacency must be symmetric"));
        }
        for i in 0..n {
            for (j, w) in adjacency.row(i) {
                if i == j {
                    return Err(Error::input(format!("stored self-loop at node {i}")));
                }
                if !(w >= 0.0) || !w.is_finite() {
                    return Err(Error::input(format!("bad weight {w} on edge ({i}, {j})")));
                }
            }
        }
        let mut degrees = Array1::zeros(n);
        for i in 0..n {
            degrees[i] = adjacency.row(i).map(|(_, w)| w).sum();
        }
        let propagation = build_propagation(&adjacency, &degrees);
        Ok(SparseGraph {
            adjacency,
            degrees,
            sigma,
            propagation,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.adjacency.n()
    }

    /// Renormalized propagation matrix D̃^{-1/2} (I + W) D̃^{-1/2} with
    /// D̃ the row sums of I + W; symmetric with spectral radius ≤ 1.
    pub fn propagation(&self) -> &SparseMatrix {
        &self.propagation
    }

    /// Undirected edges, each reported once with i < j.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_nodes()).flat_map(move |i| {
            self.adjacency
                .row(i)
                .filter(move |&(j, _)| i < j)
                .map(move |(j, w)| (i, j, w))
        })
    }
}

fn build_propagation(adjacency: &SparseMatrix, degrees: &Array1<f64>) -> SparseMatrix {
    let n = adjacency.n();
    let scale: Vec<f64> = (0..n).map(|i| 1.0 / (1.0 + degrees[i]).sqrt()).collect();
    let mut rows: Vec<Vec<(u32, f64)>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut row: Vec<(u32, f64)> = Vec::with_capacity(adjacency.row(i).count() + 1);
        let mut diag_placed = false;
        for (j, w) in adjacency.row(i) {
            if !diag_placed && j > i {
                row.push((i as u32, scale[i] * scale[i]));
                diag_placed = true;
            }
            row.push((j as u32, w * scale[i] * scale[j]));
        }
        if !diag_placed {
            row.push((i as u32, scale[i] * scale[i]));
        }
        rows.push(row);
    }
    SparseMatrix::from_rows(n, rows).expect("propagation rows are sorted")
}

/// Connect each node to its k nearest neighbors by Euclidean feature
/// distance (self excluded, ties broken toward the lower index), weight
/// the edges with a Gaussian whose bandwidth is the median retained
/// distance, and symmetrize by elementwise max.
pub fn build_graph(features: &Array2<f64>, k: usize) -> Result<SparseGraph> {
    let (n, _d) = features.dim();
    if n < 2 {
        return Err(Error::input(format!("graph needs at least 2 nodes, got {n}")));
    }
    if k == 0 || k >= n {
        return Err(Error::input(format!(
            "neighbor count must lie in [1, {}], got {k}",
            n - 1
        )));
    }
    if let Some(bad) = features.iter().find(|v| !v.is_finite()) {
        return Err(Error::input(format!("non-finite feature value {bad}")));
    }

    // Candidate ordering is (distance, index), so exact ties pick the
    // lower node; selection is per-node and thread-count independent.
    let neighbors: Vec<Vec<(u32, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let fi = features.row(i);
            let mut cand: Vec<(f64, u32)> = Vec::with_capacity(n - 1);
            for j in 0..n {
                if j == i {
                    continue;
                }
                let fj = features.row(j);
                let mut d2 = 0.0;
                for (a, b) in fi.iter().zip(fj.iter()) {
                    d2 += (a - b) * (a - b);
                }
                cand.push((d2, j as u32));
            }
            let key = |a: &(f64, u32)| (a.0, a.1);
            cand.select_nth_unstable_by(k - 1, |a, b| {
                key(a).0.total_cmp(&key(b).0).then(key(a).1.cmp(&key(b).1))
            });
            let mut kept: Vec<(f64, u32)> = cand[..k].to_vec();
            kept.sort_unstable_by(|a, b| key(a).0.total_cmp(&key(b).0).then(key(a).1.cmp(&key(b).1)));
            kept.into_iter().map(|(d2, j)| (j, d2)).collect()
        })
        .collect();

    let mut retained: Vec<f64> = neighbors
        .iter()
        .flat_map(|row| row.iter().map(|&(_, d2)| d2.sqrt()))
        .collect();
    retained.sort_unstable_by(f64::total_cmp);
    let mid = retained.len() / 2;
    let median = if retained.len() % 2 == 1 {
        retained[mid]
    } else {
        0.5 * (retained[mid - 1] + retained[mid])
    };
    let sigma = median.max(SIGMA_FLOOR);

    let mut edges: Vec<(u32, u32, f64)> = Vec::with_capacity(2 * k * n);
    for (i, row) in neighbors.iter().enumerate() {
        for &(j, d2) in row {
            let w = (-(d2 / (sigma * sigma)).min(MAX_EXPONENT)).exp();
            edges.push((i as u32, j, w));
            edges.push((j, i as u32, w));
        }
    }
    edges.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    let mut rows: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
    for (i, j, w) in edges {
        let row = &mut rows[i as usize];
        match row.last_mut() {
            Some(last) if last.0 == j => last.1 = last.1.max(w),
            _ => row.push((j, w)),
        }
    }
    let adjacency = SparseMatrix::from_rows(n, rows)?;
    SparseGraph::from_adjacency(adjacency, sigma)
}

/// Symmetric normalized Laplacian L = I - D^{-1/2} W D^{-1/2}.
pub fn normalized_laplacian(graph: &SparseGraph) -> Result<SparseMatrix> {
    let n = graph.n_nodes();
    let mut scale = vec![0.0; n];
    for i in 0..n {
        let d = graph.degrees[i];
        if !(d > 0.0) {
            return Err(Error::internal(format!(
                "node {i} has zero degree; Laplacian normalization undefined"
            )));
        }
        scale[i] = 1.0 / d.sqrt();
    }
    let mut rows: Vec<Vec<(u32, f64)>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut row: Vec<(u32, f64)> = Vec::with_capacity(graph.adjacency.row(i).count() + 1);
        let mut diag_placed = false;
        for (j, w) in graph.adjacency.row(i) {
            if !diag_placed && j > i {
                row.push((i as u32, 1.0));
                diag_placed = true;
            }
            row.push((j as u32, -w * scale[i] * scale[j]));
        }
        if !diag_placed {
            row.push((i as u32, 1.0));
        }
        rows.push(row);
    }
    SparseMatrix::from_rows(n, rows)
}

/// Accessor mirroring `SparseGraph::propagation`, for symmetry with
/// `normalized_laplacian`.
pub fn renormalized_propagation(graph: &SparseGraph) -> &SparseMatrix {
    graph.propagation()
}
