//! Compensating weight updates for a removal selection: the exact dense
//! general solution (oracle scale), fast multi-row/column updates, summed
//! single-structure updates, eigendecomposition-based correlated
//! unstructured updates with batching, and the sum-of-Kronecker path.
//!
//! Every update ends with a hard mask: the returned delta sets each selected
//! entry to exactly `-w` so the pruned coordinates land on zero bit-exactly.

use serde::{Deserialize, Serialize};

use crate::curvature::{DenseCurvature, EigenCurvature, KronCurvature, SumKronCurvature};
use crate::error::{CoreError, Result};
use crate::linalg::{self, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateKind {
    /// Prune only; remaining weights untouched.
    None,
    /// Per-structure (or per-element) updates computed independently and summed.
    IndependentStructure,
    /// Jointly solved updates over the whole selection.
    FullCorrelation,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct UpdatePolicy {
    pub kind: UpdateKind,
    /// Cap on the number of jointly correlated weights per batch.
    pub max_correlated: usize,
}

impl UpdatePolicy {
    pub fn validate(&self) -> Result<()> {
        if self.max_correlated == 0 {
            return Err(CoreError::config("max_correlated must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct WeightDelta {
    pub layer_name: String,
    pub delta: Mat,
}

impl WeightDelta {
    pub fn zeros_like(layer_name: &str, w: &Mat) -> Self {
        WeightDelta {
            layer_name: layer_name.to_string(),
            delta: Mat::zeros(w.dim()),
        }
    }

    pub fn apply(&self, w: &mut Mat) {
        *w += &self.delta;
    }

    pub fn frobenius(&self) -> f64 {
        linalg::frobenius(&self.delta)
    }
}

fn force_zero_cells<I: IntoIterator<Item = (usize, usize)>>(delta: &mut Mat, w: &Mat, cells: I) {
    for (r, c) in cells {
        delta[[r, c]] = -w[[r, c]];
    }
}

fn check_sorted_unique(idx: &[usize], bound: usize, what: &str) -> Result<()> {
    for pair in idx.windows(2) {
        if pair[1] <= pair[0] {
            return Err(CoreError::config(format!(
                "{what} indices must be sorted and unique"
            )));
        }
    }
    if let Some(&last) = idx.last() {
        if last >= bound {
            return Err(CoreError::config(format!(
                "{what} index {last} out of bounds {bound}"
            )));
        }
    }
    Ok(())
}

/// Exact constrained-quadratic solution on a dense Fisher:
/// Δθ = −F⁻¹ E_Kᵀ M⁻¹ E_K θ with M = E_K F⁻¹ E_Kᵀ, plus the expected loss
/// increase ½ (E_K θ)ᵀ M⁻¹ (E_K θ).
///
/// `elements` are flat row-major weight indices into `w`.
pub fn general_update(
    fisher: &DenseCurvature,
    elements: &[usize],
    w: &Mat,
) -> Result<(WeightDelta, f64)> {
    let p = w.len();
    if fisher.f.nrows() != p {
        return Err(CoreError::shape(format!(
            "fisher is {}x{} but the layer has {} weights",
            fisher.f.nrows(),
            fisher.f.ncols(),
            p
        )));
    }
    if p > crate::curvature::ORACLE_MAX_WEIGHTS {
        return Err(CoreError::OracleScale(format!(
            "general update on {p} weights exceeds the oracle guard"
        )));
    }
    if elements.is_empty() {
        return Ok((WeightDelta::zeros_like(&fisher.layer_name, w), 0.0));
    }
    check_sorted_unique(elements, p, "element")?;

    let f_inv = linalg::spd_inverse(&fisher.f)
        .map_err(|e| CoreError::numeric(format!("dense Fisher inversion failed: {e}")))?;
    let k = elements.len();
    let m = Mat::from_shape_fn((k, k), |(i, j)| f_inv[[elements[i], elements[j]]]);
    let cols = w.ncols();
    let theta_bar = linalg::Vector::from_iter(elements.iter().map(|&e| w[[e / cols, e % cols]]));
    let u = linalg::spd_solve_vec(&m, &theta_bar).map_err(|_| {
        CoreError::numeric("constraint Gram matrix is singular (linearly dependent constraints)")
    })?;
    let cost = 0.5 * theta_bar.dot(&u);

    let mut flat = linalg::Vector::zeros(p);
    for i in 0..p {
        let mut acc = 0.0;
        for (j, &e) in elements.iter().enumerate() {
            acc += f_inv[[i, e]] * u[j];
        }
        flat[i] = -acc;
    }
    let mut delta = linalg::mat_from_vec_row(&flat, w.nrows(), w.ncols())?;
    force_zero_cells(
        &mut delta,
        w,
        elements.iter().map(|&e| (e / cols, e % cols)),
    );
    Ok((
        WeightDelta {
            layer_name: fisher.layer_name.clone(),
            delta,
        },
        cost,
    ))
}

/// Removes `rows`, compensating the remaining rows:
/// ΔW = −G⁻¹E_R'ᵀ (E_R' G⁻¹ E_R'ᵀ)⁻¹ W̄. Only an R'×R' matrix is inverted.
pub fn multi_row_update(curv: &KronCurvature, rows: &[usize], w: &Mat) -> Result<WeightDelta> {
    let r = curv.out_dim();
    if rows.is_empty() || rows.len() >= r {
        return Err(CoreError::config(format!(
            "row removal needs 1 <= R' < {r}, got {}",
            rows.len()
        )));
    }
    check_sorted_unique(rows, r, "row")?;

    // X = G⁻¹ E_R'ᵀ by solving G X = E_R'ᵀ; no full inverse is materialized.
    let mut rhs = Mat::zeros((r, rows.len()));
    for (j, &row) in rows.iter().enumerate() {
        rhs[[row, j]] = 1.0;
    }
    let x = linalg::spd_solve(&curv.g, &rhs)
        .map_err(|e| CoreError::numeric(format!("G factor solve failed: {e}")))?;
    let m = Mat::from_shape_fn((rows.len(), rows.len()), |(i, j)| x[[rows[i], j]]);
    let w_bar = Mat::from_shape_fn((rows.len(), w.ncols()), |(i, j)| w[[rows[i], j]]);
    let y = linalg::spd_solve(&m, &w_bar)
        .map_err(|e| CoreError::numeric(format!("row Gram solve failed: {e}")))?;
    let mut delta = -x.dot(&y);
    force_zero_cells(
        &mut delta,
        w,
        rows.iter()
            .flat_map(|&rr| (0..w.ncols()).map(move |c| (rr, c))),
    );
    Ok(WeightDelta {
        layer_name: curv.layer_name.clone(),
        delta,
    })
}

/// Removes `cols`, compensating the remaining columns:
/// ΔW = −W̄ (E_C' A⁻¹ E_C'ᵀ)⁻¹ (E_C' A⁻¹). Only a C'×C' matrix is inverted.
pub fn multi_col_update(curv: &KronCurvature, cols: &[usize], w: &Mat) -> Result<WeightDelta> {
    let c = curv.in_dim();
    if cols.is_empty() || cols.len() >= c {
        return Err(CoreError::config(format!(
            "column removal needs 1 <= C' < {c}, got {}",
            cols.len()
        )));
    }
    check_sorted_unique(cols, c, "column")?;

    let mut rhs = Mat::zeros((c, cols.len()));
    for (j, &col) in cols.iter().enumerate() {
        rhs[[col, j]] = 1.0;
    }
    // X = A⁻¹ E_C'ᵀ (C×C'); Xᵀ = E_C' A⁻¹ by symmetry of A.
    let x = linalg::spd_solve(&curv.a, &rhs)
        .map_err(|e| CoreError::numeric(format!("A factor solve failed: {e}")))?;
    let m = Mat::from_shape_fn((cols.len(), cols.len()), |(i, j)| x[[cols[i], j]]);
    let z = linalg::spd_solve(&m, &x.t().to_owned())
        .map_err(|e| CoreError::numeric(format!("column Gram solve failed: {e}")))?;
    let w_bar = Mat::from_shape_fn((w.nrows(), cols.len()), |(i, j)| w[[i, cols[j]]]);
    let mut delta = -w_bar.dot(&z);
    force_zero_cells(
        &mut delta,
        w,
        cols.iter()
            .flat_map(|&cc| (0..w.nrows()).map(move |rr| (rr, cc))),
    );
    Ok(WeightDelta {
        layer_name: curv.layer_name.clone(),
        delta,
    })
}

/// Sum of independent single-row and single-column updates, each computed
/// against the original weights, with a final hard mask.
pub fn single_structure_updates(
    curv: &KronCurvature,
    rows: &[usize],
    cols: &[usize],
    w: &Mat,
) -> Result<WeightDelta> {
    if rows.is_empty() && cols.is_empty() {
        return Err(CoreError::config("no structures selected"));
    }
    check_sorted_unique(rows, curv.out_dim(), "row")?;
    check_sorted_unique(cols, curv.in_dim(), "column")?;
    let mut delta = Mat::zeros(w.dim());

    for &row in rows {
        // −(G⁻¹ e_r) θ_rᵀ / [G⁻¹]_rr
        let mut e = Mat::zeros((curv.out_dim(), 1));
        e[[row, 0]] = 1.0;
        let x = linalg::spd_solve(&curv.g, &e)
            .map_err(|e| CoreError::numeric(format!("G factor solve failed: {e}")))?;
        let pivot = x[[row, 0]];
        for i in 0..w.nrows() {
            let scale = x[[i, 0]] / pivot;
            for j in 0..w.ncols() {
                delta[[i, j]] -= scale * w[[row, j]];
            }
        }
    }
    for &col in cols {
        // −θ_c (A⁻¹ e_c)ᵀ / [A⁻¹]_cc
        let mut e = Mat::zeros((curv.in_dim(), 1));
        e[[col, 0]] = 1.0;
        let y = linalg::spd_solve(&curv.a, &e)
            .map_err(|e| CoreError::numeric(format!("A factor solve failed: {e}")))?;
        let pivot = y[[col, 0]];
        for j in 0..w.ncols() {
            let scale = y[[j, 0]] / pivot;
            for i in 0..w.nrows() {
                delta[[i, j]] -= scale * w[[i, col]];
            }
        }
    }

    force_zero_cells(
        &mut delta,
        w,
        rows.iter()
            .flat_map(|&r| (0..w.ncols()).map(move |c| (r, c))),
    );
    force_zero_cells(
        &mut delta,
        w,
        cols.iter()
            .flat_map(|&c| (0..w.nrows()).map(move |r| (r, c))),
    );
    Ok(WeightDelta {
        layer_name: curv.layer_name.clone(),
        delta,
    })
}

/// Jointly correlated unstructured update on the eigendecomposed Kronecker
/// curvature. Elements are processed in the given order, split into batches
/// of at most `max_correlated`, each batch solved against the original
/// weights and summed.
///
/// Per batch the K×K constraint Gram matrix is built entrywise as
/// M_ij = Σ_p Σ_q K̄1[i,p]·K̄1[j,p]·K̄2[i,q]·K̄2[j,q] / (s1[p]·s2[q])
/// without materializing the full inverse; the double sum factorizes into a
/// Hadamard product of two K×K forms.
pub fn correlated_unstructured_update(
    eig: &EigenCurvature,
    elements: &[(usize, usize)],
    max_correlated: usize,
    w: &Mat,
) -> Result<WeightDelta> {
    if max_correlated == 0 {
        return Err(CoreError::config("max_correlated must be at least 1"));
    }
    if elements.is_empty() {
        return Ok(WeightDelta::zeros_like(&eig.layer_name, w));
    }
    let (r, c) = (eig.s1.len(), eig.s2.len());
    {
        let mut seen = std::collections::HashSet::new();
        for &(er, ec) in elements {
            if er >= r || ec >= c {
                return Err(CoreError::config(format!(
                    "element ({er},{ec}) out of bounds"
                )));
            }
            if !seen.insert((er, ec)) {
                return Err(CoreError::config(format!(
                    "element ({er},{ec}) selected twice"
                )));
            }
        }
    }

    let inv_s1: Vec<f64> = eig.s1.iter().map(|v| 1.0 / v).collect();
    let inv_s2: Vec<f64> = eig.s2.iter().map(|v| 1.0 / v).collect();
    let grid = eig.eigen_grid();
    let mut delta = Mat::zeros(w.dim());

    for batch in elements.chunks(max_correlated) {
        let k = batch.len();
        let k1_bar = Mat::from_shape_fn((k, r), |(i, p)| eig.k1[[batch[i].0, p]]);
        let k2_bar = Mat::from_shape_fn((k, c), |(i, q)| eig.k2[[batch[i].1, q]]);

        // M = (K̄1 diag(1/s1) K̄1ᵀ) ∘ (K̄2 diag(1/s2) K̄2ᵀ)
        let mut b1 = Mat::zeros((k, k));
        let mut b2 = Mat::zeros((k, k));
        for i in 0..k {
            for j in 0..k {
                let mut acc1 = 0.0;
                for p in 0..r {
                    acc1 += k1_bar[[i, p]] * k1_bar[[j, p]] * inv_s1[p];
                }
                b1[[i, j]] = acc1;
                let mut acc2 = 0.0;
                for q in 0..c {
                    acc2 += k2_bar[[i, q]] * k2_bar[[j, q]] * inv_s2[q];
                }
                b2[[i, j]] = acc2;
            }
        }
        let m = &b1 * &b2;
        let theta_bar = linalg::Vector::from_iter(batch.iter().map(|&(er, ec)| w[[er, ec]]));

        match linalg::spd_solve_vec(&m, &theta_bar) {
            Ok(u) => {
                // Δ = −K1 ((K̄1ᵀ diag(u) K̄2) ⊘ S) K2ᵀ
                let mut inner = Mat::zeros((r, c));
                for (i, &ui) in u.iter().enumerate() {
                    for p in 0..r {
                        let lhs = k1_bar[[i, p]] * ui;
                        if lhs == 0.0 {
                            continue;
                        }
                        for q in 0..c {
                            inner[[p, q]] += lhs * k2_bar[[i, q]];
                        }
                    }
                }
                inner = &inner / &grid;
                delta -= &eig.k1.dot(&inner).dot(&eig.k2.t());
            }
            Err(_) => {
                // Singular batch Gram matrix: fall back to independent
                // single-element updates for this batch.
                eprintln!(
                    "warning: layer `{}`: singular {k}x{k} correlation matrix, \
                     falling back to per-element updates for this batch",
                    eig.layer_name
                );
                for (i, &(er, ec)) in batch.iter().enumerate() {
                    let diag = b1[[i, i]] * b2[[i, i]];
                    let scale = w[[er, ec]] / diag;
                    let mut inner = Mat::zeros((r, c));
                    for p in 0..r {
                        let lhs = eig.k1[[er, p]];
                        for q in 0..c {
                            inner[[p, q]] = lhs * eig.k2[[ec, q]] / grid[[p, q]];
                        }
                    }
                    delta -= &(eig.k1.dot(&inner).dot(&eig.k2.t()) * scale);
                }
            }
        }
    }

    force_zero_cells(&mut delta, w, elements.iter().copied());
    Ok(WeightDelta {
        layer_name: eig.layer_name.clone(),
        delta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointStrategy {
    /// Stacked constraints solved exactly on the densified Kronecker Fisher.
    Oracle,
    /// Multi-row update, then multi-column update on the updated matrix.
    Fast,
}

/// Removes rows and columns together. The fast strategy applies the row
/// update first, then the column update on the already-updated matrix;
/// zeroed rows have zero entries in the selected columns, so the second
/// step leaves them on zero.
pub fn joint_row_col_update(
    curv: &KronCurvature,
    rows: &[usize],
    cols: &[usize],
    w: &Mat,
    strategy: JointStrategy,
) -> Result<WeightDelta> {
    if rows.is_empty() || cols.is_empty() {
        return Err(CoreError::config(
            "joint update needs both rows and columns",
        ));
    }
    match strategy {
        JointStrategy::Fast => {
            let row_delta = multi_row_update(curv, rows, w)?;
            let mut w1 = w.clone();
            row_delta.apply(&mut w1);
            let col_delta = multi_col_update(curv, cols, &w1)?;
            let mut delta = row_delta.delta + col_delta.delta;
            force_zero_cells(
                &mut delta,
                w,
                rows.iter()
                    .flat_map(|&r| (0..w.ncols()).map(move |c| (r, c))),
            );
            force_zero_cells(
                &mut delta,
                w,
                cols.iter()
                    .flat_map(|&c| (0..w.nrows()).map(move |r| (r, c))),
            );
            Ok(WeightDelta {
                layer_name: curv.layer_name.clone(),
                delta,
            })
        }
        JointStrategy::Oracle => {
            let dense = DenseCurvature {
                layer_name: curv.layer_name.clone(),
                f: linalg::kron(&curv.g, &curv.a),
                out_dim: curv.out_dim(),
                in_dim: curv.in_dim(),
            };
            let elements = stack_row_col_elements(rows, cols, w.nrows(), w.ncols());
            let (delta, _) = general_update(&dense, &elements, w)?;
            Ok(delta)
        }
    }
}

/// Flat indices of all cells covered by the given rows and columns, with the
/// R'·C' overlapping cells counted once.
pub fn stack_row_col_elements(rows: &[usize], cols: &[usize], r: usize, c: usize) -> Vec<usize> {
    let mut elements = Vec::new();
    let col_set: std::collections::HashSet<usize> = cols.iter().copied().collect();
    let row_set: std::collections::HashSet<usize> = rows.iter().copied().collect();
    for i in 0..r {
        for j in 0..c {
            if row_set.contains(&i) || col_set.contains(&j) {
                elements.push(i * c + j);
            }
        }
    }
    elements
}

/// Update under a sum-of-Kronecker curvature: densifies Σ G_i ⊗ A_i, dampens
/// it, and delegates to the dense general solution. Oracle scale only.
pub fn sum_kron_update(
    sum: &SumKronCurvature,
    elements: &[usize],
    w: &Mat,
    damp_frac: f64,
) -> Result<(WeightDelta, f64)> {
    let (r, c) = (sum.terms[0].0.nrows(), sum.terms[0].1.nrows());
    if r * c > crate::curvature::ORACLE_MAX_WEIGHTS {
        return Err(CoreError::OracleScale(
            "sum-of-Kronecker update is restricted to oracle-scale layers".into(),
        ));
    }
    let mut f = sum.densify();
    f = 0.5 * (&f + &f.t());
    let mean_diag = f.diag().sum() / f.nrows() as f64;
    if mean_diag <= 0.0 {
        return Err(CoreError::DegenerateCurvature(
            "sum curvature has non-positive trace".into(),
        ));
    }
    // Deflated second terms are often indefinite; floor the spectrum so the
    // damped sum is positive definite.
    let mut shift = damp_frac * mean_diag;
    let (eigs, _) = linalg::sym_eigen(&f)?;
    if eigs[0] < 0.0 {
        shift += -eigs[0];
    }
    for i in 0..f.nrows() {
        f[[i, i]] += shift;
    }
    let dense = DenseCurvature {
        layer_name: sum.layer_name.clone(),
        f,
        out_dim: r,
        in_dim: c,
    };
    general_update(&dense, elements, w)
}
