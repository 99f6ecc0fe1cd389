//! Removal costs in final-loss units for single elements, rows, and columns
//! under selectable curvature policies.

use serde::{Deserialize, Serialize};

use crate::curvature::KronCurvature;
use crate::error::{CoreError, Result};
use crate::linalg::{self, Mat, Vector};

/// Which curvature the costs assume.
///
/// `Magnitude` treats the Fisher as I⊗I, `LObd` as diag(I⊗A), `KObd` as
/// diag(G⊗A), and `KfacObs` uses the full Kronecker pair with its inverse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostPolicy {
    Magnitude,
    LObd,
    KObd,
    KfacObs,
}

impl CostPolicy {
    pub fn needs_curvature(&self) -> bool {
        !matches!(self, CostPolicy::Magnitude)
    }
}

/// Per-layer element, row, and column removal costs.
#[derive(Debug, Clone)]
pub struct CostTable {
    pub layer_name: String,
    pub element_costs: Mat,
    pub row_costs: Vector,
    pub col_costs: Vector,
    pub policy: CostPolicy,
}

impl CostTable {
    pub fn out_dim(&self) -> usize {
        self.element_costs.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.element_costs.ncols()
    }

    pub fn weight_count(&self) -> usize {
        self.element_costs.len()
    }

    /// Computes all three cost vectors for one layer.
    pub fn compute(w: &Mat, curv: Option<&KronCurvature>, policy: CostPolicy) -> Result<CostTable> {
        let layer_name = curv
            .map(|c| c.layer_name.clone())
            .unwrap_or_else(|| "layer".into());
        Ok(CostTable {
            layer_name,
            element_costs: element_costs(w, curv, policy)?,
            row_costs: row_costs(w, curv, policy)?,
            col_costs: col_costs(w, curv, policy)?,
            policy,
        })
    }

    pub fn assert_finite(&self) -> Result<()> {
        let ok = self
            .element_costs
            .iter()
            .chain(self.row_costs.iter())
            .chain(self.col_costs.iter())
            .all(|v| v.is_finite() && *v >= -1e-12);
        if ok {
            Ok(())
        } else {
            Err(CoreError::numeric(format!(
                "cost table for `{}` has negative or non-finite entries",
                self.layer_name
            )))
        }
    }
}

fn require_curvature<'c>(
    w: &Mat,
    curv: Option<&'c KronCurvature>,
    policy: CostPolicy,
) -> Result<&'c KronCurvature> {
    let curv =
        curv.ok_or_else(|| CoreError::config(format!("{policy:?} costs need curvature factors")))?;
    if curv.out_dim() != w.nrows() || curv.in_dim() != w.ncols() {
        return Err(CoreError::shape(format!(
            "curvature {}x{} does not match weights {}x{}",
            curv.out_dim(),
            curv.in_dim(),
            w.nrows(),
            w.ncols()
        )));
    }
    Ok(curv)
}

/// Element removal costs.
///
/// KfacObs: θ² / (2·[G⁻¹]_rr·[A⁻¹]_cc); KObd: ½·G_rr·A_cc·θ²;
/// LObd: ½·A_cc·θ²; Magnitude: ½·θ².
pub fn element_costs(w: &Mat, curv: Option<&KronCurvature>, policy: CostPolicy) -> Result<Mat> {
    match policy {
        CostPolicy::Magnitude => Ok(w.mapv(|x| 0.5 * x * x)),
        CostPolicy::LObd => {
            let curv = require_curvature(w, curv, policy)?;
            Ok(Mat::from_shape_fn(w.dim(), |(r, c)| {
                0.5 * curv.a[[c, c]] * w[[r, c]] * w[[r, c]]
            }))
        }
        CostPolicy::KObd => {
            let curv = require_curvature(w, curv, policy)?;
            Ok(Mat::from_shape_fn(w.dim(), |(r, c)| {
                0.5 * curv.g[[r, r]] * curv.a[[c, c]] * w[[r, c]] * w[[r, c]]
            }))
        }
        CostPolicy::KfacObs => {
            let curv = require_curvature(w, curv, policy)?;
            let g_inv = linalg::spd_inverse(&curv.g)?;
            let a_inv = linalg::spd_inverse(&curv.a)?;
            Ok(Mat::from_shape_fn(w.dim(), |(r, c)| {
                w[[r, c]] * w[[r, c]] / (2.0 * g_inv[[r, r]] * a_inv[[c, c]])
            }))
        }
    }
}

/// Row removal costs: ½·θ_rᵀ A θ_r scaled by the row's G term
/// (1/[G⁻¹]_rr in the OBS form, G_rr in the OBD form), with the factors
/// replaced by I where the policy assumes identity curvature.
pub fn row_costs(w: &Mat, curv: Option<&KronCurvature>, policy: CostPolicy) -> Result<Vector> {
    let r_dim = w.nrows();
    match policy {
        CostPolicy::Magnitude => {
            Ok(Vector::from_iter((0..r_dim).map(|r| {
                0.5 * w.row(r).iter().map(|x| x * x).sum::<f64>()
            })))
        }
        CostPolicy::LObd => {
            let curv = require_curvature(w, curv, policy)?;
            Ok(Vector::from_iter((0..r_dim).map(|r| {
                let theta = w.row(r);
                0.5 * theta.dot(&curv.a.dot(&theta))
            })))
        }
        CostPolicy::KObd => {
            let curv = require_curvature(w, curv, policy)?;
            Ok(Vector::from_iter((0..r_dim).map(|r| {
                let theta = w.row(r);
                0.5 * curv.g[[r, r]] * theta.dot(&curv.a.dot(&theta))
            })))
        }
        CostPolicy::KfacObs => {
            let curv = require_curvature(w, curv, policy)?;
            let g_inv = linalg::spd_inverse(&curv.g)?;
            Ok(Vector::from_iter((0..r_dim).map(|r| {
                let theta = w.row(r);
                0.5 * theta.dot(&curv.a.dot(&theta)) / g_inv[[r, r]]
            })))
        }
    }
}

/// Column removal costs, mirroring `row_costs` with the roles of G and A
/// swapped.
pub fn col_costs(w: &Mat, curv: Option<&KronCurvature>, policy: CostPolicy) -> Result<Vector> {
    let c_dim = w.ncols();
    match policy {
        CostPolicy::Magnitude => {
            Ok(Vector::from_iter((0..c_dim).map(|c| {
                0.5 * w.column(c).iter().map(|x| x * x).sum::<f64>()
            })))
        }
        CostPolicy::LObd => {
            let curv = require_curvature(w, curv, policy)?;
            Ok(Vector::from_iter((0..c_dim).map(|c| {
                let theta = w.column(c);
                0.5 * curv.a[[c, c]] * theta.dot(&theta)
            })))
        }
        CostPolicy::KObd => {
            let curv = require_curvature(w, curv, policy)?;
            Ok(Vector::from_iter((0..c_dim).map(|c| {
                let theta = w.column(c);
                0.5 * curv.a[[c, c]] * theta.dot(&curv.g.dot(&theta))
            })))
        }
        CostPolicy::KfacObs => {
            let curv = require_curvature(w, curv, policy)?;
            let a_inv = linalg::spd_inverse(&curv.a)?;
            Ok(Vector::from_iter((0..c_dim).map(|c| {
                let theta = w.column(c);
                0.5 * theta.dot(&curv.g.dot(&theta)) / a_inv[[c, c]]
            })))
        }
    }
}

/// Cost per 2:4 block: the sum of the two smallest element costs in every
/// window of four consecutive weights along a row. Returns an R×(C/4) grid.
pub fn block_costs_2_4(element_costs: &Mat) -> Result<Mat> {
    let (r, c) = element_costs.dim();
    if c % 4 != 0 {
        return Err(CoreError::config(format!(
            "2:4 blocks need the row length divisible by 4, got {c}"
        )));
    }
    let blocks = c / 4;
    Ok(Mat::from_shape_fn((r, blocks), |(row, b)| {
        let mut window = [0.0f64; 4];
        for (k, slot) in window.iter_mut().enumerate() {
            *slot = element_costs[[row, 4 * b + k]];
        }
        window.sort_by(|x, y| x.partial_cmp(y).unwrap());
        window[0] + window[1]
    }))
}

/// CSV dump of cost tables: one row per element, row, and column candidate,
/// with columns (layer, kind, index, cost).
pub fn cost_csv(tables: &[CostTable]) -> String {
    let mut out = String::from("layer,kind,index,cost\n");
    for t in tables {
        for (flat, cost) in t.element_costs.iter().enumerate() {
            out.push_str(&format!(
                "{},element,{},{:.12e}\n",
                t.layer_name, flat, cost
            ));
        }
        for (i, cost) in t.row_costs.iter().enumerate() {
            out.push_str(&format!("{},row,{},{:.12e}\n", t.layer_name, i, cost));
        }
        for (i, cost) in t.col_costs.iter().enumerate() {
            out.push_str(&format!("{},col,{},{:.12e}\n", t.layer_name, i, cost));
        }
    }
    out
}

/// The two lowest-cost element offsets (0..4) within a block, ties broken by
/// lower index.
pub fn block_cheapest_pair(element_costs: &Mat, row: usize, block: usize) -> [usize; 2] {
    let mut idx = [0usize, 1, 2, 3];
    idx.sort_by(|&i, &j| {
        element_costs[[row, 4 * block + i]]
            .partial_cmp(&element_costs[[row, 4 * block + j]])
            .unwrap()
            .then(i.cmp(&j))
    });
    let mut pair = [idx[0], idx[1]];
    pair.sort_unstable();
    pair
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curvature::dampen;
    use crate::rng::Rng;
    use crate::updates::general_update;
    use proptest::prelude::*;

    fn random_spd(n: usize, rng: &mut Rng) -> Mat {
        let b = Mat::from_shape_fn((n, n), |_| rng.normal());
        b.dot(&b.t()) + Mat::eye(n) * (0.4 + rng.uniform())
    }

    fn random_curv(r: usize, c: usize, seed: u64) -> KronCurvature {
        let mut rng = Rng::seed(seed);
        dampen(
            &KronCurvature::from_factors("t", random_spd(r, &mut rng), random_spd(c, &mut rng)),
            0.1,
            0.01,
        )
        .unwrap()
    }

    fn dense_of(curv: &KronCurvature) -> crate::curvature::DenseCurvature {
        crate::curvature::DenseCurvature {
            layer_name: curv.layer_name.clone(),
            f: linalg::kron(&curv.g, &curv.a),
            out_dim: curv.out_dim(),
            in_dim: curv.in_dim(),
        }
    }

    #[test]
    fn identity_curvature_gives_half_theta_squared() {
        let curv = KronCurvature::from_factors("i", Mat::eye(2), Mat::eye(2));
        let w = Mat::from_shape_vec((2, 2), vec![2.0, 0.0, 0.0, 3.0]).unwrap();
        let costs = element_costs(&w, Some(&curv), CostPolicy::KfacObs).unwrap();
        assert!((costs[[0, 0]] - 2.0).abs() < 1e-12);
        assert!((costs[[1, 1]] - 4.5).abs() < 1e-12);
        assert_eq!(costs[[0, 1]], 0.0);
    }

    #[test]
    fn diagonal_curvature_reduces_obs_to_obd() {
        let mut rng = Rng::seed(3);
        let g = Mat::from_diag(&Vector::from_iter((0..4).map(|_| 0.5 + rng.uniform())));
        let a = Mat::from_diag(&Vector::from_iter((0..5).map(|_| 0.5 + rng.uniform())));
        let curv = KronCurvature::from_factors("d", g, a);
        let w = Mat::from_shape_fn((4, 5), |_| rng.normal());
        let obs = element_costs(&w, Some(&curv), CostPolicy::KfacObs).unwrap();
        let obd = element_costs(&w, Some(&curv), CostPolicy::KObd).unwrap();
        assert!(linalg::max_abs(&(&obs - &obd)) < 1e-10);
        let obs_r = row_costs(&w, Some(&curv), CostPolicy::KfacObs).unwrap();
        let obd_r = row_costs(&w, Some(&curv), CostPolicy::KObd).unwrap();
        for (x, y) in obs_r.iter().zip(obd_r.iter()) {
            assert!((x - y).abs() < 1e-10);
        }
        let obs_c = col_costs(&w, Some(&curv), CostPolicy::KfacObs).unwrap();
        let obd_c = col_costs(&w, Some(&curv), CostPolicy::KObd).unwrap();
        for (x, y) in obs_c.iter().zip(obd_c.iter()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn element_costs_match_dense_general_solution() {
        let curv = random_curv(4, 5, 7);
        let mut rng = Rng::seed(8);
        let w = Mat::from_shape_fn((4, 5), |_| rng.normal());
        let costs = element_costs(&w, Some(&curv), CostPolicy::KfacObs).unwrap();
        let dense = dense_of(&curv);
        for k in 0..20 {
            let (_, exact) = general_update(&dense, &[k], &w).unwrap();
            let fast = costs[[k / 5, k % 5]];
            let rel = (fast - exact).abs() / exact.abs().max(1e-12);
            assert!(rel < 1e-9, "element {k}: fast={fast:.6e} exact={exact:.6e}");
        }
    }

    #[test]
    fn row_and_col_costs_match_dense_general_solution() {
        let curv = random_curv(5, 4, 17);
        let mut rng = Rng::seed(18);
        let w = Mat::from_shape_fn((5, 4), |_| rng.normal());
        let rows = row_costs(&w, Some(&curv), CostPolicy::KfacObs).unwrap();
        let cols = col_costs(&w, Some(&curv), CostPolicy::KfacObs).unwrap();
        let dense = dense_of(&curv);
        for r in 0..5 {
            let elements: Vec<usize> = (0..4).map(|c| r * 4 + c).collect();
            let (_, exact) = general_update(&dense, &elements, &w).unwrap();
            let rel = (rows[r] - exact).abs() / exact.abs().max(1e-12);
            assert!(rel < 1e-9, "row {r}");
        }
        for c in 0..4 {
            let elements: Vec<usize> = (0..5).map(|r| r * 4 + c).collect();
            let (_, exact) = general_update(&dense, &elements, &w).unwrap();
            let rel = (cols[c] - exact).abs() / exact.abs().max(1e-12);
            assert!(rel < 1e-9, "col {c}");
        }
    }

    #[test]
    fn identity_row_costs_are_half_norms_and_zero_rows_are_free() {
        let curv = KronCurvature::from_factors("i", Mat::eye(3), Mat::eye(4));
        let mut w = Mat::from_shape_fn((3, 4), |(i, j)| (i + j) as f64);
        w.row_mut(1).fill(0.0);
        let rows = row_costs(&w, Some(&curv), CostPolicy::KfacObs).unwrap();
        assert_eq!(rows[1], 0.0);
        let expected: f64 = 0.5 * w.row(0).iter().map(|x| x * x).sum::<f64>();
        assert!((rows[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn block_costs_sum_two_smallest() {
        let costs = Mat::from_shape_vec((1, 4), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let blocks = block_costs_2_4(&costs).unwrap();
        assert_eq!(blocks[[0, 0]], 3.0);
        let flat = Mat::from_elem((2, 8), 0.7);
        let blocks = block_costs_2_4(&flat).unwrap();
        for v in blocks.iter() {
            assert!((v - 1.4).abs() < 1e-15);
        }
        assert!(block_costs_2_4(&Mat::zeros((2, 6))).is_err());
    }

    #[test]
    fn block_costs_match_exhaustive_pair_search() {
        let mut rng = Rng::seed(29);
        let costs = Mat::from_shape_fn((3, 8), |_| rng.uniform());
        let blocks = block_costs_2_4(&costs).unwrap();
        for row in 0..3 {
            for b in 0..2 {
                let mut best = f64::INFINITY;
                for i in 0..4 {
                    for j in (i + 1)..4 {
                        best = best.min(costs[[row, 4 * b + i]] + costs[[row, 4 * b + j]]);
                    }
                }
                assert!((blocks[[row, b]] - best).abs() < 1e-15);
                let pair = block_cheapest_pair(&costs, row, b);
                let pair_sum = costs[[row, 4 * b + pair[0]]] + costs[[row, 4 * b + pair[1]]];
                assert!((pair_sum - best).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn magnitude_ignores_curvature() {
        let w = Mat::from_shape_vec((1, 2), vec![3.0, -2.0]).unwrap();
        let costs = element_costs(&w, None, CostPolicy::Magnitude).unwrap();
        assert_eq!(costs[[0, 0]], 4.5);
        assert_eq!(costs[[0, 1]], 2.0);
        assert!(element_costs(&w, None, CostPolicy::KObd).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn costs_are_nonnegative_under_dampened_curvature(seed in 0u64..1000) {
            let curv = random_curv(4, 4, seed);
            let mut rng = Rng::seed(seed ^ 0xABCD);
            let w = Mat::from_shape_fn((4, 4), |_| rng.normal());
            for policy in [CostPolicy::Magnitude, CostPolicy::LObd, CostPolicy::KObd, CostPolicy::KfacObs] {
                let table = CostTable::compute(&w, Some(&curv), policy).unwrap();
                table.assert_finite().unwrap();
            }
        }

        #[test]
        fn scaling_weights_scales_costs_quadratically(seed in 0u64..1000, scale in 0.1f64..10.0) {
            let curv = random_curv(3, 5, seed);
            let mut rng = Rng::seed(seed ^ 0x1234);
            let w = Mat::from_shape_fn((3, 5), |_| rng.normal());
            let scaled = &w * scale;
            for policy in [CostPolicy::Magnitude, CostPolicy::KObd, CostPolicy::KfacObs] {
                let base = CostTable::compute(&w, Some(&curv), policy).unwrap();
                let big = CostTable::compute(&scaled, Some(&curv), policy).unwrap();
                let expected = &base.element_costs * (scale * scale);
                prop_assert!(linalg::rel_fro_err(&big.element_costs, &expected) < 1e-9);
                for (x, y) in big.row_costs.iter().zip(base.row_costs.iter()) {
                    prop_assert!((x - y * scale * scale).abs() <= 1e-9 * x.abs().max(1.0));
                }
            }
        }
    }
}
