//! Randomized oracle-equivalence sweeps: every fast cost and update path is
//! checked against the dense constrained-quadratic solution on freshly
//! sampled instances. Used by the CLI `verify` subcommand and the
//! acceptance suite.

use crate::costs::{col_costs, element_costs, row_costs, CostPolicy};
use crate::curvature::{
    accumulate_kfac, dampen, dense_fisher, eigendecompose, nkp_power_method, sum_kron_fit,
    DenseCurvature, KronCurvature, RearrangedFisherMap,
};
use crate::error::Result;
use crate::harness::LayerTape;
use crate::linalg::{self, Mat, Vector};
use crate::oracle::{rearrange_svd_nkp, QuadraticObjective};
use crate::rng::Rng;
use crate::updates::{
    correlated_unstructured_update, general_update, multi_col_update, multi_row_update,
};

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    /// Worst observed error and the tolerance it was held against.
    pub worst: f64,
    pub tolerance: f64,
    pub cases: usize,
}

impl CheckOutcome {
    fn new(name: &str, tolerance: f64) -> Self {
        CheckOutcome {
            name: name.to_string(),
            passed: true,
            worst: 0.0,
            tolerance,
            cases: 0,
        }
    }

    fn record(&mut self, err: f64) {
        self.cases += 1;
        if err > self.worst {
            self.worst = err;
        }
        if err > self.tolerance {
            self.passed = false;
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{}: {} (worst {:.3e} vs tol {:.1e}, {} cases)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.worst,
            self.tolerance,
            self.cases
        )
    }
}

fn random_tape(rng: &mut Rng, n: usize, r: usize, c: usize) -> LayerTape {
    LayerTape {
        layer_name: "probe".into(),
        activations: Mat::from_shape_fn((n, c), |_| rng.normal()),
        out_grads: Mat::from_shape_fn((n, r), |_| rng.normal()),
        sample_count: n,
    }
}

fn dense_of(curv: &KronCurvature) -> DenseCurvature {
    DenseCurvature {
        layer_name: curv.layer_name.clone(),
        f: linalg::kron(&curv.g, &curv.a),
        out_dim: curv.out_dim(),
        in_dim: curv.in_dim(),
    }
}

fn delta_rel_err(fast: &Mat, exact: &Mat) -> f64 {
    linalg::frobenius(&(fast - exact)) / linalg::frobenius(exact).max(1e-9)
}

/// Every fast path against the dense general solution on random dampened
/// instances (R, C ≤ 8, N ≤ 16). Tolerance 1e-8 relative.
pub fn oracle_equivalence_suite(instances: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let tol = 1e-8;
    let mut element_cost_check = CheckOutcome::new("element costs vs dense general solution", tol);
    let mut row_cost_check = CheckOutcome::new("row costs vs dense general solution", tol);
    let mut col_cost_check = CheckOutcome::new("column costs vs dense general solution", tol);
    let mut single_row_check = CheckOutcome::new("single row/col updates vs dense", tol);
    let mut multi_row_check = CheckOutcome::new("multi row updates vs dense", tol);
    let mut multi_col_check = CheckOutcome::new("multi column updates vs dense", tol);
    let mut correlated_check = CheckOutcome::new("correlated unstructured updates vs dense", tol);

    for i in 0..instances {
        let mut rng = Rng::seed_stream(seed, &[0x0EAC, i as u64]);
        let r = 3 + rng.index(6); // 3..=8
        let c = 3 + rng.index(6);
        let n = 4 + rng.index(13); // 4..=16
        let tape = random_tape(&mut rng, n, r, c);
        let curv = dampen(&accumulate_kfac(&tape)?, 0.1, 0.01)?;
        let dense = dense_of(&curv);
        let w = Mat::from_shape_fn((r, c), |_| rng.normal());

        let elems = element_costs(&w, Some(&curv), CostPolicy::KfacObs)?;
        for _ in 0..4 {
            let k = rng.index(r * c);
            let (_, exact) = general_update(&dense, &[k], &w)?;
            element_cost_check
                .record((elems[[k / c, k % c]] - exact).abs() / exact.abs().max(1e-9));
        }

        let rows = row_costs(&w, Some(&curv), CostPolicy::KfacObs)?;
        let cols = col_costs(&w, Some(&curv), CostPolicy::KfacObs)?;
        {
            let row = rng.index(r);
            let elements: Vec<usize> = (0..c).map(|j| row * c + j).collect();
            let (exact_delta, exact) = general_update(&dense, &elements, &w)?;
            row_cost_check.record((rows[row] - exact).abs() / exact.abs().max(1e-9));
            let fast = multi_row_update(&curv, &[row], &w)?;
            single_row_check.record(delta_rel_err(&fast.delta, &exact_delta.delta));
        }
        {
            let col = rng.index(c);
            let elements: Vec<usize> = (0..r).map(|i| i * c + col).collect();
            let (exact_delta, exact) = general_update(&dense, &elements, &w)?;
            col_cost_check.record((cols[col] - exact).abs() / exact.abs().max(1e-9));
            let fast = multi_col_update(&curv, &[col], &w)?;
            single_row_check.record(delta_rel_err(&fast.delta, &exact_delta.delta));
        }

        {
            let k = 2 + rng.index((r - 2).clamp(1, 2));
            let mut picked: Vec<usize> = (0..r).collect();
            rng.shuffle(&mut picked);
            let mut rows_sel: Vec<usize> = picked[..k.min(r - 1)].to_vec();
            rows_sel.sort_unstable();
            let elements: Vec<usize> = rows_sel
                .iter()
                .flat_map(|&rr| (0..c).map(move |j| rr * c + j))
                .collect();
            let (exact_delta, _) = general_update(&dense, &elements, &w)?;
            let fast = multi_row_update(&curv, &rows_sel, &w)?;
            multi_row_check.record(delta_rel_err(&fast.delta, &exact_delta.delta));
        }
        {
            let k = 2 + rng.index((c - 2).clamp(1, 2));
            let mut picked: Vec<usize> = (0..c).collect();
            rng.shuffle(&mut picked);
            let mut cols_sel: Vec<usize> = picked[..k.min(c - 1)].to_vec();
            cols_sel.sort_unstable();
            let elements: Vec<usize> = (0..r)
                .flat_map(|i| cols_sel.iter().map(move |&cc| i * c + cc))
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .collect();
            let (exact_delta, _) = general_update(&dense, &elements, &w)?;
            let fast = multi_col_update(&curv, &cols_sel, &w)?;
            multi_col_check.record(delta_rel_err(&fast.delta, &exact_delta.delta));
        }

        {
            let eig = eigendecompose(&curv)?;
            let k = (2 + rng.index(9)).min(r * c - 1); // up to 10 correlated weights
            let mut pool: Vec<usize> = (0..r * c).collect();
            rng.shuffle(&mut pool);
            let mut flat: Vec<usize> = pool[..k].to_vec();
            flat.sort_unstable();
            let pairs: Vec<(usize, usize)> = flat.iter().map(|&e| (e / c, e % c)).collect();
            let fast = correlated_unstructured_update(&eig, &pairs, k.max(1), &w)?;
            let (exact_delta, _) = general_update(&dense, &flat, &w)?;
            correlated_check.record(delta_rel_err(&fast.delta, &exact_delta.delta));
        }
    }

    Ok(vec![
        element_cost_check,
        row_cost_check,
        col_cost_check,
        single_row_check,
        multi_row_check,
        multi_col_check,
        correlated_check,
    ])
}

/// Predicted removal costs against realized loss increases on synthetic
/// quadratics with known Kronecker curvature. Tolerance 1e-8.
pub fn quadratic_exactness_suite(removals: usize, seed: u64) -> Result<CheckOutcome> {
    let mut check = CheckOutcome::new("predicted cost vs realized quadratic increase", 1e-8);
    let mut done = 0usize;
    let mut instance = 0u64;
    while done < removals {
        let mut rng = Rng::seed_stream(seed, &[0x9AAD, instance]);
        instance += 1;
        let r = 3 + rng.index(4);
        let c = 3 + rng.index(4);
        let bg = Mat::from_shape_fn((r, r), |_| rng.normal());
        let ba = Mat::from_shape_fn((c, c), |_| rng.normal());
        let g = bg.dot(&bg.t()) + Mat::eye(r) * 0.4;
        let a = ba.dot(&ba.t()) + Mat::eye(c) * 0.4;
        let curv = KronCurvature::from_factors("quad", g, a);
        let dense = dense_of(&curv);
        let theta_star = Vector::from_iter((0..r * c).map(|_| rng.normal()));
        let obj = QuadraticObjective::new(theta_star.clone(), dense.clone())?;
        let w = obj.weight_matrix()?;

        for _ in 0..5 {
            if done >= removals {
                break;
            }
            let kind = rng.index(4);
            let elements: Vec<usize> = match kind {
                0 => vec![rng.index(r * c)],
                1 => {
                    let row = rng.index(r);
                    (0..c).map(|j| row * c + j).collect()
                }
                2 => {
                    let col = rng.index(c);
                    (0..r).map(|i| i * c + col).collect()
                }
                _ => {
                    let k = 2 + rng.index(4);
                    let mut pool: Vec<usize> = (0..r * c).collect();
                    rng.shuffle(&mut pool);
                    let mut flat = pool[..k.min(r * c - 1)].to_vec();
                    flat.sort_unstable();
                    flat
                }
            };
            let (delta, predicted) = general_update(&dense, &elements, &w)?;
            let mut theta = theta_star.clone();
            let flat_delta = linalg::vec_row(&delta.delta);
            theta += &flat_delta;
            let realized = crate::oracle::eval_quadratic(&obj, &theta);
            check.record((predicted - realized).abs() / predicted.abs().max(1.0));
            done += 1;
        }
    }
    Ok(check)
}

/// Power method vs rearrangement-SVD, σ monotonicity, and rank-2 vs rank-1
/// residuals on random small Fishers.
pub fn nkp_agreement_suite(instances: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut agreement = CheckOutcome::new("power method vs rearrangement SVD", 1e-6);
    let mut monotone = CheckOutcome::new("power method sigma non-decreasing", 1e-12);
    let mut rank2 = CheckOutcome::new("rank-2 residual <= rank-1 residual", 1e-12);

    for i in 0..instances {
        let mut rng = Rng::seed_stream(seed, &[0x17B0, i as u64]);
        let r = 2 + rng.index(4); // 2..=5
        let c = 2 + rng.index(4);
        let n = 3 + rng.index(10);
        let tape = random_tape(&mut rng, n, r, c);
        let fisher = dense_fisher(&tape)?;

        let map = RearrangedFisherMap::new(&tape)?;
        let fit = nkp_power_method(&map, None, 80)?;
        let (g_svd, a_svd) = rearrange_svd_nkp(&fisher)?;
        let from_power = linalg::kron(&fit.g, &fit.a);
        let from_svd = linalg::kron(&g_svd, &a_svd);
        agreement.record(linalg::frobenius(&(&from_power - &from_svd)));

        let mut worst_drop = 0.0f64;
        for w in fit.sigma_history.windows(2) {
            worst_drop = worst_drop.max((w[0] - w[1]).max(0.0) / w[0].abs().max(1e-300));
        }
        monotone.record(worst_drop);

        let fit1 = sum_kron_fit(&tape, 1, 60)?;
        let fit2 = sum_kron_fit(&tape, 2, 60)?;
        let r1 = linalg::frobenius(&(&fisher.f - &fit1.densify()));
        let r2 = linalg::frobenius(&(&fisher.f - &fit2.densify()));
        rank2.record((r2 - r1).max(0.0) / r1.max(1e-300));
    }
    Ok(vec![agreement, monotone, rank2])
}
