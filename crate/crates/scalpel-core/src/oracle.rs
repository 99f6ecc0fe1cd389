//! Independent brute-force ground truth: quadratic-objective evaluation,
//! exhaustive mask search on tiny instances, and the rearrangement-SVD
//! route to the nearest Kronecker product.

use crate::curvature::DenseCurvature;
use crate::error::{CoreError, Result};
use crate::linalg::{self, Mat, Vector};

/// Guard on the number of candidate sets an exhaustive search may visit.
pub const EXHAUSTIVE_MAX_SETS: u128 = 1_000_000;

/// ½(θ−θ*)ᵀ F (θ−θ*) around a fixed optimum.
#[derive(Debug, Clone)]
pub struct QuadraticObjective {
    pub theta_star: Vector,
    pub fisher: DenseCurvature,
}

impl QuadraticObjective {
    pub fn new(theta_star: Vector, fisher: DenseCurvature) -> Result<Self> {
        if theta_star.len() != fisher.f.nrows() {
            return Err(CoreError::shape("theta* length does not match the Fisher"));
        }
        // Positive definiteness is part of the contract.
        linalg::cholesky(&fisher.f)
            .map_err(|_| CoreError::numeric("quadratic objective needs a positive definite F"))?;
        Ok(QuadraticObjective { theta_star, fisher })
    }

    pub fn weight_matrix(&self) -> Result<Mat> {
        linalg::mat_from_vec_row(&self.theta_star, self.fisher.out_dim, self.fisher.in_dim)
    }
}

pub fn eval_quadratic(obj: &QuadraticObjective, theta: &Vector) -> f64 {
    let d = theta - &obj.theta_star;
    0.5 * d.dot(&obj.fisher.f.dot(&d))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    /// Candidate pool: every weight element.
    Elements,
    /// Candidate pool: every row and every column (rows listed first).
    Structures,
}

#[derive(Debug, Clone)]
pub struct ExhaustiveResult {
    /// Chosen candidate ids: flat element indices, or structure ids with
    /// rows numbered 0..R and columns R..R+C.
    pub selection: Vec<usize>,
    /// Flat weight indices the selection covers, deduplicated and sorted.
    pub elements: Vec<usize>,
    /// The exact quadratic loss of the optimal compensated removal.
    pub loss: f64,
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul((n - i) as u128) / (i as u128 + 1);
        if acc > EXHAUSTIVE_MAX_SETS * 1000 {
            return u128::MAX;
        }
    }
    acc
}

fn structure_elements(ids: &[usize], r: usize, c: usize) -> Vec<usize> {
    let rows: Vec<usize> = ids.iter().copied().filter(|&s| s < r).collect();
    let cols: Vec<usize> = ids
        .iter()
        .copied()
        .filter(|&s| s >= r)
        .map(|s| s - r)
        .collect();
    crate::updates::stack_row_col_elements(&rows, &cols, r, c)
}

/// Enumerates every removal set of size `k`, solves each with the exact
/// constrained-quadratic solution, and returns the cheapest.
///
/// The cost of each candidate mirrors the dense general solution
/// ½·θ̄ᵀ(E F⁻¹ Eᵀ)⁻¹θ̄ with F⁻¹ computed once up front.
pub fn exhaustive_best_mask(
    obj: &QuadraticObjective,
    k: usize,
    mode: MaskMode,
) -> Result<ExhaustiveResult> {
    let (r, c) = (obj.fisher.out_dim, obj.fisher.in_dim);
    let pool = match mode {
        MaskMode::Elements => r * c,
        MaskMode::Structures => r + c,
    };
    if k == 0 || k > pool {
        return Err(CoreError::config(format!(
            "cannot choose {k} of {pool} candidates"
        )));
    }
    let sets = binomial(pool, k);
    if sets > EXHAUSTIVE_MAX_SETS {
        return Err(CoreError::OracleScale(format!(
            "{sets} candidate sets exceed the exhaustive guard of {EXHAUSTIVE_MAX_SETS}"
        )));
    }

    let f_inv = linalg::spd_inverse(&obj.fisher.f)?;
    let mut best: Option<ExhaustiveResult> = None;

    let mut combo: Vec<usize> = (0..k).collect();
    loop {
        let elements = match mode {
            MaskMode::Elements => combo.clone(),
            MaskMode::Structures => structure_elements(&combo, r, c),
        };
        let kk = elements.len();
        let m = Mat::from_shape_fn((kk, kk), |(i, j)| f_inv[[elements[i], elements[j]]]);
        let theta_bar = Vector::from_iter(elements.iter().map(|&e| obj.theta_star[e]));
        if let Ok(u) = linalg::spd_solve_vec(&m, &theta_bar) {
            let loss = 0.5 * theta_bar.dot(&u);
            let better = best.as_ref().map(|b| loss < b.loss).unwrap_or(true);
            if better {
                best = Some(ExhaustiveResult {
                    selection: combo.clone(),
                    elements,
                    loss,
                });
            }
        }

        // Next lexicographic combination.
        let mut i = k;
        loop {
            if i == 0 {
                return best.ok_or_else(|| CoreError::numeric("every candidate set was singular"));
            }
            i -= 1;
            if combo[i] != i + pool - k {
                break;
            }
        }
        combo[i] += 1;
        for j in (i + 1)..k {
            combo[j] = combo[j - 1] + 1;
        }
    }
}

/// The rearrangement R(F) ∈ R^{R²×C²}: R(F)[r1·R+r2, c1·C+c2] = F[r1·C+c1, r2·C+c2].
/// For F = G⊗A this equals vec(G)·vec(A)ᵀ.
pub fn rearrange(fisher: &DenseCurvature) -> Mat {
    let (r, c) = (fisher.out_dim, fisher.in_dim);
    Mat::from_shape_fn((r * r, c * c), |(i, j)| {
        let (r1, r2) = (i / r, i % r);
        let (c1, c2) = (j / c, j % c);
        fisher.f[[r1 * c + c1, r2 * c + c2]]
    })
}

/// Nearest Kronecker product via a full SVD of the rearranged Fisher: the
/// leading singular triplet reshaped into factors, each scaled by √σ₁.
pub fn rearrange_svd_nkp(fisher: &DenseCurvature) -> Result<(Mat, Mat)> {
    let (r, c) = (fisher.out_dim, fisher.in_dim);
    if r * c > crate::curvature::ORACLE_MAX_WEIGHTS {
        return Err(CoreError::OracleScale(
            "rearrangement SVD beyond oracle scale".into(),
        ));
    }
    let rearranged = rearrange(fisher);
    let (u, s, vt) = linalg::svd(&rearranged)?;
    let scale = s[0].sqrt();
    let g_vec = Vector::from_iter((0..r * r).map(|i| u[[i, 0]] * scale));
    let a_vec = Vector::from_iter((0..c * c).map(|j| vt[[0, j]] * scale));
    Ok((
        linalg::mat_from_vec_row(&g_vec, r, r)?,
        linalg::mat_from_vec_row(&a_vec, c, c)?,
    ))
}

/// All singular values of the rearranged Fisher, descending.
pub fn rearranged_singular_values(fisher: &DenseCurvature) -> Result<Vector> {
    let (_, s, _) = linalg::svd(&rearrange(fisher))?;
    Ok(s)
}
