//! Per-layer curvature estimation from tapes: Kronecker factor pairs,
//! dampening, eigendecompositions, factor inverses, the dense oracle-scale
//! Fisher, and nearest-Kronecker-product fits via matrix-free power
//! iterations.

use crate::error::{CoreError, Result};
use crate::harness::LayerTape;
use crate::linalg::{self, Mat, Vector};

/// The dense Fisher oracle refuses layers with more than this many weights.
pub const ORACLE_MAX_WEIGHTS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dampening {
    pub lambda_g: f64,
    pub lambda_a: f64,
}

/// Kronecker factor pair (G, A) for one layer. `G` is the R×R output-gradient
/// factor, `A` the C×C activation factor, each carrying a 1/√N so that the
/// product G⊗A carries 1/N total.
#[derive(Debug, Clone)]
pub struct KronCurvature {
    pub layer_name: String,
    pub g: Mat,
    pub a: Mat,
    /// Present once dampening has been applied.
    pub damp: Option<Dampening>,
    pub sample_count: usize,
}

impl KronCurvature {
    pub fn out_dim(&self) -> usize {
        self.g.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn weight_count(&self) -> usize {
        self.out_dim() * self.in_dim()
    }

    /// Wraps externally constructed factors (synthetic instances, tests).
    pub fn from_factors(layer_name: impl Into<String>, g: Mat, a: Mat) -> Self {
        KronCurvature {
            layer_name: layer_name.into(),
            g,
            a,
            damp: None,
            sample_count: 0,
        }
    }
}

/// Eigendecomposed factor pair: G = K1 diag(s1) K1ᵀ, A = K2 diag(s2) K2ᵀ.
#[derive(Debug, Clone)]
pub struct EigenCurvature {
    pub layer_name: String,
    pub k1: Mat,
    pub s1: Vector,
    pub k2: Mat,
    pub s2: Vector,
}

impl EigenCurvature {
    /// The R×C eigenvalue grid s1·s2ᵀ of G⊗A.
    pub fn eigen_grid(&self) -> Mat {
        let (r, c) = (self.s1.len(), self.s2.len());
        Mat::from_shape_fn((r, c), |(i, j)| self.s1[i] * self.s2[j])
    }
}

/// Sum-of-Kronecker curvature: F ≈ Σ_i G_i ⊗ A_i.
#[derive(Debug, Clone)]
pub struct SumKronCurvature {
    pub layer_name: String,
    pub terms: Vec<(Mat, Mat)>,
}

impl SumKronCurvature {
    pub fn densify(&self) -> Mat {
        let (r, c) = (self.terms[0].0.nrows(), self.terms[0].1.nrows());
        let mut f = Mat::zeros((r * c, r * c));
        for (g, a) in &self.terms {
            f = f + linalg::kron(g, a);
        }
        f
    }
}

/// Exact per-layer Fisher block, oracle scale only.
#[derive(Debug, Clone)]
pub struct DenseCurvature {
    pub layer_name: String,
    pub f: Mat,
    pub out_dim: usize,
    pub in_dim: usize,
}

/// Accumulates the undamped Kronecker factors from a tape:
/// G = (1/√N)·Σ g gᵀ and A = (1/√N)·Σ a aᵀ.
pub fn accumulate_kfac(tape: &LayerTape) -> Result<KronCurvature> {
    if tape.sample_count == 0 {
        return Err(CoreError::config("tape has no samples"));
    }
    tape.assert_finite()?;
    let scale = 1.0 / (tape.sample_count as f64).sqrt();
    let g = tape.out_grads.t().dot(&tape.out_grads) * scale;
    let a = tape.activations.t().dot(&tape.activations) * scale;
    Ok(KronCurvature {
        layer_name: tape.layer_name.clone(),
        g,
        a,
        damp: None,
        sample_count: tape.sample_count,
    })
}

/// Streaming factor accumulation over several tapes of the same layer; the
/// reduction is associative and commutative up to float reassociation.
#[derive(Debug, Clone)]
pub struct KfacAccumulator {
    layer_name: String,
    g_sum: Mat,
    a_sum: Mat,
    samples: usize,
}

impl KfacAccumulator {
    pub fn new(layer_name: impl Into<String>, out_dim: usize, in_dim: usize) -> Self {
        KfacAccumulator {
            layer_name: layer_name.into(),
            g_sum: Mat::zeros((out_dim, out_dim)),
            a_sum: Mat::zeros((in_dim, in_dim)),
            samples: 0,
        }
    }

    pub fn add_tape(&mut self, tape: &LayerTape) -> Result<()> {
        if tape.layer_name != self.layer_name {
            return Err(CoreError::shape(format!(
                "tape `{}` fed to accumulator `{}`",
                tape.layer_name, self.layer_name
            )));
        }
        tape.assert_finite()?;
        self.g_sum += &tape.out_grads.t().dot(&tape.out_grads);
        self.a_sum += &tape.activations.t().dot(&tape.activations);
        self.samples += tape.sample_count;
        Ok(())
    }

    pub fn finish(self) -> Result<KronCurvature> {
        if self.samples == 0 {
            return Err(CoreError::config("accumulator saw no samples"));
        }
        let scale = 1.0 / (self.samples as f64).sqrt();
        Ok(KronCurvature {
            layer_name: self.layer_name,
            g: self.g_sum * scale,
            a: self.a_sum * scale,
            damp: None,
            sample_count: self.samples,
        })
    }
}

/// Adds `frac · mean(diag)` to each factor's diagonal and records the shift.
pub fn dampen(curv: &KronCurvature, frac_g: f64, frac_a: f64) -> Result<KronCurvature> {
    if frac_g <= 0.0 || frac_a <= 0.0 {
        return Err(CoreError::config("damp fractions must be positive"));
    }
    let mean_diag = |m: &Mat| m.diag().sum() / m.nrows() as f64;
    let dg = mean_diag(&curv.g);
    let da = mean_diag(&curv.a);
    if dg <= 0.0 || da <= 0.0 {
        return Err(CoreError::DegenerateCurvature(format!(
            "layer `{}` has a non-positive mean factor diagonal (g: {dg:.3e}, a: {da:.3e})",
            curv.layer_name
        )));
    }
    let lambda_g = frac_g * dg;
    let lambda_a = frac_a * da;
    let mut g = curv.g.clone();
    let mut a = curv.a.clone();
    for i in 0..g.nrows() {
        g[[i, i]] += lambda_g;
    }
    for i in 0..a.nrows() {
        a[[i, i]] += lambda_a;
    }
    Ok(KronCurvature {
        layer_name: curv.layer_name.clone(),
        g,
        a,
        damp: Some(Dampening { lambda_g, lambda_a }),
        sample_count: curv.sample_count,
    })
}

/// Eigendecomposes both factors. Fails if either factor is not positive
/// definite (i.e. the curvature was not dampened enough).
pub fn eigendecompose(curv: &KronCurvature) -> Result<EigenCurvature> {
    let (s1, k1) = linalg::sym_eigen(&curv.g)?;
    let (s2, k2) = linalg::sym_eigen(&curv.a)?;
    if s1.iter().chain(s2.iter()).any(|&v| v <= 0.0) {
        return Err(CoreError::DegenerateCurvature(format!(
            "layer `{}` has non-positive factor eigenvalues; dampen first",
            curv.layer_name
        )));
    }
    Ok(EigenCurvature {
        layer_name: curv.layer_name.clone(),
        k1,
        s1,
        k2,
        s2,
    })
}

/// Factor inverses (G⁻¹, A⁻¹), so the full inverse is their Kronecker product.
pub fn factor_inverses(curv: &KronCurvature) -> Result<(Mat, Mat)> {
    let g_inv = linalg::spd_inverse(&curv.g)
        .map_err(|e| CoreError::numeric(format!("layer `{}` G factor: {e}", curv.layer_name)))?;
    let a_inv = linalg::spd_inverse(&curv.a)
        .map_err(|e| CoreError::numeric(format!("layer `{}` A factor: {e}", curv.layer_name)))?;
    Ok((g_inv, a_inv))
}

/// Exact dense Fisher block F = (1/N)·Σ (g gᵀ)⊗(a aᵀ), for oracle-scale
/// layers only.
pub fn dense_fisher(tape: &LayerTape) -> Result<DenseCurvature> {
    let n = tape.sample_count;
    if n == 0 {
        return Err(CoreError::config("tape has no samples"));
    }
    tape.assert_finite()?;
    let r = tape.out_grads.ncols();
    let c = tape.activations.ncols();
    if r * c > ORACLE_MAX_WEIGHTS {
        return Err(CoreError::OracleScale(format!(
            "dense Fisher for layer `{}` needs {}x{} = {} weights (max {ORACLE_MAX_WEIGHTS})",
            tape.layer_name,
            r,
            c,
            r * c
        )));
    }
    let p = r * c;
    let mut f = Mat::zeros((p, p));
    for s in 0..n {
        // vec_row(g aᵀ) outer itself equals (g gᵀ)⊗(a aᵀ).
        let mut u = Vector::zeros(p);
        for i in 0..r {
            let gi = tape.out_grads[[s, i]];
            for j in 0..c {
                u[i * c + j] = gi * tape.activations[[s, j]];
            }
        }
        for i in 0..p {
            if u[i] == 0.0 {
                continue;
            }
            for j in 0..p {
                f[[i, j]] += u[i] * u[j];
            }
        }
    }
    f.mapv_inplace(|v| v / n as f64);
    Ok(DenseCurvature {
        layer_name: tape.layer_name.clone(),
        f,
        out_dim: r,
        in_dim: c,
    })
}

/// Matrix-free application of the rearranged Fisher R(F) and its transpose,
/// built from a tape, with optional deflation terms subtracted.
///
/// R(F)·vec(Ã) = (1/N)·Σ_n (a_nᵀ Ã a_n)·vec(g_n g_nᵀ), and the transpose swaps
/// the roles of gradients and activations.
pub struct RearrangedFisherMap<'a> {
    tape: &'a LayerTape,
    deflation: Vec<(Mat, Mat)>,
}

impl<'a> RearrangedFisherMap<'a> {
    pub fn new(tape: &'a LayerTape) -> Result<Self> {
        if tape.sample_count == 0 {
            return Err(CoreError::config("tape has no samples"));
        }
        tape.assert_finite()?;
        Ok(RearrangedFisherMap {
            tape,
            deflation: Vec::new(),
        })
    }

    pub fn out_dim(&self) -> usize {
        self.tape.out_grads.ncols()
    }

    pub fn in_dim(&self) -> usize {
        self.tape.activations.ncols()
    }

    /// Subtracts G ⊗ A from the represented Fisher.
    pub fn push_deflation(&mut self, g: Mat, a: Mat) {
        self.deflation.push((g, a));
    }

    /// R(F)·vec(a_tilde), reshaped to R×R.
    pub fn apply(&self, a_tilde: &Mat) -> Mat {
        let n = self.tape.sample_count as f64;
        let acts = &self.tape.activations;
        let grads = &self.tape.out_grads;
        // w_n = a_nᵀ Ã a_n for every sample at once.
        let ta = acts.dot(a_tilde);
        let w: Vec<f64> = ta
            .rows()
            .into_iter()
            .zip(acts.rows())
            .map(|(x, y)| x.dot(&y))
            .collect();
        let mut weighted = grads.clone();
        for (mut row, &wn) in weighted.rows_mut().into_iter().zip(w.iter()) {
            row.mapv_inplace(|v| v * wn);
        }
        let mut out = weighted.t().dot(grads) / n;
        for (dg, da) in &self.deflation {
            let inner: f64 = da.iter().zip(a_tilde.iter()).map(|(x, y)| x * y).sum();
            out -= &(dg * inner);
        }
        out
    }

    /// R(F)ᵀ·vec(g_tilde), reshaped to C×C.
    pub fn apply_transpose(&self, g_tilde: &Mat) -> Mat {
        let n = self.tape.sample_count as f64;
        let acts = &self.tape.activations;
        let grads = &self.tape.out_grads;
        let tg = grads.dot(g_tilde);
        let w: Vec<f64> = tg
            .rows()
            .into_iter()
            .zip(grads.rows())
            .map(|(x, y)| x.dot(&y))
            .collect();
        let mut weighted = acts.clone();
        for (mut row, &wn) in weighted.rows_mut().into_iter().zip(w.iter()) {
            row.mapv_inplace(|v| v * wn);
        }
        let mut out = weighted.t().dot(acts) / n;
        for (dg, da) in &self.deflation {
            let inner: f64 = dg.iter().zip(g_tilde.iter()).map(|(x, y)| x * y).sum();
            out -= &(da * inner);
        }
        out
    }
}

/// Result of a nearest-Kronecker-product power fit. Each factor is scaled by
/// √σ, so `g ⊗ a` is the rank-one approximation itself.
#[derive(Debug, Clone)]
pub struct NkpFit {
    pub g: Mat,
    pub a: Mat,
    pub sigma: f64,
    /// σ estimate per iteration; non-decreasing for a fixed map.
    pub sigma_history: Vec<f64>,
}

pub const NKP_COLD_START_ITERS: usize = 20;
pub const NKP_WARM_START_ITERS: usize = 1;

/// Power iterations on the rearranged Fisher. `init` warm-starts from a
/// previous fit's factors; cold starts use all-ones vectors.
pub fn nkp_power_method(
    map: &RearrangedFisherMap<'_>,
    init: Option<(&Mat, &Mat)>,
    iters: usize,
) -> Result<NkpFit> {
    if iters == 0 {
        return Err(CoreError::config(
            "power method needs at least one iteration",
        ));
    }
    let (r, c) = (map.out_dim(), map.in_dim());
    let mut a_tilde = match init {
        Some((_, a0)) => {
            let norm = linalg::frobenius(a0);
            if norm == 0.0 {
                return Err(CoreError::DegenerateCurvature(
                    "zero warm-start factor".into(),
                ));
            }
            a0 / norm
        }
        None => Mat::ones((c, c)) / (c as f64),
    };
    let mut g_tilde = Mat::zeros((r, r));
    let mut sigma = 0.0;
    let mut sigma_history = Vec::with_capacity(iters);
    for _ in 0..iters {
        let raw_g = map.apply(&a_tilde);
        let g_norm = linalg::frobenius(&raw_g);
        if g_norm == 0.0 {
            return Err(CoreError::DegenerateCurvature(
                "rearranged Fisher annihilated the iterate (zero tape?)".into(),
            ));
        }
        g_tilde = raw_g / g_norm;
        let raw_a = map.apply_transpose(&g_tilde);
        sigma = linalg::frobenius(&raw_a);
        if sigma == 0.0 {
            return Err(CoreError::DegenerateCurvature("zero singular value".into()));
        }
        a_tilde = raw_a / sigma;
        sigma_history.push(sigma);
    }
    let scale = sigma.sqrt();
    Ok(NkpFit {
        g: g_tilde * scale,
        a: a_tilde * scale,
        sigma,
        sigma_history,
    })
}

/// Writes per-layer factor pairs in the manifest+blob checkpoint format,
/// with dampening records and sample counts in the manifest.
pub fn save_snapshot(
    stem: impl AsRef<std::path::Path>,
    curvatures: &[KronCurvature],
) -> Result<()> {
    let mut tensors = Vec::with_capacity(curvatures.len() * 2);
    let mut meta = Vec::with_capacity(curvatures.len());
    for curv in curvatures {
        tensors.push((format!("{}.g", curv.layer_name), &curv.g));
        tensors.push((format!("{}.a", curv.layer_name), &curv.a));
        meta.push(serde_json::json!({
            "layer": curv.layer_name,
            "sample_count": curv.sample_count,
            "lambda_g": curv.damp.map(|d| d.lambda_g),
            "lambda_a": curv.damp.map(|d| d.lambda_a),
        }));
    }
    crate::harness::save_tensors(stem, &tensors, Some(serde_json::json!({ "layers": meta })))
}

pub fn load_snapshot(stem: impl AsRef<std::path::Path>) -> Result<Vec<KronCurvature>> {
    let (tensors, extra) = crate::harness::load_tensors(stem)?;
    let extra = extra.ok_or_else(|| CoreError::Checkpoint("snapshot has no metadata".into()))?;
    let layers = extra["layers"]
        .as_array()
        .ok_or_else(|| CoreError::Checkpoint("snapshot metadata malformed".into()))?;
    let lookup: std::collections::HashMap<&str, &Mat> =
        tensors.iter().map(|(n, m)| (n.as_str(), m)).collect();
    let mut out = Vec::with_capacity(layers.len());
    for meta in layers {
        let name = meta["layer"]
            .as_str()
            .ok_or_else(|| CoreError::Checkpoint("snapshot layer missing name".into()))?;
        let g = lookup
            .get(format!("{name}.g").as_str())
            .ok_or_else(|| CoreError::Checkpoint(format!("snapshot missing `{name}.g`")))?;
        let a = lookup
            .get(format!("{name}.a").as_str())
            .ok_or_else(|| CoreError::Checkpoint(format!("snapshot missing `{name}.a`")))?;
        let damp = match (meta["lambda_g"].as_f64(), meta["lambda_a"].as_f64()) {
            (Some(lambda_g), Some(lambda_a)) => Some(Dampening { lambda_g, lambda_a }),
            _ => None,
        };
        out.push(KronCurvature {
            layer_name: name.to_string(),
            g: (*g).clone(),
            a: (*a).clone(),
            damp,
            sample_count: meta["sample_count"].as_u64().unwrap_or(0) as usize,
        });
    }
    Ok(out)
}

/// Fits a sum of `rank_k` Kronecker products by power iterations with
/// deflation. Only rank 1 and 2 are supported, and rank 2 is restricted to
/// oracle-scale layers.
pub fn sum_kron_fit(tape: &LayerTape, rank_k: usize, iters: usize) -> Result<SumKronCurvature> {
    if rank_k == 0 || rank_k > 2 {
        return Err(CoreError::config(format!(
            "unsupported Kronecker sum rank {rank_k}"
        )));
    }
    let mut map = RearrangedFisherMap::new(tape)?;
    if rank_k == 2 && map.out_dim() * map.in_dim() > ORACLE_MAX_WEIGHTS {
        return Err(CoreError::OracleScale(
            "rank-2 Kronecker sums are restricted to oracle-scale layers".into(),
        ));
    }
    let mut terms = Vec::with_capacity(rank_k);
    for _ in 0..rank_k {
        let fit = nkp_power_method(&map, None, iters)?;
        map.push_deflation(fit.g.clone(), fit.a.clone());
        terms.push((fit.g, fit.a));
    }
    Ok(SumKronCurvature {
        layer_name: tape.layer_name.clone(),
        terms,
    })
}
