//! Multi-shot pruning orchestration: the linear sparsity schedule, per-shot
//! curvature re-estimation, global selection, correlated updates, optional
//! interleaved low-rank corrections, shot reports, and resumable state.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::costs::{CostPolicy, CostTable};
use crate::curvature::{dampen, eigendecompose, KfacAccumulator, KronCurvature};
use crate::error::{CoreError, Result};
use crate::harness::{evaluate_loss, forward_backward, Batch, LayerKind, ModelCheckpoint};
use crate::linalg::Mat;
use crate::rng::Rng;
use crate::selection::{select, LayerSelection, PruneMask, PruneMode, RemovalSelection};
use crate::updates::{
    correlated_unstructured_update, joint_row_col_update, multi_col_update, multi_row_update,
    single_structure_updates, JointStrategy, UpdateKind, UpdatePolicy, WeightDelta,
};

/// Linear sparsity schedule: alphas[t] = 1 − t·(1−α)/T, so alphas[0] = 1 and
/// alphas[T] = α.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Schedule {
    pub alphas: Vec<f64>,
}

impl Schedule {
    pub fn linear(alpha: f64, shots: usize) -> Result<Schedule> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(CoreError::config(format!(
                "schedule needs 0 < alpha < 1, got {alpha}"
            )));
        }
        if shots == 0 {
            return Err(CoreError::config("schedule needs at least one shot"));
        }
        let t = shots as f64;
        let alphas = (0..=shots)
            .map(|s| 1.0 - s as f64 * ((1.0 - alpha) / t))
            .collect();
        Ok(Schedule { alphas })
    }

    pub fn shots(&self) -> usize {
        self.alphas.len() - 1
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LoraSettings {
    pub enabled: bool,
    pub rank: usize,
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for LoraSettings {
    fn default() -> Self {
        LoraSettings {
            enabled: false,
            rank: 4,
            steps: 50,
            learning_rate: 1e-2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneSettings {
    pub mode: PruneMode,
    pub alpha: f64,
    pub shots: usize,
    pub policy: CostPolicy,
    pub update: UpdatePolicy,
    pub damp_frac_g: f64,
    pub damp_frac_a: f64,
    pub lora: LoraSettings,
    pub seed: u64,
}

impl PruneSettings {
    /// Mode-dependent defaults: structured runs use more shots and a heavier
    /// gradient-factor damp.
    pub fn defaults(mode: PruneMode, alpha: f64) -> PruneSettings {
        let structured = mode == PruneMode::Structured;
        PruneSettings {
            mode,
            alpha,
            shots: if structured { 10 } else { 5 },
            policy: CostPolicy::KfacObs,
            update: UpdatePolicy {
                kind: UpdateKind::FullCorrelation,
                max_correlated: 128,
            },
            damp_frac_g: if structured { 0.1 } else { 0.01 },
            damp_frac_a: 0.01,
            lora: LoraSettings::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(CoreError::config(format!(
                "alpha must lie in (0, 1], got {}",
                self.alpha
            )));
        }
        if self.shots == 0 {
            return Err(CoreError::config("at least one shot required"));
        }
        if self.damp_frac_g <= 0.0 || self.damp_frac_a <= 0.0 {
            return Err(CoreError::config("damp fractions must be positive"));
        }
        self.update.validate()?;
        if self.lora.enabled && self.lora.rank == 0 {
            return Err(CoreError::config("low-rank correction needs rank >= 1"));
        }
        Ok(())
    }
}

/// Cumulative removal state: one mask per prunable layer, in model order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneState {
    pub masks: Vec<PruneMask>,
}

impl PruneState {
    pub fn new(model: &ModelCheckpoint) -> PruneState {
        PruneState {
            masks: model
                .prunable_layers()
                .map(|l| PruneMask::empty(&l.name, l.weight.nrows(), l.weight.ncols()))
                .collect(),
        }
    }

    pub fn removed_count(&self) -> usize {
        self.masks.iter().map(|m| m.removed_count()).sum()
    }

    pub fn apply_hard(&self, model: &mut ModelCheckpoint) {
        for mask in &self.masks {
            if let Some(layer) = model.layer_mut(&mask.layer_name) {
                mask.apply_hard(&mut layer.weight);
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerShotStats {
    pub layer_name: String,
    pub kind: LayerKind,
    pub weight_count: usize,
    pub rows_removed: usize,
    pub cols_removed: usize,
    pub elements_removed: usize,
    /// Fraction of this layer's weights that are removed.
    pub sparsity: f64,
    pub update_frobenius: f64,
}

/// Per-shot record written to the report stream.
///
/// Wall time is kept for display but excluded from serialization so that
/// reports of identical runs are byte-identical.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShotReport {
    pub shot: usize,
    pub alpha_t: f64,
    pub tau: f64,
    pub realized_size: f64,
    pub train_loss_before: f64,
    pub train_loss_after: f64,
    pub test_loss: Option<f64>,
    pub lora_applied: bool,
    pub layers: Vec<LayerShotStats>,
    #[serde(skip_serializing, default)]
    pub wall_time_secs: f64,
}

/// Data available to the shot loop.
#[derive(Debug, Clone, Copy)]
pub struct ShotData<'a> {
    pub train: &'a [Batch],
    pub test: Option<&'a [Batch]>,
}

fn estimate_curvature(
    model: &ModelCheckpoint,
    train: &[Batch],
    settings: &PruneSettings,
) -> Result<Vec<KronCurvature>> {
    let mut accs: Vec<KfacAccumulator> = model
        .prunable_layers()
        .map(|l| KfacAccumulator::new(&l.name, l.weight.nrows(), l.weight.ncols()))
        .collect();
    for batch in train {
        let fb = forward_backward(model, batch)?;
        for (acc, tape) in accs.iter_mut().zip(&fb.tapes) {
            acc.add_tape(tape)?;
        }
    }
    accs.into_iter()
        .map(|acc| dampen(&acc.finish()?, settings.damp_frac_g, settings.damp_frac_a))
        .collect()
}

/// Cost tables for the model's current weights on fresh tapes; the same
/// computation the shot loop runs, exposed for diagnostic dumps.
pub fn cost_tables(
    model: &ModelCheckpoint,
    train: &[Batch],
    settings: &PruneSettings,
) -> Result<Vec<CostTable>> {
    let curvatures = estimate_curvature(model, train, settings)?;
    curvatures
        .iter()
        .map(|curv| {
            let layer = model
                .layer(&curv.layer_name)
                .ok_or_else(|| CoreError::shape(format!("unknown layer `{}`", curv.layer_name)))?;
            CostTable::compute(&layer.weight, Some(curv), settings.policy)
        })
        .collect()
}

fn order_elements_by_cost(sel: &LayerSelection, table: &CostTable) -> Vec<(usize, usize)> {
    let c = table.in_dim();
    let mut ordered: Vec<(usize, usize)> = sel
        .elements
        .iter()
        .map(|&flat| (flat / c, flat % c))
        .collect();
    ordered.sort_by(|&(r1, c1), &(r2, c2)| {
        table.element_costs[[r1, c1]]
            .partial_cmp(&table.element_costs[[r2, c2]])
            .unwrap()
            .then((r1 * c + c1).cmp(&(r2 * c + c2)))
    });
    ordered
}

fn layer_update(
    mode: PruneMode,
    settings: &PruneSettings,
    curv: &KronCurvature,
    table: &CostTable,
    sel: &LayerSelection,
    w: &Mat,
) -> Result<Option<WeightDelta>> {
    if sel.is_empty() || settings.update.kind == UpdateKind::None {
        return Ok(None);
    }
    let delta = match mode {
        PruneMode::Structured => {
            let (rows, cols) = (&sel.rows, &sel.cols);
            match settings.update.kind {
                UpdateKind::IndependentStructure => single_structure_updates(curv, rows, cols, w)?,
                UpdateKind::FullCorrelation => {
                    if !rows.is_empty() && !cols.is_empty() {
                        joint_row_col_update(curv, rows, cols, w, JointStrategy::Fast)?
                    } else if !rows.is_empty() {
                        multi_row_update(curv, rows, w)?
                    } else {
                        multi_col_update(curv, cols, w)?
                    }
                }
                UpdateKind::None => unreachable!(),
            }
        }
        PruneMode::Unstructured | PruneMode::Semi24 => {
            let eig = eigendecompose(curv)?;
            let ordered = order_elements_by_cost(sel, table);
            let m = match settings.update.kind {
                UpdateKind::IndependentStructure => 1,
                UpdateKind::FullCorrelation => settings.update.max_correlated,
                UpdateKind::None => unreachable!(),
            };
            correlated_unstructured_update(&eig, &ordered, m, w)?
        }
    };
    Ok(Some(delta))
}

/// One shot: tape capture, curvature estimate and dampening, costs,
/// selection at `alpha_t`, weight update, hard mask, optional low-rank
/// correction. The input model is untouched; the updated model and state
/// are returned only on success.
pub fn run_shot(
    model: &ModelCheckpoint,
    data: &ShotData<'_>,
    settings: &PruneSettings,
    state: &PruneState,
    alpha_t: f64,
    shot: usize,
) -> Result<(ModelCheckpoint, PruneState, ShotReport)> {
    let started = Instant::now();
    let train_loss_before = evaluate_loss(model, data.train)?;

    let curvatures = estimate_curvature(model, data.train, settings)?;
    let mut tables = Vec::with_capacity(curvatures.len());
    for curv in &curvatures {
        let layer = model
            .layer(&curv.layer_name)
            .ok_or_else(|| CoreError::shape(format!("unknown layer `{}`", curv.layer_name)))?;
        tables.push(CostTable::compute(
            &layer.weight,
            Some(curv),
            settings.policy,
        )?);
    }

    let selection: RemovalSelection = select(settings.mode, &tables, &state.masks, alpha_t)?;

    let mut next_model = model.clone();
    let mut next_state = state.clone();
    let mut per_layer_fro = Vec::with_capacity(tables.len());
    for (i, sel) in selection.layers.iter().enumerate() {
        let layer = next_model
            .layer_mut(&sel.layer_name)
            .expect("selection names model layer");
        let delta = layer_update(
            settings.mode,
            settings,
            &curvatures[i],
            &tables[i],
            sel,
            &layer.weight,
        )?;
        let fro = delta.as_ref().map(WeightDelta::frobenius).unwrap_or(0.0);
        per_layer_fro.push(fro);
        if let Some(delta) = delta {
            delta.apply(&mut layer.weight);
        }
        next_state.masks[i].absorb(sel);
        if settings.update.kind == UpdateKind::None {
            // Prune-only baselines zero the selection and touch nothing else.
            next_state.masks[i].apply_hard(&mut layer.weight);
        }
    }
    next_state.apply_hard(&mut next_model);
    next_model.assert_finite()?;

    let mut lora_applied = false;
    if settings.lora.enabled {
        lora_applied = lora_correct(
            &mut next_model,
            data.train,
            &next_state,
            settings.lora.rank,
            settings.lora.steps,
            settings.lora.learning_rate,
            Rng::seed_stream(settings.seed, &[0x10AA, shot as u64]),
        )?;
    }

    let train_loss_after = evaluate_loss(&next_model, data.train)?;
    let test_loss = match data.test {
        Some(test) => Some(evaluate_loss(&next_model, test)?),
        None => None,
    };

    let layers = next_state
        .masks
        .iter()
        .zip(&per_layer_fro)
        .map(|(mask, &fro)| {
            let kind = next_model
                .layer(&mask.layer_name)
                .map(|l| l.kind)
                .unwrap_or(LayerKind::Linear);
            let total = mask.elements.len();
            let removed = mask.removed_count();
            LayerShotStats {
                layer_name: mask.layer_name.clone(),
                kind,
                weight_count: total,
                rows_removed: mask.rows.iter().filter(|&&r| r).count(),
                cols_removed: mask.cols.iter().filter(|&&c| c).count(),
                elements_removed: removed,
                sparsity: removed as f64 / total as f64,
                update_frobenius: fro,
            }
        })
        .collect();

    let report = ShotReport {
        shot,
        alpha_t,
        tau: selection.tau,
        realized_size: selection.realized_size,
        train_loss_before,
        train_loss_after,
        test_loss,
        lora_applied,
        layers,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok((next_model, next_state, report))
}

/// Full multi-shot run from a fresh state. `alpha = 1` is a no-op.
pub fn run(
    model: &ModelCheckpoint,
    data: &ShotData<'_>,
    settings: &PruneSettings,
) -> Result<(ModelCheckpoint, Vec<ShotReport>)> {
    let state = PruneState::new(model);
    run_resumable(model, data, settings, state, 0, |_, _, _| Ok(()))
}

/// Multi-shot run continuing after `completed` shots with the given state.
/// `on_shot` runs after every successful shot (checkpointing, report
/// streaming); its failure aborts the run without touching earlier output.
pub fn run_resumable(
    model: &ModelCheckpoint,
    data: &ShotData<'_>,
    settings: &PruneSettings,
    state: PruneState,
    completed: usize,
    mut on_shot: impl FnMut(&ModelCheckpoint, &PruneState, &ShotReport) -> Result<()>,
) -> Result<(ModelCheckpoint, Vec<ShotReport>)> {
    settings.validate()?;
    model.assert_finite()?;
    if settings.alpha >= 1.0 {
        return Ok((model.clone(), Vec::new()));
    }
    let schedule = Schedule::linear(settings.alpha, settings.shots)?;
    if completed > settings.shots {
        return Err(CoreError::config("resume position beyond the schedule"));
    }
    let mut current = model.clone();
    let mut current_state = state;
    let mut reports = Vec::new();
    for shot in (completed + 1)..=settings.shots {
        let alpha_t = schedule.alphas[shot];
        let (next_model, next_state, report) =
            run_shot(&current, data, settings, &current_state, alpha_t, shot)?;
        on_shot(&next_model, &next_state, &report)?;
        current = next_model;
        current_state = next_state;
        reports.push(report);
    }
    Ok((current, reports))
}

/// Fits a low-rank additive correction U·V per prunable layer with the base
/// weights frozen, absorbs it, re-applies the hard mask, and reverts if the
/// training loss got worse by more than the tolerance. Returns whether the
/// correction was kept.
pub fn lora_correct(
    model: &mut ModelCheckpoint,
    train: &[Batch],
    state: &PruneState,
    rank: usize,
    steps: usize,
    lr: f64,
    mut rng: Rng,
) -> Result<bool> {
    if rank == 0 {
        return Err(CoreError::config("low-rank correction needs rank >= 1"));
    }
    if steps == 0 {
        return Ok(false);
    }
    let loss_before = evaluate_loss(model, train)?;
    let snapshot = model.clone();

    // U starts at zero so step 0 is the identity; V carries the random
    // directions that gradients flow into.
    let mut factors: Vec<(String, Mat, Mat)> = model
        .prunable_layers()
        .map(|l| {
            let (r, c) = l.weight.dim();
            let rk = rank.min(r).min(c);
            let u = Mat::zeros((r, rk));
            let scale = (1.0 / c as f64).sqrt();
            let v = Mat::from_shape_fn((rk, c), |_| rng.uniform_in(-scale, scale));
            (l.name.clone(), u, v)
        })
        .collect();

    let base: Vec<(String, Mat)> = model
        .prunable_layers()
        .map(|l| (l.name.clone(), l.weight.clone()))
        .collect();

    for step in 0..steps {
        // Effective weights W + U·V for this step.
        for ((name, u, v), (_, w0)) in factors.iter().zip(&base) {
            let layer = model.layer_mut(name).expect("layer");
            layer.weight = w0 + &u.dot(v);
        }
        let batch = &train[step % train.len()];
        let fb = forward_backward(model, batch)?;
        for ((name, u, v), (gname, grad)) in factors.iter_mut().zip(&fb.weight_grads) {
            debug_assert_eq!(name, gname);
            let du = grad.dot(&v.t());
            let dv = u.t().dot(grad);
            u.scaled_add(-lr, &du);
            v.scaled_add(-lr, &dv);
        }
    }

    // Absorb and re-impose the masks.
    for ((name, u, v), (_, w0)) in factors.iter().zip(&base) {
        let layer = model.layer_mut(name).expect("layer");
        layer.weight = w0 + &u.dot(v);
    }
    state.apply_hard(model);

    let loss_after = evaluate_loss(model, train)?;
    if !loss_after.is_finite() || loss_after > loss_before + 1e-6 {
        eprintln!(
            "warning: low-rank correction raised the training loss \
             ({loss_before:.6} -> {loss_after:.6}); reverting"
        );
        *model = snapshot;
        return Ok(false);
    }
    Ok(true)
}

/// Writes the resume file set: the model checkpoint under `<stem>` and a
/// JSON state record with the schedule position and masks.
pub fn save_resume(
    stem: impl AsRef<std::path::Path>,
    model: &ModelCheckpoint,
    state: &PruneState,
    completed: usize,
) -> Result<()> {
    crate::harness::save_model(model, &stem)?;
    let record = serde_json::json!({
        "completed_shots": completed,
        "masks": state.masks,
    });
    let path = stem.as_ref().with_extension("state.json");
    std::fs::write(path, serde_json::to_vec_pretty(&record).unwrap())?;
    Ok(())
}

pub fn load_resume(
    stem: impl AsRef<std::path::Path>,
) -> Result<(ModelCheckpoint, PruneState, usize)> {
    let model = crate::harness::load_model(&stem)?;
    let path = stem.as_ref().with_extension("state.json");
    let record: serde_json::Value = serde_json::from_slice(&std::fs::read(path)?)
        .map_err(|e| CoreError::Checkpoint(format!("resume state parse: {e}")))?;
    let completed = record["completed_shots"]
        .as_u64()
        .ok_or_else(|| CoreError::Checkpoint("resume state missing shot count".into()))?
        as usize;
    let masks: Vec<PruneMask> = serde_json::from_value(record["masks"].clone())
        .map_err(|e| CoreError::Checkpoint(format!("resume masks parse: {e}")))?;
    Ok((model, PruneState { masks }, completed))
}
