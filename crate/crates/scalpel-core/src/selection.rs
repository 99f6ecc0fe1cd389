//! Global-threshold removal selection: converts cost tables across all
//! layers into a removal set for unstructured, 2:4 semi-structured, or
//! structured pruning, with dynamic allocation across layers and monotone
//! masks across shots.

use serde::{Deserialize, Serialize};

use crate::costs::{block_cheapest_pair, block_costs_2_4, CostTable};
use crate::error::{CoreError, Result};
use crate::linalg::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PruneMode {
    #[serde(rename = "unstructured")]
    Unstructured,
    #[serde(rename = "semi-2:4")]
    Semi24,
    #[serde(rename = "structured")]
    Structured,
}

impl std::fmt::Display for PruneMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PruneMode::Unstructured => write!(f, "unstructured"),
            PruneMode::Semi24 => write!(f, "semi-2:4"),
            PruneMode::Structured => write!(f, "structured"),
        }
    }
}

/// Cumulative removal state for one layer. Grows monotonically across shots.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneMask {
    pub layer_name: String,
    pub rows: Vec<bool>,
    pub cols: Vec<bool>,
    /// Flat row-major flags of every removed cell, including cells covered
    /// by removed rows/columns.
    pub elements: Vec<bool>,
}

impl PruneMask {
    pub fn empty(layer_name: impl Into<String>, r: usize, c: usize) -> Self {
        PruneMask {
            layer_name: layer_name.into(),
            rows: vec![false; r],
            cols: vec![false; c],
            elements: vec![false; r * c],
        }
    }

    pub fn out_dim(&self) -> usize {
        self.rows.len()
    }

    pub fn in_dim(&self) -> usize {
        self.cols.len()
    }

    pub fn removed_count(&self) -> usize {
        self.elements.iter().filter(|&&e| e).count()
    }

    pub fn live_rows(&self) -> usize {
        self.rows.iter().filter(|&&r| !r).count()
    }

    pub fn live_cols(&self) -> usize {
        self.cols.iter().filter(|&&c| !c).count()
    }

    /// Marks a whole row and its cells removed.
    pub fn remove_row(&mut self, r: usize) {
        self.rows[r] = true;
        let c = self.in_dim();
        for j in 0..c {
            self.elements[r * c + j] = true;
        }
    }

    pub fn remove_col(&mut self, col: usize) {
        self.cols[col] = true;
        let c = self.in_dim();
        for i in 0..self.out_dim() {
            self.elements[i * c + col] = true;
        }
    }

    pub fn remove_element(&mut self, flat: usize) {
        self.elements[flat] = true;
    }

    /// Folds a per-layer selection into the mask.
    pub fn absorb(&mut self, sel: &LayerSelection) {
        for &r in &sel.rows {
            self.remove_row(r);
        }
        for &c in &sel.cols {
            self.remove_col(c);
        }
        for &e in &sel.elements {
            self.remove_element(e);
        }
    }

    /// Forces every masked cell of `w` to exactly zero.
    pub fn apply_hard(&self, w: &mut Mat) {
        let c = self.in_dim();
        for (flat, &removed) in self.elements.iter().enumerate() {
            if removed {
                w[[flat / c, flat % c]] = 0.0;
            }
        }
    }

    /// True when `other` removes everything this mask removes.
    pub fn is_subset_of(&self, other: &PruneMask) -> bool {
        self.elements
            .iter()
            .zip(&other.elements)
            .all(|(a, b)| !*a || *b)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerSelection {
    pub layer_name: String,
    /// Flat row-major element indices (unstructured / semi-structured).
    pub elements: Vec<usize>,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
}

impl LayerSelection {
    fn new(layer_name: &str) -> Self {
        LayerSelection {
            layer_name: layer_name.to_string(),
            elements: Vec::new(),
            rows: Vec::new(),
            cols: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty() && self.rows.is_empty() && self.cols.is_empty()
    }
}

/// The chosen removal set for one shot, across all layers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RemovalSelection {
    pub mode: PruneMode,
    pub layers: Vec<LayerSelection>,
    /// Global cost threshold that produced the selection; −∞ when nothing
    /// new was selected.
    pub tau: f64,
    pub target_size: f64,
    pub realized_size: f64,
}

fn validate_inputs(tables: &[CostTable], masks: &[PruneMask]) -> Result<()> {
    if tables.len() != masks.len() {
        return Err(CoreError::shape("one mask per cost table required"));
    }
    for (t, m) in tables.iter().zip(masks) {
        if t.layer_name != m.layer_name {
            return Err(CoreError::shape(format!(
                "mask `{}` does not match table `{}`",
                m.layer_name, t.layer_name
            )));
        }
        if t.out_dim() != m.out_dim() || t.in_dim() != m.in_dim() {
            return Err(CoreError::shape(format!(
                "mask dims mismatch for `{}`",
                t.layer_name
            )));
        }
        t.assert_finite()?;
    }
    Ok(())
}

fn check_alpha(alpha_t: f64) -> Result<()> {
    if !(alpha_t > 0.0 && alpha_t <= 1.0) {
        return Err(CoreError::config(format!(
            "alpha must lie in (0, 1], got {alpha_t}"
        )));
    }
    Ok(())
}

/// Removes the ⌊(1−α)·P⌋ cheapest weights network-wide. Weights already
/// removed by earlier shots sort first, keeping masks monotone.
pub fn select_unstructured(
    tables: &[CostTable],
    masks: &[PruneMask],
    alpha_t: f64,
) -> Result<RemovalSelection> {
    check_alpha(alpha_t)?;
    validate_inputs(tables, masks)?;
    let total: usize = tables.iter().map(|t| t.weight_count()).sum();
    let prior: usize = masks.iter().map(|m| m.removed_count()).sum();
    let target = (((1.0 - alpha_t) * total as f64).floor() as usize).max(prior);

    // (already_removed, cost, layer, flat_index)
    let mut candidates: Vec<(bool, f64, usize, usize)> = Vec::with_capacity(total);
    for (li, (table, mask)) in tables.iter().zip(masks).enumerate() {
        for (flat, &removed) in mask.elements.iter().enumerate() {
            let cost = table.element_costs[[flat / table.in_dim(), flat % table.in_dim()]];
            candidates.push((removed, cost, li, flat));
        }
    }
    candidates.sort_by(|a, b| {
        b.0.cmp(&a.0)
            .then(a.1.partial_cmp(&b.1).unwrap())
            .then(a.2.cmp(&b.2))
            .then(a.3.cmp(&b.3))
    });

    let mut layers: Vec<LayerSelection> = tables
        .iter()
        .map(|t| LayerSelection::new(&t.layer_name))
        .collect();
    let mut tau = f64::NEG_INFINITY;
    for &(_, cost, li, flat) in candidates.iter().take(target) {
        layers[li].elements.push(flat);
        tau = tau.max(cost);
    }
    if target == 0 {
        tau = f64::NEG_INFINITY;
    }
    for sel in &mut layers {
        sel.elements.sort_unstable();
    }
    Ok(RemovalSelection {
        mode: PruneMode::Unstructured,
        layers,
        tau,
        target_size: alpha_t,
        realized_size: 1.0 - target as f64 / total as f64,
    })
}

/// Selects whole 2:4 blocks (two lowest-cost elements of each block) in
/// global block-cost order until the removal budget is met. At α = 0.5 every
/// block is selected, yielding a full 2:4 mask.
pub fn select_semi_2_4(
    tables: &[CostTable],
    masks: &[PruneMask],
    alpha_t: f64,
) -> Result<RemovalSelection> {
    if !(0.5..=1.0).contains(&alpha_t) {
        return Err(CoreError::Infeasible {
            layer: "network".into(),
            reason: format!("2:4 sparsity cannot go below size 0.5 (requested {alpha_t})"),
        });
    }
    validate_inputs(tables, masks)?;

    let total: usize = tables.iter().map(|t| t.weight_count()).sum();
    let prior: usize = masks.iter().map(|m| m.removed_count()).sum();
    let target = (((1.0 - alpha_t) * total as f64).floor() as usize).max(prior);

    // (already_selected, block_cost, layer, row, block); a block counts as
    // previously selected when it already holds two removed cells.
    let mut candidates: Vec<(bool, f64, usize, usize, usize)> = Vec::new();
    let mut block_grids = Vec::with_capacity(tables.len());
    for (li, (table, mask)) in tables.iter().zip(masks).enumerate() {
        let grid = block_costs_2_4(&table.element_costs)?;
        for row in 0..grid.nrows() {
            for b in 0..grid.ncols() {
                let removed_in_block = (0..4)
                    .filter(|k| mask.elements[row * table.in_dim() + 4 * b + k])
                    .count();
                let prior_block = removed_in_block >= 2;
                let cost = if prior_block { 0.0 } else { grid[[row, b]] };
                candidates.push((prior_block, cost, li, row, b));
            }
        }
        block_grids.push(grid);
    }
    candidates.sort_by(|a, b| {
        b.0.cmp(&a.0)
            .then(a.1.partial_cmp(&b.1).unwrap())
            .then(a.2.cmp(&b.2))
            .then(a.3.cmp(&b.3))
            .then(a.4.cmp(&b.4))
    });

    let mut layers: Vec<LayerSelection> = tables
        .iter()
        .map(|t| LayerSelection::new(&t.layer_name))
        .collect();
    let mut removed = 0usize;
    let mut tau = f64::NEG_INFINITY;
    for &(prior_block, cost, li, row, b) in &candidates {
        if removed + 2 > target {
            break;
        }
        let table = &tables[li];
        let c_dim = table.in_dim();
        if prior_block {
            for k in 0..4 {
                let flat = row * c_dim + 4 * b + k;
                if masks[li].elements[flat] {
                    layers[li].elements.push(flat);
                }
            }
        } else {
            let pair = block_cheapest_pair(&table.element_costs, row, b);
            for off in pair {
                layers[li].elements.push(row * c_dim + 4 * b + off);
            }
        }
        removed += 2;
        tau = tau.max(cost);
    }
    if removed == 0 {
        tau = f64::NEG_INFINITY;
    }
    for sel in &mut layers {
        sel.elements.sort_unstable();
    }
    Ok(RemovalSelection {
        mode: PruneMode::Semi24,
        layers,
        tau,
        target_size: alpha_t,
        realized_size: 1.0 - removed as f64 / total as f64,
    })
}

/// Greedy structured selection: all rows and columns of all layers are
/// scored by cost per live element (live dims taken after prior shots) and
/// admitted cheapest-first, discounting cells already covered, until the
/// removal budget is reached. Never removes a layer's last live row or
/// column.
pub fn select_structured(
    tables: &[CostTable],
    masks: &[PruneMask],
    alpha_t: f64,
) -> Result<RemovalSelection> {
    check_alpha(alpha_t)?;
    validate_inputs(tables, masks)?;

    let total: usize = tables.iter().map(|t| t.weight_count()).sum();
    let prior: usize = masks.iter().map(|m| m.removed_count()).sum();
    let target = (((1.0 - alpha_t) * total as f64).floor() as usize).max(prior);

    #[derive(Clone, Copy)]
    enum Kind {
        Row,
        Col,
    }
    // (already_removed, score, layer, kind, index)
    let mut candidates: Vec<(bool, f64, usize, Kind, usize)> = Vec::new();
    for (li, (table, mask)) in tables.iter().zip(masks).enumerate() {
        let live_cols = mask.live_cols().max(1) as f64;
        let live_rows = mask.live_rows().max(1) as f64;
        for r in 0..table.out_dim() {
            let score = table.row_costs[r] / live_cols;
            candidates.push((mask.rows[r], score, li, Kind::Row, r));
        }
        for c in 0..table.in_dim() {
            let score = table.col_costs[c] / live_rows;
            candidates.push((mask.cols[c], score, li, Kind::Col, c));
        }
    }
    candidates.sort_by(|a, b| {
        b.0.cmp(&a.0)
            .then(a.1.partial_cmp(&b.1).unwrap())
            .then(a.2.cmp(&b.2))
            .then(match (a.3, b.3) {
                (Kind::Row, Kind::Col) => std::cmp::Ordering::Less,
                (Kind::Col, Kind::Row) => std::cmp::Ordering::Greater,
                _ => std::cmp::Ordering::Equal,
            })
            .then(a.4.cmp(&b.4))
    });

    let mut working: Vec<PruneMask> = masks
        .iter()
        .map(|m| PruneMask::empty(&m.layer_name, m.out_dim(), m.in_dim()))
        .collect();
    let mut layers: Vec<LayerSelection> = tables
        .iter()
        .map(|t| LayerSelection::new(&t.layer_name))
        .collect();
    let mut removed = 0usize;
    let mut tau = f64::NEG_INFINITY;
    let mut blocked_layer: Option<String> = None;
    let mut admitted_any = false;

    for &(prior_flag, score, li, kind, idx) in &candidates {
        if removed >= target {
            break;
        }
        let mask = &mut working[li];
        let c_dim = mask.in_dim();
        match kind {
            Kind::Row => {
                if mask.rows[idx] {
                    continue;
                }
                if !prior_flag && mask.live_rows() <= 1 {
                    blocked_layer.get_or_insert_with(|| mask.layer_name.clone());
                    continue;
                }
                let marginal = (0..c_dim)
                    .filter(|&j| !mask.elements[idx * c_dim + j])
                    .count();
                mask.remove_row(idx);
                layers[li].rows.push(idx);
                removed += marginal;
            }
            Kind::Col => {
                if mask.cols[idx] {
                    continue;
                }
                if !prior_flag && mask.live_cols() <= 1 {
                    blocked_layer.get_or_insert_with(|| mask.layer_name.clone());
                    continue;
                }
                let marginal = (0..mask.out_dim())
                    .filter(|&i| !mask.elements[i * c_dim + idx])
                    .count();
                mask.remove_col(idx);
                layers[li].cols.push(idx);
                removed += marginal;
            }
        }
        if !prior_flag {
            tau = tau.max(score);
            admitted_any = true;
        }
    }

    if removed < target {
        return Err(CoreError::Infeasible {
            layer: blocked_layer.unwrap_or_else(|| "network".into()),
            reason: format!(
                "structured target size {alpha_t} unreachable: removing more would empty a layer \
                 (removed {removed} of {target} weights)"
            ),
        });
    }
    if !admitted_any {
        tau = f64::NEG_INFINITY;
    }
    for sel in &mut layers {
        sel.rows.sort_unstable();
        sel.cols.sort_unstable();
    }
    Ok(RemovalSelection {
        mode: PruneMode::Structured,
        layers,
        tau,
        target_size: alpha_t,
        realized_size: 1.0 - removed as f64 / total as f64,
    })
}

/// Dispatch on mode.
pub fn select(
    mode: PruneMode,
    tables: &[CostTable],
    masks: &[PruneMask],
    alpha_t: f64,
) -> Result<RemovalSelection> {
    match mode {
        PruneMode::Unstructured => select_unstructured(tables, masks, alpha_t),
        PruneMode::Semi24 => select_semi_2_4(tables, masks, alpha_t),
        PruneMode::Structured => select_structured(tables, masks, alpha_t),
    }
}
