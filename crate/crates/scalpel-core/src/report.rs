//! Aggregation of shot reports into sparsity tables by layer depth and by
//! layer type, plus their CSV renderings (stable column order).

use serde::{Deserialize, Serialize};

use crate::harness::LayerKind;
use crate::surgeon::ShotReport;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerReportRow {
    pub depth: usize,
    pub layer_name: String,
    pub kind: LayerKind,
    pub weight_count: usize,
    pub rows_removed: usize,
    pub cols_removed: usize,
    pub elements_removed: usize,
    pub sparsity: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TypeReportRow {
    pub kind: LayerKind,
    pub weight_count: usize,
    pub elements_removed: usize,
    pub sparsity: f64,
}

fn kind_label(kind: LayerKind) -> &'static str {
    match kind {
        LayerKind::Embedding => "embedding",
        LayerKind::Linear => "linear",
        LayerKind::AttentionProjection => "attention-projection",
    }
}

/// Per-layer allocation table from the final shot, in model (depth) order.
pub fn sparsity_by_layer(last: &ShotReport) -> Vec<LayerReportRow> {
    last.layers
        .iter()
        .enumerate()
        .map(|(depth, l)| LayerReportRow {
            depth,
            layer_name: l.layer_name.clone(),
            kind: l.kind,
            weight_count: l.weight_count,
            rows_removed: l.rows_removed,
            cols_removed: l.cols_removed,
            elements_removed: l.elements_removed,
            sparsity: l.sparsity,
        })
        .collect()
}

/// Aggregation over layer kinds; kinds appear in a fixed order.
pub fn sparsity_by_type(last: &ShotReport) -> Vec<TypeReportRow> {
    let order = [
        LayerKind::Embedding,
        LayerKind::AttentionProjection,
        LayerKind::Linear,
    ];
    order
        .iter()
        .filter_map(|&kind| {
            let mut weights = 0usize;
            let mut removed = 0usize;
            for l in last.layers.iter().filter(|l| l.kind == kind) {
                weights += l.weight_count;
                removed += l.elements_removed;
            }
            if weights == 0 {
                None
            } else {
                Some(TypeReportRow {
                    kind,
                    weight_count: weights,
                    elements_removed: removed,
                    sparsity: removed as f64 / weights as f64,
                })
            }
        })
        .collect()
}

pub fn layer_csv(rows: &[LayerReportRow]) -> String {
    let mut out = String::from(
        "depth,layer,kind,weights,rows_removed,cols_removed,elements_removed,sparsity\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{:.6}\n",
            r.depth,
            r.layer_name,
            kind_label(r.kind),
            r.weight_count,
            r.rows_removed,
            r.cols_removed,
            r.elements_removed,
            r.sparsity
        ));
    }
    out
}

pub fn type_csv(rows: &[TypeReportRow]) -> String {
    let mut out = String::from("kind,weights,elements_removed,sparsity\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6}\n",
            kind_label(r.kind),
            r.weight_count,
            r.elements_removed,
            r.sparsity
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surgeon::LayerShotStats;

    fn stats(name: &str, kind: LayerKind, weights: usize, removed: usize) -> LayerShotStats {
        LayerShotStats {
            layer_name: name.into(),
            kind,
            weight_count: weights,
            rows_removed: 0,
            cols_removed: 0,
            elements_removed: removed,
            sparsity: removed as f64 / weights as f64,
            update_frobenius: 0.0,
        }
    }

    fn report(layers: Vec<LayerShotStats>) -> ShotReport {
        ShotReport {
            shot: 1,
            alpha_t: 0.5,
            tau: 0.0,
            realized_size: 0.5,
            train_loss_before: 1.0,
            train_loss_after: 1.0,
            test_loss: None,
            lora_applied: false,
            layers,
            wall_time_secs: 0.0,
        }
    }

    #[test]
    fn single_layer_gives_one_row() {
        let rep = report(vec![stats("only", LayerKind::Linear, 16, 4)]);
        let rows = sparsity_by_layer(&rep);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].depth, 0);
        assert!((rows[0].sparsity - 0.25).abs() < 1e-15);
        let csv = layer_csv(&rows);
        assert!(csv.lines().count() == 2);
        assert!(csv.starts_with("depth,layer,kind,"));
    }

    #[test]
    fn type_aggregation_partitions_global_sparsity() {
        let rep = report(vec![
            stats("attn.q", LayerKind::AttentionProjection, 64, 16),
            stats("attn.v", LayerKind::AttentionProjection, 64, 8),
            stats("ffn.up", LayerKind::Linear, 128, 64),
        ]);
        let types = sparsity_by_type(&rep);
        let total_weights: usize = types.iter().map(|t| t.weight_count).sum();
        let total_removed: usize = types.iter().map(|t| t.elements_removed).sum();
        assert_eq!(total_weights, 256);
        assert_eq!(total_removed, 88);
        let attn = types
            .iter()
            .find(|t| t.kind == LayerKind::AttentionProjection)
            .unwrap();
        assert_eq!(attn.elements_removed, 24);
        // Per-type removals sum to the global count: the partition is exact.
        let global: usize = rep.layers.iter().map(|l| l.elements_removed).sum();
        assert_eq!(total_removed, global);
    }
}
