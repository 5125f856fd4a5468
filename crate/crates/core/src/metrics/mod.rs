//! Chamfer-distance AP / mAP and the TOPO reachability metric.

mod ap;
mod topo;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::geometry::{ElementClass, Instance};

pub use ap::{
    ap_at_tau, ap_from_hits, chamfer, class_candidates, eval_points, greedy_match, ApCandidate, ApMethod,
};
pub use topo::{match_vertices, topo_counts, topo_score, DenseGraph, Scratch, TopoCounts, TopoScore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    /// Chamfer thresholds in meters, ascending.
    pub taus: Vec<f64>,
    /// Points per instance when computing Chamfer distances.
    pub eval_samples: usize,
    pub ap_method: ApMethod,
    pub topo_step: f64,
    pub topo_match_radius: f64,
    pub topo_prop_radius: f64,
    pub topo_centerline_only: bool,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            taus: vec![0.5, 1.0, 1.5],
            eval_samples: 100,
            ap_method: ApMethod::Area,
            topo_step: 0.15,
            topo_match_radius: 0.5,
            topo_prop_radius: 5.0,
            topo_centerline_only: false,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> crate::Result<()> {
        let taus_ok = !self.taus.is_empty()
            && self.taus.iter().all(|&t| t > 0.0 && t.is_finite())
            && self.taus.windows(2).all(|w| w[0] < w[1]);
        let radii_ok = [self.topo_step, self.topo_match_radius, self.topo_prop_radius]
            .iter()
            .all(|&r| r > 0.0 && r.is_finite());
        if !(taus_ok && radii_ok && self.eval_samples >= 2) {
            return Err(crate::Error::InvalidArgument(format!("invalid metric config: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredInstance {
    pub instance: Instance,
    pub confidence: f64,
}

/// Predictions and ground truth of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneEval {
    pub preds: Vec<ScoredInstance>,
    pub gts: Vec<Instance>,
    /// Subset of predictions drawn into the TOPO graph.
    pub topo_preds: Vec<Instance>,
}

impl SceneEval {
    /// Ground truth scored against itself with full confidence.
    pub fn gt_as_pred(gts: &[Instance]) -> Self {
        SceneEval {
            preds: gts
                .iter()
                .map(|g| ScoredInstance {
                    instance: g.clone(),
                    confidence: 1.0,
                })
                .collect(),
            gts: gts.to_vec(),
            topo_preds: gts.to_vec(),
        }
    }
}

/// AP per τ for one class, keyed `"AP@0.5"` etc., plus the τ-average `"AP"`.
pub type ClassAp = BTreeMap<String, f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Classes without GT are absent.
    pub per_class: BTreeMap<String, ClassAp>,
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "TOPO")]
    pub topo: TopoScore,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

pub fn tau_key(tau: f64) -> String {
    format!("AP@{tau:.1}")
}

/// Per-class AP table and mAP over the classes present in GT.
pub fn map_score(scenes: &[SceneEval], cfg: &MetricConfig) -> (BTreeMap<String, ClassAp>, f64) {
    let mut table = BTreeMap::new();
    for class in ElementClass::ALL {
        let (cands, num_gt) = class_candidates(scenes, class, cfg);
        if num_gt == 0 {
            continue;
        }
        let mut row = ClassAp::new();
        let mut sum = 0.0;
        for &tau in &cfg.taus {
            let ap = ap_from_hits(&greedy_match(&cands, num_gt, tau), num_gt, cfg.ap_method).unwrap_or(0.0);
            row.insert(tau_key(tau), ap);
            sum += ap;
        }
        row.insert("AP".into(), sum / cfg.taus.len() as f64);
        table.insert(class.name().to_string(), row);
    }
    let map = if table.is_empty() {
        0.0
    } else {
        table.values().map(|r| r["AP"]).sum::<f64>() / table.len() as f64
    };
    (table, map)
}

/// Full report over a set of scenes; TOPO counts are pooled.
pub fn evaluate(scenes: &[SceneEval], cfg: &MetricConfig) -> EvalReport {
    let (per_class, map) = map_score(scenes, cfg);
    let mut counts = TopoCounts::default();
    for s in scenes {
        let p: Vec<&Instance> = s.topo_preds.iter().collect();
        let g: Vec<&Instance> = s.gts.iter().collect();
        counts.add(&topo_counts(&p, &g, cfg));
    }
    let (topo, topo_diag) = counts.score();
    let mut diagnostics = Vec::new();
    if per_class.is_empty() {
        diagnostics.push("no ground-truth instances: mAP reported as 0".to_string());
    }
    diagnostics.extend(topo_diag);
    EvalReport {
        per_class,
        map,
        topo,
        diagnostics,
    }
}
