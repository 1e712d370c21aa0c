//! Scaling sweep over model presets and dataset sizes.

use serde::{Deserialize, Serialize};

use super::stage::{train_stage_backbone, CurvePoint, PreparedSet, TrainConfig};
use crate::backbone::ModelConfig;
use crate::heads::{StrConfig, StrModel};
use crate::scenario::IntentionVocab;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct SweepConfig {
    /// Named backbone shapes, smallest first.
    pub presets: Vec<(String, ModelConfig)>,
    pub dataset_sizes: Vec<usize>,
    /// Everything but the backbone shape.
    pub base: StrConfig,
    pub train: TrainConfig,
    /// Run cells concurrently.
    pub parallel_cells: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub model_preset: String,
    pub param_count: usize,
    pub dataset_size: usize,
    /// Minimum held-out loss; `None` when the cell failed.
    pub converged_eval_loss: Option<f64>,
    pub steps_to_converge: Option<usize>,
    pub curve: Vec<CurvePoint>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Slope of log loss against log dataset size, per preset.
    pub size_slopes: Vec<(String, Option<f64>)>,
    /// Slope of log loss against log parameter count, per dataset size.
    pub param_slopes: Vec<(usize, Option<f64>)>,
}

impl SweepResult {
    pub const CSV_HEADER: &'static str =
        "model_preset,param_count,dataset_size,converged_eval_loss,steps_to_converge,error";

    /// One row per cell. Failed cells leave the loss and step columns empty.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let opt = |v: Option<String>| v.unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.model_preset,
                r.param_count,
                r.dataset_size,
                opt(r.converged_eval_loss.map(|v| v.to_string())),
                opt(r.steps_to_converge.map(|v| v.to_string())),
                r.error.as_deref().unwrap_or("").replace([',', '\n'], ";"),
            ));
        }
        s
    }

    /// Fitted slopes as CSV: `axis,key,slope`. Absent slopes are empty.
    pub fn slopes_csv(&self) -> String {
        let mut s = String::from("axis,key,slope\n");
        let fmt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for (k, v) in &self.size_slopes {
            s.push_str(&format!("dataset_size,{k},{}\n", fmt(*v)));
        }
        for (k, v) in &self.param_slopes {
            s.push_str(&format!("param_count,{k},{}\n", fmt(*v)));
        }
        s
    }

    pub fn row(&self, preset: &str, size: usize) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.model_preset == preset && r.dataset_size == size)
    }
}

/// Least-squares slope of `ln y` on `ln x`. `None` with fewer than two
/// distinct positive `x` values.
pub fn fit_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0 && x.is_finite() && y.is_finite())
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return None;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some(sxy / sxx)
}

/// First logged step whose eval loss is at or below `threshold`.
pub fn steps_to_threshold(curve: &[CurvePoint], threshold: f64) -> Option<usize> {
    curve.iter().find(|p| p.eval_loss <= threshold).map(|p| p.step)
}

fn run_cell(
    sweep: &SweepConfig,
    name: &str,
    model: &ModelConfig,
    size: usize,
    pool: &PreparedSet,
    eval_set: &PreparedSet,
    vocab: Option<&IntentionVocab>,
) -> SweepRow {
    let mut cfg = sweep.base.clone();
    cfg.model = model.clone();
    let mut row = SweepRow {
        model_preset: name.to_string(),
        param_count: model.backbone_param_count(),
        dataset_size: size,
        converged_eval_loss: None,
        steps_to_converge: None,
        curve: Vec::new(),
        error: None,
    };
    let result = StrModel::new(cfg, vocab.cloned(), sweep.train.seed).and_then(|mut m| {
        row.param_count = m.store.num_values();
        train_stage_backbone(&mut m, &pool.subset(size), eval_set, &sweep.train)
    });
    match result {
        Ok(out) => {
            row.converged_eval_loss = Some(out.best_eval);
            row.steps_to_converge = Some(out.best_step);
            row.curve = out.curve;
        }
        Err(e) => row.error = Some(e.to_string()),
    }
    row
}

/// Trains every (preset, size) cell on the first `size` samples of `pool`
/// and fits log-log slopes. A failing cell is recorded and the sweep goes on.
pub fn scaling_sweep(
    sweep: &SweepConfig,
    pool: &PreparedSet,
    eval_set: &PreparedSet,
    vocab: Option<&IntentionVocab>,
) -> Result<SweepResult> {
    if sweep.presets.is_empty() || sweep.dataset_sizes.is_empty() {
        return Err(Error::Config("sweep needs at least one preset and one dataset size".into()));
    }
    if let Some(&s) = sweep.dataset_sizes.iter().find(|&&s| s == 0 || s > pool.len()) {
        return Err(Error::Config(format!(
            "dataset size {s} is outside 1..={} available samples",
            pool.len()
        )));
    }
    for (name, m) in &sweep.presets {
        m.validate().map_err(|e| Error::Config(format!("preset `{name}`: {e}")))?;
    }
    let cells: Vec<(usize, usize)> = (0..sweep.presets.len())
        .flat_map(|p| (0..sweep.dataset_sizes.len()).map(move |s| (p, s)))
        .collect();
    let exec = if sweep.parallel_cells {
        crate::Execution::Parallel
    } else {
        crate::Execution::Sequential
    };
    let rows = exec.map(&cells, |&(p, s)| {
        let (name, model) = &sweep.presets[p];
        run_cell(sweep, name, model, sweep.dataset_sizes[s], pool, eval_set, vocab)
    });

    let size_slopes = sweep
        .presets
        .iter()
        .map(|(name, _)| {
            let pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| &r.model_preset == name)
                .filter_map(|r| r.converged_eval_loss.map(|l| (r.dataset_size as f64, l)))
                .collect();
            (name.clone(), fit_slope(&pts))
        })
        .collect();
    let param_slopes = sweep
        .dataset_sizes
        .iter()
        .map(|&size| {
            let pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.dataset_size == size)
                .filter_map(|r| r.converged_eval_loss.map(|l| (r.param_count as f64, l)))
                .collect();
            (size, fit_slope(&pts))
        })
        .collect();
    Ok(SweepResult {
        rows,
        size_slopes,
        param_slopes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(f64, f64)> = [1.0, 10.0, 100.0].iter().map(|&x: &f64| (x, 3.0 * x.powf(-0.5))).collect();
        assert!((fit_slope(&pts).unwrap() + 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_point_has_no_slope() {
        assert_eq!(fit_slope(&[(10.0, 1.0)]), None);
        assert_eq!(fit_slope(&[(10.0, 1.0), (10.0, 2.0)]), None);
        assert_eq!(fit_slope(&[]), None);
    }

    #[test]
    fn threshold_step() {
        let c = |step, eval_loss| CurvePoint {
            step,
            lr: 0.0,
            train_loss: 0.0,
            eval_loss,
        };
        let curve = [c(0, 5.0), c(10, 2.0), c(20, 0.5)];
        assert_eq!(steps_to_threshold(&curve, 2.0), Some(10));
        assert_eq!(steps_to_threshold(&curve, 0.1), None);
    }
}
