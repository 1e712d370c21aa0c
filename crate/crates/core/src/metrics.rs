//! Open-loop planning metrics and multimodal prediction metrics.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::exec::Execution;
use crate::geometry::wrap_angle;
use crate::heads::TrajectoryPrediction;
use crate::scenario::{TrainingSample, FRAME_HZ, FUTURE_FRAMES};
use crate::{Error, Result};

/// Evaluation horizons in seconds.
pub const HORIZONS: [usize; 3] = [3, 5, 8];

/// Per-horizon errors of one trajectory, indexed like [`HORIZONS`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HorizonErrors {
    pub ade: [f64; 3],
    pub fde: [f64; 3],
    pub ahe: [f64; 3],
    pub fhe: [f64; 3],
    /// Largest frame displacement within each horizon.
    pub max_displacement: [f64; 3],
}

fn check_len(name: &str, traj: &[[f64; 3]]) -> Result<()> {
    if traj.len() != FUTURE_FRAMES {
        return Err(Error::Contract(format!(
            "{name} trajectory has {} frames, expected {FUTURE_FRAMES}",
            traj.len()
        )));
    }
    Ok(())
}

fn displacement(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn heading_error(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    wrap_angle(a[2] - b[2]).abs()
}

/// `pred` and `gt` hold 80 future frames of `(x, y, yaw)`.
pub fn horizon_errors(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<HorizonErrors> {
    check_len("predicted", pred)?;
    check_len("ground-truth", gt)?;
    let disp: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| displacement(p, g)).collect();
    let head: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| heading_error(p, g)).collect();
    let mut out = HorizonErrors::default();
    for (i, h) in HORIZONS.iter().enumerate() {
        let n = (*h as f64 * FRAME_HZ) as usize;
        out.ade[i] = disp[..n].iter().sum::<f64>() / n as f64;
        out.fde[i] = disp[n - 1];
        out.ahe[i] = head[..n].iter().sum::<f64>() / n as f64;
        out.fhe[i] = head[n - 1];
        out.max_displacement[i] = disp[..n].iter().copied().fold(0.0, f64::max);
    }
    Ok(out)
}

pub fn average_over_horizons(x3: f64, x5: f64, x8: f64) -> f64 {
    (x3 + x5 + x8) / 3.0
}

fn average(x: &[f64; 3]) -> f64 {
    average_over_horizons(x[0], x[1], x[2])
}

/// `max(0, 1 - x / threshold)`.
pub fn score_from_error(x: f64, threshold: f64) -> Result<f64> {
    if threshold.is_nan() || threshold <= 0.0 {
        return Err(Error::Config(format!("score threshold must be positive, got {threshold}")));
    }
    Ok((1.0 - x / threshold).clamp(0.0, 1.0))
}

/// A scenario is missed when any horizon's largest displacement exceeds
/// that horizon's threshold.
pub fn miss_decision(max_displacement: &[f64; 3], thresholds: &[f64; 3]) -> bool {
    max_displacement.iter().zip(thresholds).any(|(d, t)| d > t)
}

pub fn scenario_miss_rate(missed: &[bool]) -> Result<f64> {
    if missed.is_empty() {
        return Err(Error::UndefinedRate);
    }
    Ok(missed.iter().filter(|m| **m).count() as f64 / missed.len() as f64)
}

/// Largest miss rate that still scores 1.
pub const MISS_RATE_GATE: f64 = 0.3;

pub fn score_miss(rate: f64) -> f64 {
    if rate > MISS_RATE_GATE {
        0.0
    } else {
        1.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorScores {
    pub ade: f64,
    pub fde: f64,
    pub ahe: f64,
    pub fhe: f64,
}

pub const OLS_WEIGHTS: ErrorScores = ErrorScores {
    ade: 1.0,
    fde: 1.0,
    ahe: 2.0,
    fhe: 2.0,
};

/// Weighted mean of the four scores gated by the miss score, in `[0, 100]`.
pub fn ols(scores: &ErrorScores, score_miss: f64) -> f64 {
    let w = OLS_WEIGHTS;
    let num = w.ade * scores.ade + w.fde * scores.fde + w.ahe * scores.ahe + w.fhe * scores.fhe;
    num / (w.ade + w.fde + w.ahe + w.fhe) * score_miss * 100.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultimodalErrors {
    pub min_ade: f64,
    pub min_fde: f64,
}

/// Minimum full-horizon ADE and FDE over 1 to 6 modes.
pub fn multimodal_metrics(modes: &[Vec<[f64; 3]>], gt: &[[f64; 3]]) -> Result<MultimodalErrors> {
    if modes.is_empty() || modes.len() > MAX_MODES {
        return Err(Error::Contract(format!(
            "expected 1..={MAX_MODES} modes, got {}",
            modes.len()
        )));
    }
    check_len("ground-truth", gt)?;
    let mut out = MultimodalErrors {
        min_ade: f64::INFINITY,
        min_fde: f64::INFINITY,
    };
    for m in modes {
        check_len("predicted", m)?;
        let d: Vec<f64> = m.iter().zip(gt).map(|(p, g)| displacement(p, g)).collect();
        out.min_ade = out.min_ade.min(d.iter().sum::<f64>() / d.len() as f64);
        out.min_fde = out.min_fde.min(d[d.len() - 1]);
    }
    Ok(out)
}

pub const MAX_MODES: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    /// Miss thresholds in meters for the 3, 5 and 8 s horizons.
    pub miss_thresholds: [f64; 3],
    pub displacement_threshold: f64,
    pub heading_threshold: f64,
    /// Final-displacement threshold of the multimodal miss rate.
    pub mr_threshold: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            miss_thresholds: [6.0, 8.0, 16.0],
            displacement_threshold: 8.0,
            heading_threshold: 0.8,
            mr_threshold: 2.0,
        }
    }
}

/// Everything measured for one scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMetrics {
    pub id: u64,
    /// Errors of the top-scoring mode.
    pub errors: HorizonErrors,
    pub missed: bool,
    pub multimodal: MultimodalErrors,
    pub mr_missed: bool,
}

pub fn scenario_metrics(pred: &TrajectoryPrediction, gt: &[[f64; 3]], cfg: &MetricsConfig) -> Result<ScenarioMetrics> {
    if pred.modes.is_empty() {
        return Err(Error::Contract(format!("prediction {} has no modes", pred.id)));
    }
    let errors = horizon_errors(&pred.modes[pred.best_mode()], gt)?;
    let multimodal = multimodal_metrics(&pred.modes, gt)?;
    Ok(ScenarioMetrics {
        id: pred.id,
        missed: miss_decision(&errors.max_displacement, &cfg.miss_thresholds),
        mr_missed: multimodal.min_fde > cfg.mr_threshold,
        errors,
        multimodal,
    })
}

/// Set-level report. Errors are averaged over scenarios and horizons
/// before scoring.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub count: usize,
    pub ade: f64,
    pub fde: f64,
    pub ahe: f64,
    pub fhe: f64,
    pub scores: ErrorScores,
    pub miss_rate: f64,
    pub score_miss: f64,
    pub ols: f64,
    pub min_ade: f64,
    pub min_fde: f64,
    pub mr_pred: f64,
}

pub fn aggregate(per: &[ScenarioMetrics], cfg: &MetricsConfig) -> Result<MetricsReport> {
    if per.is_empty() {
        return Err(Error::UndefinedRate);
    }
    let n = per.len() as f64;
    let mean = |f: &dyn Fn(&ScenarioMetrics) -> f64| per.iter().map(f).sum::<f64>() / n;
    let ade = mean(&|s| average(&s.errors.ade));
    let fde = mean(&|s| average(&s.errors.fde));
    let ahe = mean(&|s| average(&s.errors.ahe));
    let fhe = mean(&|s| average(&s.errors.fhe));
    let scores = ErrorScores {
        ade: score_from_error(ade, cfg.displacement_threshold)?,
        fde: score_from_error(fde, cfg.displacement_threshold)?,
        ahe: score_from_error(ahe, cfg.heading_threshold)?,
        fhe: score_from_error(fhe, cfg.heading_threshold)?,
    };
    let missed: Vec<bool> = per.iter().map(|s| s.missed).collect();
    let miss_rate = scenario_miss_rate(&missed)?;
    let sm = score_miss(miss_rate);
    let mr: Vec<bool> = per.iter().map(|s| s.mr_missed).collect();
    Ok(MetricsReport {
        count: per.len(),
        ade,
        fde,
        ahe,
        fhe,
        scores,
        miss_rate,
        score_miss: sm,
        ols: ols(&scores, sm),
        min_ade: mean(&|s| s.multimodal.min_ade),
        min_fde: mean(&|s| s.multimodal.min_fde),
        mr_pred: scenario_miss_rate(&mr)?,
    })
}

/// Future `(x, y, yaw)` of a sample's ego.
pub fn ground_truth(sample: &TrainingSample) -> Vec<[f64; 3]> {
    sample.ego_future.iter().map(|s| [s.x, s.y, s.yaw]).collect()
}

/// Scores predictions against samples matched by id. Every prediction needs
/// a sample; samples without a prediction are ignored.
pub fn evaluate_predictions(
    preds: &[TrajectoryPrediction],
    samples: &[TrainingSample],
    cfg: &MetricsConfig,
    exec: Execution,
) -> Result<(Vec<ScenarioMetrics>, MetricsReport)> {
    let by_id: HashMap<u64, &TrainingSample> = samples.iter().map(|s| (s.id, s)).collect();
    let per = exec
        .map(preds, |p| {
            let s = by_id
                .get(&p.id)
                .ok_or_else(|| Error::Contract(format!("no sample with id {}", p.id)))?;
            scenario_metrics(p, &ground_truth(s), cfg)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let report = aggregate(&per, cfg)?;
    Ok((per, report))
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in self.fields() {
            let _ = writeln!(s, "{k},{v}");
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = format!("scenarios: {}\n", self.count);
        for (k, v) in self.fields().into_iter().skip(1) {
            let _ = writeln!(s, "{k:>12}: {v:.4}");
        }
        s
    }

    fn fields(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("count", self.count as f64),
            ("ade", self.ade),
            ("fde", self.fde),
            ("ahe", self.ahe),
            ("fhe", self.fhe),
            ("score_ade", self.scores.ade),
            ("score_fde", self.scores.fde),
            ("score_ahe", self.scores.ahe),
            ("score_fhe", self.scores.fhe),
            ("miss_rate", self.miss_rate),
            ("score_miss", self.score_miss),
            ("ols", self.ols),
            ("min_ade", self.min_ade),
            ("min_fde", self.min_fde),
            ("mr_pred", self.mr_pred),
        ]
    }
}

/// Per-scenario CSV with the top mode's horizon-averaged errors.
pub fn scenario_csv(per: &[ScenarioMetrics]) -> String {
    let mut s = String::from("id,ade,fde,ahe,fhe,missed,min_ade,min_fde,mr_missed\n");
    for m in per {
        let e = &m.errors;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            m.id,
            average(&e.ade),
            average(&e.fde),
            average(&e.ahe),
            average(&e.fhe),
            m.missed,
            m.multimodal.min_ade,
            m.multimodal.min_fde,
            m.mr_missed
        );
    }
    s
}
