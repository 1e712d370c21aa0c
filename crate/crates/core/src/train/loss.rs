use serde::{Deserialize, Serialize};
use stformer_tensor::{Graph, Tensor, Var};

use crate::heads::{Targets, TeacherOutputs};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub kp_mse: f64,
    pub state_mse: f64,
    pub proposal_ce: Option<f64>,
    pub proposal_offset_mse: Option<f64>,
    pub diffusion_mse: Option<f64>,
    /// `kp_mse + state_mse`
    pub eval_loss: f64,
}

impl LossReport {
    /// Component-wise mean of several reports.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let avg = |f: &dyn Fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let opt = |f: &dyn Fn(&LossReport) -> Option<f64>| {
            reports.iter().map(f).collect::<Option<Vec<f64>>>().map(|v| v.iter().sum::<f64>() / n)
        };
        let kp_mse = avg(&|r| r.kp_mse);
        let state_mse = avg(&|r| r.state_mse);
        LossReport {
            kp_mse,
            state_mse,
            proposal_ce: opt(&|r| r.proposal_ce),
            proposal_offset_mse: opt(&|r| r.proposal_offset_mse),
            diffusion_mse: opt(&|r| r.diffusion_mse),
            eval_loss: kp_mse + state_mse,
        }
    }
}

/// Which supervised parts are enabled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossFlags {
    pub keypoints: bool,
    pub proposal: bool,
}

/// Prediction handles fed to [`compute_loss`].
#[derive(Clone, Copy, Debug)]
pub struct LossInputs {
    pub kp_pred: Option<Var>,
    pub states: Var,
    pub proposal_logits: Option<Var>,
    pub proposal_offset: Option<Var>,
}

impl From<&TeacherOutputs> for LossInputs {
    fn from(o: &TeacherOutputs) -> Self {
        Self {
            kp_pred: o.kp_pred,
            states: o.states,
            proposal_logits: o.proposal_logits,
            proposal_offset: o.proposal_offset,
        }
    }
}

/// Sum of the enabled losses on the tape, with the per-component values.
pub fn compute_loss(g: &mut Graph, out: &LossInputs, targets: &Targets, flags: LossFlags) -> Result<(Var, LossReport)> {
    let missing = |what: &str| Error::Contract(format!("{what} enabled but its prediction or target is missing"));
    let states_t: Vec<f64> = targets.states.iter().flatten().copied().collect();
    let st = g.constant(Tensor::new(vec![targets.states.len(), 3], states_t)?);
    let state = g.mse(out.states, st)?;
    let mut report = LossReport {
        state_mse: g.value(state).data()[0],
        ..Default::default()
    };
    let mut total = state;
    if flags.keypoints {
        let pred = out.kp_pred.ok_or_else(|| missing("key points"))?;
        if targets.key_points.is_empty() {
            return Err(missing("key points"));
        }
        let kt: Vec<f64> = targets.key_points.iter().flatten().copied().collect();
        let kt = g.constant(Tensor::new(vec![targets.key_points.len(), 2], kt)?);
        let kp = g.mse(pred, kt)?;
        report.kp_mse = g.value(kp).data()[0];
        total = g.add(total, kp)?;
    }
    if flags.proposal {
        let (Some(logits), Some(offset), Some(idx), Some(off_t)) = (
            out.proposal_logits,
            out.proposal_offset,
            targets.proposal_index,
            targets.proposal_offset,
        ) else {
            return Err(missing("proposal"));
        };
        let ce = g.cross_entropy(logits, idx)?;
        let ot = g.constant(Tensor::matrix(1, 2, off_t.to_vec())?);
        let om = g.mse(offset, ot)?;
        report.proposal_ce = Some(g.value(ce).data()[0]);
        report.proposal_offset_mse = Some(g.value(om).data()[0]);
        total = g.add(total, ce)?;
        total = g.add(total, om)?;
    }
    report.eval_loss = report.kp_mse + report.state_mse;
    Ok((total, report))
}
