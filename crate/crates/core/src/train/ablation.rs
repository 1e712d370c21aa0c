//! Sequence-design ablation grid: which parts the sequence carries, the
//! key-point order and the key-point decoder.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::stage::{evaluate, predict_set, train_stage_backbone, train_stage_diffusion, PreparedSet, TrainConfig};
use crate::heads::{Components, KpDecoder, KpOrder, RolloutFlags, StrConfig, StrModel};
use crate::metrics::{evaluate_predictions, MetricsConfig};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    KpOrder,
    KpDecoder,
    Components,
    /// All four rows.
    All,
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kp_order" => Ok(Self::KpOrder),
            "kp_decoder" => Ok(Self::KpDecoder),
            "components" => Ok(Self::Components),
            "all" => Ok(Self::All),
            _ => Err(Error::Config(format!(
                "unknown ablation axis `{s}` (expected kp_order, kp_decoder, components or all)"
            ))),
        }
    }
}

/// One row of the grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub components: Components,
    pub kp_order: KpOrder,
    pub kp_decoder: KpDecoder,
}

impl AblationVariant {
    pub const CS: Self = Self::new(Components::CS, KpOrder::Backward, KpDecoder::Mlp);
    pub const CKS_FWD: Self = Self::new(Components::CKS, KpOrder::Forward, KpDecoder::Mlp);
    pub const CKS_BKWD_MLP: Self = Self::new(Components::CKS, KpOrder::Backward, KpDecoder::Mlp);
    pub const CKS_BKWD_DIFFUSION: Self = Self::new(Components::CKS, KpOrder::Backward, KpDecoder::Diffusion);

    const fn new(components: Components, kp_order: KpOrder, kp_decoder: KpDecoder) -> Self {
        Self {
            components,
            kp_order,
            kp_decoder,
        }
    }

    /// `CS`, `CKS-fwd`, `CKS-bkwd-mlp`, ...
    pub fn label(&self) -> String {
        if !self.components.keypoints {
            return self.components.name().to_string();
        }
        let mut s = format!("{}-{}", self.components.name(), self.kp_order.name());
        if self.kp_order == KpOrder::Backward || self.kp_decoder == KpDecoder::Diffusion {
            let _ = write!(s, "-{}", self.kp_decoder.name());
        }
        s
    }
}

impl AblationAxis {
    pub fn variants(self) -> Vec<AblationVariant> {
        use AblationVariant as V;
        match self {
            Self::KpOrder => vec![V::CKS_FWD, V::CKS_BKWD_MLP],
            Self::KpDecoder => vec![V::CKS_BKWD_MLP, V::CKS_BKWD_DIFFUSION],
            Self::Components => vec![V::CS, V::CKS_BKWD_MLP],
            Self::All => vec![V::CS, V::CKS_FWD, V::CKS_BKWD_MLP, V::CKS_BKWD_DIFFUSION],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    /// Teacher-forced held-out loss of the backbone stage.
    pub eval_loss: f64,
    pub ade_8s: f64,
    pub fde_3s: f64,
    pub fde_5s: f64,
    pub fde_8s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub rows: Vec<AblationRow>,
}

impl AblationResult {
    pub const CSV_HEADER: &'static str = "variant,eval_loss,8s_ade,3s_fde,5s_fde,8s_fde";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{},{}", r.variant, r.eval_loss, r.ade_8s, r.fde_3s, r.fde_5s, r.fde_8s);
        }
        s
    }

    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == label)
    }
}

#[derive(Clone, Debug)]
pub struct AblationConfig {
    /// Backbone shape and raster settings; components and order are
    /// overridden per row.
    pub base: StrConfig,
    pub backbone: TrainConfig,
    pub diffusion: TrainConfig,
    pub metrics: MetricsConfig,
}

/// Trains one model per distinct (components, order) pair, adds the
/// diffusion stage where a row asks for it, rolls out `eval_set` and
/// tabulates horizon errors of the top mode.
pub fn run_ablation(
    axis: AblationAxis,
    cfg: &AblationConfig,
    train_set: &PreparedSet,
    eval_set: &PreparedSet,
) -> Result<AblationResult> {
    let mut trained: Vec<(Components, KpOrder, StrModel, f64)> = Vec::new();
    let mut out = AblationResult::default();
    for v in axis.variants() {
        let idx = match trained.iter().position(|t| t.0 == v.components && t.1 == v.kp_order) {
            Some(i) => i,
            None => {
                let mut c = cfg.base.clone();
                c.components = v.components;
                c.kp_order = v.kp_order;
                let mut model = StrModel::new(c, None, cfg.backbone.seed)?;
                train_stage_backbone(&mut model, train_set, eval_set, &cfg.backbone)?;
                let loss = evaluate(&model, eval_set, cfg.backbone.execution)?.eval_loss;
                trained.push((v.components, v.kp_order, model, loss));
                trained.len() - 1
            }
        };
        let eval_loss = trained[idx].3;
        let mut diffused;
        let model = if v.kp_decoder == KpDecoder::Diffusion {
            diffused = trained[idx].2.clone();
            train_stage_diffusion(&mut diffused, train_set, eval_set, &cfg.diffusion)?;
            &diffused
        } else {
            &trained[idx].2
        };
        let mut flags = RolloutFlags::for_model(model);
        flags.kp_decoder = v.kp_decoder;
        let preds = predict_set(model, eval_set, &flags, cfg.backbone.seed, cfg.backbone.execution)?;
        let (per, _) = evaluate_predictions(&preds, &eval_set.samples, &cfg.metrics, cfg.backbone.execution)?;
        let n = per.len() as f64;
        let mean = |f: &dyn Fn(&crate::metrics::ScenarioMetrics) -> f64| per.iter().map(f).sum::<f64>() / n;
        out.rows.push(AblationRow {
            variant: v.label(),
            eval_loss,
            ade_8s: mean(&|m| m.errors.ade[2]),
            fde_3s: mean(&|m| m.errors.fde[0]),
            fde_5s: mean(&|m| m.errors.fde[1]),
            fde_8s: mean(&|m| m.errors.fde[2]),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_match_the_grid() {
        let labels: Vec<String> = AblationAxis::All.variants().iter().map(AblationVariant::label).collect();
        assert_eq!(labels, ["CS", "CKS-fwd", "CKS-bkwd-mlp", "CKS-bkwd-diffusion"]);
    }

    #[test]
    fn axis_parsing() {
        assert_eq!("kp_order".parse::<AblationAxis>().unwrap(), AblationAxis::KpOrder);
        assert!(matches!("bogus".parse::<AblationAxis>(), Err(Error::Config(_))));
    }
}
