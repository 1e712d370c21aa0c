//! Point encoders, MLP decoders and proposal heads.

use stformer_tensor::{Graph, ParamStore, Tensor, Var};

use super::context::COORD_SCALE;
use crate::nn::{fan_in_std, Linear, Mlp};
use crate::rng::Rng;
use crate::scenario::IntentionVocab;
use crate::{Error, Result};

/// One linear layer followed by tanh, mapping an `(x, y)` point to a token.
#[derive(Clone, Debug)]
pub struct PointEncoder {
    pub fc: Linear,
}

impl PointEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d_model: usize) -> Result<Self> {
        Ok(Self {
            fc: Linear::new(store, rng, name, 2, d_model, 0.5)?,
        })
    }

    /// Encodes rows of points in meters, `[n, 2]` to `[n, d_model]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, points: &[[f64; 2]]) -> Result<Var> {
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Contract("point encoder input is not finite".into()));
        }
        let data = points.iter().flat_map(|p| [p[0] / COORD_SCALE, p[1] / COORD_SCALE]).collect();
        let x = g.constant(Tensor::new(vec![points.len(), 2], data)?);
        let h = self.fc.forward(g, store, x)?;
        Ok(g.tanh(h)?)
    }
}

/// Per-row scale so outputs come out in meters (and radians for yaw).
fn unscale(g: &mut Graph, x: Var, cols: &[f64]) -> Result<Var> {
    let rows = g.value(x).rows();
    let data = (0..rows).flat_map(|_| cols.iter().copied()).collect();
    let s = g.constant(Tensor::new(vec![rows, cols.len()], data)?);
    Ok(g.mul(x, s)?)
}

/// Regresses a key point `(x, y)` from a hidden row.
#[derive(Clone, Debug)]
pub struct KeyPointMlp {
    pub mlp: Mlp,
}

impl KeyPointMlp {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d_model: usize) -> Result<Self> {
        let s = fan_in_std(d_model, 1.0);
        Ok(Self {
            mlp: Mlp::new(store, rng, name, (d_model, d_model, 2), (s, s))?,
        })
    }

    /// `[n, d]` hidden rows to `[n, 2]` points in meters.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, hidden: Var) -> Result<Var> {
        let y = self.mlp.forward(g, store, hidden)?;
        unscale(g, y, &[COORD_SCALE, COORD_SCALE])
    }
}

/// Decodes `(x, y, yaw)` at every future-state position.
#[derive(Clone, Debug)]
pub struct StateDecoder {
    pub mlp: Mlp,
}

impl StateDecoder {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d_model: usize) -> Result<Self> {
        let s = fan_in_std(d_model, 1.0);
        Ok(Self {
            mlp: Mlp::new(store, rng, name, (d_model, d_model, 3), (s, s))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, hidden: Var) -> Result<Var> {
        let y = self.mlp.forward(g, store, hidden)?;
        unscale(g, y, &[COORD_SCALE, COORD_SCALE, 1.0])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProposalOutput {
    pub logits: Vec<f64>,
    /// Per-class refinement in meters, `[K][2]`.
    pub offsets: Vec<[f64; 2]>,
}

impl ProposalOutput {
    /// Intention point `index` moved by its predicted offset.
    pub fn point(&self, vocab: &IntentionVocab, index: usize) -> [f64; 2] {
        let (v, o) = (vocab.points[index], self.offsets[index]);
        [v[0] + o[0], v[1] + o[1]]
    }
}

/// Classification and offset-regression heads over the intention vocabulary.
#[derive(Clone, Debug)]
pub struct ProposalHeads {
    pub cls: Mlp,
    pub offset: Mlp,
    pub k: usize,
}

impl ProposalHeads {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, d_model: usize, k: usize) -> Result<Self> {
        let s = fan_in_std(d_model, 1.0);
        Ok(Self {
            cls: Mlp::new(store, rng, "heads.proposal_cls", (d_model, d_model, k), (s, s))?,
            offset: Mlp::new(store, rng, "heads.proposal_offset", (d_model, d_model, 2 * k), (s, s))?,
            k,
        })
    }

    /// Logits `[1, K]` and offsets `[K, 2]` in meters from one hidden row.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, hidden: Var) -> Result<(Var, Var)> {
        let logits = self.cls.forward(g, store, hidden)?;
        let off = self.offset.forward(g, store, hidden)?;
        let off = g.reshape(off, &[self.k, 2])?;
        let off = g.scale(off, COORD_SCALE)?;
        Ok((logits, off))
    }

    pub fn output(g: &Graph, logits: Var, offsets: Var) -> ProposalOutput {
        ProposalOutput {
            logits: g.value(logits).data().to_vec(),
            offsets: g.value(offsets).data().chunks(2).map(|c| [c[0], c[1]]).collect(),
        }
    }
}

/// A ranked proposal with its renormalized score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankedProposal {
    pub index: usize,
    pub score: f64,
}

/// The `k` highest logits, ties by lower index, scored by a softmax over
/// the selected logits only.
pub fn select_top_k(out: &ProposalOutput, k: usize) -> Result<Vec<RankedProposal>> {
    if k == 0 || k > out.logits.len() {
        return Err(Error::Config(format!(
            "top-{k} selection over {} proposals",
            out.logits.len()
        )));
    }
    let mut order: Vec<usize> = (0..out.logits.len()).collect();
    order.sort_by(|&a, &b| out.logits[b].total_cmp(&out.logits[a]).then(a.cmp(&b)));
    order.truncate(k);
    let mut scores: Vec<f64> = order.iter().map(|&i| out.logits[i]).collect();
    stformer_tensor::kernels::softmax_in_place(&mut scores);
    Ok(order
        .into_iter()
        .zip(scores)
        .map(|(index, score)| RankedProposal { index, score })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn out(logits: Vec<f64>) -> ProposalOutput {
        let n = logits.len();
        ProposalOutput {
            logits,
            offsets: vec![[0.0; 2]; n],
        }
    }

    #[test]
    fn top_k_examples() {
        let mut one_hot = vec![0.0; 8];
        one_hot[3] = 1.0;
        assert_eq!(select_top_k(&out(one_hot), 1).unwrap()[0].index, 3);
        let idx: Vec<usize> = select_top_k(&out(vec![0.5; 10]), 6).unwrap().iter().map(|r| r.index).collect();
        assert_eq!(idx, vec![0, 1, 2, 3, 4, 5]);
        let idx: Vec<usize> = select_top_k(&out(vec![2.0, 1.0, 3.0]), 2).unwrap().iter().map(|r| r.index).collect();
        assert_eq!(idx, vec![2, 0]);
        assert!(matches!(select_top_k(&out(vec![1.0; 3]), 4), Err(Error::Config(_))));
    }

    #[test]
    fn top_k_scores_sum_to_one() {
        let r = select_top_k(&out(vec![0.3, -1.0, 2.0, 0.7, 5.0, 1.1, 0.0]), 6).unwrap();
        let total: f64 = r.iter().map(|p| p.score).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(r.windows(2).all(|w| w[0].score >= w[1].score));
    }
}
