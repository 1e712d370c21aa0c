//! Raster context encoder: a small residual CNN per scope.
//!
//! Each 33-channel raster is max-pooled to a coarse grid, convolved into a
//! few channels, refined by residual blocks and max-pooled again. The two
//! scopes' features are concatenated and projected to one token per history
//! frame, with the ego state of that frame added in. Rasters hold the union
//! of all history frames, so per-frame identity comes from the ego term.

use stformer_tensor::{Graph, Init, ParamId, ParamStore, Tensor, Var};

use crate::nn::{fan_in_std, Linear};
use crate::raster::{RasterStack, NUM_CHANNELS};
use crate::rng::Rng;
use crate::scenario::{AgentState, HISTORY_FRAMES};
use crate::{Error, Result};

/// Meters per unit for coordinates fed to or read from the network.
pub const COORD_SCALE: f64 = 10.0;
/// Spatial max-pool applied to rasters before the first convolution.
pub const INPUT_POOL: usize = 4;
pub const EGO_FEATURES: usize = 6;
const RES_BLOCKS: usize = 4;
/// Raster values are multiples of this step.
const LEVELS: f64 = 20.0;

/// A max-pooled raster stored as exact 1/20 levels.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledRaster {
    pub size: usize,
    /// Pooled intensities times 20, channel-major.
    pub levels: Vec<u8>,
}

impl PooledRaster {
    pub fn from_stack(stack: &RasterStack, factor: usize) -> Result<Self> {
        if stack.num_channels() != NUM_CHANNELS {
            return Err(stformer_tensor::TensorError::Shape {
                op: "encode_context",
                left: vec![NUM_CHANNELS, stack.resolution, stack.resolution],
                right: vec![stack.num_channels(), stack.resolution, stack.resolution],
            }
            .into());
        }
        if factor == 0 || !stack.resolution.is_multiple_of(factor) {
            return Err(Error::Config(format!(
                "raster resolution {} is not a multiple of the pooling factor {factor}",
                stack.resolution
            )));
        }
        let n = stack.resolution;
        let m = n / factor;
        let mut levels = vec![0u8; NUM_CHANNELS * m * m];
        for c in 0..NUM_CHANNELS {
            let ch = stack.channel(c);
            for i in 0..m {
                for j in 0..m {
                    let mut best: f64 = 0.0;
                    for di in 0..factor {
                        let row = &ch[(i * factor + di) * n + j * factor..][..factor];
                        best = row.iter().copied().fold(best, f64::max);
                    }
                    levels[(c * m + i) * m + j] = (best * LEVELS).round() as u8;
                }
            }
        }
        Ok(Self { size: m, levels })
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.levels.iter().map(|&l| l as f64 / LEVELS).collect();
        Tensor::new(vec![NUM_CHANNELS, self.size, self.size], data).expect("shape matches data")
    }
}

/// Pooled rasters of both scopes for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextRaster {
    pub high: PooledRaster,
    pub low: PooledRaster,
}

impl ContextRaster {
    pub fn new(high: &RasterStack, low: &RasterStack) -> Result<Self> {
        Ok(Self {
            high: PooledRaster::from_stack(high, INPUT_POOL)?,
            low: PooledRaster::from_stack(low, INPUT_POOL)?,
        })
    }
}

/// `[x, y, cos yaw, sin yaw, vx, vy]` with lengths in scaled units.
pub fn ego_features(history: &[AgentState]) -> Tensor {
    let s = COORD_SCALE;
    let data = history
        .iter()
        .flat_map(|h| [h.x / s, h.y / s, h.yaw.cos(), h.yaw.sin(), h.vx / s, h.vy / s])
        .collect();
    Tensor::new(vec![history.len(), EGO_FEATURES], data).expect("shape matches data")
}

#[derive(Clone, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

impl Conv {
    fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, inp: usize, out: usize, gain: f64) -> Result<Self> {
        let std = fan_in_std(inp * 9, gain);
        Ok(Self {
            w: store.init(format!("{name}.w"), &[out, inp, 3, 3], Init::Normal(std), true, rng)?,
            b: store.init(format!("{name}.b"), &[out], Init::Zeros, false, rng)?,
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (w, b) = (g.param(store, self.w), g.param(store, self.b));
        Ok(g.conv2d(x, w, Some(b), 1, 1)?)
    }
}

#[derive(Clone, Debug)]
struct ScopeCnn {
    stem: Conv,
    blocks: Vec<(Conv, Conv)>,
}

impl ScopeCnn {
    fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, channels: usize) -> Result<Self> {
        let stem = Conv::new(store, rng, &format!("{name}.stem"), NUM_CHANNELS, channels, 2f64.sqrt())?;
        let blocks = (0..RES_BLOCKS)
            .map(|i| {
                Ok((
                    Conv::new(store, rng, &format!("{name}.res{i}.a"), channels, channels, 2f64.sqrt())?,
                    Conv::new(store, rng, &format!("{name}.res{i}.b"), channels, channels, 0.5)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { stem, blocks })
    }

    /// `[33, m, m]` pooled raster to a flat feature row.
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.stem.forward(g, store, x)?;
        let h = g.silu(h)?;
        let mut h = g.max_pool2d(h, 2, 2)?;
        for (a, b) in &self.blocks {
            let r = a.forward(g, store, h)?;
            let r = g.silu(r)?;
            let r = b.forward(g, store, r)?;
            let sum = g.add(h, r)?;
            h = g.silu(sum)?;
        }
        let h = g.max_pool2d(h, 2, 2)?;
        let n: usize = g.shape(h).iter().product();
        Ok(g.reshape(h, &[1, n])?)
    }
}

#[derive(Clone, Debug)]
pub struct ContextEncoder {
    high: ScopeCnn,
    low: ScopeCnn,
    fuse: Linear,
    ego: Linear,
    pub channels: usize,
    pub pooled_size: usize,
}

impl ContextEncoder {
    /// `resolution` is the raster side length before input pooling.
    pub fn new(store: &mut ParamStore, rng: &mut Rng, d_model: usize, channels: usize, resolution: usize) -> Result<Self> {
        let m = resolution / INPUT_POOL;
        if m < 4 || !resolution.is_multiple_of(INPUT_POOL * 4) {
            return Err(Error::Config(format!(
                "raster resolution {resolution} must be a multiple of {}",
                INPUT_POOL * 4
            )));
        }
        let feat = 2 * channels * (m / 4) * (m / 4);
        Ok(Self {
            high: ScopeCnn::new(store, rng, "context.high", channels)?,
            low: ScopeCnn::new(store, rng, "context.low", channels)?,
            fuse: Linear::new(store, rng, "context.fuse", feat, d_model, fan_in_std(feat, 1.0))?,
            ego: Linear::new(store, rng, "context.ego", EGO_FEATURES, d_model, fan_in_std(EGO_FEATURES, 1.0))?,
            channels,
            pooled_size: m,
        })
    }

    /// One token per history frame, `[21, d_model]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, raster: &ContextRaster, ego: &Tensor) -> Result<Var> {
        for p in [&raster.high, &raster.low] {
            if p.size != self.pooled_size {
                return Err(stformer_tensor::TensorError::Shape {
                    op: "encode_context",
                    left: vec![NUM_CHANNELS, self.pooled_size, self.pooled_size],
                    right: vec![NUM_CHANNELS, p.size, p.size],
                }
                .into());
            }
        }
        let xh = g.constant(raster.high.to_tensor());
        let xl = g.constant(raster.low.to_tensor());
        let fh = self.high.forward(g, store, xh)?;
        let fl = self.low.forward(g, store, xl)?;
        let f = g.concat_cols(&[fh, fl])?;
        let scene = self.fuse.forward(g, store, f)?;
        let frames = ego.rows();
        let scene = g.embedding(scene, &vec![0; frames])?;
        let e = g.constant(ego.clone());
        let e = self.ego.forward(g, store, e)?;
        Ok(g.add(scene, e)?)
    }
}

/// Rasterizes both scopes and pools them for the encoder.
pub fn prepare_context(sample: &crate::scenario::TrainingSample, resolution: usize) -> Result<ContextRaster> {
    let (high, low) = crate::raster::dual_scope(sample, resolution)?;
    ContextRaster::new(&high, &low)
}

pub const CONTEXT_TOKENS: usize = HISTORY_FRAMES;
