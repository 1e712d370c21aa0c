//! Intention-point vocabulary: k-means centers of 8 s endpoints.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ProposalTarget, TrainingSample};
use crate::rng::{self, streams};
use crate::{Error, Result};

pub const DEFAULT_VOCAB_SIZE: usize = 64;
const MAX_LLOYD_ITERS: usize = 300;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntentionVocab {
    pub points: Vec<[f64; 2]>,
}

impl IntentionVocab {
    pub fn new(points: Vec<[f64; 2]>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index of the closest point; ties go to the lower index.
    pub fn nearest(&self, p: [f64; 2]) -> usize {
        nearest(&self.points, p)
    }

    /// Hex SHA-256 over the count and the little-endian coordinates.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.points.len() as u64).to_le_bytes());
        for p in &self.points {
            h.update(p[0].to_le_bytes());
            h.update(p[1].to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

fn nearest(centers: &[[f64; 2]], p: [f64; 2]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = dist2(*c, p);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// k-means++ seeded Lloyd iterations over the samples' 8 s endpoints.
pub fn cluster_intentions(samples: &[TrainingSample], k: usize, seed: u64) -> Result<IntentionVocab> {
    if k == 0 {
        return Err(Error::Config("intention vocabulary size must be positive".into()));
    }
    if samples.len() < k {
        return Err(Error::InsufficientData(format!(
            "{} samples cannot form {k} intention points",
            samples.len()
        )));
    }
    let pts: Vec<[f64; 2]> = samples.iter().map(TrainingSample::endpoint).collect();
    let mut distinct: Vec<(u64, u64)> = pts.iter().map(|p| (p[0].to_bits(), p[1].to_bits())).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < k {
        return Err(Error::InsufficientData(format!(
            "{} distinct endpoints cannot form {k} intention points",
            distinct.len()
        )));
    }

    let mut rng = rng::stream(seed, streams::KMEANS);
    let mut centers = vec![pts[rng.random_range(0..pts.len())]];
    let mut d2: Vec<f64> = pts.iter().map(|p| dist2(*p, centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut pick = d2.iter().rposition(|d| *d > 0.0).unwrap_or(0);
        for (i, d) in d2.iter().enumerate() {
            if *d > 0.0 && target < *d {
                pick = i;
                break;
            }
            target -= d;
        }
        let c = pts[pick];
        centers.push(c);
        for (d, p) in d2.iter_mut().zip(&pts) {
            *d = d.min(dist2(*p, c));
        }
    }

    let mut assign = vec![usize::MAX; pts.len()];
    for _ in 0..MAX_LLOYD_ITERS {
        let mut changed = false;
        for (a, p) in assign.iter_mut().zip(&pts) {
            let n = nearest(&centers, *p);
            changed |= *a != n;
            *a = n;
        }
        if !changed {
            break;
        }
        let mut sums = vec![[0.0, 0.0, 0.0]; k];
        for (a, p) in assign.iter().zip(&pts) {
            sums[*a][0] += p[0];
            sums[*a][1] += p[1];
            sums[*a][2] += 1.0;
        }
        for (c, s) in centers.iter_mut().zip(&sums) {
            if s[2] > 0.0 {
                *c = [s[0] / s[2], s[1] / s[2]];
            }
        }
    }
    Ok(IntentionVocab::new(centers))
}

/// Sets each sample's proposal target to its nearest intention point.
pub fn assign_proposals(samples: &mut [TrainingSample], vocab: &IntentionVocab) {
    for s in samples {
        let endpoint = s.endpoint();
        s.proposal = Some(ProposalTarget {
            index: vocab.nearest(endpoint),
            endpoint,
        });
    }
}
