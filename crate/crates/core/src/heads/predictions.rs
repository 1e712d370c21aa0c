//! Prediction dumps: one JSON record per sample and line.

use std::io::{BufWriter, Write};
use std::path::Path;

use super::rollout::TrajectoryPrediction;
use crate::backbone::NUM_STATE_TOKENS;
use crate::{Error, Result};

pub fn write_predictions(path: &Path, preds: &[TrajectoryPrediction]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for p in preds {
        serde_json::to_writer(&mut w, p).map_err(|e| Error::Contract(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads and validates a dump; malformed records report their line.
pub fn parse_predictions(text: &str) -> Result<Vec<TrajectoryPrediction>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { line: i + 1, msg };
        let p: TrajectoryPrediction = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if p.modes.is_empty() || p.modes.len() != p.scores.len() {
            return Err(err(format!("{} modes with {} scores", p.modes.len(), p.scores.len())));
        }
        if let Some(m) = p.modes.iter().find(|m| m.len() != NUM_STATE_TOKENS) {
            return Err(err(format!("mode has {} states, expected {NUM_STATE_TOKENS}", m.len())));
        }
        out.push(p);
    }
    Ok(out)
}

pub fn read_predictions(path: &Path) -> Result<Vec<TrajectoryPrediction>> {
    parse_predictions(&std::fs::read_to_string(path)?)
}
