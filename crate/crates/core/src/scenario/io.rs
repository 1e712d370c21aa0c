//! Line-delimited JSON datasets: one header line, then one sample per line.
//!
//! Floats are written as shortest round-trip decimals, so reading a file back
//! reproduces every value bit for bit.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{IntentionVocab, TrainingSample};
use crate::{Error, Result};

pub const FORMAT_NAME: &str = "stformer-samples";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<IntentionVocab>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub vocab: Option<IntentionVocab>,
    pub samples: Vec<TrainingSample>,
}

impl Dataset {
    pub fn header(&self) -> DatasetHeader {
        DatasetHeader {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            count: self.samples.len(),
            vocab_hash: self.vocab.as_ref().map(IntentionVocab::hash),
            vocab: self.vocab.clone(),
        }
    }
}

pub fn serialize_samples(dataset: &Dataset) -> Result<String> {
    let mut out = Vec::new();
    write_lines(dataset, &mut out)?;
    String::from_utf8(out).map_err(|e| Error::Contract(e.to_string()))
}

fn write_lines<W: Write>(dataset: &Dataset, mut w: W) -> Result<()> {
    let json = |e: serde_json::Error| Error::Contract(e.to_string());
    serde_json::to_writer(&mut w, &dataset.header()).map_err(json)?;
    w.write_all(b"\n")?;
    for s in &dataset.samples {
        serde_json::to_writer(&mut w, s).map_err(json)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Parses a dataset; an empty input is an empty dataset. Errors carry the
/// 1-based line number.
pub fn deserialize_samples(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((idx, first)) = lines.next() else {
        return Ok(Dataset {
            vocab: None,
            samples: Vec::new(),
        });
    };
    let parse_err = |line: usize, msg: String| Error::Parse { line: line + 1, msg };
    let header: DatasetHeader = serde_json::from_str(first).map_err(|e| parse_err(idx, format!("bad header: {e}")))?;
    if header.format != FORMAT_NAME || header.version != FORMAT_VERSION {
        return Err(parse_err(
            idx,
            format!("unsupported format {} v{}", header.format, header.version),
        ));
    }
    if let Some(v) = &header.vocab {
        if header.vocab_hash.as_deref() != Some(v.hash().as_str()) {
            return Err(parse_err(idx, "vocabulary hash mismatch".into()));
        }
    }
    let mut samples = Vec::with_capacity(header.count);
    for (i, line) in lines {
        let s: TrainingSample = serde_json::from_str(line).map_err(|e| parse_err(i, e.to_string()))?;
        s.validate().map_err(|e| parse_err(i, e.to_string()))?;
        samples.push(s);
    }
    if samples.len() != header.count {
        return Err(Error::Parse {
            line: text.lines().count(),
            msg: format!("header declares {} samples, found {}", header.count, samples.len()),
        });
    }
    Ok(Dataset {
        vocab: header.vocab,
        samples,
    })
}

pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_lines(dataset, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    deserialize_samples(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{build_sample, generate_scenario, Template, DEFAULT_ANCHOR};

    #[test]
    fn empty_text_is_empty_dataset() {
        let d = deserialize_samples("").unwrap();
        assert!(d.samples.is_empty() && d.vocab.is_none());
    }

    #[test]
    fn truncated_record_names_its_line() {
        let s = build_sample(&generate_scenario(2, Template::LaneChange), DEFAULT_ANCHOR).unwrap();
        let ds = Dataset {
            vocab: Some(IntentionVocab::new(vec![[1.0, 2.0], [3.0, 4.0]])),
            samples: vec![s.clone(), s],
        };
        let text = serialize_samples(&ds).unwrap();
        assert_eq!(deserialize_samples(&text).unwrap(), ds);
        let cut = &text[..text.len() - 40];
        match deserialize_samples(cut) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
