//! JSONL dataset persistence.
//!
//! One record per line, canonical field order `features,label,group`, UTF-8.
//! Saving a loaded file reproduces it byte for byte when the input is in
//! canonical form.

use super::{GroupedDataset, Sample};
use crate::error::{Error, Result};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

pub fn save_jsonl(ds: &GroupedDataset, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut out = BufWriter::new(file);
    for s in ds.samples() {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<GroupedDataset> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut samples: Vec<Sample> = Vec::new();
    let mut dim: Option<usize> = None;
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        let sample: Sample = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: lineno, message: e.to_string() })?;
        if sample.label > 1 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("label {} is not binary", sample.label),
            });
        }
        match dim {
            None => dim = Some(sample.features.len()),
            Some(d) if d != sample.features.len() => {
                return Err(Error::Schema(format!(
                    "line {}: feature dimension {} != {}",
                    lineno,
                    sample.features.len(),
                    d
                )));
            }
            _ => {}
        }
        samples.push(sample);
    }
    GroupedDataset::from_samples(samples)
}
