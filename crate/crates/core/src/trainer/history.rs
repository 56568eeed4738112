use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One line of a training history file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    pub train_caption: Option<f64>,
    pub train_topic: Option<f64>,
    pub train_combined: Option<f64>,
    pub val_caption: Option<f64>,
    pub val_topic: Option<f64>,
    pub val_combined: Option<f64>,
    pub val_bleu4: Option<f64>,
}

impl EpochRecord {
    pub(crate) fn topic_only(stage: u8, epoch: usize, train: f64, val: Option<f64>) -> Self {
        Self {
            stage,
            epoch,
            train_caption: None,
            train_topic: Some(train),
            train_combined: Some(train),
            val_caption: None,
            val_topic: val,
            val_combined: val,
            val_bleu4: None,
        }
    }
}

/// Wall-clock time per epoch, kept apart from the history so that history
/// files are a pure function of (inputs, config, seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochTiming {
    pub stage: u8,
    pub epoch: usize,
    pub wall_ms: u128,
}

pub fn write_jsonl<T: Serialize>(items: &[T], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| Error::invalid(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_history(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::parse(path, i + 1, e.to_string())))
        .collect()
}
