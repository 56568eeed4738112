//! JSON-lines corpus files: a header object on line 1, then one record per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{tokenize, validate_record, Corpus, CorpusHeader, Features, Split, VideoRecord};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: String,
    features: Features,
    captions: Vec<String>,
    expert_topic: Option<usize>,
    split: Split,
    true_topic_mix: Option<Vec<f64>>,
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_corpus(corpus, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_corpus<W: Write>(corpus: &Corpus, w: &mut W) -> Result<()> {
    writeln!(w, "{}", to_json(&corpus.header)?)?;
    for r in &corpus.records {
        let line = RecordLine {
            id: r.id.clone(),
            features: r.features.clone(),
            captions: r.captions.iter().map(|c| c.join(" ")).collect(),
            expert_topic: r.expert_topic,
            split: r.split,
            true_topic_mix: r.true_topic_mix.clone(),
        };
        writeln!(w, "{}", to_json(&line)?)?;
    }
    Ok(())
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    read_corpus(File::open(path)?, path)
}

/// Parses a corpus; `origin` is only used in error messages.
pub fn read_corpus<R: Read>(reader: R, origin: &Path) -> Result<Corpus> {
    let mut lines = BufReader::new(reader).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::parse(origin, 1, "missing header"))??;
    let header: CorpusHeader = serde_json::from_str(&header_line)
        .map_err(|e| Error::parse(origin, 1, format!("bad header: {e}")))?;

    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RecordLine =
            serde_json::from_str(&line).map_err(|e| Error::parse(origin, lineno, e.to_string()))?;
        let record = VideoRecord {
            id: parsed.id,
            features: parsed.features,
            captions: parsed.captions.iter().map(|c| tokenize(c)).collect(),
            expert_topic: parsed.expert_topic,
            split: parsed.split,
            true_topic_mix: parsed.true_topic_mix,
        };
        validate_record(&header, &record)
            .map_err(|e| Error::parse(origin, lineno, e.to_string()))?;
        records.push(record);
    }
    Corpus::new(header, records)
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::invalid(format!("serialization failed: {e}")))
}
