//! Headered text checkpoints.
//!
//! ```text
//! tgm-checkpoint 1
//! variant mm-tgm
//! stage 3
//! seed 7
//! features 32
//! config k = 5
//! config ...
//! vocab 163 0
//! <one token per line>
//! blocks 30
//! block predictor.w1 64 32
//! <one matrix row per line, values written with 17 significant digits>
//! ...
//! end
//! ```

use std::fmt::Write as _;
use std::path::Path;

use crate::config::TrainConfig;
use crate::corpus::Vocabulary;
use crate::decoder::{DecoderKind, DecoderParams, DecoderShape};
use crate::error::{Error, Result};
use crate::inference::CaptionModel;
use crate::numerics::ParamBlocks;
use crate::predictor::PredictorParams;
use crate::trainer::Variant;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "tgm-checkpoint";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub variant: Variant,
    /// Last training stage that produced these parameters.
    pub stage: u8,
    pub seed: u64,
    pub config: TrainConfig,
    pub vocabulary: Vocabulary,
    pub model: CaptionModel,
}

impl Checkpoint {
    pub fn feature_dim(&self) -> usize {
        self.model.decoder.feature_dim()
    }

    /// Zero-valued model with the layout implied by the header fields.
    fn template(
        variant: Variant,
        config: &TrainConfig,
        vocab_size: usize,
        feature_dim: usize,
    ) -> Result<CaptionModel> {
        let kind = match variant {
            Variant::Vanilla => DecoderKind::Vanilla,
            Variant::Tgm | Variant::MmTgm => DecoderKind::Tgm,
        };
        let decoder = DecoderParams::zeros(&DecoderShape {
            kind,
            vocab_size,
            hidden: config.hidden_size,
            feature_dim,
            factors: config.factors,
            topics: config.k,
            factorize_recurrent: config.factorize_recurrent,
        })?;
        let predictor = (kind == DecoderKind::Tgm)
            .then(|| PredictorParams::zeros(feature_dim, config.predictor_hidden, config.k));
        Ok(CaptionModel { predictor, decoder })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{MAGIC} {FORMAT_VERSION}");
        let _ = writeln!(out, "variant {}", self.variant);
        let _ = writeln!(out, "stage {}", self.stage);
        let _ = writeln!(out, "seed {}", self.seed);
        let _ = writeln!(out, "features {}", self.feature_dim());
        for line in self.config.to_toml_string().lines() {
            let _ = writeln!(out, "config {line}");
        }
        let tokens = self.vocabulary.tokens();
        let _ = writeln!(
            out,
            "vocab {} {}",
            tokens.len(),
            self.vocabulary.min_count()
        );
        for t in tokens {
            let _ = writeln!(out, "{t}");
        }
        let blocks = self.model.named_blocks();
        let _ = writeln!(out, "blocks {}", blocks.len());
        for (name, m) in blocks {
            let _ = writeln!(out, "block {name} {} {}", m.rows(), m.cols());
            for r in 0..m.rows() {
                let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:.16e}")).collect();
                let _ = writeln!(out, "{}", row.join(" "));
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = Lines::new(text);
        let header = lines.next_line()?;
        let version = header
            .strip_prefix(MAGIC)
            .map(str::trim)
            .ok_or_else(|| lines.err("not a checkpoint file"))?;
        let version: u32 = version
            .parse()
            .map_err(|_| lines.err("bad format version"))?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let variant: Variant = lines.field("variant")?;
        let stage: u8 = lines.field("stage")?;
        let seed: u64 = lines.field("seed")?;
        let feature_dim: usize = lines.field("features")?;
        let mut config_text = String::new();
        while let Some(rest) = lines.peek().and_then(|l| l.strip_prefix("config ")) {
            config_text.push_str(rest);
            config_text.push('\n');
            lines.next_line()?;
        }
        let config = TrainConfig::from_toml_str(&config_text)?;

        let vocab_header = lines.field_str("vocab")?;
        let mut parts = vocab_header.split_whitespace();
        let (n_tokens, min_count) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) => (
                a.parse::<usize>()
                    .map_err(|_| lines.err("bad vocabulary size"))?,
                b.parse::<usize>()
                    .map_err(|_| lines.err("bad vocabulary min_count"))?,
            ),
            _ => return Err(lines.err("vocabulary header needs size and min_count")),
        };
        let mut tokens = Vec::with_capacity(n_tokens);
        for _ in 0..n_tokens {
            tokens.push(lines.next_line()?.to_string());
        }
        let vocabulary = Vocabulary::from_tokens(tokens.iter().skip(3).cloned(), min_count);
        if vocabulary.tokens() != tokens.as_slice() {
            return Err(
                lines.err("vocabulary does not start with the special tokens or repeats a token")
            );
        }

        let mut model = Self::template(variant, &config, vocabulary.len(), feature_dim)?;
        let n_blocks: usize = lines.field("blocks")?;
        let expected: Vec<(String, usize, usize)> = model
            .named_blocks()
            .into_iter()
            .map(|(n, m)| (n, m.rows(), m.cols()))
            .collect();
        if n_blocks != expected.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter blocks, found {n_blocks}",
                expected.len()
            )));
        }
        let mut values = Vec::with_capacity(model.num_params());
        for (name, rows, cols) in &expected {
            let head = lines.field_str("block")?;
            let parts: Vec<&str> = head.split_whitespace().collect();
            if parts.len() != 3 || parts[0] != name {
                return Err(lines.err(&format!("expected block '{name}'")));
            }
            let shape = (
                parts[1].parse::<usize>().ok(),
                parts[2].parse::<usize>().ok(),
            );
            if shape != (Some(*rows), Some(*cols)) {
                return Err(lines.err(&format!(
                    "block '{name}' has shape {}x{}, expected {rows}x{cols}",
                    parts[1], parts[2]
                )));
            }
            for _ in 0..*rows {
                let line = lines.next_line()?;
                let row: Vec<f64> = line
                    .split_whitespace()
                    .map(str::parse)
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| lines.err("bad number"))?;
                if row.len() != *cols {
                    return Err(lines.err(&format!(
                        "row of block '{name}' has {} values, expected {cols}",
                        row.len()
                    )));
                }
                values.extend(row);
            }
        }
        if lines.next_line()? != "end" {
            return Err(lines.err("missing end marker"));
        }
        model.assign_flat(&values)?;
        Ok(Self {
            variant,
            stage,
            seed,
            config,
            vocabulary,
            model,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

struct Lines<'a> {
    inner: std::iter::Peekable<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            inner: text.lines().peekable(),
            line: 0,
        }
    }

    fn err(&self, msg: &str) -> Error {
        Error::Checkpoint(format!("line {}: {msg}", self.line))
    }

    fn peek(&mut self) -> Option<&'a str> {
        self.inner.peek().copied()
    }

    fn next_line(&mut self) -> Result<&'a str> {
        self.line += 1;
        self.inner
            .next()
            .ok_or_else(|| Error::Checkpoint(format!("truncated at line {}", self.line)))
    }

    fn field_str(&mut self, key: &str) -> Result<&'a str> {
        let l = self.next_line()?;
        l.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| self.err(&format!("expected '{key}'")))
    }

    fn field<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let v = self.field_str(key)?;
        v.trim()
            .parse()
            .map_err(|_| self.err(&format!("bad value for '{key}'")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_checkpoint(variant: Variant, seed: u64) -> Checkpoint {
        let config = TrainConfig {
            k: 3,
            hidden_size: 5,
            factors: 4,
            predictor_hidden: 6,
            factorize_recurrent: seed.is_multiple_of(2),
            ..TrainConfig::default()
        };
        let vocabulary = Vocabulary::from_tokens(["dog", "runs", "the"].map(String::from), 0);
        let mut model = Checkpoint::template(variant, &config, vocabulary.len(), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = model.num_params();
        let values: Vec<f64> = (0..n)
            .map(|_| rng.random_range(-1.0..1.0) * 10f64.powi(rng.random_range(-8..3)))
            .collect();
        model.assign_flat(&values).unwrap();
        Checkpoint {
            variant,
            stage: 2,
            seed,
            config,
            vocabulary,
            model,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        for (i, v) in [Variant::Vanilla, Variant::Tgm, Variant::MmTgm]
            .into_iter()
            .enumerate()
        {
            let c = random_checkpoint(v, i as u64);
            let back = Checkpoint::from_text(&c.to_text()).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.to_text(), c.to_text());
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = random_checkpoint(Variant::MmTgm, 4);
        let path = dir.path().join("model.ckpt");
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
    }

    #[test]
    fn rejects_corruption() {
        let text = random_checkpoint(Variant::Tgm, 1).to_text();
        let bad_magic = text.replacen("tgm-checkpoint", "tgm-checkpiont", 1);
        assert!(Checkpoint::from_text(&bad_magic).is_err());
        let bad_version = text.replacen("tgm-checkpoint 1", "tgm-checkpoint 2", 1);
        assert!(
            matches!(Checkpoint::from_text(&bad_version), Err(Error::Checkpoint(m)) if m.contains("version"))
        );
        let truncated = &text[..text.len() / 2];
        assert!(Checkpoint::from_text(truncated).is_err());
        let bad_variant = text.replacen("variant tgm", "variant lstm", 1);
        assert!(Checkpoint::from_text(&bad_variant).is_err());
        // a config that implies a different layout
        let mismatched = text.replacen("config hidden_size = 5", "config hidden_size = 6", 1);
        assert!(Checkpoint::from_text(&mismatched).is_err());
        let renamed = text.replacen("block decoder.embedding", "block decoder.embeding", 1);
        assert!(Checkpoint::from_text(&renamed).is_err());
    }
}
