//! Caption generation: greedy and beam decoding, plus the three captioning
//! modes (plain, predicted topics, user-assigned topics).

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::corpus::{VideoRecord, Vocabulary};
use crate::decoder::{Conditioning, DecoderKind, DecoderParams, DecoderState};
use crate::error::{check_dim, Error, Result};
use crate::metrics::{evaluate, EvalReport};
use crate::numerics::{check_simplex, Matrix, ParamBlocks, SIMPLEX_TOL};
use crate::predictor::PredictorParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeOptions {
    pub beam_width: usize,
    pub max_len: usize,
    pub length_normalize: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            beam_width: 5,
            max_len: 20,
            length_normalize: false,
        }
    }
}

/// A decoded token sequence (EOS excluded) and its total log probability
/// (including the EOS step when complete).
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamResult {
    /// Best first.
    pub hypotheses: Vec<Hypothesis>,
    /// No hypothesis reached EOS within `max_len`; the single returned
    /// hypothesis is the most probable unfinished one.
    pub truncated: bool,
}

impl BeamResult {
    pub fn best(&self) -> &Hypothesis {
        &self.hypotheses[0]
    }
}

fn expandable(w: usize) -> bool {
    w != Vocabulary::BOS_ID && w != Vocabulary::UNK_ID
}

fn rank_score(h: &Hypothesis, complete: bool, normalize: bool) -> f64 {
    if normalize {
        h.log_prob / (h.tokens.len() + usize::from(complete)) as f64
    } else {
        h.log_prob
    }
}

fn sort_complete(complete: &mut [Hypothesis], normalize: bool) {
    complete.sort_by(|a, b| {
        rank_score(b, true, normalize)
            .partial_cmp(&rank_score(a, true, normalize))
            .unwrap_or(Ordering::Equal)
            .then(a.tokens.cmp(&b.tokens))
    });
}

/// Beam search from BOS keeping `beam_width` live hypotheses per step.
/// Hypotheses that emit EOS within the top `beam_width` candidates of a step
/// are retired to the completed list. `max_len` counts generated tokens including EOS.
pub fn beam_search(
    params: &DecoderParams,
    x: &[f64],
    cond: &Conditioning,
    opts: &DecodeOptions,
) -> Result<BeamResult> {
    if opts.beam_width == 0 || opts.max_len == 0 {
        return Err(Error::invalid("beam width and max_len must be at least 1"));
    }
    struct Live {
        hyp: Hypothesis,
        state: DecoderState,
        last: usize,
    }
    let mut live = vec![Live {
        hyp: Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
        },
        state: params.init_state(x)?,
        last: Vocabulary::BOS_ID,
    }];
    let mut complete: Vec<Hypothesis> = Vec::new();

    for _ in 0..opts.max_len {
        if live.is_empty() {
            break;
        }
        let mut expanded: Vec<(Vec<f64>, DecoderState)> = Vec::with_capacity(live.len());
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (li, l) in live.iter().enumerate() {
            let (lp, next) = params.step(&l.state, l.last, cond, None)?;
            for (w, &p) in lp.iter().enumerate().filter(|(w, _)| expandable(*w)) {
                let total = l.hyp.log_prob + p;
                let len = l.hyp.tokens.len() + 1;
                let score = if opts.length_normalize {
                    total / len as f64
                } else {
                    total
                };
                cands.push((score, li, w));
            }
            expanded.push((lp, next));
        }
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut next_live = Vec::new();
        for (rank, &(_, li, w)) in cands.iter().enumerate() {
            let parent = &live[li];
            let (lp, state) = &expanded[li];
            let mut tokens = parent.hyp.tokens.clone();
            let log_prob = parent.hyp.log_prob + lp[w];
            if w == Vocabulary::EOS_ID {
                if rank < opts.beam_width {
                    complete.push(Hypothesis { tokens, log_prob });
                }
            } else if next_live.len() < opts.beam_width {
                tokens.push(w);
                next_live.push(Live {
                    hyp: Hypothesis { tokens, log_prob },
                    state: state.clone(),
                    last: w,
                });
            }
        }
        live = next_live;
        sort_complete(&mut complete, opts.length_normalize);
        complete.truncate(opts.beam_width);
        // Unnormalized scores only fall as hypotheses grow, so once the
        // best live prefix cannot enter the completed list, stop.
        if !opts.length_normalize && complete.len() == opts.beam_width {
            let worst_done = complete[complete.len() - 1].log_prob;
            if live.iter().all(|l| l.hyp.log_prob <= worst_done) {
                break;
            }
        }
    }

    if complete.is_empty() {
        let best = live
            .into_iter()
            .map(|l| l.hyp)
            .max_by(|a, b| {
                rank_score(a, false, opts.length_normalize)
                    .partial_cmp(&rank_score(b, false, opts.length_normalize))
                    .unwrap_or(Ordering::Equal)
                    .then(b.tokens.cmp(&a.tokens))
            })
            .ok_or(Error::Empty("beam"))?;
        return Ok(BeamResult {
            hypotheses: vec![best],
            truncated: true,
        });
    }
    Ok(BeamResult {
        hypotheses: complete,
        truncated: false,
    })
}

/// Greedy decoding: the most probable expandable token at every step.
pub fn greedy(
    params: &DecoderParams,
    x: &[f64],
    cond: &Conditioning,
    max_len: usize,
) -> Result<BeamResult> {
    if max_len == 0 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    let mut state = params.init_state(x)?;
    let mut last = Vocabulary::BOS_ID;
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
    };
    for _ in 0..max_len {
        let (lp, next) = params.step(&state, last, cond, None)?;
        let mut best = None;
        for (w, &p) in lp.iter().enumerate().filter(|(w, _)| expandable(*w)) {
            if best.is_none_or(|(_, bp)| p > bp) {
                best = Some((w, p));
            }
        }
        let (w, p) = best.ok_or(Error::Empty("vocabulary"))?;
        hyp.log_prob += p;
        if w == Vocabulary::EOS_ID {
            return Ok(BeamResult {
                hypotheses: vec![hyp],
                truncated: false,
            });
        }
        hyp.tokens.push(w);
        state = next;
        last = w;
    }
    Ok(BeamResult {
        hypotheses: vec![hyp],
        truncated: true,
    })
}

/// Topic predictor plus decoder: everything needed to caption a video.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionModel {
    pub predictor: Option<PredictorParams>,
    pub decoder: DecoderParams,
}

impl ParamBlocks for CaptionModel {
    fn named_blocks(&self) -> Vec<(String, &Matrix)> {
        let mut out = self
            .predictor
            .as_ref()
            .map(|p| p.named_blocks())
            .unwrap_or_default();
        out.extend(self.decoder.named_blocks());
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self
            .predictor
            .as_mut()
            .map(|p| p.blocks_mut())
            .unwrap_or_default();
        out.extend(self.decoder.blocks_mut());
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode", content = "topics")]
pub enum CaptionMode {
    Vanilla,
    Predicted,
    Assigned(Vec<f64>),
}

impl CaptionMode {
    pub fn name(&self) -> &'static str {
        match self {
            CaptionMode::Vanilla => "vanilla",
            CaptionMode::Predicted => "predicted",
            CaptionMode::Assigned(_) => "assigned",
        }
    }

    /// One-hot assignment of topic `k` out of `num_topics`.
    pub fn assign_topic(k: usize, num_topics: usize) -> Result<Self> {
        if k >= num_topics {
            return Err(Error::invalid(format!(
                "topic {k} out of range for K = {num_topics}"
            )));
        }
        let mut z = vec![0.0; num_topics];
        z[k] = 1.0;
        Ok(CaptionMode::Assigned(z))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Caption {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// Topic distribution the decoder was conditioned on.
    pub topics: Option<Vec<f64>>,
    pub truncated: bool,
}

impl CaptionModel {
    pub fn kind(&self) -> DecoderKind {
        self.decoder.kind
    }

    /// Resolves the topic distribution a mode feeds to the decoder.
    pub fn topics_for(&self, x: &[f64], mode: &CaptionMode) -> Result<Option<Vec<f64>>> {
        if self.decoder.kind == DecoderKind::Vanilla {
            return Ok(None);
        }
        match mode {
            CaptionMode::Vanilla => Err(Error::invalid(
                "topic-guided checkpoint cannot caption in vanilla mode",
            )),
            CaptionMode::Predicted => {
                let p = self
                    .predictor
                    .as_ref()
                    .ok_or_else(|| Error::invalid("checkpoint has no topic predictor"))?;
                p.predict(x).map(Some)
            }
            CaptionMode::Assigned(z) => {
                check_dim(
                    "assigned topic distribution",
                    self.decoder.num_topics(),
                    z.len(),
                )?;
                check_simplex(z, SIMPLEX_TOL)?;
                Ok(Some(z.clone()))
            }
        }
    }

    pub fn caption(&self, x: &[f64], mode: &CaptionMode, opts: &DecodeOptions) -> Result<Caption> {
        let topics = self.topics_for(x, mode)?;
        let cond = self.decoder.condition(topics.as_deref())?;
        let res = beam_search(&self.decoder, x, &cond, opts)?;
        let best = res.best();
        Ok(Caption {
            tokens: best.tokens.clone(),
            log_prob: best.log_prob,
            topics,
            truncated: res.truncated,
        })
    }

    pub fn caption_all(
        &self,
        records: &[&VideoRecord],
        mode: &CaptionMode,
        opts: &DecodeOptions,
    ) -> Result<Vec<Caption>> {
        records
            .iter()
            .map(|r| self.caption(&r.features.concat(), mode, opts))
            .collect()
    }
}

/// Scores decoded captions against the records' reference captions.
pub fn evaluate_captions(
    vocab: &Vocabulary,
    records: &[&VideoRecord],
    captions: &[Caption],
) -> Result<EvalReport> {
    check_dim("captions", records.len(), captions.len())?;
    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let cands: Vec<Vec<String>> = captions.iter().map(|c| vocab.decode(&c.tokens)).collect();
    let refs: Vec<Vec<Vec<String>>> = records.iter().map(|r| r.captions.clone()).collect();
    evaluate(&ids, &cands, &refs)
}

/// One line of a captions output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionLine {
    pub id: String,
    pub mode: String,
    pub tokens: Vec<String>,
    pub log_prob: f64,
    pub topics: Option<Vec<f64>>,
    pub truncated: bool,
}

impl CaptionLine {
    pub fn new(id: &str, mode: &CaptionMode, caption: &Caption, vocab: &Vocabulary) -> Self {
        Self {
            id: id.to_string(),
            mode: mode.name().to_string(),
            tokens: vocab.decode(&caption.tokens),
            log_prob: caption.log_prob,
            topics: caption.topics.clone(),
            truncated: caption.truncated,
        }
    }
}
