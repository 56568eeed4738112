//! Losses and the three-stage training scheme.
//!
//! 1. the topic predictor learns teacher topics from features alone;
//! 2. the decoder learns to caption, conditioned on the frozen predictor's
//!    output distribution;
//! 3. both are fine-tuned jointly under `(1−λ)·caption + λ·topic`.
//!
//! Every stage draws from its own random stream, so stages 1–2 are identical
//! across variants and λ values.

pub mod adam;
pub mod history;

use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::corpus::{Corpus, Split, VideoRecord, Vocabulary};
use crate::decoder::{DecoderKind, DecoderParams, DecoderShape, StepMasks};
use crate::error::{check_dim, Error, Result};
use crate::inference::{beam_search, CaptionModel, DecodeOptions};
use crate::metrics::bleu4;
use crate::numerics::{check_simplex, ParamBlocks, SIMPLEX_TOL};
use crate::predictor::{
    mean_topic_loss, topic_loss, topic_loss_grad, topic_loss_unchecked, train_predictor,
    PredictorParams, PredictorTraining, TopicExample, TopicLossKind,
};
use crate::topic_mining::MinedTopics;

use adam::{clip_global_norm, AdamState};
use history::{EpochRecord, EpochTiming};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Vanilla,
    Tgm,
    MmTgm,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Vanilla => "vanilla",
            Variant::Tgm => "tgm",
            Variant::MmTgm => "mm-tgm",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Variant::Vanilla),
            "tgm" => Ok(Variant::Tgm),
            "mm-tgm" => Ok(Variant::MmTgm),
            other => Err(Error::invalid(format!("unknown variant '{other}'"))),
        }
    }
}

const STREAM_PREDICTOR_INIT: u64 = 10;
const STREAM_TGM_INIT: u64 = 11;
const STREAM_VANILLA_INIT: u64 = 12;
const STREAM_HOLDOUT: u64 = 20;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `−log Pr(y | x [, z])`.
pub fn caption_loss(
    decoder: &DecoderParams,
    tokens: &[usize],
    x: &[f64],
    z: Option<&[f64]>,
) -> Result<f64> {
    Ok(-decoder.sentence_log_prob(tokens, x, z)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub caption: f64,
    /// Absent when the example has no teacher topics.
    pub topic: Option<f64>,
    pub combined: f64,
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "lambda {lambda} must lie in [0, 1)"
        )))
    }
}

fn predictor_of(model: &CaptionModel) -> Result<&PredictorParams> {
    model
        .predictor
        .as_ref()
        .ok_or_else(|| Error::invalid("model has no topic predictor"))
}

/// `(1−λ)·caption_loss(y, x, ψ(x)) + λ·topic_loss(ψ(x), teacher)`.
pub fn multi_task_loss(
    model: &CaptionModel,
    tokens: &[usize],
    teacher: &[f64],
    x: &[f64],
    lambda: f64,
    kind: TopicLossKind,
) -> Result<f64> {
    check_lambda(lambda)?;
    let z = predictor_of(model)?.predict(x)?;
    let caption = caption_loss(&model.decoder, tokens, x, Some(&z))?;
    let topic = topic_loss(&z, teacher, kind)?;
    Ok((1.0 - lambda) * caption + lambda * topic)
}

/// Multi-task loss of one example with gradients (scaled by `scale`)
/// accumulated into `grads`. The topic term is dropped when `teacher` is
/// `None`.
#[allow(clippy::too_many_arguments)]
pub fn multi_task_grad(
    model: &CaptionModel,
    tokens: &[usize],
    teacher: Option<&[f64]>,
    x: &[f64],
    lambda: f64,
    kind: TopicLossKind,
    masks: Option<&[StepMasks]>,
    scale: f64,
    grads: &mut CaptionModel,
) -> Result<LossParts> {
    check_lambda(lambda)?;
    let predictor = predictor_of(model)?;
    if let Some(t) = teacher {
        check_dim("teacher topics", predictor.num_topics(), t.len())?;
        check_simplex(t, SIMPLEX_TOL)?;
    }
    let ptape = predictor.forward(x)?;
    let cond = model.decoder.condition(Some(&ptape.topics))?;
    let tape = model.decoder.forward_sentence(tokens, x, &cond, masks)?;
    let mut dz = vec![0.0; ptape.topics.len()];
    let caption_scale = (1.0 - lambda) * scale;
    model.decoder.backward_sentence(
        &tape,
        &cond,
        caption_scale,
        &mut grads.decoder,
        Some(&mut dz),
    );
    let caption = tape.loss();
    let topic = teacher.map(|t| topic_loss_unchecked(&ptape.topics, t, kind));
    if let Some(t) = teacher {
        let g = topic_loss_grad(&ptape.topics, t, kind);
        dz.iter_mut()
            .zip(g)
            .for_each(|(d, gi)| *d += lambda * scale * gi);
    }
    let pgrads = grads
        .predictor
        .as_mut()
        .ok_or_else(|| Error::invalid("gradient buffer has no predictor"))?;
    predictor.backward(&ptape, &dz, 1.0, pgrads);
    Ok(LossParts {
        caption,
        topic,
        combined: (1.0 - lambda) * caption + lambda * topic.unwrap_or(0.0),
    })
}

/// λ/(1−λ) ratios swept by [`sweep_lambda`].
pub fn lambda_ratios() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}

pub fn lambda_from_ratio(ratio: f64) -> f64 {
    ratio / (1.0 + ratio)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: u8,
    pub epochs_run: usize,
    /// 0 means the stage's initial parameters were kept.
    pub best_epoch: usize,
    pub best_val_bleu4: Option<f64>,
    pub diverged: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub timing: Vec<EpochTiming>,
    pub stages: Vec<StageSummary>,
}

impl TrainOutput {
    pub fn write_history(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        history::write_jsonl(&self.history, path)
    }

    pub fn write_timing(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        history::write_jsonl(&self.timing, path)
    }
}

#[derive(Debug, Clone)]
struct Example {
    record: usize,
    tokens: Vec<usize>,
}

/// Corpus views shared by all stages.
struct Prepared<'a> {
    vocab: &'a Vocabulary,
    train: Vec<&'a VideoRecord>,
    train_x: Vec<Vec<f64>>,
    /// Teacher topics per training record; `None` without mined topics.
    teacher: Vec<Option<Vec<f64>>>,
    holdout: Vec<bool>,
    examples: Vec<Example>,
    val: Vec<&'a VideoRecord>,
    val_x: Vec<Vec<f64>>,
    val_examples: Vec<Example>,
}

impl<'a> Prepared<'a> {
    fn new(corpus: &'a Corpus, topics: Option<&MinedTopics>, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let vocab = &corpus.vocabulary;
        let train: Vec<&VideoRecord> = corpus.split(Split::Train).collect();
        if train.is_empty() {
            return Err(Error::Empty("training split"));
        }
        let val: Vec<&VideoRecord> = corpus.split(Split::Val).collect();
        let teacher = match topics {
            None => vec![None; train.len()],
            Some(t) => {
                if t.config.k != cfg.k {
                    return Err(Error::Config(format!(
                        "topics were mined with K = {} but the config has k = {}",
                        t.config.k, cfg.k
                    )));
                }
                train
                    .iter()
                    .map(|r| {
                        t.teacher_for(&r.id)
                            .map(|z| Some(z.to_vec()))
                            .ok_or_else(|| {
                                Error::invalid(format!(
                                    "no teacher topics for training record '{}'",
                                    r.id
                                ))
                            })
                    })
                    .collect::<Result<_>>()?
            }
        };
        let n_hold = (cfg.predictor_holdout * train.len() as f64).round() as usize;
        let n_hold = if n_hold >= train.len() { 0 } else { n_hold };
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, STREAM_HOLDOUT));
        let mut holdout = vec![false; train.len()];
        order[..n_hold].iter().for_each(|&i| holdout[i] = true);

        let examples_of = |records: &[&VideoRecord]| -> Vec<Example> {
            records
                .iter()
                .enumerate()
                .flat_map(|(i, r)| {
                    r.captions.iter().map(move |c| Example {
                        record: i,
                        tokens: vocab.encode(c),
                    })
                })
                .collect()
        };
        Ok(Self {
            vocab,
            train_x: train.iter().map(|r| r.features.concat()).collect(),
            examples: examples_of(&train),
            val_x: val.iter().map(|r| r.features.concat()).collect(),
            val_examples: examples_of(&val),
            train,
            teacher,
            holdout,
            val,
        })
    }

    fn topic_examples(&self, holdout: bool) -> Vec<TopicExample> {
        (0..self.train.len())
            .filter(|&i| self.holdout[i] == holdout)
            .filter_map(|i| {
                self.teacher[i].as_ref().map(|t| TopicExample {
                    x: self.train_x[i].clone(),
                    teacher: t.clone(),
                })
            })
            .collect()
    }
}

struct ValStats {
    caption: Option<f64>,
    topic: Option<f64>,
    combined: Option<f64>,
    bleu4: Option<f64>,
}

fn decode_options(cfg: &TrainConfig) -> DecodeOptions {
    DecodeOptions {
        beam_width: cfg.beam_width,
        max_len: cfg.max_len,
        length_normalize: cfg.length_normalize,
    }
}

fn validate(
    model: &CaptionModel,
    prep: &Prepared,
    cfg: &TrainConfig,
    lambda: Option<f64>,
) -> Result<ValStats> {
    let topics_of = |x: &[f64]| -> Result<Option<Vec<f64>>> {
        match (&model.predictor, model.decoder.kind) {
            (Some(p), DecoderKind::Tgm) => p.predict(x).map(Some),
            _ => Ok(None),
        }
    };
    let val_z: Vec<Option<Vec<f64>>> = prep
        .val_x
        .iter()
        .map(|x| topics_of(x))
        .collect::<Result<_>>()?;

    let caption = if prep.val_examples.is_empty() {
        None
    } else {
        let mut total = 0.0;
        for e in &prep.val_examples {
            total += caption_loss(
                &model.decoder,
                &e.tokens,
                &prep.val_x[e.record],
                val_z[e.record].as_deref(),
            )?;
        }
        Some(total / prep.val_examples.len() as f64)
    };
    let topic = match &model.predictor {
        Some(p) => {
            let held = prep.topic_examples(true);
            if held.is_empty() {
                None
            } else {
                Some(mean_topic_loss(p, &held, cfg.topic_loss)?)
            }
        }
        None => None,
    };
    let combined = match (lambda, caption, topic) {
        (Some(l), Some(c), Some(t)) => Some((1.0 - l) * c + l * t),
        _ => caption,
    };
    let bleu = if prep.val.is_empty() {
        None
    } else {
        let opts = decode_options(cfg);
        let mut cands = Vec::with_capacity(prep.val.len());
        for (i, x) in prep.val_x.iter().enumerate() {
            let cond = model.decoder.condition(val_z[i].as_deref())?;
            let best = beam_search(&model.decoder, x, &cond, &opts)?;
            cands.push(prep.vocab.decode(&best.best().tokens));
        }
        let refs: Vec<Vec<Vec<String>>> = prep.val.iter().map(|r| r.captions.clone()).collect();
        Some(bleu4(&cands, &refs)?)
    };
    Ok(ValStats {
        caption,
        topic,
        combined,
        bleu4: bleu,
    })
}

/// Selection order: higher validation BLEU-4, then lower validation loss.
/// Without validation data, lower training loss.
fn better(a: (Option<f64>, Option<f64>, f64), b: (Option<f64>, Option<f64>, f64)) -> bool {
    match (a.0, b.0) {
        (Some(x), Some(y)) if x != y => x > y,
        (Some(_), Some(_)) => a.1.unwrap_or(f64::INFINITY) < b.1.unwrap_or(f64::INFINITY),
        _ => a.2 < b.2,
    }
}

#[derive(Default)]
struct RunLog {
    history: Vec<EpochRecord>,
    timing: Vec<EpochTiming>,
    stages: Vec<StageSummary>,
}

fn dropout_masks(
    n: usize,
    steps: usize,
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<StepMasks>> {
    (rate > 0.0).then(|| {
        (0..steps)
            .map(|_| StepMasks::sample(n, rate, rng))
            .collect()
    })
}

/// Trains the decoder (stage 2, `lambda = None`) or the whole model (stage 3,
/// `lambda = Some(λ)`), keeping the best validation epoch.
fn decoder_stage(
    stage: u8,
    model: &mut CaptionModel,
    prep: &Prepared,
    cfg: &TrainConfig,
    epochs: usize,
    lambda: Option<f64>,
    log: &mut RunLog,
) -> Result<()> {
    let mut rng = rng_for(cfg.seed, u64::from(stage));
    let joint = lambda.is_some();
    let hidden = model.decoder.hidden_size();
    // frozen predictor outputs for the decoder-only stage
    let frozen_z: Vec<Option<Vec<f64>>> = match (&model.predictor, model.decoder.kind, joint) {
        (Some(p), DecoderKind::Tgm, false) => prep
            .train_x
            .iter()
            .map(|x| p.predict(x).map(Some))
            .collect::<Result<_>>()?,
        _ => vec![None; prep.train.len()],
    };
    let mut adam_joint = joint.then(|| AdamState::new(&*model));
    let mut adam_decoder = (!joint).then(|| AdamState::new(&model.decoder));

    let v0 = validate(model, prep, cfg, lambda)?;
    log.history.push(EpochRecord {
        stage,
        epoch: 0,
        train_caption: None,
        train_topic: None,
        train_combined: None,
        val_caption: v0.caption,
        val_topic: v0.topic,
        val_combined: v0.combined,
        val_bleu4: v0.bleu4,
    });
    let mut best = model.clone();
    let mut best_key = (v0.bleu4, v0.combined, f64::INFINITY);
    let mut best_epoch = 0;
    let mut epochs_run = 0;
    let mut diverged = false;
    let mut order: Vec<usize> = (0..prep.examples.len()).collect();

    for epoch in 1..=epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let (mut sum_cap, mut sum_topic, mut n_topic, mut sum_comb) = (0.0, 0.0, 0usize, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            if let Some(l) = lambda {
                let mut grads = model.zeros_like();
                for &ei in batch {
                    let e = &prep.examples[ei];
                    let masks = dropout_masks(hidden, e.tokens.len() + 1, cfg.dropout, &mut rng);
                    let teacher = if prep.holdout[e.record] {
                        None
                    } else {
                        prep.teacher[e.record].as_deref()
                    };
                    let parts = multi_task_grad(
                        model,
                        &e.tokens,
                        teacher,
                        &prep.train_x[e.record],
                        l,
                        cfg.topic_loss,
                        masks.as_deref(),
                        scale,
                        &mut grads,
                    )?;
                    sum_cap += parts.caption;
                    sum_comb += parts.combined;
                    if let Some(t) = parts.topic {
                        sum_topic += t;
                        n_topic += 1;
                    }
                }
                clip_global_norm(grads.blocks_mut(), cfg.clip_norm);
                adam_joint
                    .as_mut()
                    .expect("joint optimizer")
                    .step(model, &grads, cfg.lr)?;
            } else {
                let mut grads = model.decoder.zeros_like();
                for &ei in batch {
                    let e = &prep.examples[ei];
                    let masks = dropout_masks(hidden, e.tokens.len() + 1, cfg.dropout, &mut rng);
                    let cond = model.decoder.condition(frozen_z[e.record].as_deref())?;
                    let tape = model.decoder.forward_sentence(
                        &e.tokens,
                        &prep.train_x[e.record],
                        &cond,
                        masks.as_deref(),
                    )?;
                    model
                        .decoder
                        .backward_sentence(&tape, &cond, scale, &mut grads, None);
                    sum_cap += tape.loss();
                    sum_comb += tape.loss();
                }
                clip_global_norm(grads.blocks_mut(), cfg.clip_norm);
                adam_decoder.as_mut().expect("decoder optimizer").step(
                    &mut model.decoder,
                    &grads,
                    cfg.lr,
                )?;
            }
        }
        epochs_run = epoch;
        let n = prep.examples.len() as f64;
        let train_comb = sum_comb / n;
        if !train_comb.is_finite() || !model.blocks().iter().all(|m| m.is_finite()) {
            diverged = true;
            break;
        }
        let v = validate(model, prep, cfg, lambda)?;
        log.history.push(EpochRecord {
            stage,
            epoch,
            train_caption: Some(sum_cap / n),
            train_topic: (n_topic > 0).then(|| sum_topic / n_topic as f64),
            train_combined: Some(train_comb),
            val_caption: v.caption,
            val_topic: v.topic,
            val_combined: v.combined,
            val_bleu4: v.bleu4,
        });
        log.timing.push(EpochTiming {
            stage,
            epoch,
            wall_ms: started.elapsed().as_millis(),
        });
        let key = (v.bleu4, v.combined, train_comb);
        if better(key, best_key) {
            best_key = key;
            best = model.clone();
            best_epoch = epoch;
        } else if epoch - best_epoch >= cfg.patience.max(1) {
            break;
        }
    }
    *model = best;
    log.stages.push(StageSummary {
        stage,
        epochs_run,
        best_epoch,
        best_val_bleu4: best_key.0,
        diverged,
    });
    Ok(())
}

fn tgm_shape(corpus: &Corpus, cfg: &TrainConfig, kind: DecoderKind) -> DecoderShape {
    DecoderShape {
        kind,
        vocab_size: corpus.vocabulary.len(),
        hidden: cfg.hidden_size,
        feature_dim: corpus.input_dim(),
        factors: cfg.factors,
        topics: cfg.k,
        factorize_recurrent: cfg.factorize_recurrent,
    }
}

fn output(
    corpus: &Corpus,
    cfg: &TrainConfig,
    variant: Variant,
    stage: u8,
    model: CaptionModel,
    log: RunLog,
) -> TrainOutput {
    TrainOutput {
        checkpoint: Checkpoint {
            variant,
            stage,
            seed: cfg.seed,
            config: cfg.clone(),
            vocabulary: corpus.vocabulary.clone(),
            model,
        },
        history: log.history,
        timing: log.timing,
        stages: log.stages,
    }
}

/// Baseline: plain LSTM decoder conditioned on features only.
pub fn train_vanilla(corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainOutput> {
    let prep = Prepared::new(corpus, None, cfg)?;
    let decoder = DecoderParams::new(
        &tgm_shape(corpus, cfg, DecoderKind::Vanilla),
        &mut rng_for(cfg.seed, STREAM_VANILLA_INIT),
    )?;
    let mut model = CaptionModel {
        predictor: None,
        decoder,
    };
    let mut log = RunLog::default();
    decoder_stage(2, &mut model, &prep, cfg, cfg.stage2_epochs, None, &mut log)?;
    Ok(output(corpus, cfg, Variant::Vanilla, 2, model, log))
}

fn stages_one_two(
    prep: &Prepared,
    corpus: &Corpus,
    cfg: &TrainConfig,
) -> Result<(CaptionModel, RunLog)> {
    let mut log = RunLog::default();
    let init = PredictorParams::new(
        corpus.input_dim(),
        cfg.predictor_hidden,
        cfg.k,
        &mut rng_for(cfg.seed, STREAM_PREDICTOR_INIT),
    );
    let run = train_predictor(
        init,
        &prep.topic_examples(false),
        &prep.topic_examples(true),
        &PredictorTraining {
            epochs: cfg.stage1_epochs,
            batch_size: cfg.predictor_batch_size,
            lr: cfg.predictor_lr(),
            kind: cfg.topic_loss,
            patience: cfg.patience,
            clip_norm: cfg.clip_norm,
        },
        &mut rng_for(cfg.seed, 1),
    )?;
    log.stages.push(StageSummary {
        stage: 1,
        epochs_run: run.history.len(),
        best_epoch: run.best_epoch,
        best_val_bleu4: None,
        diverged: run.diverged,
    });
    log.history.extend(run.history);
    log.timing.extend(run.timing);

    let decoder = DecoderParams::new(
        &tgm_shape(corpus, cfg, DecoderKind::Tgm),
        &mut rng_for(cfg.seed, STREAM_TGM_INIT),
    )?;
    let mut model = CaptionModel {
        predictor: Some(run.params),
        decoder,
    };
    decoder_stage(2, &mut model, prep, cfg, cfg.stage2_epochs, None, &mut log)?;
    Ok((model, log))
}

/// Topic-guided training: stages 1–2 for [`Variant::Tgm`], stages 1–3 for
/// [`Variant::MmTgm`].
pub fn train_pipeline(
    corpus: &Corpus,
    topics: &MinedTopics,
    cfg: &TrainConfig,
    variant: Variant,
) -> Result<TrainOutput> {
    if variant == Variant::Vanilla {
        return train_vanilla(corpus, cfg);
    }
    let prep = Prepared::new(corpus, Some(topics), cfg)?;
    let (mut model, mut log) = stages_one_two(&prep, corpus, cfg)?;
    let mut stage = 2;
    if variant == Variant::MmTgm && cfg.stage3_epochs > 0 {
        decoder_stage(
            3,
            &mut model,
            &prep,
            cfg,
            cfg.stage3_epochs,
            Some(cfg.lambda),
            &mut log,
        )?;
        stage = 3;
    }
    Ok(output(corpus, cfg, variant, stage, model, log))
}

/// Dispatches on the variant; topic-guided variants need mined topics.
pub fn train(
    corpus: &Corpus,
    topics: Option<&MinedTopics>,
    cfg: &TrainConfig,
    variant: Variant,
) -> Result<TrainOutput> {
    match (variant, topics) {
        (Variant::Vanilla, _) => train_vanilla(corpus, cfg),
        (_, Some(t)) => train_pipeline(corpus, t, cfg, variant),
        (_, None) => Err(Error::invalid(format!(
            "variant {variant} needs mined topics"
        ))),
    }
}

#[derive(Debug, Clone)]
pub struct SweepRun {
    pub ratio: f64,
    pub lambda: f64,
    pub output: TrainOutput,
}

/// Full three-stage runs for every λ/(1−λ) in [`lambda_ratios`]. Stages 1–2
/// do not depend on λ, so they are trained once and shared.
pub fn sweep_lambda(
    corpus: &Corpus,
    topics: &MinedTopics,
    cfg: &TrainConfig,
) -> Result<Vec<SweepRun>> {
    let prep = Prepared::new(corpus, Some(topics), cfg)?;
    let (base_model, base_log) = stages_one_two(&prep, corpus, cfg)?;
    lambda_ratios()
        .into_iter()
        .map(|ratio| {
            let lambda = lambda_from_ratio(ratio);
            let run_cfg = TrainConfig {
                lambda,
                ..cfg.clone()
            };
            let mut model = base_model.clone();
            let mut log = RunLog {
                history: base_log.history.clone(),
                timing: base_log.timing.clone(),
                stages: base_log.stages.clone(),
            };
            let mut stage = 2;
            if run_cfg.stage3_epochs > 0 {
                decoder_stage(
                    3,
                    &mut model,
                    &prep,
                    &run_cfg,
                    run_cfg.stage3_epochs,
                    Some(lambda),
                    &mut log,
                )?;
                stage = 3;
            }
            Ok(SweepRun {
                ratio,
                lambda,
                output: output(corpus, &run_cfg, Variant::MmTgm, stage, model, log),
            })
        })
        .collect()
}

/// Smooths a series with a trailing moving average of `window` points.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            let s = &values[lo..=i];
            s.iter().sum::<f64>() / s.len() as f64
        })
        .collect()
}
