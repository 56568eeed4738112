//! Synthetic topic-structured corpora with known ground-truth topics.
//!
//! Every topic owns a content vocabulary and a few sentence templates mixing
//! content slots with shared function words. Features of a video are drawn
//! around per-topic, per-modality centers. Two random streams are used: the
//! *structure* stream (words, templates, centers) and the *sample* stream
//! (videos, captions, noise), so corpora with identical topic vocabularies
//! but fresh samples can be produced by fixing `structure_seed`.

use std::collections::HashSet;

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{tokenize, Corpus, CorpusHeader, Features, Split, VideoRecord};
use crate::error::{Error, Result};

const DEFAULT_FUNCTION_WORDS: [&str; 10] = [
    "a", "the", "is", "in", "on", "with", "and", "of", "to", "at",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub k_true: usize,
    pub content_words_per_topic: usize,
    pub templates_per_topic: usize,
    pub template_len_min: usize,
    pub template_len_max: usize,
    pub train_per_topic: usize,
    pub val_per_topic: usize,
    pub test_per_topic: usize,
    pub captions_per_video: usize,
    pub feature_dims: [usize; 3],
    /// Center separation in units of `noise_scale`.
    pub separation: f64,
    pub noise_scale: f64,
    /// Constant added to every feature entry.
    pub noise_mean: f64,
    /// Fraction of videos mixing two topics.
    pub mixture_fraction: f64,
    /// Fraction of each topic's content words borrowed from the next topic.
    pub polysemy_fraction: f64,
    pub disjoint_vocab: bool,
    /// Words per video that recur across its captions.
    pub signature_words: usize,
    pub signature_prob: f64,
    pub zipf_exponent: f64,
    pub function_words: Vec<String>,
    /// Explicit per-topic content words; generated when absent.
    pub topic_words: Option<Vec<Vec<String>>>,
    pub structure_seed: Option<u64>,
    /// Probability the expert label names a wrong topic.
    pub expert_noise: f64,
    /// Fraction of videos whose aural modality is missing (zeros).
    pub missing_audio_fraction: f64,
    pub min_count: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            k_true: 5,
            content_words_per_topic: 30,
            templates_per_topic: 3,
            template_len_min: 5,
            template_len_max: 8,
            train_per_topic: 40,
            val_per_topic: 10,
            test_per_topic: 10,
            captions_per_video: 5,
            feature_dims: [16, 8, 8],
            separation: 5.0,
            noise_scale: 1.0,
            noise_mean: 0.0,
            mixture_fraction: 0.0,
            polysemy_fraction: 0.0,
            disjoint_vocab: true,
            signature_words: 3,
            signature_prob: 0.4,
            zipf_exponent: 1.0,
            function_words: DEFAULT_FUNCTION_WORDS
                .iter()
                .map(|s| s.to_string())
                .collect(),
            topic_words: None,
            structure_seed: None,
            expert_noise: 0.0,
            missing_audio_fraction: 0.0,
            min_count: 0,
        }
    }
}

impl GeneratorConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("generator config: {m}")));
        if self.k_true < 2 {
            return bad("k_true must be at least 2");
        }
        if self.content_words_per_topic == 0 || self.templates_per_topic == 0 {
            return bad("topics need content words and templates");
        }
        if self.template_len_min < 2 || self.template_len_max < self.template_len_min {
            return bad("template lengths must satisfy 2 <= min <= max");
        }
        if self.captions_per_video == 0 {
            return bad("captions_per_video must be at least 1");
        }
        if self.feature_dims.iter().sum::<usize>() == 0 {
            return bad("feature dims are all zero");
        }
        if self.separation < 0.0 || self.noise_scale < 0.0 {
            return bad("separation and noise_scale must be non-negative");
        }
        for (name, v) in [
            ("mixture_fraction", self.mixture_fraction),
            ("polysemy_fraction", self.polysemy_fraction),
            ("signature_prob", self.signature_prob),
            ("expert_noise", self.expert_noise),
            ("missing_audio_fraction", self.missing_audio_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if self.function_words.is_empty() {
            return bad("function_words is empty");
        }
        if let Some(tw) = &self.topic_words {
            if tw.len() != self.k_true {
                return bad("topic_words must list one vocabulary per topic");
            }
            if tw.iter().any(Vec::is_empty) {
                return bad("topic_words has an empty vocabulary");
            }
        }
        Ok(())
    }
}

/// Per-topic structure shared by every corpus generated from one structure seed.
struct TopicStructure {
    words: Vec<Vec<String>>,
    /// Slots: `Some(word)` for a fixed function word, `None` for content.
    templates: Vec<Vec<Vec<Option<String>>>>,
    /// `centers[modality][topic]`
    centers: [Vec<Vec<f64>>; 3],
}

pub fn generate_synthetic_corpus(cfg: &GeneratorConfig, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    let mut structure_rng = ChaCha8Rng::seed_from_u64(cfg.structure_seed.unwrap_or(seed));
    let structure = build_structure(cfg, &mut structure_rng)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);

    let zipf: Vec<WeightedIndex<f64>> = structure
        .words
        .iter()
        .map(|w| {
            WeightedIndex::new((0..w.len()).map(|j| 1.0 / ((j + 1) as f64).powf(cfg.zipf_exponent)))
                .expect("positive weights")
        })
        .collect();

    let mut records = Vec::new();
    let mut next_id = 0usize;
    for (split, per_topic) in [
        (Split::Train, cfg.train_per_topic),
        (Split::Val, cfg.val_per_topic),
        (Split::Test, cfg.test_per_topic),
    ] {
        let mut split_records = Vec::with_capacity(per_topic * cfg.k_true);
        for topic in 0..cfg.k_true {
            for i in 0..per_topic {
                let mix = sample_mix(cfg, topic, &mut rng);
                let signatures: Vec<Vec<String>> = (0..cfg.k_true)
                    .map(|k| {
                        let words = &structure.words[k];
                        (0..cfg.signature_words)
                            .map(|j| {
                                // Training signatures cycle through the vocabulary so
                                // every content word occurs in the training split.
                                let idx = if split == Split::Train {
                                    (i * cfg.signature_words + j) % words.len()
                                } else {
                                    rng.random_range(0..words.len())
                                };
                                words[idx].clone()
                            })
                            .collect()
                    })
                    .collect();

                let raw: Vec<String> = (0..cfg.captions_per_video)
                    .map(|j| {
                        let k = sample_topic(&mix, &mut rng);
                        let n_templates = structure.templates[k].len();
                        let t = if j < n_templates {
                            (i + j) % n_templates
                        } else {
                            rng.random_range(0..n_templates)
                        };
                        render_caption(
                            &structure.templates[k][t],
                            &structure.words[k],
                            &signatures[k],
                            j,
                            cfg.signature_prob,
                            &zipf[k],
                            &mut rng,
                        )
                    })
                    .collect();

                let features = sample_features(cfg, &structure, &mix, &mut rng);
                let true_topic = crate::numerics::argmax(&mix);
                let expert_topic =
                    if cfg.expert_noise > 0.0 && rng.random::<f64>() < cfg.expert_noise {
                        let shift = rng.random_range(1..cfg.k_true);
                        (true_topic + shift) % cfg.k_true
                    } else {
                        true_topic
                    };

                split_records.push(VideoRecord {
                    id: String::new(),
                    features,
                    captions: raw.iter().map(|s| tokenize(s)).collect(),
                    expert_topic: Some(expert_topic),
                    split,
                    true_topic_mix: Some(mix),
                });
            }
        }
        split_records.shuffle(&mut rng);
        for mut r in split_records {
            r.id = format!("vid{next_id:05}");
            next_id += 1;
            records.push(r);
        }
    }

    let header = CorpusHeader {
        feature_dims: cfg.feature_dims,
        k_true: Some(cfg.k_true),
        min_count: cfg.min_count,
        stopwords: cfg.function_words.clone(),
    };
    Corpus::new(header, records)
}

fn build_structure(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Result<TopicStructure> {
    let function: HashSet<&str> = cfg.function_words.iter().map(String::as_str).collect();
    let mut words = match &cfg.topic_words {
        Some(explicit) => explicit
            .iter()
            .map(|ws| ws.iter().flat_map(|w| tokenize(w)).collect::<Vec<_>>())
            .collect::<Vec<_>>(),
        None => {
            let mut used: HashSet<String> = cfg.function_words.iter().cloned().collect();
            (0..cfg.k_true)
                .map(|_| {
                    (0..cfg.content_words_per_topic)
                        .map(|_| fresh_word(rng, &mut used))
                        .collect()
                })
                .collect()
        }
    };

    let borrowed = (cfg.polysemy_fraction * cfg.content_words_per_topic as f64).round() as usize;
    if borrowed > 0 {
        let originals = words.clone();
        for k in 0..cfg.k_true {
            let donor = &originals[(k + 1) % cfg.k_true];
            // Borrow from positions the donor keeps, so the word is shared by both topics.
            let n = borrowed.min(donor.len() / 2).min(words[k].len());
            words[k][..n].clone_from_slice(&donor[n..2 * n]);
        }
    }

    for (k, ws) in words.iter().enumerate() {
        if let Some(w) = ws.iter().find(|w| function.contains(w.as_str())) {
            return Err(Error::invalid(format!(
                "topic {k} content word '{w}' is also a function word"
            )));
        }
    }
    if cfg.disjoint_vocab {
        let mut owner: std::collections::HashMap<&str, usize> = Default::default();
        for (k, ws) in words.iter().enumerate() {
            for w in ws {
                if let Some(&other) = owner.get(w.as_str()) {
                    if other != k {
                        return Err(Error::invalid(format!(
                            "topic vocabularies overlap on '{w}' (topics {other} and {k}) but disjoint_vocab is set"
                        )));
                    }
                }
                owner.insert(w, k);
            }
        }
    }

    let mut function_cursor = 0usize;
    let templates = (0..cfg.k_true)
        .map(|_| {
            (0..cfg.templates_per_topic)
                .map(|_| {
                    let len = rng.random_range(cfg.template_len_min..=cfg.template_len_max);
                    let mut slots: Vec<bool> = (0..len).map(|_| rng.random_bool(0.5)).collect();
                    // at least two content and one function slot
                    slots[0] = true;
                    slots[len - 1] = true;
                    slots[1] = false;
                    slots
                        .into_iter()
                        .map(|content| {
                            if content {
                                None
                            } else {
                                let w = if function_cursor < cfg.function_words.len() {
                                    cfg.function_words[function_cursor].clone()
                                } else {
                                    cfg.function_words
                                        [rng.random_range(0..cfg.function_words.len())]
                                    .clone()
                                };
                                function_cursor += 1;
                                Some(w)
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect();

    let radius = cfg.separation * cfg.noise_scale / std::f64::consts::SQRT_2;
    let centers = cfg.feature_dims.map(|dim| {
        (0..cfg.k_true)
            .map(|_| {
                if dim == 0 {
                    return Vec::new();
                }
                let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let n = crate::numerics::norm(&v).max(1e-12);
                v.iter().map(|x| x / n * radius).collect()
            })
            .collect()
    });

    Ok(TopicStructure {
        words,
        templates,
        centers,
    })
}

fn fresh_word(rng: &mut ChaCha8Rng, used: &mut HashSet<String>) -> String {
    const ONSETS: [&str; 16] = [
        "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "tr",
    ];
    const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "ai"];
    loop {
        let syllables = rng.random_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
            w.push_str(VOWELS[rng.random_range(0..VOWELS.len())]);
        }
        if used.insert(w.clone()) {
            return w;
        }
    }
}

fn sample_mix(cfg: &GeneratorConfig, topic: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut mix = vec![0.0; cfg.k_true];
    if cfg.mixture_fraction > 0.0 && rng.random::<f64>() < cfg.mixture_fraction {
        let other = (topic + rng.random_range(1..cfg.k_true)) % cfg.k_true;
        let alpha: f64 = rng.random();
        mix[topic] = alpha;
        mix[other] = 1.0 - alpha;
    } else {
        mix[topic] = 1.0;
    }
    mix
}

fn sample_topic(mix: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, &p) in mix.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    crate::numerics::argmax(mix)
}

fn render_caption(
    template: &[Option<String>],
    words: &[String],
    signature: &[String],
    caption_index: usize,
    signature_prob: f64,
    zipf: &WeightedIndex<f64>,
    rng: &mut ChaCha8Rng,
) -> String {
    let mut first_content = true;
    let mut out: Vec<String> = Vec::with_capacity(template.len());
    for slot in template {
        match slot {
            Some(w) => out.push(w.clone()),
            None => {
                let w = if first_content && !signature.is_empty() {
                    signature[caption_index % signature.len()].clone()
                } else if !signature.is_empty() && rng.random::<f64>() < signature_prob {
                    signature[rng.random_range(0..signature.len())].clone()
                } else {
                    words[zipf.sample(rng)].clone()
                };
                first_content = false;
                out.push(w);
            }
        }
    }
    // Raw text with capitalization and punctuation, as a human annotator would write it.
    let mut s = out.join(" ");
    if let Some(first) = s.get(0..1) {
        s.replace_range(0..1, &first.to_uppercase());
    }
    s.push('.');
    s
}

fn sample_features(
    cfg: &GeneratorConfig,
    structure: &TopicStructure,
    mix: &[f64],
    rng: &mut ChaCha8Rng,
) -> Features {
    let missing_audio =
        cfg.missing_audio_fraction > 0.0 && rng.random::<f64>() < cfg.missing_audio_fraction;
    let mut draw = |modality: usize| -> Vec<f64> {
        let dim = cfg.feature_dims[modality];
        let mut v = vec![cfg.noise_mean; dim];
        for (k, &w) in mix.iter().enumerate() {
            if w > 0.0 {
                crate::numerics::axpy(w, &structure.centers[modality][k], &mut v);
            }
        }
        for x in v.iter_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *x += cfg.noise_scale * n;
        }
        v
    };
    let m1 = draw(0);
    let m2 = draw(1);
    let m3 = draw(2);
    let m3 = if missing_audio {
        vec![0.0; m3.len()]
    } else {
        m3
    };
    Features { m1, m2, m3 }
}
