//! Finite-difference checks of every analytic gradient on random models
//! shaped by the config.

use anyhow::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use tgm_core::config::TrainConfig;
use tgm_core::decoder::{DecoderKind, DecoderParams, DecoderShape, StepMasks};
use tgm_core::inference::CaptionModel;
use tgm_core::numerics::{grad_check, grad_check_params, ParamBlocks};
use tgm_core::predictor::{topic_loss, topic_loss_grad, PredictorParams, TopicLossKind};
use tgm_core::trainer::{multi_task_grad, multi_task_loss};

#[derive(Debug, Serialize)]
pub struct Report {
    pub eps: f64,
    pub errors: Vec<(String, f64)>,
}

impl Report {
    pub fn worst(&self) -> f64 {
        self.errors.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }
}

fn simplex(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

fn features(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// True when no ReLU pre-activation lies within reach of the stencil, so
/// finite differences never straddle a kink. Assumes |x| <= 1.
fn kink_free(p: &PredictorParams, x: &[f64], eps: f64) -> bool {
    let blocks = p.named_blocks();
    let (w1, b1) = (blocks[0].1, blocks[1].1);
    let mut pre = b1.data().to_vec();
    w1.matvec_acc(x, &mut pre);
    pre.iter().all(|v| v.abs() > 4.0 * eps)
}

/// Features in [-1, 1] that keep the predictor away from its kinks.
fn smooth_features(rng: &mut ChaCha8Rng, p: &PredictorParams, eps: f64) -> Vec<f64> {
    loop {
        let x = features(rng, p.input_dim());
        if kink_free(p, &x, eps) {
            return x;
        }
    }
}

fn jitter<P: ParamBlocks>(p: &mut P, rng: &mut ChaCha8Rng) {
    for m in p.blocks_mut() {
        m.data_mut()
            .iter_mut()
            .for_each(|v| *v += rng.random_range(-0.2..0.2));
    }
}

pub fn run(cfg: &TrainConfig, vocab_size: usize, feature_dim: usize, eps: f64) -> Result<Report> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.k;
    let shape = |kind| DecoderShape {
        kind,
        vocab_size,
        hidden: cfg.hidden_size,
        feature_dim,
        factors: cfg.factors,
        topics: k,
        factorize_recurrent: cfg.factorize_recurrent,
    };
    let mut errors = Vec::new();

    for kind in [TopicLossKind::L2, TopicLossKind::Kl] {
        let p = PredictorParams::new(feature_dim, cfg.predictor_hidden, k, &mut rng);
        let x = smooth_features(&mut rng, &p, eps);
        let t = simplex(&mut rng, k);
        let tape = p.forward(&x)?;
        let mut g = p.zeros_like();
        p.backward(&tape, &topic_loss_grad(&tape.topics, &t, kind), 1.0, &mut g);
        let e = grad_check_params(&p, &g, eps, |q| topic_loss(&q.predict(&x)?, &t, kind))?;
        errors.push((format!("predictor {kind:?}"), e));
    }

    for kind in [DecoderKind::Vanilla, DecoderKind::Tgm] {
        for dropout in [false, true] {
            let mut p = DecoderParams::new(&shape(kind), &mut rng)?;
            jitter(&mut p, &mut rng);
            let x = features(&mut rng, feature_dim);
            let z = simplex(&mut rng, k);
            let tokens: Vec<usize> = (0..6).map(|_| rng.random_range(3..vocab_size)).collect();
            let masks: Option<Vec<StepMasks>> = dropout.then(|| {
                (0..=tokens.len())
                    .map(|_| StepMasks::sample(cfg.hidden_size, cfg.dropout, &mut rng))
                    .collect()
            });
            let zref = (kind == DecoderKind::Tgm).then_some(z.as_slice());
            let cond = p.condition(zref)?;
            let tape = p.forward_sentence(&tokens, &x, &cond, masks.as_deref())?;
            let mut g = p.zeros_like();
            let mut dz = vec![0.0; k];
            p.backward_sentence(&tape, &cond, 1.0, &mut g, Some(&mut dz));
            let e = grad_check_params(&p, &g, eps, |q| {
                let c = q.condition(zref)?;
                Ok(q.forward_sentence(&tokens, &x, &c, masks.as_deref())?
                    .loss())
            })?;
            let label = if dropout {
                "decoder+dropout"
            } else {
                "decoder"
            };
            errors.push((format!("{kind:?} {label}"), e));
            if kind == DecoderKind::Tgm {
                let e = grad_check(
                    |zz: &[f64]| {
                        let c = p.condition_unchecked(zz)?;
                        Ok(p.forward_sentence(&tokens, &x, &c, masks.as_deref())?
                            .loss())
                    },
                    &z,
                    &dz,
                    eps,
                )?;
                errors.push((format!("Tgm {label} wrt topics"), e));
            }
        }
    }

    for kind in [TopicLossKind::L2, TopicLossKind::Kl] {
        let mut model = CaptionModel {
            predictor: Some(PredictorParams::new(
                feature_dim,
                cfg.predictor_hidden,
                k,
                &mut rng,
            )),
            decoder: DecoderParams::new(&shape(DecoderKind::Tgm), &mut rng)?,
        };
        jitter(&mut model, &mut rng);
        let x = smooth_features(&mut rng, model.predictor.as_ref().unwrap(), eps);
        let t = simplex(&mut rng, k);
        let tokens: Vec<usize> = (0..5).map(|_| rng.random_range(3..vocab_size)).collect();
        let mut g = model.zeros_like();
        multi_task_grad(
            &model,
            &tokens,
            Some(&t),
            &x,
            cfg.lambda,
            kind,
            None,
            1.0,
            &mut g,
        )?;
        let e = grad_check_params(&model, &g, eps, |m| {
            multi_task_loss(m, &tokens, &t, &x, cfg.lambda, kind)
        })?;
        errors.push((format!("multi-task {kind:?}"), e));
    }
    Ok(Report { eps, errors })
}
