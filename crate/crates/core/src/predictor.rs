//! Student topic predictor: `softmax(W2·relu(W1·x + b1) + b2)` over the
//! concatenated modality features, trained to match mined teacher topics.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numerics::{
    check_simplex, ensure_finite, softmax_unchecked, Matrix, ParamBlocks, SIMPLEX_TOL,
};
use crate::trainer::adam::{clip_global_norm, AdamState};
use crate::trainer::history::{EpochRecord, EpochTiming};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopicLossKind {
    L2,
    Kl,
}

impl std::str::FromStr for TopicLossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(Self::L2),
            "kl" => Ok(Self::Kl),
            other => Err(Error::invalid(format!("unknown topic loss '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl ParamBlocks for PredictorParams {
    fn named_blocks(&self) -> Vec<(String, &Matrix)> {
        vec![
            ("predictor.w1".into(), &self.w1),
            ("predictor.b1".into(), &self.b1),
            ("predictor.w2".into(), &self.w2),
            ("predictor.b2".into(), &self.b2),
        ]
    }

    fn blocks_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

/// Forward values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct PredictorTape {
    x: Vec<f64>,
    hidden: Vec<f64>,
    pub topics: Vec<f64>,
}

impl PredictorParams {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden: usize, k: usize, rng: &mut R) -> Self {
        Self {
            w1: Matrix::glorot(hidden, input_dim, rng),
            b1: Matrix::column(hidden),
            w2: Matrix::glorot(k, hidden, rng),
            b2: Matrix::column(k),
        }
    }

    pub fn zeros(input_dim: usize, hidden: usize, k: usize) -> Self {
        Self {
            w1: Matrix::zeros(hidden, input_dim),
            b1: Matrix::column(hidden),
            w2: Matrix::zeros(k, hidden),
            b2: Matrix::column(k),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn num_topics(&self) -> usize {
        self.w2.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Result<PredictorTape> {
        check_dim("predictor input", self.input_dim(), x.len())?;
        ensure_finite(x)?;
        let mut hidden = self.b1.data().to_vec();
        self.w1.matvec_acc(x, &mut hidden);
        hidden.iter_mut().for_each(|h| *h = h.max(0.0));
        let mut logits = self.b2.data().to_vec();
        self.w2.matvec_acc(&hidden, &mut logits);
        let topics = softmax_unchecked(&logits);
        Ok(PredictorTape {
            x: x.to_vec(),
            hidden,
            topics,
        })
    }

    /// Topic distribution for concatenated features `x`.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.topics)
    }

    /// Accumulates `scale · ∂L/∂θ` into `grads` given `d_topics = ∂L/∂z`.
    pub fn backward(
        &self,
        tape: &PredictorTape,
        d_topics: &[f64],
        scale: f64,
        grads: &mut PredictorParams,
    ) {
        let z = &tape.topics;
        let inner: f64 = z.iter().zip(d_topics).map(|(a, b)| a * b).sum();
        let d_logits: Vec<f64> = z
            .iter()
            .zip(d_topics)
            .map(|(zi, di)| scale * zi * (di - inner))
            .collect();
        grads.w2.add_outer(&d_logits, &tape.hidden);
        crate::numerics::axpy(1.0, &d_logits, grads.b2.data_mut());
        let mut d_hidden = self.w2.t_matvec(&d_logits);
        for (d, &h) in d_hidden.iter_mut().zip(&tape.hidden) {
            if h <= 0.0 {
                *d = 0.0;
            }
        }
        grads.w1.add_outer(&d_hidden, &tape.x);
        crate::numerics::axpy(1.0, &d_hidden, grads.b1.data_mut());
    }
}

/// `l2`: `‖z − t‖²`; `kl`: `Σ t_k log(t_k / z_k)` with `t` the teacher.
pub fn topic_loss(predicted: &[f64], teacher: &[f64], kind: TopicLossKind) -> Result<f64> {
    check_dim("topic loss", predicted.len(), teacher.len())?;
    check_simplex(predicted, SIMPLEX_TOL)?;
    check_simplex(teacher, SIMPLEX_TOL)?;
    Ok(topic_loss_unchecked(predicted, teacher, kind))
}

pub(crate) fn topic_loss_unchecked(z: &[f64], t: &[f64], kind: TopicLossKind) -> f64 {
    match kind {
        TopicLossKind::L2 => z.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum(),
        TopicLossKind::Kl => z
            .iter()
            .zip(t)
            .filter(|(_, &tk)| tk > 0.0)
            .map(|(&zk, &tk)| tk * (tk / zk).ln())
            .sum(),
    }
}

/// `∂ topic_loss / ∂ predicted`.
pub fn topic_loss_grad(z: &[f64], t: &[f64], kind: TopicLossKind) -> Vec<f64> {
    match kind {
        TopicLossKind::L2 => z.iter().zip(t).map(|(a, b)| 2.0 * (a - b)).collect(),
        TopicLossKind::Kl => z
            .iter()
            .zip(t)
            .map(|(&zk, &tk)| if tk > 0.0 { -tk / zk } else { 0.0 })
            .collect(),
    }
}

/// One supervised example for the student.
#[derive(Debug, Clone)]
pub struct TopicExample {
    pub x: Vec<f64>,
    pub teacher: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct PredictorTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub kind: TopicLossKind,
    pub patience: usize,
    pub clip_norm: f64,
}

#[derive(Debug, Clone)]
pub struct PredictorRun {
    pub params: PredictorParams,
    pub history: Vec<EpochRecord>,
    pub timing: Vec<EpochTiming>,
    pub best_epoch: usize,
    pub diverged: bool,
}

pub fn mean_topic_loss(
    params: &PredictorParams,
    examples: &[TopicExample],
    kind: TopicLossKind,
) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for e in examples {
        total += topic_loss_unchecked(&params.predict(&e.x)?, &e.teacher, kind);
    }
    Ok(total / examples.len() as f64)
}

/// Stage-1 training of the predictor against teacher topics. Returns the
/// parameters with the best validation loss (training loss when `val` is
/// empty); epoch 0 is the initial state.
pub fn train_predictor<R: Rng + ?Sized>(
    init: PredictorParams,
    train: &[TopicExample],
    val: &[TopicExample],
    opts: &PredictorTraining,
    rng: &mut R,
) -> Result<PredictorRun> {
    for e in train.iter().chain(val) {
        check_dim("teacher topics", init.num_topics(), e.teacher.len())?;
    }
    let mut params = init;
    let mut adam = AdamState::new(&params);
    let selection = |params: &PredictorParams| -> Result<f64> {
        if val.is_empty() {
            mean_topic_loss(params, train, opts.kind)
        } else {
            mean_topic_loss(params, val, opts.kind)
        }
    };
    let mut best = params.clone();
    let mut best_score = selection(&params)?;
    let mut best_epoch = 0;
    let mut history = Vec::new();
    let mut timing = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut diverged = false;

    for epoch in 1..=opts.epochs {
        let started = std::time::Instant::now();
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(opts.batch_size.max(1)) {
            let mut grads = params.zeros_like();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let e = &train[i];
                let tape = params.forward(&e.x)?;
                epoch_loss += topic_loss_unchecked(&tape.topics, &e.teacher, opts.kind);
                let dz = topic_loss_grad(&tape.topics, &e.teacher, opts.kind);
                params.backward(&tape, &dz, scale, &mut grads);
            }
            clip_global_norm(grads.blocks_mut(), opts.clip_norm);
            adam.step(&mut params, &grads, opts.lr)?;
        }
        let train_loss = epoch_loss / train.len().max(1) as f64;
        if !train_loss.is_finite() || !params.blocks().iter().all(|m| m.is_finite()) {
            diverged = true;
            break;
        }
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(mean_topic_loss(&params, val, opts.kind)?)
        };
        history.push(EpochRecord::topic_only(1, epoch, train_loss, val_loss));
        timing.push(EpochTiming {
            stage: 1,
            epoch,
            wall_ms: started.elapsed().as_millis(),
        });
        let score = val_loss.unwrap_or(train_loss);
        if score < best_score {
            best_score = score;
            best = params.clone();
            best_epoch = epoch;
        } else if epoch - best_epoch >= opts.patience.max(1) {
            break;
        }
    }

    Ok(PredictorRun {
        params: best,
        history,
        timing,
        best_epoch,
        diverged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_simplex(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
        softmax_unchecked(&v)
    }

    #[test]
    fn zero_params_give_uniform() {
        let p = PredictorParams::zeros(6, 4, 3);
        for z in p.predict(&[1.0, -2.0, 0.5, 0.0, 3.0, 1.0]).unwrap() {
            assert!((z - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn output_on_simplex_and_dims_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = PredictorParams::new(5, 8, 4, &mut rng);
        for _ in 0..20 {
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let z = p.predict(&x).unwrap();
            check_simplex(&z, 1e-9).unwrap();
            assert!(z.iter().all(|&v| v > 0.0));
        }
        assert!(matches!(
            p.predict(&[0.0; 4]),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn loss_examples() {
        let t = [0.2, 0.3, 0.5];
        assert_eq!(topic_loss(&t, &t, TopicLossKind::L2).unwrap(), 0.0);
        assert!(topic_loss(&t, &t, TopicLossKind::Kl).unwrap().abs() < 1e-15);
        assert_eq!(
            topic_loss(&[1.0, 0.0], &[0.0, 1.0], TopicLossKind::L2).unwrap(),
            2.0
        );
        let kl = topic_loss(&[0.25; 4], &[1.0, 0.0, 0.0, 0.0], TopicLossKind::Kl).unwrap();
        assert!((kl - 1.3862944).abs() < 1e-7);
        assert!(topic_loss(&[0.5, 0.6], &[0.5, 0.5], TopicLossKind::L2).is_err());
    }

    #[test]
    fn kl_is_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let k = rng.random_range(2..8);
            let z = random_simplex(&mut rng, k);
            let t = random_simplex(&mut rng, k);
            assert!(topic_loss(&z, &t, TopicLossKind::Kl).unwrap() >= -1e-15);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for kind in [TopicLossKind::L2, TopicLossKind::Kl] {
            let p = PredictorParams::new(6, 8, 3, &mut rng);
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let t = random_simplex(&mut rng, 3);
            let tape = p.forward(&x).unwrap();
            let mut g = p.zeros_like();
            p.backward(&tape, &topic_loss_grad(&tape.topics, &t, kind), 1.0, &mut g);
            let err = grad_check_params(&p, &g, 1e-5, |q| {
                Ok(topic_loss_unchecked(&q.predict(&x)?, &t, kind))
            })
            .unwrap();
            assert!(err < 1e-4, "{kind:?}: {err}");
        }
    }

    fn separable(rng: &mut ChaCha8Rng, n: usize) -> Vec<TopicExample> {
        (0..n)
            .map(|i| {
                let k = i % 3;
                let mut x: Vec<f64> = (0..6).map(|_| rng.random_range(-0.3..0.3)).collect();
                x[2 * k] += 2.0;
                let mut teacher = vec![0.05; 3];
                teacher[k] = 0.9;
                TopicExample { x, teacher }
            })
            .collect()
    }

    fn opts(epochs: usize) -> PredictorTraining {
        PredictorTraining {
            epochs,
            batch_size: 8,
            lr: 1e-2,
            kind: TopicLossKind::L2,
            patience: 50,
            clip_norm: 5.0,
        }
    }

    #[test]
    fn training_decreases_loss_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let train = separable(&mut rng, 60);
        let val = separable(&mut rng, 15);
        let init = PredictorParams::new(6, 16, 3, &mut rng);
        let run = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            train_predictor(init.clone(), &train, &val, &opts(30), &mut r).unwrap()
        };
        let a = run(5);
        let losses: Vec<f64> = a.history.iter().map(|h| h.train_topic.unwrap()).collect();
        for w in losses[..5].windows(2) {
            assert!(w[1] < w[0], "{losses:?}");
        }
        assert_eq!(a.params, run(5).params);
        let acc = val
            .iter()
            .filter(|e| {
                crate::numerics::argmax(&a.params.predict(&e.x).unwrap())
                    == crate::numerics::argmax(&e.teacher)
            })
            .count();
        assert!(acc as f64 / val.len() as f64 >= 0.9);
    }

    #[test]
    fn zero_epochs_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let train = separable(&mut rng, 10);
        let init = PredictorParams::new(6, 4, 3, &mut rng);
        let run = train_predictor(init.clone(), &train, &[], &opts(0), &mut rng).unwrap();
        assert_eq!(run.params, init);
        assert!(run.history.is_empty());
    }
}
