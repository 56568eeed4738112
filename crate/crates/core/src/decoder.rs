//! Sentence decoders: a standard LSTM and the topic-guided LSTM whose gate
//! matrices are `W(z) = W_a · diag(W_b z) · W_c`.
//!
//! Both variants share [`DecoderParams`]; they differ only in how each gate
//! projection is represented ([`Projection::Dense`] vs
//! [`Projection::Factored`]). The output layer is tied to the word
//! embedding, so the embedding size equals the hidden size.
//!
//! Gradients are hand-derived: [`DecoderParams::forward_sentence`] records a
//! tape of per-step values and [`DecoderParams::backward_sentence`] replays it
//! in reverse (backpropagation through time).

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::error::{check_dim, Error, Result};
use crate::numerics::{
    axpy, check_simplex, ensure_finite, log_sum_exp, sigmoid, GradTape, Matrix, ParamBlocks,
    SIMPLEX_TOL,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    Vanilla,
    Tgm,
}

/// Gate order used throughout: input, forget, output, cell input.
pub const GATE_NAMES: [&str; 4] = ["i", "f", "o", "g"];
const INPUT_GATE: usize = 0;
const FORGET_GATE: usize = 1;
const OUTPUT_GATE: usize = 2;
const CELL_GATE: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub enum Projection {
    /// `out × in`
    Dense(Matrix),
    /// `a: out × n_f`, `b: n_f × K`, `c: n_f × in`
    Factored { a: Matrix, b: Matrix, c: Matrix },
}

impl Projection {
    fn out_dim(&self) -> usize {
        match self {
            Projection::Dense(w) => w.rows(),
            Projection::Factored { a, .. } => a.rows(),
        }
    }

    fn in_dim(&self) -> usize {
        match self {
            Projection::Dense(w) => w.cols(),
            Projection::Factored { c, .. } => c.cols(),
        }
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        match self {
            Projection::Dense(w) => out.push((format!("{prefix}.w"), w)),
            Projection::Factored { a, b, c } => {
                out.push((format!("{prefix}.a"), a));
                out.push((format!("{prefix}.b"), b));
                out.push((format!("{prefix}.c"), c));
            }
        }
    }

    fn blocks_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Matrix>) {
        match self {
            Projection::Dense(w) => out.push(w),
            Projection::Factored { a, b, c } => {
                out.push(a);
                out.push(b);
                out.push(c);
            }
        }
    }

    /// `out += P(z) · v`. For factored projections `u = W_b z` and the
    /// intermediate `W_c v` is written to `cache`.
    fn apply(&self, u: Option<&[f64]>, v: &[f64], out: &mut [f64], cache: &mut Vec<f64>) {
        match self {
            Projection::Dense(w) => w.matvec_acc(v, out),
            Projection::Factored { a, c, .. } => {
                let u = u.expect("factored projection needs topic conditioning");
                *cache = c.matvec(v);
                let m: Vec<f64> = cache.iter().zip(u).map(|(x, y)| x * y).collect();
                a.matvec_acc(&m, out);
            }
        }
    }

    /// Backward of [`Projection::apply`]: accumulates parameter gradients,
    /// `dv += P(z)ᵀ · d_out`, and `du += ∂/∂u` for factored projections.
    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        u: Option<&[f64]>,
        v: &[f64],
        cache: &[f64],
        d_out: &[f64],
        grad: &mut Projection,
        dv: &mut [f64],
        du: &mut [f64],
    ) {
        match (self, grad) {
            (Projection::Dense(w), Projection::Dense(gw)) => {
                gw.add_outer(d_out, v);
                w.t_matvec_acc(d_out, dv);
            }
            (Projection::Factored { a, c, .. }, Projection::Factored { a: ga, c: gc, .. }) => {
                let u = u.expect("factored projection needs topic conditioning");
                let m: Vec<f64> = cache.iter().zip(u).map(|(x, y)| x * y).collect();
                ga.add_outer(d_out, &m);
                let dm = a.t_matvec(d_out);
                let mut dcv = vec![0.0; dm.len()];
                for j in 0..dm.len() {
                    du[j] += dm[j] * cache[j];
                    dcv[j] = dm[j] * u[j];
                }
                gc.add_outer(&dcv, v);
                c.t_matvec_acc(&dcv, dv);
            }
            _ => unreachable!("gradient layout mirrors parameters"),
        }
    }

    fn factors(&self) -> usize {
        match self {
            Projection::Dense(_) => 0,
            Projection::Factored { a, .. } => a.cols(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub input: Projection,
    pub recurrent: Projection,
    pub bias: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub kind: DecoderKind,
    /// `|W| × n_h`; row `w` is the embedding of word `w` and the output
    /// logits are `embedding · h`.
    pub embedding: Matrix,
    pub gates: [GateParams; 4],
    /// Initial hidden state projection `n_h × feature_dim`.
    pub init_w: Matrix,
    pub init_b: Matrix,
}

impl ParamBlocks for DecoderParams {
    fn named_blocks(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![("decoder.embedding".to_string(), &self.embedding)];
        for (g, name) in self.gates.iter().zip(GATE_NAMES) {
            g.input
                .named(&format!("decoder.gate_{name}.input"), &mut out);
            g.recurrent
                .named(&format!("decoder.gate_{name}.recurrent"), &mut out);
            out.push((format!("decoder.gate_{name}.bias"), &g.bias));
        }
        out.push(("decoder.init.w".to_string(), &self.init_w));
        out.push(("decoder.init.b".to_string(), &self.init_b));
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.embedding];
        for g in self.gates.iter_mut() {
            g.input.blocks_mut(&mut out);
            g.recurrent.blocks_mut(&mut out);
            out.push(&mut g.bias);
        }
        out.push(&mut self.init_w);
        out.push(&mut self.init_b);
        out
    }
}

/// Hyper-parameters that determine a decoder's parameter layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderShape {
    pub kind: DecoderKind,
    pub vocab_size: usize,
    pub hidden: usize,
    pub feature_dim: usize,
    /// Ignored for the vanilla decoder.
    pub factors: usize,
    /// Ignored for the vanilla decoder.
    pub topics: usize,
    pub factorize_recurrent: bool,
}

impl DecoderParams {
    pub fn new<R: Rng + ?Sized>(shape: &DecoderShape, rng: &mut R) -> Result<Self> {
        let DecoderShape {
            kind,
            vocab_size,
            hidden,
            feature_dim,
            factors,
            topics,
            factorize_recurrent,
        } = *shape;
        if vocab_size < 3 || hidden == 0 {
            return Err(Error::invalid(
                "decoder needs a vocabulary with specials and hidden size >= 1",
            ));
        }
        if kind == DecoderKind::Tgm && (factors == 0 || topics == 0) {
            return Err(Error::invalid(
                "topic-guided decoder needs factors >= 1 and K >= 1",
            ));
        }
        let dense = |rng: &mut R| Projection::Dense(Matrix::glorot(hidden, hidden, rng));
        let factored = |rng: &mut R| Projection::Factored {
            a: Matrix::glorot(hidden, factors, rng),
            b: Matrix::from_fn(factors, topics, |_, _| {
                let m = rng.random_range(0.5..1.5);
                if rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            }),
            c: Matrix::glorot(factors, hidden, rng),
        };
        let embedding = Matrix::glorot(vocab_size, hidden, rng);
        let gates = std::array::from_fn(|_| {
            let (input, recurrent) = match kind {
                DecoderKind::Vanilla => (dense(rng), dense(rng)),
                DecoderKind::Tgm => {
                    let input = factored(rng);
                    let recurrent = if factorize_recurrent {
                        factored(rng)
                    } else {
                        dense(rng)
                    };
                    (input, recurrent)
                }
            };
            GateParams {
                input,
                recurrent,
                bias: Matrix::column(hidden),
            }
        });
        Ok(Self {
            kind,
            embedding,
            gates,
            init_w: Matrix::glorot(hidden, feature_dim, rng),
            init_b: Matrix::column(hidden),
        })
    }

    /// All-zero parameters of the given shape.
    pub fn zeros(shape: &DecoderShape) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut p = Self::new(shape, &mut rng)?;
        p.blocks_mut().into_iter().for_each(|m| m.fill(0.0));
        Ok(p)
    }

    pub fn shape(&self) -> DecoderShape {
        let g = &self.gates[0];
        let topics = match &g.input {
            Projection::Factored { b, .. } => b.cols(),
            Projection::Dense(_) => 0,
        };
        DecoderShape {
            kind: self.kind,
            vocab_size: self.vocab_size(),
            hidden: self.hidden_size(),
            feature_dim: self.feature_dim(),
            factors: g.input.factors(),
            topics,
            factorize_recurrent: matches!(g.recurrent, Projection::Factored { .. }),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.rows()
    }

    pub fn hidden_size(&self) -> usize {
        self.embedding.cols()
    }

    pub fn feature_dim(&self) -> usize {
        self.init_w.cols()
    }

    /// Number of topics the decoder is conditioned on (0 for vanilla).
    pub fn num_topics(&self) -> usize {
        self.shape().topics
    }

    /// Checks internal dimension consistency (used after deserialization).
    pub fn validate(&self) -> Result<()> {
        let n = self.hidden_size();
        let k = self.num_topics();
        for g in &self.gates {
            check_dim("gate bias", n, g.bias.rows())?;
            for p in [&g.input, &g.recurrent] {
                check_dim("gate projection rows", n, p.out_dim())?;
                check_dim("gate projection cols", n, p.in_dim())?;
                if let Projection::Factored { a, b, c } = p {
                    check_dim("factor count", a.cols(), b.rows())?;
                    check_dim("factor count", a.cols(), c.rows())?;
                    check_dim("topic count", k, b.cols())?;
                }
                if self.kind == DecoderKind::Vanilla && matches!(p, Projection::Factored { .. }) {
                    return Err(Error::invalid("vanilla decoder with factored projection"));
                }
            }
        }
        check_dim("init projection rows", n, self.init_w.rows())?;
        check_dim("init bias", n, self.init_b.rows())?;
        Ok(())
    }

    /// Precomputes `u = W_b z` for every factored projection. The vanilla
    /// decoder ignores `z`.
    pub fn condition(&self, z: Option<&[f64]>) -> Result<Conditioning> {
        if self.kind == DecoderKind::Vanilla {
            return Ok(Conditioning::none());
        }
        let z =
            z.ok_or_else(|| Error::invalid("topic-guided decoder requires a topic distribution"))?;
        check_dim("topic distribution", self.num_topics(), z.len())?;
        check_simplex(z, SIMPLEX_TOL)?;
        self.condition_unchecked(z)
    }

    /// Like [`condition`](Self::condition) for a topic-guided decoder, but
    /// `z` only has to have length K.
    pub fn condition_unchecked(&self, z: &[f64]) -> Result<Conditioning> {
        if self.kind == DecoderKind::Vanilla {
            return Ok(Conditioning::none());
        }
        check_dim("topic distribution", self.num_topics(), z.len())?;
        let u = |p: &Projection| match p {
            Projection::Factored { b, .. } => Some(b.matvec(z)),
            Projection::Dense(_) => None,
        };
        Ok(Conditioning {
            z: Some(z.to_vec()),
            u: std::array::from_fn(|g| [u(&self.gates[g].input), u(&self.gates[g].recurrent)]),
        })
    }

    /// `h = tanh(W_v x + b_v)`, `c = 0`.
    pub fn init_state(&self, x: &[f64]) -> Result<DecoderState> {
        check_dim("decoder features", self.feature_dim(), x.len())?;
        ensure_finite(x)?;
        let mut h = self.init_b.data().to_vec();
        self.init_w.matvec_acc(x, &mut h);
        h.iter_mut().for_each(|v| *v = v.tanh());
        Ok(DecoderState {
            cell: vec![0.0; h.len()],
            hidden: h,
            t: 0,
        })
    }

    fn check_token(&self, id: usize) -> Result<()> {
        if id >= self.vocab_size() {
            Err(Error::UnknownToken {
                id,
                size: self.vocab_size(),
            })
        } else {
            Ok(())
        }
    }

    /// One decoding step. Returns log-probabilities over the vocabulary and
    /// the next state. `masks` applies dropout (training only).
    pub fn step(
        &self,
        state: &DecoderState,
        w_prev: usize,
        cond: &Conditioning,
        masks: Option<&StepMasks>,
    ) -> Result<(Vec<f64>, DecoderState)> {
        self.check_token(w_prev)?;
        self.check_conditioning(cond)?;
        let cache = self.step_forward(&state.hidden, &state.cell, w_prev, cond, masks);
        let next = DecoderState {
            hidden: cache.h_new.clone(),
            cell: cache.c_new.clone(),
            t: state.t + 1,
        };
        Ok((cache.log_probs, next))
    }

    fn check_conditioning(&self, cond: &Conditioning) -> Result<()> {
        if self.kind == DecoderKind::Tgm && cond.z.is_none() {
            return Err(Error::invalid(
                "topic-guided decoder requires conditioning on z",
            ));
        }
        Ok(())
    }

    fn step_forward(
        &self,
        h_prev: &[f64],
        c_prev: &[f64],
        w_prev: usize,
        cond: &Conditioning,
        masks: Option<&StepMasks>,
    ) -> StepCache {
        let n = self.hidden_size();
        let mut x_in = self.embedding.row(w_prev).to_vec();
        if let Some(m) = masks {
            x_in.iter_mut().zip(&m.input).for_each(|(x, s)| *x *= s);
        }
        let mut pre: [Vec<f64>; 4] = std::array::from_fn(|g| self.gates[g].bias.data().to_vec());
        let mut proj_cache: [[Vec<f64>; 2]; 4] = Default::default();
        for g in 0..4 {
            let gate = &self.gates[g];
            let [ci, cr] = &mut proj_cache[g];
            gate.input
                .apply(cond.u[g][0].as_deref(), &x_in, &mut pre[g], ci);
            gate.recurrent
                .apply(cond.u[g][1].as_deref(), h_prev, &mut pre[g], cr);
        }
        let [pi, pf, po, pg] = pre;
        let i: Vec<f64> = pi.into_iter().map(sigmoid).collect();
        let f: Vec<f64> = pf.into_iter().map(sigmoid).collect();
        let o: Vec<f64> = po.into_iter().map(sigmoid).collect();
        let g: Vec<f64> = pg.into_iter().map(f64::tanh).collect();
        let mut c_new = vec![0.0; n];
        let mut tanh_c = vec![0.0; n];
        let mut h_new = vec![0.0; n];
        for j in 0..n {
            c_new[j] = i[j] * g[j] + f[j] * c_prev[j];
            tanh_c[j] = c_new[j].tanh();
            h_new[j] = o[j] * tanh_c[j];
        }
        let h_out: Vec<f64> = match masks {
            Some(m) => h_new.iter().zip(&m.output).map(|(h, s)| h * s).collect(),
            None => h_new.clone(),
        };
        let logits = self.embedding.matvec(&h_out);
        let lse = log_sum_exp(&logits);
        let log_probs = logits.into_iter().map(|l| l - lse).collect();
        StepCache {
            w_prev,
            x_in,
            h_prev: h_prev.to_vec(),
            c_prev: c_prev.to_vec(),
            gates: [i, f, o, g],
            proj_cache,
            c_new,
            tanh_c,
            h_new,
            h_out,
            log_probs,
        }
    }

    fn sentence_targets(&self, tokens: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
        if tokens.is_empty() {
            return Err(Error::Empty("sentence"));
        }
        for &t in tokens {
            self.check_token(t)?;
        }
        let mut inputs = Vec::with_capacity(tokens.len() + 1);
        inputs.push(Vocabulary::BOS_ID);
        inputs.extend_from_slice(tokens);
        let mut targets = tokens.to_vec();
        targets.push(Vocabulary::EOS_ID);
        Ok((inputs, targets))
    }

    /// Runs the decoder over `tokens` (BOS prepended, EOS appended) and
    /// records everything the backward pass needs.
    pub fn forward_sentence(
        &self,
        tokens: &[usize],
        x: &[f64],
        cond: &Conditioning,
        masks: Option<&[StepMasks]>,
    ) -> Result<SentenceTape> {
        self.check_conditioning(cond)?;
        let (inputs, targets) = self.sentence_targets(tokens)?;
        if let Some(m) = masks {
            check_dim("dropout masks", inputs.len(), m.len())?;
        }
        let init = self.init_state(x)?;
        let mut tape = GradTape::new();
        let mut h = init.hidden.clone();
        let mut c = init.cell.clone();
        let mut log_prob = 0.0;
        for (t, (&w, &y)) in inputs.iter().zip(&targets).enumerate() {
            let cache = self.step_forward(&h, &c, w, cond, masks.map(|m| &m[t]));
            log_prob += cache.log_probs[y];
            h.clone_from(&cache.h_new);
            c.clone_from(&cache.c_new);
            tape.record(cache);
        }
        Ok(SentenceTape {
            x: x.to_vec(),
            h0: init.hidden,
            targets,
            masks: masks.map(<[StepMasks]>::to_vec),
            steps: tape,
            log_prob,
        })
    }

    /// Accumulates `scale · ∂(−log Pr(y))/∂θ` into `grads` and, when given,
    /// `scale · ∂(−log Pr(y))/∂z` into `dz`.
    pub fn backward_sentence(
        &self,
        tape: &SentenceTape,
        cond: &Conditioning,
        scale: f64,
        grads: &mut DecoderParams,
        dz: Option<&mut [f64]>,
    ) {
        let n = self.hidden_size();
        let mut dh_next = vec![0.0; n];
        let mut dc_next = vec![0.0; n];
        let nf = |p: &Projection| p.factors();
        let mut du: [[Vec<f64>; 2]; 4] = std::array::from_fn(|g| {
            [
                vec![0.0; nf(&self.gates[g].input)],
                vec![0.0; nf(&self.gates[g].recurrent)],
            ]
        });

        for (t, step) in tape.steps.steps().iter().enumerate().rev() {
            let target = tape.targets[t];
            let mut d_logits: Vec<f64> = step.log_probs.iter().map(|lp| scale * lp.exp()).collect();
            d_logits[target] -= scale;
            grads.embedding.add_outer(&d_logits, &step.h_out);
            let dh_out = self.embedding.t_matvec(&d_logits);

            let mut dh = dh_next.clone();
            match &tape.masks {
                Some(m) => dh
                    .iter_mut()
                    .zip(dh_out.iter().zip(&m[t].output))
                    .for_each(|(d, (o, s))| *d += o * s),
                None => axpy(1.0, &dh_out, &mut dh),
            }

            let [i, f, o, g] = &step.gates;
            let mut d_pre: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; n]);
            for j in 0..n {
                let dc = dc_next[j] + dh[j] * o[j] * (1.0 - step.tanh_c[j] * step.tanh_c[j]);
                let d_o = dh[j] * step.tanh_c[j];
                d_pre[INPUT_GATE][j] = dc * g[j] * i[j] * (1.0 - i[j]);
                d_pre[FORGET_GATE][j] = dc * step.c_prev[j] * f[j] * (1.0 - f[j]);
                d_pre[OUTPUT_GATE][j] = d_o * o[j] * (1.0 - o[j]);
                d_pre[CELL_GATE][j] = dc * i[j] * (1.0 - g[j] * g[j]);
                dc_next[j] = dc * f[j];
            }

            let mut dx_in = vec![0.0; n];
            let mut dh_prev = vec![0.0; n];
            for gi in 0..4 {
                let gate = &self.gates[gi];
                let ggate = &mut grads.gates[gi];
                axpy(1.0, &d_pre[gi], ggate.bias.data_mut());
                let [du_in, du_rec] = &mut du[gi];
                gate.input.backward(
                    cond.u[gi][0].as_deref(),
                    &step.x_in,
                    &step.proj_cache[gi][0],
                    &d_pre[gi],
                    &mut ggate.input,
                    &mut dx_in,
                    du_in,
                );
                gate.recurrent.backward(
                    cond.u[gi][1].as_deref(),
                    &step.h_prev,
                    &step.proj_cache[gi][1],
                    &d_pre[gi],
                    &mut ggate.recurrent,
                    &mut dh_prev,
                    du_rec,
                );
            }
            if let Some(m) = &tape.masks {
                dx_in.iter_mut().zip(&m[t].input).for_each(|(d, s)| *d *= s);
            }
            axpy(1.0, &dx_in, grads.embedding.row_mut(step.w_prev));
            dh_next = dh_prev;
        }

        // h0 = tanh(W_v x + b_v)
        let d_pre0: Vec<f64> = dh_next
            .iter()
            .zip(&tape.h0)
            .map(|(d, h)| d * (1.0 - h * h))
            .collect();
        grads.init_w.add_outer(&d_pre0, &tape.x);
        axpy(1.0, &d_pre0, grads.init_b.data_mut());

        // u = W_b z is shared by every step.
        let mut dz_acc = cond.z.as_ref().map(|z| vec![0.0; z.len()]);
        #[allow(clippy::needless_range_loop)]
        for gi in 0..4 {
            let projections = [&self.gates[gi].input, &self.gates[gi].recurrent];
            for (pi, p) in projections.into_iter().enumerate() {
                if let Projection::Factored { b, .. } = p {
                    let z = cond.z.as_ref().expect("factored projection needs z");
                    let d = &du[gi][pi];
                    let gp = if pi == 0 {
                        &mut grads.gates[gi].input
                    } else {
                        &mut grads.gates[gi].recurrent
                    };
                    if let Projection::Factored { b: gb, .. } = gp {
                        gb.add_outer(d, z);
                    }
                    if let Some(acc) = dz_acc.as_mut() {
                        b.t_matvec_acc(d, acc);
                    }
                }
            }
        }
        if let (Some(out), Some(acc)) = (dz, dz_acc) {
            axpy(1.0, &acc, out);
        }
    }

    /// `Σ_t log Pr(w_t | x, w_<t, z)` including the final EOS.
    pub fn sentence_log_prob(&self, tokens: &[usize], x: &[f64], z: Option<&[f64]>) -> Result<f64> {
        let cond = self.condition(z)?;
        Ok(self.forward_sentence(tokens, x, &cond, None)?.log_prob)
    }

    /// Materializes the effective input-path matrix of gate `gate` under `z`.
    pub fn gate_input_matrix(&self, gate: usize, z: &[f64]) -> Result<Matrix> {
        match &self.gates[gate].input {
            Projection::Dense(w) => Ok(w.clone()),
            Projection::Factored { a, b, c } => factorized_matrix(z, a, b, c),
        }
    }
}

/// `W_a · diag(W_b z) · W_c`
pub fn factorized_matrix(z: &[f64], a: &Matrix, b: &Matrix, c: &Matrix) -> Result<Matrix> {
    check_dim("factor a/b", a.cols(), b.rows())?;
    check_dim("factor b/c", b.rows(), c.rows())?;
    check_dim("topic distribution", b.cols(), z.len())?;
    check_simplex(z, SIMPLEX_TOL)?;
    let u = b.matvec(z);
    let mut scaled = c.clone();
    for (r, &s) in u.iter().enumerate() {
        scaled.row_mut(r).iter_mut().for_each(|v| *v *= s);
    }
    a.matmul(&scaled)
}

/// Per-decode precomputed topic factors.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    z: Option<Vec<f64>>,
    /// `u[gate][path] = W_b z` for factored projections.
    u: [[Option<Vec<f64>>; 2]; 4],
}

impl Conditioning {
    pub fn none() -> Self {
        Self {
            z: None,
            u: Default::default(),
        }
    }

    pub fn topics(&self) -> Option<&[f64]> {
        self.z.as_deref()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub hidden: Vec<f64>,
    pub cell: Vec<f64>,
    pub t: usize,
}

/// Inverted-dropout masks for one step: entries are 0 or `1/(1−p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMasks {
    pub input: Vec<f64>,
    pub output: Vec<f64>,
}

impl StepMasks {
    pub fn ones(n: usize) -> Self {
        Self {
            input: vec![1.0; n],
            output: vec![1.0; n],
        }
    }

    pub fn sample<R: Rng + ?Sized>(n: usize, rate: f64, rng: &mut R) -> Self {
        let keep = 1.0 / (1.0 - rate);
        let mut draw = || {
            (0..n)
                .map(|_| {
                    if rng.random::<f64>() < rate {
                        0.0
                    } else {
                        keep
                    }
                })
                .collect()
        };
        Self {
            input: draw(),
            output: draw(),
        }
    }
}

#[derive(Debug, Clone)]
struct StepCache {
    w_prev: usize,
    x_in: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    gates: [Vec<f64>; 4],
    proj_cache: [[Vec<f64>; 2]; 4],
    c_new: Vec<f64>,
    tanh_c: Vec<f64>,
    h_new: Vec<f64>,
    h_out: Vec<f64>,
    log_probs: Vec<f64>,
}

/// Forward record of one sentence.
#[derive(Debug, Clone)]
pub struct SentenceTape {
    x: Vec<f64>,
    h0: Vec<f64>,
    targets: Vec<usize>,
    masks: Option<Vec<StepMasks>>,
    steps: GradTape<StepCache>,
    pub log_prob: f64,
}

impl SentenceTape {
    /// Negative log-likelihood of the sentence.
    pub fn loss(&self) -> f64 {
        -self.log_prob
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, grad_check_params, softmax_unchecked};
    use rand_chacha::ChaCha8Rng;

    fn shape(
        kind: DecoderKind,
        vocab: usize,
        hidden: usize,
        factors: usize,
        topics: usize,
    ) -> DecoderShape {
        DecoderShape {
            kind,
            vocab_size: vocab,
            hidden,
            feature_dim: 5,
            factors,
            topics,
            factorize_recurrent: true,
        }
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn random_topics(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
        softmax_unchecked(&random_vec(rng, k))
    }

    /// Perturbs all parameters so biases and gates are not at symmetric points.
    fn jitter(p: &mut DecoderParams, rng: &mut ChaCha8Rng, a: f64) {
        for m in p.blocks_mut() {
            m.data_mut()
                .iter_mut()
                .for_each(|v| *v += rng.random_range(-a..a));
        }
    }

    #[test]
    fn zero_params_uniform_step() {
        let p = DecoderParams::zeros(&shape(DecoderKind::Vanilla, 20, 4, 0, 0)).unwrap();
        let s = p.init_state(&[0.0; 5]).unwrap();
        assert!(s.hidden.iter().all(|&h| h == 0.0));
        let (lp, next) = p.step(&s, 3, &Conditioning::none(), None).unwrap();
        for l in &lp {
            assert!((l + (20f64).ln()).abs() < 1e-12);
        }
        assert!(next.hidden.iter().all(|&h| h == 0.0));
        assert!(next.cell.iter().all(|&c| c == 0.0));
        assert_eq!(next.t, 1);
        let total: f64 = lp.iter().map(|l| l.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn init_state_range_and_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = DecoderParams::new(&shape(DecoderKind::Vanilla, 10, 6, 0, 0), &mut rng).unwrap();
        let s = p.init_state(&[10.0, -10.0, 3.0, 2.0, -7.0]).unwrap();
        assert!(s.hidden.iter().all(|h| h.abs() < 1.0));
        assert!(p.init_state(&[0.0; 4]).is_err());
    }

    #[test]
    fn step_rejects_unknown_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = DecoderParams::new(&shape(DecoderKind::Vanilla, 10, 6, 0, 0), &mut rng).unwrap();
        let s = p.init_state(&[0.0; 5]).unwrap();
        assert!(matches!(
            p.step(&s, 10, &Conditioning::none(), None),
            Err(Error::UnknownToken { id: 10, size: 10 })
        ));
        assert!(p.sentence_log_prob(&[4, 11], &[0.0; 5], None).is_err());
    }

    #[test]
    fn tgm_requires_valid_topics() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = DecoderParams::new(&shape(DecoderKind::Tgm, 10, 4, 3, 3), &mut rng).unwrap();
        assert!(p.condition(None).is_err());
        assert!(p.condition(Some(&[0.5, 0.5])).is_err());
        assert!(p.condition(Some(&[0.7, 0.7, -0.4])).is_err());
        let s = p.init_state(&[0.0; 5]).unwrap();
        assert!(p.step(&s, 3, &Conditioning::none(), None).is_err());
    }

    #[test]
    fn factorized_matrix_one_hot_selects_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Matrix::uniform(4, 3, 1.0, &mut rng);
        let b = Matrix::uniform(3, 2, 1.0, &mut rng);
        let c = Matrix::uniform(3, 5, 1.0, &mut rng);
        let m = factorized_matrix(&[0.0, 1.0], &a, &b, &c).unwrap();
        let mut diag = Matrix::zeros(3, 3);
        for r in 0..3 {
            diag.set(r, r, b.get(r, 1));
        }
        let expected = a.matmul(&diag).unwrap().matmul(&c).unwrap();
        for (x, y) in m.data().iter().zip(expected.data()) {
            assert!((x - y).abs() < 1e-14);
        }
        assert!(factorized_matrix(&[1.0], &a, &b, &c).is_err());
    }

    #[test]
    fn factorized_matrix_is_linear_in_topics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Matrix::uniform(4, 3, 1.0, &mut rng);
        let b = Matrix::uniform(3, 4, 1.0, &mut rng);
        let c = Matrix::uniform(3, 6, 1.0, &mut rng);
        for _ in 0..10 {
            let z1 = random_topics(&mut rng, 4);
            let z2 = random_topics(&mut rng, 4);
            let alpha: f64 = rng.random();
            let mix: Vec<f64> = z1
                .iter()
                .zip(&z2)
                .map(|(x, y)| alpha * x + (1.0 - alpha) * y)
                .collect();
            let m = factorized_matrix(&mix, &a, &b, &c).unwrap();
            let m1 = factorized_matrix(&z1, &a, &b, &c).unwrap();
            let m2 = factorized_matrix(&z2, &a, &b, &c).unwrap();
            for i in 0..m.data().len() {
                let lin = alpha * m1.data()[i] + (1.0 - alpha) * m2.data()[i];
                assert!((m.data()[i] - lin).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn factorized_matrix_identity_factors_give_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 5;
        let b = Matrix::uniform(n, 3, 1.0, &mut rng);
        let z = random_topics(&mut rng, 3);
        let m = factorized_matrix(&z, &Matrix::identity(n), &b, &Matrix::identity(n)).unwrap();
        let u = b.matvec(&z);
        for (r, &ur) in u.iter().enumerate() {
            for c in 0..n {
                let expected = if r == c { ur } else { 0.0 };
                assert!((m.get(r, c) - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn factored_order_matches_materialized_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = DecoderParams::new(&shape(DecoderKind::Tgm, 12, 6, 4, 3), &mut rng).unwrap();
        for _ in 0..10 {
            let z = random_topics(&mut rng, 3);
            let cond = p.condition(Some(&z)).unwrap();
            let v = random_vec(&mut rng, 6);
            for g in 0..4 {
                let mut out = vec![0.0; 6];
                let mut cache = Vec::new();
                p.gates[g]
                    .input
                    .apply(cond.u[g][0].as_deref(), &v, &mut out, &mut cache);
                let full = p.gate_input_matrix(g, &z).unwrap().matvec(&v);
                for (a, b) in out.iter().zip(&full) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    /// Builds a K = 1 topic-guided decoder with `W_a = W`, `W_b = 1`,
    /// `W_c = I` from a vanilla decoder.
    fn embed_vanilla(v: &DecoderParams) -> DecoderParams {
        let n = v.hidden_size();
        let lift = |p: &Projection| match p {
            Projection::Dense(w) => Projection::Factored {
                a: w.clone(),
                b: Matrix::from_fn(n, 1, |_, _| 1.0),
                c: Matrix::identity(n),
            },
            Projection::Factored { .. } => unreachable!(),
        };
        DecoderParams {
            kind: DecoderKind::Tgm,
            embedding: v.embedding.clone(),
            gates: std::array::from_fn(|g| GateParams {
                input: lift(&v.gates[g].input),
                recurrent: lift(&v.gates[g].recurrent),
                bias: v.gates[g].bias.clone(),
            }),
            init_w: v.init_w.clone(),
            init_b: v.init_b.clone(),
        }
    }

    #[test]
    fn single_topic_tgm_reproduces_vanilla() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut v =
            DecoderParams::new(&shape(DecoderKind::Vanilla, 15, 6, 0, 0), &mut rng).unwrap();
        jitter(&mut v, &mut rng, 0.3);
        let t = embed_vanilla(&v);
        t.validate().unwrap();
        let x = random_vec(&mut rng, 5);
        let cond = t.condition(Some(&[1.0])).unwrap();
        let s = v.init_state(&x).unwrap();
        let mut sv = s.clone();
        let mut st = s;
        for w in [0, 4, 7, 3] {
            let (lv, nv) = v.step(&sv, w, &Conditioning::none(), None).unwrap();
            let (lt, nt) = t.step(&st, w, &cond, None).unwrap();
            for (a, b) in lv.iter().zip(&lt) {
                assert!((a - b).abs() < 1e-10);
            }
            sv = nv;
            st = nt;
        }
    }

    #[test]
    fn vanilla_ignores_topics() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let v = DecoderParams::new(&shape(DecoderKind::Vanilla, 15, 6, 0, 0), &mut rng).unwrap();
        let x = random_vec(&mut rng, 5);
        let a = v.sentence_log_prob(&[3, 4], &x, None).unwrap();
        let b = v.sentence_log_prob(&[3, 4], &x, Some(&[0.2, 0.8])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_model_sentence_log_prob() {
        let p = DecoderParams::zeros(&shape(DecoderKind::Vanilla, 9, 4, 0, 0)).unwrap();
        let lp = p.sentence_log_prob(&[3, 4, 5, 6], &[1.0; 5], None).unwrap();
        assert!((lp + 5.0 * 9f64.ln()).abs() < 1e-12);
        assert!(p.sentence_log_prob(&[], &[1.0; 5], None).is_err());
    }

    #[test]
    fn appending_token_decreases_log_prob() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = DecoderParams::new(&shape(DecoderKind::Tgm, 10, 5, 3, 2), &mut rng).unwrap();
        let x = random_vec(&mut rng, 5);
        let z = [0.3, 0.7];
        let mut prefix = vec![3usize];
        let mut prev = p.sentence_log_prob(&prefix, &x, Some(&z)).unwrap();
        assert!(prev < 0.0);
        for w in [4, 5, 9, 3] {
            prefix.push(w);
            // log Pr(prefix + w) = log Pr(prefix without EOS) + ... compare the
            // EOS-free prefix probabilities, which are products of terms < 1.
            let lp = p.sentence_log_prob(&prefix, &x, Some(&z)).unwrap();
            let without_eos = |toks: &[usize]| -> f64 {
                let cond = p.condition(Some(&z)).unwrap();
                let tape = p.forward_sentence(toks, &x, &cond, None).unwrap();
                tape.log_prob - tape.steps.steps().last().unwrap().log_probs[Vocabulary::EOS_ID]
            };
            assert!(without_eos(&prefix) < without_eos(&prefix[..prefix.len() - 1]));
            prev = lp;
        }
        assert!(prev < 0.0);
    }

    #[test]
    fn sequence_probabilities_sum_to_at_most_one() {
        // Every EOS-free token sequence of length 1..=4 over a 4-word
        // vocabulary, each terminated by EOS.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = DecoderParams::new(&shape(DecoderKind::Tgm, 4, 4, 2, 2), &mut rng).unwrap();
        jitter(&mut p, &mut rng, 0.5);
        let x = random_vec(&mut rng, 5);
        let z = [0.4, 0.6];
        let alphabet = [0usize, 2, 3];
        let mut total = 0.0;
        for len in 1..=4u32 {
            for code in 0..alphabet.len().pow(len) {
                let mut c = code;
                let seq: Vec<usize> = (0..len)
                    .map(|_| {
                        let w = alphabet[c % alphabet.len()];
                        c /= alphabet.len();
                        w
                    })
                    .collect();
                total += p.sentence_log_prob(&seq, &x, Some(&z)).unwrap().exp();
            }
        }
        assert!(total <= 1.0 + 1e-12, "{total}");
        assert!(total > 0.0);
    }

    #[test]
    fn dropout_ones_mask_matches_inference() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = DecoderParams::new(&shape(DecoderKind::Tgm, 10, 5, 3, 2), &mut rng).unwrap();
        let x = random_vec(&mut rng, 5);
        let cond = p.condition(Some(&[0.5, 0.5])).unwrap();
        let masks = vec![StepMasks::ones(5); 3];
        let a = p
            .forward_sentence(&[4, 5], &x, &cond, Some(&masks))
            .unwrap();
        let b = p.forward_sentence(&[4, 5], &x, &cond, None).unwrap();
        assert_eq!(a.log_prob, b.log_prob);
        let m = StepMasks::sample(1000, 0.5, &mut rng);
        assert!(m.input.iter().all(|&v| v == 0.0 || v == 2.0));
        let kept = m.input.iter().filter(|&&v| v > 0.0).count();
        assert!((400..600).contains(&kept));
    }

    #[test]
    fn tgm_parameter_count_is_factored() {
        let (n, nf, k, v) = (16, 8, 5, 30);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = DecoderParams::new(&shape(DecoderKind::Tgm, v, n, nf, k), &mut rng).unwrap();
        let per_path = nf * (n + n + k);
        let expected = v * n + 4 * (2 * per_path + n) + n * 5 + n;
        assert_eq!(p.num_params(), expected);
        // an unfactored topic ensemble would need K·n·n per path
        assert!(2 * per_path < 2 * k * n * n);
    }

    fn check_sentence_grads(
        kind: DecoderKind,
        dropout: bool,
        factorize_recurrent: bool,
        seed: u64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sh = shape(kind, 20, 8, 4, 3);
        sh.factorize_recurrent = factorize_recurrent;
        let mut p = DecoderParams::new(&sh, &mut rng).unwrap();
        jitter(&mut p, &mut rng, 0.2);
        let x = random_vec(&mut rng, 5);
        let z = random_topics(&mut rng, 3);
        let tokens = [5usize, 9, 3, 17, 12];
        let masks: Option<Vec<StepMasks>> = dropout.then(|| {
            (0..=tokens.len())
                .map(|_| StepMasks::sample(8, 0.5, &mut rng))
                .collect()
        });
        let zref = (kind == DecoderKind::Tgm).then_some(z.as_slice());
        let cond = p.condition(zref).unwrap();
        let tape = p
            .forward_sentence(&tokens, &x, &cond, masks.as_deref())
            .unwrap();
        let mut grads = p.zeros_like();
        let mut dz = vec![0.0; 3];
        p.backward_sentence(&tape, &cond, 1.0, &mut grads, Some(&mut dz));
        let err = grad_check_params(&p, &grads, 1e-3, |q| {
            let c = q.condition(zref)?;
            Ok(q.forward_sentence(&tokens, &x, &c, masks.as_deref())?
                .loss())
        })
        .unwrap();
        assert!(err < 1e-4, "{kind:?} params: {err}");
        if kind == DecoderKind::Tgm {
            // z is checked off the simplex: the loss is a smooth function of
            // z in a neighbourhood, so perturb it without re-normalizing.
            let loss_z = |zz: &[f64]| -> Result<f64> {
                let c = p.condition_unchecked(zz)?;
                Ok(p.forward_sentence(&tokens, &x, &c, masks.as_deref())?
                    .loss())
            };
            let err = grad_check(loss_z, &z, &dz, 1e-4).unwrap();
            assert!(err < 1e-4, "dz: {err}");
        } else {
            assert!(dz.iter().all(|&d| d == 0.0));
        }
    }

    #[test]
    fn vanilla_gradients() {
        check_sentence_grads(DecoderKind::Vanilla, false, true, 20);
        check_sentence_grads(DecoderKind::Vanilla, true, true, 21);
    }

    #[test]
    fn tgm_gradients() {
        check_sentence_grads(DecoderKind::Tgm, false, true, 22);
        check_sentence_grads(DecoderKind::Tgm, true, true, 23);
        check_sentence_grads(DecoderKind::Tgm, false, false, 24);
    }

    #[test]
    fn backward_replay_is_repeatable() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let p = DecoderParams::new(&shape(DecoderKind::Tgm, 12, 6, 3, 2), &mut rng).unwrap();
        let cond = p.condition(Some(&[0.25, 0.75])).unwrap();
        let tape = p
            .forward_sentence(&[3, 4, 5], &[0.1; 5], &cond, None)
            .unwrap();
        let mut g1 = p.zeros_like();
        let mut g2 = p.zeros_like();
        p.backward_sentence(&tape, &cond, 1.0, &mut g1, None);
        p.backward_sentence(&tape, &cond, 1.0, &mut g2, None);
        assert_eq!(g1, g2);
        for (m, pm) in g1.blocks().iter().zip(p.blocks()) {
            assert_eq!(m.shape(), pm.shape());
        }
    }
}
