use crate::error::{check_dim, Result};
use crate::numerics::{Matrix, ParamBlocks};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// Gradients contained a non-finite value; parameters were left untouched.
    SkippedNonFinite,
}

/// Bias-corrected ADAM moments for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new<P: ParamBlocks>(params: &P) -> Self {
        let shapes: Vec<usize> = params.blocks().iter().map(|m| m.data().len()).collect();
        Self {
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
            beta1: BETA1,
            beta2: BETA2,
            epsilon: EPSILON,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<P: ParamBlocks>(
        &mut self,
        params: &mut P,
        grads: &P,
        lr: f64,
    ) -> Result<StepOutcome> {
        let grad_blocks = grads.blocks();
        let param_blocks = params.blocks_mut();
        check_dim(
            "adam parameter blocks",
            self.first.len(),
            param_blocks.len(),
        )?;
        check_dim(
            "adam gradient blocks",
            param_blocks.len(),
            grad_blocks.len(),
        )?;
        for (p, g) in param_blocks.iter().zip(&grad_blocks) {
            check_dim("adam block size", p.data().len(), g.data().len())?;
        }
        if grad_blocks.iter().any(|g| !g.is_finite()) {
            return Ok(StepOutcome::SkippedNonFinite);
        }

        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in param_blocks.into_iter().zip(grad_blocks).enumerate() {
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(StepOutcome::Applied)
    }
}

/// Rescales all blocks so their joint l2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(blocks: Vec<&mut Matrix>, max_norm: f64) -> f64 {
    let norm = blocks.iter().map(|m| m.sum_squares()).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for m in blocks {
            m.scale(s);
        }
    }
    norm
}
