use crate::error::{Result, SilqError};
use crate::params::{ParamKind, ParamStore};
use crate::quant::STEP_FLOOR;
use crate::tensor::Tensor;

/// AdamW with decoupled weight decay. Moments are kept in `f64`.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay_step_sizes: bool,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    last_lrs: Vec<f64>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            decay_step_sizes: false,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
            last_lrs: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Effective learning rate applied to each parameter in the last step.
    pub fn last_lrs(&self) -> &[f64] {
        &self.last_lrs
    }

    fn decays(&self, kind: ParamKind) -> bool {
        match kind {
            ParamKind::Weight | ParamKind::Embedding => true,
            ParamKind::Norm => false,
            ParamKind::WeightStep | ParamKind::ActStep => self.decay_step_sizes,
        }
    }

    /// One update. Each parameter moves at `lr · lr_multiplier`; a missing
    /// gradient counts as zero. Step sizes are floored after the update.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(SilqError::dim(
                "adamw",
                format!("{} grads for {} params", grads.len(), params.len()),
            ));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.tensor.len()) {
            return Err(SilqError::dim("adamw", "optimizer state does not match parameters"));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        self.last_lrs.clear();
        for (i, param) in params.iter_mut().enumerate() {
            let lr_i = lr * f64::from(param.lr_multiplier);
            self.last_lrs.push(lr_i);
            let decay = if self.decays(param.kind) {
                self.weight_decay
            } else {
                0.0
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = grads[i].as_ref();
            if let Some(g) = g {
                if g.len() != param.tensor.len() {
                    return Err(SilqError::dim("adamw", format!("gradient for `{}`", param.name)));
                }
            }
            let floor = param.kind.is_step();
            for (j, w) in param.tensor.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| f64::from(g.data()[j]));
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                let wj = f64::from(*w);
                let updated = wj - lr_i * decay * wj - lr_i * m_hat / (v_hat.sqrt() + self.eps);
                *w = updated as f32;
                if floor && *w < STEP_FLOOR {
                    *w = STEP_FLOOR;
                }
            }
        }
        Ok(())
    }
}
