use serde::{Deserialize, Serialize};

use super::dense::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer with its moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Optimizer::new(OptimizerKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Self {
        Optimizer::new(OptimizerKind::adam(), lr)
    }

    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates `params` in place from `grads`.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape("optimizer gradient", p.shape(), g.shape()));
            }
            g.ensure_finite("gradient")?;
        }
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *x -= self.lr * d;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.m.is_empty() {
                    self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
                    self.v = self.m.clone();
                } else if self.m.len() != params.len()
                    || self.m.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.shape())
                {
                    return Err(Error::invalid("adam moments do not match parameter shapes"));
                }
                self.step += 1;
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for ((p, g), (m, v)) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                {
                    let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
                    for i in 0..pd.len() {
                        let gi = g.data()[i];
                        md[i] = beta1 * md[i] + (1.0 - beta1) * gi;
                        vd[i] = beta2 * vd[i] + (1.0 - beta2) * gi * gi;
                        let mhat = md[i] / c1;
                        let vhat = vd[i] / c2;
                        pd[i] -= self.lr * mhat / (vhat.sqrt() + eps);
                    }
                }
                return Ok(());
            }
        }
        self.step += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step() {
        let mut p = vec![Tensor::scalar(1.0)];
        Optimizer::sgd(0.01).step(&mut p, &[Tensor::scalar(2.0)]).unwrap();
        assert!((p[0].item().unwrap() - 0.98).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        for mut opt in [Optimizer::sgd(0.1), Optimizer::adam(0.1)] {
            let mut p = vec![Tensor::vector(&[1.0, -2.0]).unwrap()];
            let before = p.clone();
            opt.step(&mut p, &[Tensor::zeros(&[2])]).unwrap();
            assert_eq!(p, before);
        }
    }

    #[test]
    fn adam_first_step_closed_form() {
        // at t = 1 the bias-corrected moments are g and g^2
        let (lr, g, eps) = (0.001, 0.5, 1e-8);
        let oracle = -lr * g / ((g * g as f64).sqrt() + eps);
        let mut p = vec![Tensor::scalar(0.0)];
        let mut opt = Optimizer::adam(lr);
        opt.step(&mut p, &[Tensor::scalar(g)]).unwrap();
        let got = p[0].item().unwrap();
        assert!((got - oracle).abs() < 1e-18);
        assert!((got + 0.001).abs() < 1e-10);
        assert_eq!(opt.steps_taken(), 1);
    }

    #[test]
    fn shape_and_finiteness_errors() {
        let mut p = vec![Tensor::zeros(&[2])];
        let mut opt = Optimizer::sgd(0.1);
        assert!(opt.step(&mut p, &[Tensor::zeros(&[3])]).is_err());
        assert!(opt.step(&mut p, &[]).is_err());
    }
}
