use serde::{Deserialize, Serialize};

use crate::diffmath::{Gradients, Tensor, Var};
use crate::error::{shape_err, Result};
use crate::models::ParamStore;

/// Step learning-rate schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    /// Epochs (0-based) at which the rate is multiplied by `factor`.
    pub decay_epochs: Vec<usize>,
    pub factor: f64,
}

impl LrSchedule {
    /// Decays by 10× at 2/3 and 11/12 of `epochs`.
    pub fn step_decay(initial: f64, epochs: usize) -> Self {
        let at = |num: usize, den: usize| ((num * epochs) as f64 / den as f64).round() as usize;
        Self {
            initial,
            decay_epochs: vec![at(2, 3), at(11, 12)],
            factor: 0.1,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.initial * self.factor.powi(drops as i32)
    }
}

/// SGD with heavy-ball momentum: `v ← μv + g`, `p ← p − lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(params: &ParamStore, momentum: f64) -> Self {
        Self {
            momentum,
            velocity: params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// Applies one update from raw gradients, one buffer per parameter.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &[Option<&[f64]>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != self.velocity.len() || params.len() != self.velocity.len() {
            return Err(shape_err!(
                "{} gradients for {} parameters and {} velocity buffers",
                grads.len(),
                params.len(),
                self.velocity.len()
            ));
        }
        for ((p, v), g) in params
            .tensors_mut()
            .iter_mut()
            .zip(&mut self.velocity)
            .zip(grads)
        {
            let Some(g) = g else {
                // No gradient this step: momentum alone still moves the parameter.
                for (pv, vv) in p.data_mut().iter_mut().zip(v.data_mut()) {
                    *vv *= self.momentum;
                    *pv -= lr * *vv;
                }
                continue;
            };
            if g.len() != p.numel() {
                return Err(shape_err!(
                    "gradient of {} values for a parameter of {}",
                    g.len(),
                    p.numel()
                ));
            }
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.iter()) {
                *vv = self.momentum * *vv + gv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }

    /// Collects gradients of the bound parameter vars and steps; the
    /// gradients are consumed.
    pub fn step_from(
        &mut self,
        params: &mut ParamStore,
        vars: &[Var<'_>],
        grads: Gradients,
        lr: f64,
    ) -> Result<()> {
        let g: Vec<Option<&[f64]>> = vars.iter().map(|&v| grads.get(v)).collect();
        self.step(params, &g, lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore {
        let mut p = ParamStore::new();
        p.push("w", Tensor::new(&[values.len()], values.to_vec()).unwrap());
        p
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let mut p = store(&[1.0, -2.0]);
        let before = p.clone();
        let mut sgd = Sgd::new(&p, 0.9);
        sgd.step(&mut p, &[Some(&[3.0, 4.0])], 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn plain_step_without_momentum() {
        let mut p = store(&[1.0, -2.0]);
        let mut sgd = Sgd::new(&p, 0.0);
        sgd.step(&mut p, &[Some(&[3.0, 4.0])], 0.1).unwrap();
        assert_eq!(p.tensors()[0].data(), &[1.0 - 0.1 * 3.0, -2.0 - 0.1 * 4.0]);
    }

    #[test]
    fn two_momentum_steps_follow_the_recurrence() {
        let (mu, lr) = (0.9, 0.05);
        let (g1, g2) = (0.7, -1.3);
        let mut p = store(&[2.0]);
        let mut sgd = Sgd::new(&p, mu);
        sgd.step(&mut p, &[Some(&[g1])], lr).unwrap();
        sgd.step(&mut p, &[Some(&[g2])], lr).unwrap();
        let v1 = g1;
        let v2 = mu * v1 + g2;
        let want = 2.0 - lr * v1 - lr * v2;
        assert_eq!(p.tensors()[0].data(), &[want]);
        assert_eq!(sgd.velocity()[0].data(), &[v2]);
    }

    #[test]
    fn schedule_decays_at_two_thirds_and_eleven_twelfths() {
        let s = LrSchedule::step_decay(0.1, 12);
        assert_eq!(s.decay_epochs, vec![8, 11]);
        assert_eq!(s.lr_at(7), 0.1);
        assert!((s.lr_at(8) - 0.01).abs() < 1e-15);
        assert!((s.lr_at(11) - 0.001).abs() < 1e-15);
    }
}
