//! Bias-corrected Adam. One optimizer instance owns the first/second
//! moment accumulators for a named group of parameters and a shared step
//! counter; the learning rate is supplied per update so one group can mix
//! rates (joint network at `lr`, fine-tuned pre-fusion layers at a ratio).

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub(crate) struct Moments<E: Element> {
    pub m: Vec<E>,
    pub v: Vec<E>,
}

/// Per-parameter first/second-moment accumulators plus the step counter.
#[derive(Clone, Debug)]
pub struct Adam<E: Element> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    state: HashMap<String, Moments<E>>,
}

impl<E: Element> Adam<E> {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps: ADAM_EPS,
            t: 0,
            state: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Advances the shared step counter; call once per batch before the
    /// group's updates.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Standard bias-corrected update of one named parameter.
    pub fn update(
        &mut self,
        name: &str,
        param: &mut Tensor<E>,
        grad: &Tensor<E>,
        lr: f64,
    ) -> Result<()> {
        if self.t == 0 {
            return Err(Error::InvalidArg(
                "adam update before begin_step (step counter is 0)".into(),
            ));
        }
        if param.shape() != grad.shape() {
            return Err(Error::Shape(format!(
                "adam gradient for {name} has shape {:?} but parameter is {:?}",
                grad.shape(),
                param.shape()
            )));
        }
        let n = param.numel();
        let slot = self.state.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![E::zero(); n],
            v: vec![E::zero(); n],
        });
        if slot.m.len() != n {
            return Err(Error::Shape(format!(
                "adam accumulator for {name} holds {} elements but parameter has {n}",
                slot.m.len()
            )));
        }
        let b1 = E::from_f64(self.beta1);
        let b2 = E::from_f64(self.beta2);
        let one = E::one();
        let bc1 = E::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = E::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr_e = E::from_f64(lr);
        let eps = E::from_f64(self.eps);

        let mut out = param.to_vec();
        for i in 0..n {
            let g = grad.data()[i];
            slot.m[i] = b1 * slot.m[i] + (one - b1) * g;
            slot.v[i] = b2 * slot.v[i] + (one - b2) * g * g;
            let mh = slot.m[i] / bc1;
            let vh = slot.v[i] / bc2;
            out[i] = out[i] - lr_e * mh / (vh.sqrt() + eps);
        }
        *param = Tensor::new(param.shape().to_vec(), out)?;
        Ok(())
    }

    /// Accumulator tensors for persistence, sorted by name.
    pub fn export_state(&self) -> Vec<(String, Tensor<E>, Tensor<E>)> {
        let mut names: Vec<&String> = self.state.keys().collect();
        names.sort();
        names
            .into_iter()
            .map(|name| {
                let s = &self.state[name];
                (
                    name.clone(),
                    Tensor::new(vec![s.m.len()], s.m.clone()).unwrap(),
                    Tensor::new(vec![s.v.len()], s.v.clone()).unwrap(),
                )
            })
            .collect()
    }

    /// Restores accumulators written by [`Adam::export_state`].
    pub fn import_state(&mut self, t: u64, entries: Vec<(String, Tensor<E>, Tensor<E>)>) {
        self.t = t;
        self.state.clear();
        for (name, m, v) in entries {
            self.state.insert(
                name,
                Moments {
                    m: m.to_vec(),
                    v: v.to_vec(),
                },
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_approximately_lr() {
        let mut opt = Adam::<f64>::new(0.5, 0.999);
        let mut p = Tensor::scalar(1.0);
        let g = Tensor::scalar(1.0);
        opt.begin_step();
        opt.update("w", &mut p, &g, 2e-4).unwrap();
        // bias-corrected first step is lr * g / (|g| + eps) ~= lr
        let moved = 1.0 - p.item().unwrap();
        assert!((moved - 2e-4).abs() < 1e-10, "moved {moved}");
    }

    #[test]
    fn zero_grad_keeps_parameter_and_increments_counter() {
        let mut opt = Adam::<f64>::new(0.5, 0.999);
        let mut p = Tensor::scalar(0.7);
        let g = Tensor::scalar(0.0);
        opt.begin_step();
        opt.update("w", &mut p, &g, 1e-2).unwrap();
        assert_eq!(p.item().unwrap(), 0.7);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn update_without_step_rejected() {
        let mut opt = Adam::<f64>::new(0.5, 0.999);
        let mut p = Tensor::scalar(0.7);
        let g = Tensor::scalar(0.1);
        assert!(opt.update("w", &mut p, &g, 1e-2).is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut opt = Adam::<f32>::new(0.9, 0.999);
        let mut p = Tensor::zeros(vec![2]).unwrap();
        let g = Tensor::zeros(vec![3]).unwrap();
        opt.begin_step();
        assert!(opt.update("w", &mut p, &g, 1e-3).is_err());
    }

    #[test]
    fn state_roundtrip_preserves_trajectory() {
        let grads = [0.3, -0.2, 0.05, 0.4];
        let run = |split: Option<usize>| {
            let mut opt = Adam::<f64>::new(0.5, 0.999);
            let mut p = Tensor::scalar(1.0);
            for (i, &g) in grads.iter().enumerate() {
                if split == Some(i) {
                    let st = opt.export_state();
                    let t = opt.step_count();
                    let mut fresh = Adam::<f64>::new(0.5, 0.999);
                    fresh.import_state(t, st);
                    opt = fresh;
                }
                opt.begin_step();
                opt.update("w", &mut p, &Tensor::scalar(g), 1e-3).unwrap();
            }
            p.item().unwrap()
        };
        let direct = run(None);
        let resumed = run(Some(2));
        assert_eq!(direct.to_bits(), resumed.to_bits());
    }
}
