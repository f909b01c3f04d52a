//! Adam with bias correction. Moment buffers are keyed by parameter name
//! and exposed for checkpointing, so a save/load/resume cycle continues
//! the exact update sequence of an uninterrupted run.

use crate::params::ParamStore;
use dsdn_core::{Array, Scalar};
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct Adam<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            steps: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps
    }

    /// Apply one update from named gradients. Parameters without a
    /// gradient this step keep their value and moments.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<String, Array<T>>) {
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps as i32);
        let c2 = 1.0 - self.beta2.powi(self.steps as i32);
        for (name, grad) in grads {
            let param = store
                .get_mut(name)
                .unwrap_or_else(|| panic!("gradient for unknown parameter `{name}`"));
            assert!(
                param.trainable,
                "gradient arrived for frozen parameter `{name}`"
            );
            let n = grad.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
            let value = param.value.data_mut();
            for i in 0..n {
                let g = grad.data()[i].into_f64();
                let mi = self.beta1 * m[i].into_f64() + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v[i].into_f64() + (1.0 - self.beta2) * g * g;
                m[i] = T::from_f64(mi);
                v[i] = T::from_f64(vi);
                let update = self.lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                value[i] = T::from_f64(value[i].into_f64() - update);
            }
        }
    }

    /// Moment buffers and step count, for checkpointing.
    pub fn export(&self) -> (u64, BTreeMap<String, Vec<T>>, BTreeMap<String, Vec<T>>) {
        (self.steps, self.m.clone(), self.v.clone())
    }

    pub fn restore(
        &mut self,
        steps: u64,
        m: BTreeMap<String, Vec<T>>,
        v: BTreeMap<String, Vec<T>>,
    ) {
        self.steps = steps;
        self.m = m;
        self.v = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_bowl_converges() {
        let mut store = ParamStore::<f32>::new();
        store.insert("x", Array::full(&[1], 5.0), true);
        let mut opt = Adam::new(0.1, 0.9, 0.999, 1e-8);
        for _ in 0..300 {
            let x = store.get("x").unwrap().value.data()[0];
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), Array::full(&[1], 2.0 * x));
            opt.step(&mut store, &grads);
        }
        assert!(store.get("x").unwrap().value.data()[0].abs() < 1e-2);
    }

    #[test]
    fn first_step_is_lr_sized() {
        // With bias correction the first update has magnitude ~lr
        // regardless of gradient scale.
        let mut store = ParamStore::<f32>::new();
        store.insert("x", Array::full(&[1], 0.0), true);
        let mut opt = Adam::new(1e-3, 0.9, 0.999, 1e-8);
        let mut grads = BTreeMap::new();
        grads.insert("x".to_string(), Array::full(&[1], 123.0));
        opt.step(&mut store, &grads);
        let x = store.get("x").unwrap().value.data()[0];
        assert!((x.abs() - 1e-3).abs() < 1e-6, "{x}");
    }

    #[test]
    fn export_restore_resumes_identically() {
        let run = |split: bool| -> f32 {
            let mut store = ParamStore::<f32>::new();
            store.insert("x", Array::full(&[1], 1.0), true);
            let mut opt = Adam::new(0.05, 0.9, 0.999, 1e-8);
            for s in 0..10 {
                if split && s == 5 {
                    let (steps, m, v) = opt.export();
                    opt = Adam::new(0.05, 0.9, 0.999, 1e-8);
                    opt.restore(steps, m, v);
                }
                let x = store.get("x").unwrap().value.data()[0];
                let mut grads = BTreeMap::new();
                grads.insert("x".to_string(), Array::full(&[1], x.sin() + 2.0 * x));
                opt.step(&mut store, &grads);
            }
            store.get("x").unwrap().value.data()[0]
        };
        assert_eq!(run(false).to_bits(), run(true).to_bits());
    }

    #[test]
    #[should_panic(expected = "frozen")]
    fn frozen_parameters_refuse_updates() {
        let mut store = ParamStore::<f32>::new();
        store.insert("x", Array::full(&[1], 1.0), false);
        let mut opt = Adam::new(0.1, 0.9, 0.999, 1e-8);
        let mut grads = BTreeMap::new();
        grads.insert("x".to_string(), Array::full(&[1], 1.0));
        opt.step(&mut store, &grads);
    }
}
