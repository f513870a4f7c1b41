//! Adaptive moment estimation with the usual decay defaults. Frozen tensors
//! are skipped entirely so their bytes never change during training.

use crate::tape::{GradAccum, ParamStore};

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, store: &ParamStore) -> Self {
        let m = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        let v = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m, v }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradAccum) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..store.len() {
            let pid = crate::tape::ParamId(i);
            if !store.get(pid).trainable {
                continue;
            }
            let Some(g) = grads.get(pid) else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let data = &mut store.get_mut(pid).data;
            for j in 0..data.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::{ParamStore, Tape};

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let x = store.add("x", 1, 1, vec![5.0]);
        let mut adam = Adam::new(0.1, &store);
        for _ in 0..500 {
            let mut tape = Tape::new(&store);
            let xp = tape.param(x);
            let sq = tape.mul(xp, xp);
            let loss = tape.sum_all(sq);
            let grads = tape.backward(loss);
            let mut acc = GradAccum::new(&store);
            acc.absorb(grads);
            adam.step(&mut store, &acc);
        }
        assert!(store.get(x).data[0].abs() < 1e-3);
    }

    #[test]
    fn frozen_tensor_is_bitwise_untouched() {
        let mut store = ParamStore::new();
        let x = store.add("x", 1, 2, vec![1.25, -0.5]);
        store.set_trainable(x, false);
        let before = store.get(x).data.clone();
        let mut adam = Adam::new(0.1, &store);
        for _ in 0..10 {
            let mut tape = Tape::new(&store);
            let xp = tape.param(x);
            let sq = tape.mul(xp, xp);
            let loss = tape.sum_all(sq);
            let grads = tape.backward(loss);
            let mut acc = GradAccum::new(&store);
            acc.absorb(grads);
            adam.step(&mut store, &acc);
        }
        let after = &store.get(x).data;
        assert_eq!(before.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   after.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}
