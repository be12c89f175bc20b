//! First-order adaptive-moment optimizer over a subset of a parameter store.

use crate::params::{ParamId, ParamStore};
use crate::tape::Arr;

pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    pids: Vec<ParamId>,
    m: Vec<Arr>,
    v: Vec<Arr>,
}

impl Adam {
    pub fn new(lr: f64, pids: Vec<ParamId>, store: &ParamStore) -> Self {
        let m = pids.iter().map(|&p| Arr::zeros(store.value(p).raw_dim())).collect();
        let v = pids.iter().map(|&p| Arr::zeros(store.value(p).raw_dim())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, pids, m, v }
    }

    pub fn pids(&self) -> &[ParamId] {
        &self.pids
    }

    /// Apply one update. `grads` is indexed by ParamId over the whole store;
    /// missing entries count as zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Arr>]) {
        if self.lr == 0.0 {
            return;
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, &pid) in self.pids.iter().enumerate() {
            let zero;
            let g = match &grads[pid] {
                Some(g) => g,
                None => {
                    zero = Arr::zeros(store.value(pid).raw_dim());
                    &zero
                }
            };
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            let value = store.value_mut(pid);
            for ((mv, vv), (gv, pv)) in
                m.iter_mut().zip(v.iter_mut()).zip(g.iter().zip(value.iter_mut()))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Raw state access for checkpointing.
    pub fn state(&self) -> (u64, &[Arr], &[Arr]) {
        (self.step, &self.m, &self.v)
    }

    pub fn restore_state(&mut self, step: u64, m: Vec<Arr>, v: Vec<Arr>) {
        assert_eq!(m.len(), self.pids.len());
        assert_eq!(v.len(), self.pids.len());
        self.step = step;
        self.m = m;
        self.v = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::zeros;

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let mut store = ParamStore::new();
        let pid = store.add("w", crate::tape::scalar(1.5));
        let before = store.value(pid).clone();
        let mut adam = Adam::new(0.0, vec![pid], &store);
        let grads = vec![Some(crate::tape::scalar(10.0))];
        adam.step(&mut store, &grads);
        assert_eq!(&before, store.value(pid));
    }

    #[test]
    fn descends_a_quadratic() {
        // minimize (w - 3)^2 by following its gradient
        let mut store = ParamStore::new();
        let pid = store.add("w", crate::tape::scalar(0.0));
        let mut adam = Adam::new(0.05, vec![pid], &store);
        for _ in 0..2000 {
            let w = *store.value(pid).iter().next().unwrap();
            let g = 2.0 * (w - 3.0);
            let mut grads: Vec<Option<Arr>> = vec![None];
            grads[0] = Some(crate::tape::scalar(g));
            adam.step(&mut store, &grads);
        }
        let w = *store.value(pid).iter().next().unwrap();
        assert!((w - 3.0).abs() < 1e-3, "got {}", w);
    }

    #[test]
    fn missing_gradients_still_advance_moments() {
        let mut store = ParamStore::new();
        let a = store.add("a", zeros(&[2]));
        let b = store.add("b", zeros(&[2]));
        let mut adam = Adam::new(0.01, vec![a, b], &store);
        let grads = vec![Some(crate::params::ones(&[2])), None];
        adam.step(&mut store, &grads);
        assert_eq!(adam.steps_taken(), 1);
        assert!(store.value(a).iter().all(|&v| v != 0.0));
        assert!(store.value(b).iter().all(|&v| v == 0.0));
    }
}
