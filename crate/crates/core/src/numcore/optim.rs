//! Adam with decoupled weight decay.

use crate::error::{Error, Result};

use super::param::ParamStore;

pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update over every parameter in the store. Consumes gradients;
    /// a tracked parameter without one is an error. Weight decay is applied
    /// directly to the weights, outside the moment estimates.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.m.is_empty() {
            self.m = store.iter().map(|p| vec![0.0; p.data.len()]).collect();
            self.v = store.iter().map(|p| vec![0.0; p.data.len()]).collect();
        }
        assert_eq!(self.m.len(), store.len(), "parameter set changed under optimizer");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (idx, p) in store.iter_mut().enumerate() {
            let g = p
                .grad
                .take()
                .ok_or_else(|| Error::MissingGrad(p.name.clone()))?;
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
                p.data[i] -= self.lr * self.weight_decay * p.data[i];
            }
        }
        Ok(())
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Moment estimates in store order, for checkpointing.
    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, t: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) {
        self.t = t;
        self.m = m;
        self.v = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::param::GradSession;
    use crate::numcore::tensor::Tape;

    #[test]
    fn zero_grad_zero_decay_leaves_param_unchanged() {
        let mut store = ParamStore::new();
        let id = store.add("w", &[3], vec![1.0, -2.0, 0.5]).unwrap();
        store.get_mut(id).grad = Some(vec![0.0; 3]);
        let mut opt = AdamW::new(0.1, (0.9, 0.999), 1e-8, 0.0);
        opt.step(&mut store).unwrap();
        assert_eq!(store.get(id).data, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut store = ParamStore::new();
        store.add("w", &[1], vec![1.0]).unwrap();
        let mut opt = AdamW::new(0.1, (0.9, 0.999), 1e-8, 0.0);
        assert!(matches!(opt.step(&mut store), Err(Error::MissingGrad(_))));
    }

    #[test]
    fn descends_a_convex_quadratic() {
        // loss = sum(w^2); after the moment estimates warm up the loss must
        // fall monotonically.
        let mut store = ParamStore::new();
        let id = store.add("w", &[2], vec![3.0, -4.0]).unwrap();
        let mut opt = AdamW::new(0.05, (0.9, 0.999), 1e-8, 0.0);
        let mut losses = Vec::new();
        for _ in 0..100 {
            let tape = Tape::new();
            let mut session = GradSession::new(&tape);
            let w = session.leaf(&store, id);
            let loss = w.mul(&w).unwrap().sum();
            losses.push(loss.item().unwrap());
            loss.backward().unwrap();
            session.harvest(&mut store);
            opt.step(&mut store).unwrap();
        }
        for w in losses[10..].windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "loss rose: {} -> {}", w[0], w[1]);
        }
        assert!(losses.last().unwrap() < &losses[0]);
    }
}
