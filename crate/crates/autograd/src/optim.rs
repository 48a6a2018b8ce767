use crate::params::ParamStore;
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moment buffers are laid out parallel to the
/// parameters of the store the optimizer was created for.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    /// Applies one update using the gradients currently held in `store`.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let (b1, b2) = (T::lit(beta1), T::lit(beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - beta1), T::lit(1.0 - beta2));
        let step_size = T::lit(lr / bc1);
        let bc2_sqrt = T::lit(bc2.sqrt());
        let eps = T::lit(eps);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                let denom = v[i].sqrt() / bc2_sqrt + eps;
                value[i] -= step_size * m[i] / denom;
            }
        }
    }
}

/// Cosine annealing from `initial_lr` at iteration 0 to `min_lr` at `total_iters`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineLr {
    pub initial_lr: f64,
    pub min_lr: f64,
    pub total_iters: u64,
}

impl CosineLr {
    pub fn new(initial_lr: f64, total_iters: u64) -> Self {
        Self { initial_lr, min_lr: 0.0, total_iters }
    }

    pub fn lr(&self, iter: u64) -> f64 {
        if self.total_iters == 0 {
            return self.initial_lr;
        }
        let frac = iter.min(self.total_iters) as f64 / self.total_iters as f64;
        self.min_lr + 0.5 * (self.initial_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(values: Vec<f32>, grads: Vec<f32>) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::new(vec![values.len()], values).unwrap()).unwrap();
        s.get_mut(id).grad = Tensor::new(vec![grads.len()], grads).unwrap();
        s
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut s = store_with(vec![1.0, 1.0, 1.0], vec![0.3, -2.0, 1e-3]);
        let mut adam = Adam::new(&s, AdamConfig::default());
        adam.step(&mut s, 0.01);
        let v = s.iter().next().unwrap().value.data().to_vec();
        // at t = 1 the bias-corrected update is lr·g/(|g| + eps)
        for (got, g) in v.iter().zip([0.3f64, -2.0, 1e-3]) {
            let want = 1.0 - 0.01 * g / (g.abs() + 1e-8);
            assert!((*got as f64 - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut s = store_with(vec![0.5, -0.25], vec![0.0, 0.0]);
        let mut adam = Adam::new(&s, AdamConfig::default());
        adam.step(&mut s, 0.1);
        assert_eq!(s.iter().next().unwrap().value.data(), &[0.5, -0.25]);
    }

    #[test]
    fn identical_steps_are_deterministic() {
        let run = || {
            let mut s = store_with(vec![0.1, 0.2, 0.3], vec![0.7, -0.1, 0.05]);
            let mut adam = Adam::new(&s, AdamConfig::default());
            for _ in 0..5 {
                adam.step(&mut s, 1e-3);
            }
            let out = s.iter().next().unwrap().value.data().to_vec();
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        let sched = CosineLr::new(2e-5, 1000);
        assert_eq!(sched.lr(0), 2e-5);
        assert!(sched.lr(1000).abs() < 1e-20);
        assert!((sched.lr(500) - 1e-5).abs() < 1e-18);
    }
}
