//! Linear-beta noise schedule and the deterministic DDIM (η = 0) update.

use crate::tensor::Tensor;

pub const TRAIN_TIMESTEPS: usize = 1000;

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    alphas_cumprod: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(TRAIN_TIMESTEPS, 1e-4, 0.02)
    }
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Self {
        let mut alphas_cumprod = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for i in 0..steps {
            let beta = beta_start + (beta_end - beta_start) * i as f64 / (steps - 1).max(1) as f64;
            acc *= 1.0 - beta;
            alphas_cumprod.push(acc);
        }
        Self { alphas_cumprod }
    }

    pub fn train_steps(&self) -> usize {
        self.alphas_cumprod.len()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alphas_cumprod[t]
    }

    /// Training timestep visited at sampling step `step` of `total`
    /// (step 0 is the noisiest).
    pub fn timestep(&self, step: usize, total: usize) -> usize {
        let n = self.train_steps();
        let ratio = n / total.max(1);
        ((total - 1 - step) * ratio + ratio - 1).min(n - 1)
    }

    /// `α̅` after sampling step `step`; 1 once the trajectory is finished.
    pub fn alpha_bar_after(&self, step: usize, total: usize) -> f64 {
        if step + 1 >= total {
            1.0
        } else {
            self.alpha_bar(self.timestep(step + 1, total))
        }
    }

    /// Noised sample `√α̅·x₀ + √(1−α̅)·ε`.
    pub fn add_noise(&self, x0: &[f64], noise: &[f64], t: usize) -> Vec<f64> {
        let ab = self.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        x0.iter().zip(noise).map(|(x, e)| a * x + b * e).collect()
    }

    /// One DDIM step from `α̅_t` to `α̅_prev`, with the predicted clean
    /// sample clipped to `[-1, 1]`.
    pub fn ddim_step(&self, latent: &Tensor, eps: &Tensor, alpha_bar: f64, alpha_bar_prev: f64) -> Tensor {
        let (sa, sb) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
        let (pa, pb) = (alpha_bar_prev.sqrt(), (1.0 - alpha_bar_prev).sqrt());
        let mut out = latent.clone();
        for (x, &e) in out.data_mut().iter_mut().zip(eps.data()) {
            let x0 = ((*x - sb * e) / sa).clamp(-1.0, 1.0);
            let e_dir = (*x - sa * x0) / sb;
            *x = pa * x0 + pb * e_dir;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timesteps_descend_and_cover_range() {
        let s = NoiseSchedule::default();
        assert_eq!(s.timestep(0, 50), 999);
        assert_eq!(s.timestep(49, 50), 19);
        let ts: Vec<_> = (0..50).map(|i| s.timestep(i, 50)).collect();
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(s.alpha_bar_after(49, 50), 1.0);
    }

    #[test]
    fn alpha_bar_decreases() {
        let s = NoiseSchedule::default();
        assert!(s.alpha_bar(0) < 1.0 && s.alpha_bar(0) > 0.999);
        assert!(s.alpha_bar(999) < 1e-3);
    }

    #[test]
    fn exact_eps_recovers_clean_sample() {
        let s = NoiseSchedule::default();
        let x0 = [0.5, -0.25, 0.9];
        let eps = [1.0, -0.3, 0.2];
        let t = 500;
        let xt = Tensor::new(vec![3], s.add_noise(&x0, &eps, t)).unwrap();
        let e = Tensor::new(vec![3], eps.to_vec()).unwrap();
        let out = s.ddim_step(&xt, &e, s.alpha_bar(t), 1.0);
        for (a, b) in out.data().iter().zip(x0) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
