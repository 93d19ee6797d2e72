//! Per-task return normalization with output-preserving head rescaling.
//!
//! Each task tracks an exponential running mean and second moment of its
//! value targets; the value head's final layer is rescaled whenever the
//! statistics move so the unnormalized prediction
//! `f(x) = sigma * (W h(x) + b) + mu` never jumps.

use rand::Rng;

/// Running statistics of one task's value targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskStats {
    pub mu: f64,
    pub nu: f64,
    pub sigma: f64,
}

impl TaskStats {
    /// Fresh-task statistics: early normalized targets are roughly the raw
    /// returns.
    pub fn fresh() -> TaskStats {
        TaskStats {
            mu: 0.0,
            nu: 1.0,
            sigma: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PopArtStats {
    pub beta: f64,
    pub sigma_floor: f64,
    stats: Vec<TaskStats>,
}

impl PopArtStats {
    pub fn new(n_tasks: usize, beta: f64, sigma_floor: f64) -> PopArtStats {
        assert!(beta > 0.0 && beta <= 1.0, "beta must be in (0, 1]");
        assert!(sigma_floor > 0.0);
        PopArtStats {
            beta,
            sigma_floor,
            stats: vec![TaskStats::fresh(); n_tasks],
        }
    }

    pub fn n_tasks(&self) -> usize {
        self.stats.len()
    }

    pub fn task(&self, task: usize) -> TaskStats {
        self.stats[task]
    }

    pub fn set_task(&mut self, task: usize, stats: TaskStats) {
        self.stats[task] = stats;
    }

    /// Fold one return into the task's statistics:
    /// `mu <- (1-beta) mu + beta G`, `nu <- (1-beta) nu + beta G^2`,
    /// `sigma <- max(sqrt(nu - mu^2), sigma_floor)`.
    pub fn update(&mut self, task: usize, g: f64) {
        let s = &mut self.stats[task];
        s.mu = (1.0 - self.beta) * s.mu + self.beta * g;
        s.nu = (1.0 - self.beta) * s.nu + self.beta * g * g;
        let var = (s.nu - s.mu * s.mu).max(0.0);
        s.sigma = var.sqrt().max(self.sigma_floor);
    }

    /// Regression target for the normalized head: `(G - mu) / sigma`.
    pub fn normalized_target(&self, task: usize, g: f64) -> f64 {
        let s = self.stats[task];
        (g - s.mu) / s.sigma
    }
}

/// Output-preserving rescale of a value head's final layer after the
/// statistics moved from `(sigma_old, mu_old)` to `(sigma_new, mu_new)`:
/// `W <- (sigma_old / sigma_new) W`,
/// `b <- (sigma_old b + mu_old - mu_new) / sigma_new`.
pub fn rescale_head(
    w: &mut [f64],
    b: &mut f64,
    sigma_old: f64,
    mu_old: f64,
    sigma_new: f64,
    mu_new: f64,
) {
    let ratio = sigma_old / sigma_new;
    for v in w.iter_mut() {
        *v *= ratio;
    }
    *b = (sigma_old * *b + mu_old - mu_new) / sigma_new;
}

/// Unnormalized value prediction `f = sigma * (w . h + b) + mu`.
pub fn unnormalized_value(w: &[f64], b: f64, h: &[f64], sigma: f64, mu: f64) -> f64 {
    debug_assert_eq!(w.len(), h.len());
    let mut dot = 0.0;
    for i in 0..w.len() {
        dot += w[i] * h[i];
    }
    sigma * (dot + b) + mu
}

/// Exercise `n` random statistics transitions on a random head and return
/// the largest relative output change. The testable core of "keep the
/// learning stationary": this must stay at numerical noise.
pub fn max_rescale_drift(n: usize, width: usize, rng: &mut impl Rng) -> f64 {
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let mut w: Vec<f64> = (0..width).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut b: f64 = rng.random_range(-1.0..1.0);
        let (sigma_old, mu_old) = (rng.random_range(0.01..100.0), rng.random_range(-50.0..50.0));
        let (sigma_new, mu_new) = (rng.random_range(0.01..100.0), rng.random_range(-50.0..50.0));
        let h: Vec<f64> = (0..width).map(|_| rng.random_range(-2.0..2.0)).collect();
        let before = unnormalized_value(&w, b, &h, sigma_old, mu_old);
        rescale_head(&mut w, &mut b, sigma_old, mu_old, sigma_new, mu_new);
        let after = unnormalized_value(&w, b, &h, sigma_new, mu_new);
        worst = worst.max((after - before).abs() / (1.0 + before.abs()));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn beta_one_degenerates_to_floored_sigma() {
        let mut stats = PopArtStats::new(1, 1.0, 1e-4);
        stats.update(0, 5.0);
        let s = stats.task(0);
        assert_eq!(s.mu, 5.0);
        assert_eq!(s.nu, 25.0);
        assert_eq!(s.sigma, 1e-4);
    }

    #[test]
    fn half_beta_single_update() {
        let mut stats = PopArtStats::new(1, 0.5, 1e-4);
        stats.set_task(
            0,
            TaskStats {
                mu: 0.0,
                nu: 0.0,
                sigma: 1.0,
            },
        );
        stats.update(0, 4.0);
        let s = stats.task(0);
        assert_eq!(s.mu, 2.0);
        assert_eq!(s.nu, 8.0);
        assert_eq!(s.sigma, 2.0);
    }

    #[test]
    fn converges_on_gaussian_stream() {
        use rand_distr::{Distribution, Normal};
        let mut stats = PopArtStats::new(1, 1e-3, 1e-4);
        let normal = Normal::new(3.0, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10_000 {
            stats.update(0, normal.sample(&mut rng));
        }
        let s = stats.task(0);
        assert!((s.mu - 3.0).abs() < 0.2, "mu = {}", s.mu);
        assert!((s.sigma - 2.0).abs() < 0.3, "sigma = {}", s.sigma);
    }

    #[test]
    fn rescale_identity_is_a_no_op() {
        let mut w = vec![0.5, -0.25];
        let mut b = 0.75;
        rescale_head(&mut w, &mut b, 2.0, 1.0, 2.0, 1.0);
        assert_eq!(w, vec![0.5, -0.25]);
        assert_eq!(b, 0.75);
    }

    #[test]
    fn doubling_sigma_halves_w() {
        let mut w = vec![1.0, -2.0];
        let mut b = 0.0;
        rescale_head(&mut w, &mut b, 1.0, 0.5, 2.0, 0.5);
        assert_eq!(w, vec![0.5, -1.0]);
    }

    #[test]
    fn rescale_preserves_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let worst = max_rescale_drift(100, 8, &mut rng);
        assert!(worst <= 1e-9, "max relative drift {worst}");
    }

    #[test]
    fn normalized_target_examples() {
        let mut stats = PopArtStats::new(1, 0.5, 1e-4);
        stats.set_task(
            0,
            TaskStats {
                mu: 3.0,
                nu: 13.0,
                sigma: 2.0,
            },
        );
        assert_eq!(stats.normalized_target(0, 3.0), 0.0);
        assert_eq!(stats.normalized_target(0, 5.0), 1.0);
    }

    #[test]
    fn converged_normalization_standardizes_the_stream() {
        use rand_distr::{Distribution, Normal};
        let mut stats = PopArtStats::new(1, 1e-3, 1e-4);
        let normal = Normal::new(-7.0, 4.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20_000 {
            stats.update(0, normal.sample(&mut rng));
        }
        let batch: Vec<f64> = (0..2_000)
            .map(|_| stats.normalized_target(0, normal.sample(&mut rng)))
            .collect();
        let mean = batch.iter().sum::<f64>() / batch.len() as f64;
        let std = (batch.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>()
            / batch.len() as f64)
            .sqrt();
        assert!(mean.abs() < 0.3, "mean = {mean}");
        assert!((std - 1.0).abs() < 0.3, "std = {std}");
    }

    #[test]
    fn tasks_are_isolated() {
        let mut stats = PopArtStats::new(2, 0.1, 1e-4);
        let before = stats.normalized_target(1, 2.5);
        for _ in 0..100 {
            stats.update(0, 1000.0);
        }
        assert_eq!(stats.normalized_target(1, 2.5), before);
    }
}
