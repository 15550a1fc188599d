//! Variance-preserving discrete noise schedule.
//!
//! The grid has N steps t_1 < ... < t_N with per-step retention 1 - b_n.
//! Signal and noise coefficients follow
//!
//! ```text
//! alpha_n = sqrt(prod_{i<=n} (1 - b_i)),   beta_n = sqrt(1 - alpha_n^2)
//! ```
//!
//! so alpha_n^2 + beta_n^2 = 1 exactly and the marginal of a perturbed
//! latent is N(alpha_n * z, beta_n^2 * I).

use crate::{Error, Result, Rng, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    b: Vec<f64>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear interpolation of b from `b_min` to `b_max` over N steps.
    pub fn build(n_steps: usize, b_min: f64, b_max: f64) -> Result<Self> {
        if n_steps < 2 {
            return Err(Error::invalid("build_schedule", "N must be at least 2"));
        }
        if !(b_min > 0.0 && b_min <= b_max && b_max < 1.0) {
            return Err(Error::invalid(
                "build_schedule",
                format!("need 0 < b_min <= b_max < 1, got ({b_min}, {b_max})"),
            ));
        }
        let b: Vec<f64> = (0..n_steps)
            .map(|i| b_min + (b_max - b_min) * i as f64 / (n_steps - 1) as f64)
            .collect();
        Ok(Self::from_b(b))
    }

    pub fn from_b(b: Vec<f64>) -> Self {
        let mut alpha = Vec::with_capacity(b.len());
        let mut alpha_sq = 1.0;
        for &bi in &b {
            alpha_sq *= 1.0 - bi;
            alpha.push(alpha_sq.sqrt());
        }
        let beta = alpha.iter().map(|a| (1.0 - a * a).sqrt()).collect();
        NoiseSchedule { b, alpha, beta }
    }

    pub fn len(&self) -> usize {
        self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b.is_empty()
    }

    pub fn b_values(&self) -> &[f64] {
        &self.b
    }

    /// Signal coefficient at 1-based step index.
    pub fn alpha(&self, n: usize) -> f64 {
        self.alpha[n - 1]
    }

    /// Noise coefficient at 1-based step index.
    pub fn beta(&self, n: usize) -> f64 {
        self.beta[n - 1]
    }

    pub fn check_index(&self, n: usize) -> Result<()> {
        if n == 0 || n > self.len() {
            return Err(Error::invalid(
                "step index",
                format!("n = {n} out of range 1..={}", self.len()),
            ));
        }
        Ok(())
    }

    /// z_t = alpha_n * z + beta_n * noise.
    pub fn perturb(&self, z: &Tensor, n: usize, noise: &Tensor) -> Result<Tensor> {
        self.check_index(n)?;
        if z.shape() != noise.shape() {
            return Err(Error::ShapeMismatch {
                node: "perturb".into(),
                expected: z.shape().to_vec(),
                got: noise.shape().to_vec(),
            });
        }
        Ok(z.scale(self.alpha(n)).axpy(self.beta(n), noise))
    }

    /// Draw Gaussian noise and perturb in one call.
    pub fn perturb_with(&self, z: &Tensor, n: usize, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
        let noise = Tensor::new(z.shape().to_vec(), rng.normal_vec(z.numel()))?;
        let zt = self.perturb(z, n, &noise)?;
        Ok((zt, noise))
    }

    /// Grid refinement: 2N steps sampling the same underlying schedule.
    ///
    /// Each refined step retains sqrt of the interpolated coarse retention,
    /// so cumulative signal decay matches the original schedule on shared
    /// grid points while the step size halves.
    pub fn refine_double(&self) -> NoiseSchedule {
        let n = self.len();
        let b2: Vec<f64> = (0..2 * n)
            .map(|j| {
                // midpoint of refined cell j in coarse index coordinates
                let pos = (j as f64 + 0.5) / 2.0 - 0.5;
                let pos = pos.clamp(0.0, (n - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(n - 1);
                let frac = pos - lo as f64;
                let b = self.b[lo] * (1.0 - frac) + self.b[hi] * frac;
                1.0 - (1.0 - b).sqrt()
            })
            .collect();
        NoiseSchedule::from_b(b2)
    }

    /// Finite-difference consistency of the drift/diffusion relations.
    ///
    /// On the normalized grid t_n = n/N, estimates mu(t) = d log alpha / dt
    /// with central differences, derives sigma^2(t) = d beta^2/dt - 2 mu
    /// beta^2, and returns the max residual of the moment-propagation
    /// identities d(alpha^2)/dt = 2 mu alpha^2 and
    /// d(beta^2)/dt = 2 mu beta^2 + sigma^2 over interior grid points.
    pub fn relation_check(&self) -> f64 {
        let n = self.len();
        let dt = 1.0 / n as f64;
        let mut max_res: f64 = 0.0;
        for i in 1..n - 1 {
            let mu = (self.alpha[i + 1].ln() - self.alpha[i - 1].ln()) / (2.0 * dt);
            let da2 = (self.alpha[i + 1].powi(2) - self.alpha[i - 1].powi(2)) / (2.0 * dt);
            let db2 = (self.beta[i + 1].powi(2) - self.beta[i - 1].powi(2)) / (2.0 * dt);
            let sigma_sq = db2 - 2.0 * mu * self.beta[i].powi(2);
            let res_a = (da2 - 2.0 * mu * self.alpha[i].powi(2)).abs();
            let res_b = (db2 - 2.0 * mu * self.beta[i].powi(2) - sigma_sq).abs();
            max_res = max_res.max(res_a).max(res_b);
        }
        max_res
    }
}
