//! Diffusion noise schedule and the closed-form forward / posterior sampling
//! math. Everything here is a pure function over value types; randomness
//! always enters through caller-supplied noise.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{EcdiffError, Result};

/// β/α/ᾱ/σ² tables for a strided diffusion chain of `t_total` steps walked in
/// jumps of `stride`.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub t_total: usize,
    pub stride: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma2: Vec<f64>,
}

/// A sample somewhere along the chain. `step` counts forward-diffusion steps
/// applied so far and is always a multiple of the stride.
#[derive(Debug, Clone)]
pub struct DiffusionState {
    pub sample: Array2<f64>,
    pub step: usize,
}

impl NoiseSchedule {
    /// Linear β schedule: β_t = beta_min + (t-1)(beta_max-beta_min)/(T-1).
    pub fn build(t_total: usize, stride: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if t_total == 0 || stride == 0 || t_total < stride {
            return Err(EcdiffError::Config(format!(
                "need T >= s >= 1, got T={t_total}, s={stride}"
            )));
        }
        if t_total % stride != 0 {
            return Err(EcdiffError::Config(format!(
                "total steps T={t_total} must be divisible by stride s={stride}"
            )));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(EcdiffError::Config(format!(
                "beta bounds must satisfy 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let mut beta = Vec::with_capacity(t_total);
        for t in 1..=t_total {
            let frac = if t_total == 1 { 0.0 } else { (t - 1) as f64 / (t_total - 1) as f64 };
            beta.push(beta_min + frac * (beta_max - beta_min));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(t_total);
        let mut prod = 1.0;
        for &a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        let mut sigma2 = Vec::with_capacity(t_total);
        for t in 1..=t_total {
            let prev = if t >= 2 { alpha_bar[t - 2] } else { 1.0 };
            sigma2.push((1.0 - prev) / (1.0 - alpha_bar[t - 1]) * beta[t - 1]);
        }
        Ok(Self { t_total, stride, beta, alpha, alpha_bar, sigma2 })
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_total {
            return Err(EcdiffError::Config(format!(
                "step t={} out of range 1..={}",
                t, self.t_total
            )));
        }
        Ok(())
    }

    /// β_t, 1-indexed.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    /// α_t, 1-indexed.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// ᾱ_t with the convention ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// σ_t² from the posterior variance formula (σ_1² = 0).
    pub fn sigma2(&self, t: usize) -> f64 {
        self.sigma2[t - 1]
    }

    /// Number of reverse jumps T/s.
    pub fn reverse_step_count(&self) -> usize {
        self.t_total / self.stride
    }

    /// Reverse-chain steps T, T-s, ..., s.
    pub fn reverse_steps(&self) -> impl Iterator<Item = usize> + '_ {
        (1..=self.reverse_step_count()).rev().map(move |k| k * self.stride)
    }

    /// Mean coefficients (on the current sample and on the clean estimate) plus
    /// the noise scale of the strided reverse-sampling rule at step `t`.
    ///
    /// These come from the exact Bayes posterior over the composed s-step
    /// forward kernel, i.e. the single-step rule with the per-jump quantities
    /// ᾱ_t/ᾱ_{t-s} in place of α_t and 1-ᾱ_t/ᾱ_{t-s} in place of β_t. At
    /// s = 1 they reduce exactly to the classic coefficients, and at t = s the
    /// clean coefficient is exactly 1 so the chain terminates on the clean
    /// estimate itself.
    pub fn posterior_coeffs(&self, t: usize) -> Result<(f64, f64, f64)> {
        self.check_t(t)?;
        if t % self.stride != 0 || t < self.stride {
            return Err(EcdiffError::Config(format!(
                "posterior step t={} must be a positive multiple of stride {}",
                t, self.stride
            )));
        }
        let s = self.stride;
        let ab_t = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - s);
        let ratio = ab_t / ab_prev; // effective one-jump ᾱ over the stride
        let c_current = ratio.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
        let c_clean = ab_prev.sqrt() * (1.0 - ratio) / (1.0 - ab_t);
        let noise_scale = (1.0 - ratio).sqrt();
        Ok((c_current, c_clean, noise_scale))
    }
}

/// Closed-form forward draw: √ᾱ_t·F0 + √(1-ᾱ_t)·eps.
pub fn forward_diffuse(
    f0: &Array2<f64>,
    t: usize,
    eps: &Array2<f64>,
    sched: &NoiseSchedule,
) -> Result<DiffusionState> {
    sched.check_t(t)?;
    if f0.dim() != eps.dim() {
        return Err(EcdiffError::Shape(format!(
            "noise shape {:?} does not match sample shape {:?}",
            eps.dim(),
            f0.dim()
        )));
    }
    let ab = sched.alpha_bar(t);
    let sample = f0.mapv(|x| ab.sqrt() * x) + &eps.mapv(|e| (1.0 - ab).sqrt() * e);
    Ok(DiffusionState { sample, step: t })
}

/// Posterior mean/variance in the ε-parameterization; provided for
/// cross-checking the clean-sample parameterization, not used in training.
pub fn mu_sigma_from_eps(
    f_t: &Array2<f64>,
    t: usize,
    eps_pred: &Array2<f64>,
    sched: &NoiseSchedule,
) -> Result<(Array2<f64>, f64)> {
    sched.check_t(t)?;
    let a = sched.alpha(t);
    let ab = sched.alpha_bar(t);
    let coef = sched.beta(t) / (1.0 - ab).sqrt();
    let mu = (f_t - &eps_pred.mapv(|e| coef * e)).mapv(|x| x / a.sqrt());
    Ok((mu, sched.sigma2(t)))
}

/// One strided reverse-sampling jump. At the terminal step (t = s) the noise
/// term is forced to zero so the output is deterministic given its inputs.
pub fn posterior_sample(
    f_t: &DiffusionState,
    f0_hat: &Array2<f64>,
    sched: &NoiseSchedule,
    eps: &Array2<f64>,
) -> Result<DiffusionState> {
    let t = f_t.step;
    let (c_current, c_clean, noise_scale) = sched.posterior_coeffs(t)?;
    let mut sample =
        f_t.sample.mapv(|x| c_current * x) + &f0_hat.mapv(|x| c_clean * x);
    if t > sched.stride {
        sample += &eps.mapv(|e| noise_scale * e);
    }
    Ok(DiffusionState { sample, step: t - sched.stride })
}

/// Ancestrally consistent pair (F_{t-s}, F_t): the first element is a forward
/// draw at t-s, the second extends it by composing the single-step kernel over
/// the stride (ratio ᾱ_t/ᾱ_{t-s}).
pub fn coupled_real_pair<R: Rng>(
    f0: &Array2<f64>,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<(DiffusionState, DiffusionState)> {
    sched.check_t(t)?;
    if t % sched.stride != 0 || t < sched.stride {
        return Err(EcdiffError::Config(format!(
            "coupled pair step t={} must be a positive multiple of stride {}",
            t, sched.stride
        )));
    }
    let s = sched.stride;
    let prev = if t == s {
        DiffusionState { sample: f0.clone(), step: 0 }
    } else {
        let eps = sample_noise_like(f0, rng);
        forward_diffuse(f0, t - s, &eps, sched)?
    };
    let ratio = sched.alpha_bar(t) / sched.alpha_bar(t - s);
    let eps = sample_noise_like(f0, rng);
    let sample = prev.sample.mapv(|x| ratio.sqrt() * x) + &eps.mapv(|e| (1.0 - ratio).sqrt() * e);
    Ok((prev, DiffusionState { sample, step: t }))
}

/// Standard-normal noise matching the shape of `like`.
pub fn sample_noise_like<R: Rng>(like: &Array2<f64>, rng: &mut R) -> Array2<f64> {
    let (n, d) = like.dim();
    Array2::from_shape_simple_fn((n, d), || rng.sample(StandardNormal))
}
