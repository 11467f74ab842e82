//! DDPM variance schedule, forward noising and the ancestral sampler step.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// `β_t`, `α_t = 1 − β_t` and `ᾱ_t = Π α_s` for `t = 1..=T`; `ᾱ_0 = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced `β` from `start` to `end` over `steps` steps.
    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Invalid("schedule needs at least one step".into()));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    start
                } else {
                    start + (end - start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    /// Arbitrary `β_1..β_T`, each in `[0, 1)`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::Invalid("betas must be non-empty and lie in [0, 1)".into()));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    /// Number of diffusion steps T.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::Invalid(format!("timestep {t} outside 1..={}", self.len())));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// `steps` descending timesteps from `T` for the sampler; the final
    /// transition of a rollout goes from the last entry to 0.
    pub fn sampler_timesteps(&self, steps: usize) -> Vec<usize> {
        let big_t = self.len();
        let mut out: Vec<usize> = (1..=steps)
            .rev()
            .map(|k| ((k * big_t) as f64 / steps as f64).ceil() as usize)
            .map(|t| t.clamp(1, big_t))
            .collect();
        out.dedup();
        out
    }
}

/// One forward step `q(z_t | z_{t−1}) = N(√(1−β_t) z_{t−1}, β_t I)`.
pub fn noising_step<T: Real, R: Rng + ?Sized>(
    z_prev: &Tensor<T>,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor<T>> {
    schedule.check(t)?;
    let b = schedule.beta(t);
    let (a, s) = ((1.0 - b).sqrt(), b.sqrt());
    let data = z_prev
        .data()
        .iter()
        .map(|z| {
            let e: f64 = rng.sample(StandardNormal);
            T::of(a * z.f64() + s * e)
        })
        .collect();
    Tensor::from_vec(z_prev.shape(), data)
}

/// Closed form `z_t = √ᾱ_t z_0 + √(1−ᾱ_t) ε`; `t = 0` returns `z_0`.
pub fn forward_noising<T: Real>(z0: &Tensor<T>, t: usize, eps: &Tensor<T>, schedule: &NoiseSchedule) -> Result<Tensor<T>> {
    if t > schedule.len() {
        return Err(Error::Invalid(format!("timestep {t} outside 0..={}", schedule.len())));
    }
    let ab = schedule.alpha_bar(t);
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    z0.zip_map(eps, |z, e| T::of(a * z.f64() + s * e.f64()))
}

/// Ancestral DDPM transition from `t` to an earlier `s` given the predicted
/// noise. With `s = 0` the result is the deterministic `ẑ_0`.
pub fn ancestral_step<T: Real, R: Rng + ?Sized>(
    z_t: &Tensor<T>,
    eps_hat: &Tensor<T>,
    t: usize,
    s: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor<T>> {
    schedule.check(t)?;
    if s >= t {
        return Err(Error::Invalid(format!("sampler must move backwards, got {t} -> {s}")));
    }
    let (ab_t, ab_s) = (schedule.alpha_bar(t), schedule.alpha_bar(s));
    let beta = 1.0 - ab_t / ab_s;
    let c0 = ab_s.sqrt() * beta / (1.0 - ab_t);
    let ct = (1.0 - beta).sqrt() * (1.0 - ab_s) / (1.0 - ab_t);
    let var = beta * (1.0 - ab_s) / (1.0 - ab_t);
    let (inv_a, sig) = (1.0 / ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let mean = z_t.zip_map(eps_hat, |z, e| {
        let x0 = (z.f64() - sig * e.f64()) * inv_a;
        T::of(c0 * x0 + ct * z.f64())
    })?;
    if s == 0 || var <= 0.0 {
        return Ok(mean);
    }
    let sd = var.sqrt();
    let data = mean
        .data()
        .iter()
        .map(|m| {
            let n: f64 = rng.sample(StandardNormal);
            T::of(m.f64() + sd * n)
        })
        .collect();
    Tensor::from_vec(mean.shape(), data)
}
