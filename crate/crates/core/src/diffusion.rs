//! Noise schedule, forward noising, ancestral and DDIM reverse steps,
//! classifier-free guidance and local-action energy guidance.
//!
//! Timesteps are 1-based: `t ∈ 1..=T`, with `ᾱ_0 = 1` for the final step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 8.5e-4;
pub const DEFAULT_BETA_END: f64 = 0.012;
pub const DEFAULT_CFG_ALPHA: f64 = 7.5;
/// 3σ for unit-scale latents; high CFG scales push predictions far past it.
pub const DEFAULT_CLIP_X0: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

/// Linear betas from `beta_start` to `beta_end` over `steps` timesteps.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::InvalidParameterRange(format!("schedule length {steps}")));
    }
    if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(Error::InvalidParameterRange(format!("betas {beta_start}..{beta_end}")));
    }
    let last = (steps - 1) as f64;
    let betas: Vec<f64> = (0..steps)
        .map(|i| if i == steps - 1 { beta_end } else { beta_start + (beta_end - beta_start) * i as f64 / last })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule { betas, alphas, alpha_bars })
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_schedule(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::TimestepOutOfRange { t, max: self.len() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }
}

/// `√ᾱ_t z0 + √(1 − ᾱ_t) ε`.
pub fn q_sample(z0: &Mat, t: usize, eps: &Mat, schedule: &NoiseSchedule) -> Result<Mat> {
    schedule.check(t)?;
    if z0.shape() != eps.shape() {
        return Err(Error::ShapeMismatch(format!("latent {:?} vs noise {:?}", z0.shape(), eps.shape())));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(z0.zip_map(eps, |z, e| a * z + b * e))
}

/// Evenly spaced descending timesteps from `T` down to `1`.
pub fn ddim_grid(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::InvalidArgument(format!("step count {steps} outside 1..={total}")));
    }
    if steps == 1 {
        return Ok(vec![total]);
    }
    let mut grid: Vec<usize> =
        (0..steps).map(|i| (total as f64 - (total - 1) as f64 * i as f64 / (steps - 1) as f64).round() as usize).collect();
    grid.dedup();
    Ok(grid)
}

/// `(t, t_prev)` pairs for a sampling grid, ending at `t_prev = 0`.
pub fn step_pairs(grid: &[usize]) -> Vec<(usize, usize)> {
    grid.iter().enumerate().map(|(i, &t)| (t, grid.get(i + 1).copied().unwrap_or(0))).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReverseMode {
    /// Stochastic step `t → t − 1` adding `√β_t`-scaled noise.
    Ancestral,
    /// DDIM with `η = 0`; may skip from `t` to any `t_prev < t`.
    Deterministic,
}

/// `ẑ0 = (z_t − √(1 − ᾱ_t) ε̂) / √ᾱ_t`.
pub fn predict_z0(z_t: &Mat, eps_hat: &Mat, t: usize, schedule: &NoiseSchedule) -> Mat {
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    z_t.zip_map(eps_hat, |z, e| (z - b * e) / a)
}

/// Noise estimate whose clean prediction is clamped to `[-bound, bound]`.
/// Entries already inside the bound keep their estimate bit for bit.
pub fn clip_prediction(z_t: &Mat, eps_hat: &Mat, t: usize, schedule: &NoiseSchedule, bound: f64) -> Mat {
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    z_t.zip_map(eps_hat, |z, e| {
        let z0 = (z - b * e) / a;
        if z0.abs() <= bound {
            e
        } else {
            (z - a * z0.clamp(-bound, bound)) / b
        }
    })
}

pub fn reverse_step(
    z_t: &Mat,
    eps_hat: &Mat,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
    mode: ReverseMode,
    noise: Option<&Mat>,
) -> Result<Mat> {
    schedule.check(t)?;
    if z_t.shape() != eps_hat.shape() {
        return Err(Error::ShapeMismatch(format!("latent {:?} vs prediction {:?}", z_t.shape(), eps_hat.shape())));
    }
    if t_prev >= t {
        return Err(Error::InvalidArgument(format!("reverse step from {t} to {t_prev}")));
    }
    match mode {
        ReverseMode::Deterministic => {
            let z0 = predict_z0(z_t, eps_hat, t, schedule);
            let ab = schedule.alpha_bar(t_prev);
            let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
            Ok(z0.zip_map(eps_hat, |z, e| a * z + b * e))
        }
        ReverseMode::Ancestral => {
            if t_prev != t - 1 {
                return Err(Error::InvalidArgument("ancestral steps cannot skip timesteps".into()));
            }
            let (alpha, beta, ab) = (schedule.alpha(t), schedule.beta(t), schedule.alpha_bar(t));
            let coef = beta / (1.0 - ab).sqrt();
            let scale = 1.0 / alpha.sqrt();
            let mut out = z_t.zip_map(eps_hat, |z, e| scale * (z - coef * e));
            if let Some(n) = noise {
                if n.shape() != z_t.shape() {
                    return Err(Error::ShapeMismatch("noise shape".into()));
                }
                if t > 1 {
                    out.axpy(beta.sqrt(), n);
                }
            }
            Ok(out)
        }
    }
}

/// `α ε_cond + (1 − α) ε_uncond`.
pub fn cfg_combine(eps_cond: &Mat, eps_uncond: &Mat, alpha: f64) -> Mat {
    eps_cond.zip_map(eps_uncond, |c, u| alpha * c + (1.0 - alpha) * u)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnergyKind {
    #[default]
    SquaredL2,
    L2,
}

/// Squared ℓ2 distance over all entries.
pub fn energy(c_ref: &Mat, z: &Mat) -> Result<f64> {
    if c_ref.shape() != z.shape() {
        return Err(Error::ShapeMismatch(format!("reference {:?} vs latent {:?}", c_ref.shape(), z.shape())));
    }
    Ok(z.sub(c_ref).sum_squares())
}

pub fn energy_of(kind: EnergyKind, c_ref: &Mat, z: &Mat) -> Result<f64> {
    let e = energy(c_ref, z)?;
    Ok(match kind {
        EnergyKind::SquaredL2 => e,
        EnergyKind::L2 => e.sqrt(),
    })
}

/// `∇_z E(c, z)`; the plain ℓ2 gradient is taken as zero at the optimum.
pub fn energy_grad(kind: EnergyKind, c_ref: &Mat, z: &Mat) -> Mat {
    let diff = z.sub(c_ref);
    match kind {
        EnergyKind::SquaredL2 => diff.scale(2.0),
        EnergyKind::L2 => {
            let n = diff.norm();
            if n == 0.0 {
                diff
            } else {
                diff.scale(1.0 / n)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceMode {
    /// Compare `z_t` with `√ᾱ_t c`.
    #[default]
    ScaledReference,
    /// Compare the clean estimate `ẑ0` with `c`, holding `ε̂` fixed.
    CleanEstimate,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSpec {
    pub references: Vec<Mat>,
    pub weights: Vec<f64>,
    pub mode: GuidanceMode,
    pub energy: EnergyKind,
}

impl GuidanceSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.references.len()
    }

    pub fn is_empty(&self) -> bool {
        self.references.is_empty()
    }

    pub fn validate(&self, shape: (usize, usize)) -> Result<()> {
        if self.weights.len() != self.references.len() {
            return Err(Error::InvalidArgument(format!("{} guiding weights for {} references", self.weights.len(), self.references.len())));
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument("guiding weights must be finite and non-negative".into()));
        }
        if let Some(r) = self.references.iter().find(|r| r.shape() != shape) {
            return Err(Error::ShapeMismatch(format!("reference {:?} vs latent {:?}", r.shape(), shape)));
        }
        if self.references.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite("guidance reference".into()));
        }
        Ok(())
    }
}

/// `Σ_k λ_k ∇_{z_t} E(c_k, z_t)` under the spec's comparison mode.
pub fn guidance_gradient(z_t: &Mat, eps_hat: &Mat, t: usize, schedule: &NoiseSchedule, spec: &GuidanceSpec) -> Result<Mat> {
    schedule.check(t)?;
    spec.validate(z_t.shape())?;
    let ab = schedule.alpha_bar(t);
    let mut total = Mat::zeros(z_t.rows(), z_t.cols());
    match spec.mode {
        GuidanceMode::ScaledReference => {
            for (c, &w) in spec.references.iter().zip(&spec.weights) {
                let target = c.scale(ab.sqrt());
                total.axpy(w, &energy_grad(spec.energy, &target, z_t));
            }
        }
        GuidanceMode::CleanEstimate => {
            let z0 = predict_z0(z_t, eps_hat, t, schedule);
            let chain = 1.0 / ab.sqrt();
            for (c, &w) in spec.references.iter().zip(&spec.weights) {
                total.axpy(w * chain, &energy_grad(spec.energy, c, &z0));
            }
        }
    }
    Ok(total)
}

/// `z̃ − Σ_k λ_k ∇_{z_t} E(c_k, z_t)`.
pub fn apply_guidance(z_tilde: &Mat, z_t: &Mat, eps_hat: &Mat, t: usize, schedule: &NoiseSchedule, spec: &GuidanceSpec) -> Result<Mat> {
    if spec.is_empty() {
        spec.validate(z_t.shape())?;
        return Ok(z_tilde.clone());
    }
    Ok(z_tilde.sub(&guidance_gradient(z_t, eps_hat, t, schedule, spec)?))
}

#[allow(clippy::too_many_arguments)]
pub fn guided_step(
    z_t: &Mat,
    eps_hat: &Mat,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
    guidance: &GuidanceSpec,
    mode: ReverseMode,
    noise: Option<&Mat>,
) -> Result<Mat> {
    let z_tilde = reverse_step(z_t, eps_hat, t, t_prev, schedule, mode, noise)?;
    apply_guidance(&z_tilde, z_t, eps_hat, t, schedule, guidance)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let s = NoiseSchedule::default();
        assert_eq!(s.beta(1), 8.5e-4);
        assert_eq!(s.beta(1000), 0.012);
        let two = make_schedule(2, 8.5e-4, 0.012).unwrap();
        assert_eq!(two.betas, vec![8.5e-4, 0.012]);
        assert!(make_schedule(1, 0.1, 0.2).is_err());
        assert!(make_schedule(10, 0.2, 0.1).is_err());
    }

    #[test]
    fn grid_includes_both_ends() {
        assert_eq!(ddim_grid(1000, 50).unwrap().first(), Some(&1000));
        assert_eq!(ddim_grid(1000, 50).unwrap().last(), Some(&1));
        assert_eq!(ddim_grid(1000, 50).unwrap().len(), 50);
        assert_eq!(ddim_grid(5, 5).unwrap(), vec![5, 4, 3, 2, 1]);
        assert_eq!(ddim_grid(10, 1).unwrap(), vec![10]);
        assert_eq!(step_pairs(&[10, 5, 1]), vec![(10, 5), (5, 1), (1, 0)]);
        assert!(ddim_grid(10, 11).is_err());
    }

    #[test]
    fn cfg_examples() {
        let c = Mat::filled(1, 1, 1.0);
        let u = Mat::filled(1, 1, 0.0);
        assert_eq!(cfg_combine(&c, &u, 7.5).get(0, 0), 7.5);
        assert_eq!(cfg_combine(&c, &u, 1.0), c);
        assert_eq!(cfg_combine(&c, &c, 7.5), c);
    }

    #[test]
    fn quadratic_contraction() {
        let s = NoiseSchedule::default();
        let z = Mat::row_vector(&[1.0, 1.0]);
        let spec = GuidanceSpec { references: vec![Mat::zeros(1, 2)], weights: vec![0.1], ..Default::default() };
        let out = apply_guidance(&z, &z, &Mat::zeros(1, 2), 10, &s, &spec).unwrap();
        assert!(out.max_abs_diff(&Mat::row_vector(&[0.8, 0.8])) < 1e-15);
        assert!((energy(&Mat::zeros(1, 2), &out).unwrap() - 1.28).abs() < 1e-12);
    }

    #[test]
    fn step_errors() {
        let s = NoiseSchedule::default();
        let z = Mat::zeros(2, 2);
        assert!(matches!(reverse_step(&z, &z, 0, 0, &s, ReverseMode::Deterministic, None), Err(Error::TimestepOutOfRange { .. })));
        assert!(reverse_step(&z, &z, 5, 3, &s, ReverseMode::Ancestral, None).is_err());
        let spec = GuidanceSpec { references: vec![z.clone()], weights: vec![0.1, 0.2], ..Default::default() };
        assert!(guided_step(&z, &z, 5, 4, &s, &spec, ReverseMode::Deterministic, None).is_err());
    }
}
