//! Diffusion variance schedules: β_t with the derived α_t and ᾱ_t.
//!
//! All quantities are computed and stored in f64 (a product of a thousand
//! terms loses real precision in f32) with f32 views for the training path.
//! Steps are 1-indexed in the math and 0-indexed in storage; the conversion
//! lives entirely in this module's accessors.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl ScheduleKind {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::config(format!("unknown schedule kind '{other}'"))),
        }
    }
}

/// Precomputed β_t, α_t = 1-β_t and ᾱ_t = Π_{s≤t} α_s for t = 1..T.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Rebuild a schedule from raw betas (checkpoint restore); the derived
    /// quantities are recomputed deterministically.
    pub fn from_betas(kind: ScheduleKind, betas: Vec<f64>) -> Result<Self> {
        for (i, &b) in betas.iter().enumerate() {
            if !(0.0 < b && b < 1.0) {
                return Err(Error::config(format!(
                    "beta[{}] = {} outside (0, 1)",
                    i + 1,
                    b
                )));
            }
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = 1.0f64;
        for &a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        Ok(NoiseSchedule {
            kind,
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Evenly spaced betas, endpoints inclusive.
    pub fn linear(t_steps: usize, beta_1: f64, beta_t: f64) -> Result<Self> {
        if t_steps < 2 {
            return Err(Error::config(format!("T = {t_steps} must be at least 2")));
        }
        if !(0.0 < beta_1 && beta_1 <= beta_t && beta_t < 1.0) {
            return Err(Error::config(format!(
                "invalid beta endpoints ({beta_1}, {beta_t})"
            )));
        }
        let n = t_steps as f64 - 1.0;
        let betas = (0..t_steps)
            .map(|i| beta_1 + (beta_t - beta_1) * i as f64 / n)
            .collect();
        Self::from_betas(ScheduleKind::Linear, betas)
    }

    pub fn default_linear(t_steps: usize) -> Result<Self> {
        Self::linear(t_steps, 1e-4, 0.02)
    }

    /// Cosine schedule: ᾱ_t = f(t)/f(0) with
    /// f(t) = cos²(((t/T + s)/(1 + s))·π/2), β_t = 1 - ᾱ_t/ᾱ_{t-1} clamped
    /// to at most 0.999.
    pub fn cosine(t_steps: usize, s: f64) -> Result<Self> {
        if t_steps < 2 {
            return Err(Error::config(format!("T = {t_steps} must be at least 2")));
        }
        let f = |t: f64| {
            let v = ((t / t_steps as f64 + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2;
            v.cos().powi(2)
        };
        let f0 = f(0.0);
        let mut prev = 1.0f64;
        let mut betas = Vec::with_capacity(t_steps);
        for t in 1..=t_steps {
            let bar = f(t as f64) / f0;
            let beta = (1.0 - bar / prev).clamp(0.0, 0.999);
            // keep betas strictly inside (0,1); the clamp floor can only be
            // hit by rounding at tiny T
            betas.push(beta.max(1e-12));
            prev = bar;
        }
        Self::from_betas(ScheduleKind::Cosine, betas)
    }

    pub fn default_cosine(t_steps: usize) -> Result<Self> {
        Self::cosine(t_steps, 0.008)
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of diffusion steps T.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    fn check_t(&self, t: usize) -> Result<usize> {
        if t < 1 || t > self.betas.len() {
            return Err(Error::config(format!(
                "diffusion step t = {t} outside 1..={}",
                self.betas.len()
            )));
        }
        Ok(t - 1)
    }

    /// β_t for 1-indexed t.
    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.check_t(t)?])
    }

    /// α_t for 1-indexed t.
    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.check_t(t)?])
    }

    /// ᾱ_t for 1-indexed t.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.check_t(t)?])
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// f32 view of betas for checkpoint payloads.
    pub fn betas_f32(&self) -> Vec<f32> {
        self.betas.iter().map(|&b| b as f32).collect()
    }
}
