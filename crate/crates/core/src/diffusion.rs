//! Variance-preserving forward diffusion and the denoising score-matching
//! objective.
//!
//! The perturbation kernel is `x(τ) = α(τ)·x(0) + σ(τ)·ε` with
//! `α² + σ² = 1`, so the terminal law is `N(0, I)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Smallest diffusion time used in training and as the sampler endpoint.
pub const TAU_MIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ScheduleKind {
    #[default]
    VariancePreservingCosine,
}

impl ScheduleKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::VariancePreservingCosine => "vp-cosine",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        (s == "vp-cosine").then_some(Self::VariancePreservingCosine)
    }
}

/// `α(τ) = ε_s + (1 − ε_s)·cos(πτ/2)` and `σ(τ) = sqrt(1 − α²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionSchedule {
    pub kind: ScheduleKind,
    pub alpha_end: f64,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::VariancePreservingCosine,
            alpha_end: 1e-3,
        }
    }
}

impl DiffusionSchedule {
    pub fn alpha(&self, tau: f64) -> f64 {
        let e = self.alpha_end;
        e + (1.0 - e) * (std::f64::consts::FRAC_PI_2 * tau).cos()
    }

    pub fn sigma(&self, tau: f64) -> f64 {
        let a = self.alpha(tau);
        (1.0 - a * a).max(0.0).sqrt()
    }
}

fn check_tau(tau: f64) -> Result<()> {
    ensure!(
        (0.0..=1.0).contains(&tau),
        Domain,
        "diffusion time {tau} outside [0, 1]"
    );
    Ok(())
}

/// One-shot draw from the Gaussian transition `x(τ) | x(0)`.
pub fn perturb(schedule: &DiffusionSchedule, x0: &[f64], tau: f64, noise: &[f64]) -> Result<Vec<f64>> {
    check_tau(tau)?;
    ensure!(
        x0.len() == noise.len(),
        Shape,
        "noise has {} values, data {}",
        noise.len(),
        x0.len()
    );
    let (a, s) = (schedule.alpha(tau), schedule.sigma(tau));
    Ok(x0.iter().zip(noise).map(|(x, e)| a * x + s * e).collect())
}

/// Spatial extent of a window; the temporal extent comes from the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Plane {
    pub h: usize,
    pub w: usize,
}

/// A trainable noise predictor over windows of `2k + 1` frames.
///
/// Windows are flat `(frame, variable, i, j)` arrays, i.e. channels are the
/// window frames flattened with the variables. The score is recovered as
/// `−ε̂ / σ(τ)`.
pub trait Denoiser: Send + Sync {
    fn markov_order(&self) -> usize;
    fn n_vars(&self) -> usize;

    fn window_frames(&self) -> usize {
        2 * self.markov_order() + 1
    }

    fn schedule(&self) -> DiffusionSchedule {
        DiffusionSchedule::default()
    }

    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];

    /// Checks that a window of `len` values matches the model layout.
    fn check_window(&self, len: usize, plane: Plane) -> Result<()> {
        let want = self.window_frames() * self.n_vars() * plane.h * plane.w;
        ensure!(
            len == want,
            Shape,
            "window has {len} values, model expects {} frames x {} vars x {}x{} = {want}",
            self.window_frames(),
            self.n_vars(),
            plane.h,
            plane.w
        );
        Ok(())
    }

    fn predict_noise(&self, window: &[f64], plane: Plane, tau: f64) -> Result<Vec<f64>>;

    /// Returns `scale·‖ε̂ − target‖²` and adds its parameter gradient to `grad`.
    fn squared_error_grad(
        &self,
        window: &[f64],
        plane: Plane,
        tau: f64,
        target: &[f64],
        scale: f64,
        grad: &mut [f64],
    ) -> Result<f64>;
}

/// Denoising score-matching loss on a batch of clean windows.
///
/// Each term is `σ²·‖s_θ(x(τ), τ) + ε/σ‖² = ‖ε − ε̂‖²`; the loss is the batch
/// mean and the gradient is exact with respect to the model parameters.
/// Per-window gradients are reduced in batch order.
pub fn dsm_loss<D: Denoiser>(
    net: &D,
    windows: &[&[f64]],
    plane: Plane,
    taus: &[f64],
    noises: &[&[f64]],
) -> Result<(f64, Vec<f64>)> {
    ensure!(
        windows.len() == taus.len() && windows.len() == noises.len(),
        Shape,
        "batch parts disagree: {} windows, {} taus, {} noises",
        windows.len(),
        taus.len(),
        noises.len()
    );
    ensure!(!windows.is_empty(), Shape, "empty batch");
    for w in windows {
        net.check_window(w.len(), plane)?;
    }
    let schedule = net.schedule();
    let scale = 1.0 / windows.len() as f64;
    let n_params = net.params().len();
    let parts: Vec<(f64, Vec<f64>)> = (0..windows.len())
        .into_par_iter()
        .map(|b| {
            let xt = perturb(&schedule, windows[b], taus[b], noises[b])?;
            let mut g = vec![0.0; n_params];
            let l = net.squared_error_grad(&xt, plane, taus[b], noises[b], scale, &mut g)?;
            Ok((l, g))
        })
        .collect::<Result<_>>()?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; n_params];
    for (l, g) in parts {
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((loss, grad))
}
