//! Synthetic paired fine/coarse datasets with known statistics.
//!
//! Each variable mixes one shared latent field with an independent one.
//! Every latent is a periodic Gaussian random field with a Matérn power
//! spectrum `(1 + 4π²ℓ²|f|²)⁻²`, whose `|f|⁻⁴` tail keeps measurable energy
//! at every resolved scale. Modes evolve as
//! `Ẑ(t+1) = ρ_k · shift_u · Ẑ(t) + √(1−ρ_k²) · √P_k · ξ̂(t)`,
//! so each mode keeps its stationary power and the per-cell variance is 1.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::error::{ensure, Result};
use crate::field::{Dims, Field, Trajectory};
use crate::observation::{coarsen, CoarseObservation, ObservationSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Process {
    /// Spectrum-independent relaxation rate.
    GaussianProcessAdvection,
    /// Small scales relax faster, as under diffusion.
    StochasticHeat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub l: usize,
    pub v: usize,
    pub h: usize,
    pub w: usize,
    pub process: Process,
    /// `[vy, vx]` in cells per frame, one entry per variable (empty: at rest).
    pub velocity: Vec<[f64; 2]>,
    pub length_scale: f64,
    pub time_scale: f64,
    pub diurnal_amplitude: f64,
    pub diurnal_period: f64,
    /// Weight of the shared latent; the independent part gets `√(1−c²)`.
    pub coupling: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            l: 64,
            v: 2,
            h: 32,
            w: 32,
            process: Process::GaussianProcessAdvection,
            velocity: Vec::new(),
            length_scale: 3.0,
            time_scale: 8.0,
            diurnal_amplitude: 0.0,
            diurnal_period: 24.0,
            coupling: 0.8,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.l >= 1 && self.v >= 1 && self.h >= 1 && self.w >= 1, Domain, "extents must be positive");
        ensure!(self.length_scale > 0.0, Domain, "length_scale must be positive");
        ensure!(self.time_scale > 0.0, Domain, "time_scale must be positive");
        ensure!(self.diurnal_period > 0.0, Domain, "diurnal_period must be positive");
        ensure!((0.0..=1.0).contains(&self.coupling), Domain, "coupling must lie in [0,1]");
        ensure!(
            self.velocity.is_empty() || self.velocity.len() == self.v,
            Shape,
            "{} velocities for {} variables",
            self.velocity.len(),
            self.v
        );
        ensure!(
            self.velocity.iter().flatten().all(|u| u.is_finite()),
            Domain,
            "velocities must be finite"
        );
        Ok(())
    }

    pub fn burn_in(&self) -> usize {
        (5.0 * self.time_scale).ceil() as usize
    }

    /// Per-cell variance, averaged over a whole diurnal cycle.
    pub fn stationary_variance(&self) -> f64 {
        1.0 + 0.5 * self.diurnal_amplitude * self.diurnal_amplitude
    }

    fn velocity_of(&self, v: usize) -> [f64; 2] {
        self.velocity.get(v).copied().unwrap_or([0.0, 0.0])
    }

    fn mean_velocity(&self) -> [f64; 2] {
        let n = self.v as f64;
        let s = (0..self.v).fold([0.0, 0.0], |a, v| {
            let u = self.velocity_of(v);
            [a[0] + u[0], a[1] + u[1]]
        });
        [s[0] / n, s[1] / n]
    }
}

fn signed_freq(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// Power per Fourier mode, normalized so `Σ P = HW`; DC and Nyquist lines
/// carry no power.
fn spectrum(h: usize, w: usize, ell: f64) -> Vec<f64> {
    let mut p = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let nyq = (h % 2 == 0 && i == h / 2) || (w % 2 == 0 && j == w / 2);
            if (i == 0 && j == 0) || nyq {
                continue;
            }
            let (fy, fx) = (signed_freq(i, h) / h as f64, signed_freq(j, w) / w as f64);
            p[i * w + j] = (1.0 + 4.0 * PI * PI * ell * ell * (fy * fy + fx * fx)).powi(-2);
        }
    }
    let total: f64 = p.iter().sum();
    if total > 0.0 {
        let scale = (h * w) as f64 / total;
        p.iter_mut().for_each(|x| *x *= scale);
    }
    p
}

struct Latent {
    modes: Vec<Complex<f64>>,
    /// ρ_k times the advection phase.
    step: Vec<Complex<f64>>,
    innov: Vec<f64>,
    rng: ChaCha8Rng,
}

struct Ffts {
    fwd: [Arc<dyn Fft<f64>>; 2],
    inv: [Arc<dyn Fft<f64>>; 2],
    h: usize,
    w: usize,
}

impl Ffts {
    fn new(h: usize, w: usize) -> Self {
        let mut p = FftPlanner::new();
        Self {
            fwd: [p.plan_fft_forward(w), p.plan_fft_forward(h)],
            inv: [p.plan_fft_inverse(w), p.plan_fft_inverse(h)],
            h,
            w,
        }
    }

    fn run2(&self, buf: &mut [Complex<f64>], plans: &[Arc<dyn Fft<f64>>; 2]) {
        let (h, w) = (self.h, self.w);
        for r in buf.chunks_exact_mut(w) {
            plans[0].process(r);
        }
        let mut col = vec![Complex::new(0.0, 0.0); h];
        for j in 0..w {
            for i in 0..h {
                col[i] = buf[i * w + j];
            }
            plans[1].process(&mut col);
            for i in 0..h {
                buf[i * w + j] = col[i];
            }
        }
    }

    fn white(&self, rng: &mut ChaCha8Rng) -> Vec<Complex<f64>> {
        let mut b: Vec<Complex<f64>> = (0..self.h * self.w)
            .map(|_| Complex::new(StandardNormal.sample(rng), 0.0))
            .collect();
        self.run2(&mut b, &self.fwd);
        b
    }

    fn to_real(&self, modes: &[Complex<f64>]) -> Vec<f64> {
        let mut b = modes.to_vec();
        self.run2(&mut b, &self.inv);
        let n = (self.h * self.w) as f64;
        b.iter().map(|c| c.re / n).collect()
    }
}

impl Latent {
    fn new(cfg: &SynthConfig, u: [f64; 2], power: &[f64], stream: u64, ffts: &Ffts) -> Self {
        let (h, w) = (cfg.h, cfg.w);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(stream);
        let mut step = Vec::with_capacity(h * w);
        let mut innov = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                let (fy, fx) = (signed_freq(i, h) / h as f64, signed_freq(j, w) / w as f64);
                let rate = match cfg.process {
                    Process::GaussianProcessAdvection => 1.0,
                    Process::StochasticHeat => {
                        1.0 + 4.0 * PI * PI * cfg.length_scale * cfg.length_scale * (fy * fy + fx * fx)
                    }
                };
                let rho = (-rate / cfg.time_scale).exp();
                let phase = -2.0 * PI * (fy * u[0] + fx * u[1]);
                step.push(Complex::from_polar(rho, phase));
                innov.push((1.0 - rho * rho).sqrt() * power[i * w + j].sqrt());
            }
        }
        let modes = ffts
            .white(&mut rng)
            .iter()
            .zip(power)
            .map(|(z, p)| z * p.sqrt())
            .collect();
        Self { modes, step, innov, rng }
    }

    fn advance(&mut self, ffts: &Ffts) {
        let xi = ffts.white(&mut self.rng);
        for ((m, s), (x, q)) in self.modes.iter_mut().zip(&self.step).zip(xi.iter().zip(&self.innov)) {
            *m = *m * s + x * q;
        }
    }
}

/// Generates a field trajectory, discarding the burn-in frames.
pub fn generate_field(cfg: &SynthConfig) -> Result<Field> {
    cfg.validate()?;
    let ffts = Ffts::new(cfg.h, cfg.w);
    let power = spectrum(cfg.h, cfg.w, cfg.length_scale);
    let mut shared = Latent::new(cfg, cfg.mean_velocity(), &power, 0, &ffts);
    let mut own: Vec<Latent> = (0..cfg.v)
        .map(|v| Latent::new(cfg, cfg.velocity_of(v), &power, v as u64 + 1, &ffts))
        .collect();
    let c = cfg.coupling;
    let d = (1.0 - c * c).sqrt();
    for _ in 0..cfg.burn_in() {
        shared.advance(&ffts);
        own.iter_mut().for_each(|z| z.advance(&ffts));
    }
    let mut out = Field::zeros(Dims::new(cfg.l, cfg.v, cfg.h, cfg.w));
    for t in 0..cfg.l {
        let s = ffts.to_real(&shared.modes);
        for (v, z) in own.iter().enumerate() {
            let cycle = cfg.diurnal_amplitude
                * (2.0 * PI * (t as f64 / cfg.diurnal_period + v as f64 / cfg.v as f64)).sin();
            let e = ffts.to_real(&z.modes);
            for ((y, a), b) in out.plane_mut(t, v).iter_mut().zip(&s).zip(&e) {
                *y = c * a + d * b + cycle;
            }
        }
        shared.advance(&ffts);
        own.iter_mut().for_each(|z| z.advance(&ffts));
    }
    Ok(out)
}

pub fn generate(cfg: &SynthConfig) -> Result<Trajectory> {
    Trajectory::unnamed(generate_field(cfg)?)
}

/// A fine trajectory, rounded to the `f32` storage precision, and its
/// noiseless coarse observation.
pub fn make_pair(cfg: &SynthConfig, spec: &ObservationSpec) -> Result<(Trajectory, CoarseObservation)> {
    let mut f = generate_field(cfg)?;
    f.round_to_f32();
    let fine = Trajectory::unnamed(f)?;
    let y = coarsen(&fine, spec)?;
    Ok((fine, y))
}

/// Adds `N(0, noise_std²)` observation noise to every coarse value.
pub fn add_observation_noise(y: &CoarseObservation, seed: u64) -> Result<CoarseObservation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = y.data.clone();
    let d = data.dims();
    let vars = y.spec.mask.indices();
    for t in 0..d.l {
        for (vc, &v) in vars.iter().enumerate() {
            let s = y.spec.noise_std[v];
            for x in data.plane_mut(t, vc) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x += s * z;
            }
        }
    }
    CoarseObservation::new(data, y.spec.clone(), y.origin_l, y.var_names.clone())
}
