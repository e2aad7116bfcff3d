//! Reverse-time sampling with optional coarse-observation guidance.
//!
//! The predictor is the exponential-integrator form of the probability-flow
//! step on the VP schedule: denoise to `x̂(0)`, then re-noise to the next
//! diffusion time with the implied noise estimate. Each predictor step is
//! followed by `corrector_steps` Langevin moves using the same (posterior)
//! score.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffusion::{DiffusionSchedule, TAU_MIN};
use crate::error::{ensure, Error, Result};
use crate::field::{Dims, Field};
use crate::linalg;
use crate::observation::{log_likelihood_grad_inflated, CoarseObservation};
use crate::sequence::{compose_score, ComposeConfig, WindowScore};

/// Smallest `α(τ)` accepted when denoising.
pub const ALPHA_MIN: f64 = 1e-6;

/// Score of a whole normalized trajectory.
pub trait TrajectoryScore: Sync {
    fn schedule(&self) -> DiffusionSchedule;
    fn check_dims(&self, d: Dims) -> Result<()>;
    fn score(&self, x: &Field, tau: f64) -> Result<Field>;
}

/// Trajectory score composed from a windowed model.
pub struct SequenceScore<'a, M: WindowScore + ?Sized> {
    pub model: &'a M,
    pub batch_windows: usize,
}

impl<'a, M: WindowScore + ?Sized> SequenceScore<'a, M> {
    pub fn new(model: &'a M, batch_windows: usize) -> Self {
        Self { model, batch_windows }
    }

    fn compose(&self) -> ComposeConfig {
        ComposeConfig::new(self.model.markov_order(), self.batch_windows)
    }
}

impl<M: WindowScore + ?Sized> TrajectoryScore for SequenceScore<'_, M> {
    fn schedule(&self) -> DiffusionSchedule {
        self.model.schedule()
    }

    fn check_dims(&self, d: Dims) -> Result<()> {
        let w = 2 * self.model.markov_order() + 1;
        ensure!(d.l >= w, Shape, "trajectory length {} shorter than window {w}", d.l);
        ensure!(
            d.v == self.model.n_vars(),
            Shape,
            "trajectory has {} variables, model {}",
            d.v,
            self.model.n_vars()
        );
        Ok(())
    }

    fn score(&self, x: &Field, tau: f64) -> Result<Field> {
        compose_score(self.model, x, tau, &self.compose())
    }
}

/// Exact score of a prior whose frames are i.i.d. `N(mean, cov)`.
#[derive(Debug, Clone)]
pub struct GaussianPriorScore {
    /// `(v, h, w)` of one frame.
    pub frame: (usize, usize, usize),
    pub mean: Vec<f64>,
    /// Row-major frame covariance.
    pub cov: Vec<f64>,
}

impl GaussianPriorScore {
    pub fn new(frame: (usize, usize, usize), mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let n = frame.0 * frame.1 * frame.2;
        ensure!(mean.len() == n, Shape, "mean has {} entries for a frame of {n}", mean.len());
        linalg::cholesky(&cov, n)?;
        Ok(Self { frame, mean, cov })
    }

    fn frame_len(&self) -> usize {
        self.mean.len()
    }
}

impl TrajectoryScore for GaussianPriorScore {
    fn schedule(&self) -> DiffusionSchedule {
        DiffusionSchedule::default()
    }

    fn check_dims(&self, d: Dims) -> Result<()> {
        ensure!(
            (d.v, d.h, d.w) == self.frame,
            Shape,
            "frame {}x{}x{} does not match prior {:?}",
            d.v,
            d.h,
            d.w,
            self.frame
        );
        Ok(())
    }

    fn score(&self, x: &Field, tau: f64) -> Result<Field> {
        self.check_dims(x.dims())?;
        let s = self.schedule();
        let (a, g2) = (s.alpha(tau), s.sigma(tau).powi(2));
        let n = self.frame_len();
        let mut m: Vec<f64> = self.cov.iter().map(|c| a * a * c).collect();
        for i in 0..n {
            m[i * n + i] += g2;
        }
        let l = linalg::cholesky(&m, n)?;
        let mut out = x.clone();
        for f in out.data_mut().chunks_exact_mut(n) {
            for (v, mu) in f.iter_mut().zip(&self.mean) {
                *v -= a * mu;
            }
            linalg::cholesky_solve(&l, n, f);
            for v in f.iter_mut() {
                *v = -*v;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    pub corrector_steps: usize,
    pub corrector_snr: f64,
    /// Weight `γ` of the `σ²/α²` term added to the observation variance.
    pub likelihood_inflation: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 256,
            guidance_scale: 1.0,
            corrector_steps: 1,
            corrector_snr: 0.05,
            likelihood_inflation: 0.01,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.steps >= 2, Domain, "steps must be >= 2, got {}", self.steps);
        ensure!(
            self.guidance_scale > 0.0 && self.guidance_scale.is_finite(),
            Domain,
            "guidance_scale must be positive"
        );
        ensure!(
            self.corrector_snr > 0.0 && self.corrector_snr.is_finite(),
            Domain,
            "corrector_snr must be positive"
        );
        ensure!(
            self.likelihood_inflation >= 0.0 && self.likelihood_inflation.is_finite(),
            Domain,
            "likelihood_inflation must be >= 0"
        );
        Ok(())
    }

    /// Langevin step size at diffusion time `tau`.
    pub fn corrector_step(&self, schedule: &DiffusionSchedule, tau: f64) -> f64 {
        (2.0 * self.corrector_snr.powi(2)).min(schedule.sigma(tau).powi(2))
    }
}

/// Uniform grid of `steps + 1` diffusion times from 1 down to [`TAU_MIN`].
pub fn tau_grid(steps: usize) -> Vec<f64> {
    (0..=steps)
        .map(|i| 1.0 - (1.0 - TAU_MIN) * i as f64 / steps as f64)
        .collect()
}

/// Denoised estimate `(x + σ²·score)/α`.
pub fn xhat0(schedule: &DiffusionSchedule, x: &Field, tau: f64, score: &Field) -> Result<Field> {
    ensure!(x.dims() == score.dims(), Shape, "score dims {} vs state {}", score.dims(), x.dims());
    ensure!((0.0..=1.0).contains(&tau), Domain, "diffusion time {tau} outside [0, 1]");
    let a = schedule.alpha(tau);
    if a < ALPHA_MIN {
        return Err(Error::Numerical(format!("alpha({tau}) = {a} below {ALPHA_MIN}")));
    }
    let g2 = schedule.sigma(tau).powi(2);
    let data = x
        .data()
        .iter()
        .zip(score.data())
        .map(|(v, s)| (v + g2 * s) / a)
        .collect();
    Field::from_vec(x.dims(), data)
}

fn has_guidance(y: Option<&CoarseObservation>) -> Option<&CoarseObservation> {
    y.filter(|y| y.spec.mask.included.iter().any(|&b| b) && y.data.dims().l > 0)
}

/// Prior score plus the observation guidance evaluated at `x̂(0)`.
///
/// The guidance is `(scale/α)·hᵀ(R + γσ²/α²)⁻¹(Y − h(x̂(0)))`; the network is
/// evaluated once and never differentiated.
pub fn posterior_score(
    prior: &dyn TrajectoryScore,
    x: &Field,
    tau: f64,
    y: Option<&CoarseObservation>,
    cfg: &SamplerConfig,
) -> Result<Field> {
    let mut s = prior.score(x, tau)?;
    let Some(y) = has_guidance(y) else {
        return Ok(s);
    };
    let schedule = prior.schedule();
    let xh = xhat0(&schedule, x, tau, &s)?;
    let a = schedule.alpha(tau);
    let extra = cfg.likelihood_inflation * schedule.sigma(tau).powi(2) / (a * a);
    let g = log_likelihood_grad_inflated(y, &xh, &vec![extra; y.spec.mask.len()])?;
    let k = cfg.guidance_scale / a;
    for (p, q) in s.data_mut().iter_mut().zip(g.data()) {
        *p += k * q;
    }
    Ok(s)
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Draws one normalized trajectory of shape `dims`; `y = None` samples the
/// prior.
pub fn sample(
    prior: &dyn TrajectoryScore,
    dims: Dims,
    y: Option<&CoarseObservation>,
    cfg: &SamplerConfig,
) -> Result<Field> {
    cfg.validate()?;
    prior.check_dims(dims)?;
    if let Some(y) = y {
        ensure!(
            y.fine_dims() == dims,
            Shape,
            "observation implies dims {}, sampling {dims}",
            y.fine_dims()
        );
    }
    let schedule = prior.schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = Field::from_vec(dims, gaussian(&mut rng, dims.len()))?;
    let taus = tau_grid(cfg.steps);
    for i in 0..cfg.steps {
        let (t, t_next) = (taus[i], taus[i + 1]);
        let s = posterior_score(prior, &x, t, y, cfg)?;
        let g2 = schedule.sigma(t).powi(2);
        let a = schedule.alpha(t);
        let (a_next, g_next) = (schedule.alpha(t_next), schedule.sigma(t_next));
        let g = g2.sqrt();
        for (v, sc) in x.data_mut().iter_mut().zip(s.data()) {
            let x0 = (*v + g2 * sc) / a;
            let eps = -g * sc;
            *v = a_next * x0 + g_next * eps;
        }
        let delta = cfg.corrector_step(&schedule, t_next);
        for _ in 0..cfg.corrector_steps {
            let s = posterior_score(prior, &x, t_next, y, cfg)?;
            let z = gaussian(&mut rng, dims.len());
            let noise = (2.0 * delta).sqrt();
            for ((v, sc), e) in x.data_mut().iter_mut().zip(s.data()).zip(&z) {
                *v += delta * sc + noise * e;
            }
        }
        ensure!(x.is_finite(), Numerical, "sampler diverged at tau={t_next}");
    }
    Ok(x)
}

/// One line of the JSON-lines run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub steps: usize,
    pub noise_std: Vec<f64>,
    pub guidance_scale: f64,
    pub corrector_steps: usize,
    pub corrector_snr: f64,
    pub likelihood_inflation: f64,
    pub checkpoint_sha256: String,
    pub output: String,
    /// RMS of `(Y − h(X))/noise` per observed variable.
    #[serde(default)]
    pub residual: Vec<f64>,
}

pub fn append_manifest(path: impl AsRef<Path>, m: &RunManifest) -> Result<()> {
    let path = path.as_ref();
    let wrap = |source| Error::Write {
        path: path.to_path_buf(),
        source,
    };
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(wrap)?;
    let line = serde_json::to_string(m).map_err(|e| Error::Format(e.to_string()))?;
    writeln!(f, "{line}").map_err(wrap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::VariableMask;
    use crate::observation::{coarsen_field, ObservationSpec};
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn sched() -> DiffusionSchedule {
        DiffusionSchedule::default()
    }

    fn obs(data: Field, spec: ObservationSpec, l: usize) -> CoarseObservation {
        let n = data.dims().v;
        CoarseObservation::new(data, spec, l, (0..n).map(|i| format!("v{i}")).collect()).unwrap()
    }

    #[test]
    fn xhat0_limits() {
        let d = Dims::new(2, 1, 1, 3);
        let x = Field::from_fn(d, |t, _, _, j| (t * 3 + j) as f64 - 2.0);
        let s = Field::filled(d, 0.7);
        assert_eq!(xhat0(&sched(), &x, 0.0, &s).unwrap(), x);
        let e = sched().alpha_end;
        let tau = ((0.5 - e) / (1.0 - e)).acos() / std::f64::consts::FRAC_PI_2;
        let out = xhat0(&sched(), &x, tau, &Field::zeros(d)).unwrap();
        for (o, v) in out.data().iter().zip(x.data()) {
            assert!((o - 2.0 * v).abs() < 1e-12);
        }
        let tiny = DiffusionSchedule {
            alpha_end: 0.0,
            ..sched()
        };
        assert!(matches!(xhat0(&tiny, &x, 1.0, &s), Err(Error::Numerical(_))));
    }

    #[test]
    fn xhat0_is_gaussian_posterior_mean() {
        let (m, c2) = (0.8, 2.25);
        let prior = GaussianPriorScore::new((1, 1, 1), vec![m], vec![c2]).unwrap();
        for &tau in &[0.1, 0.5, 0.9] {
            let x = Field::filled(Dims::new(1, 1, 1, 1), -0.4);
            let s = prior.score(&x, tau).unwrap();
            let got = xhat0(&sched(), &x, tau, &s).unwrap().data()[0];
            let (a, g2) = (sched().alpha(tau), sched().sigma(tau).powi(2));
            let want = m + a * c2 / (a * a * c2 + g2) * (-0.4 - a * m);
            assert!((got - want).abs() < 1e-12, "tau {tau}: {got} vs {want}");
        }
    }

    struct Counting<'a> {
        inner: &'a GaussianPriorScore,
        calls: AtomicUsize,
    }

    impl TrajectoryScore for Counting<'_> {
        fn schedule(&self) -> DiffusionSchedule {
            self.inner.schedule()
        }
        fn check_dims(&self, d: Dims) -> Result<()> {
            self.inner.check_dims(d)
        }
        fn score(&self, x: &Field, tau: f64) -> Result<Field> {
            self.calls.fetch_add(1, Ordering::Relaxed);
            self.inner.score(x, tau)
        }
    }

    fn scalar_setup() -> (GaussianPriorScore, CoarseObservation) {
        let prior = GaussianPriorScore::new((1, 1, 1), vec![0.5], vec![1.0]).unwrap();
        let spec = ObservationSpec::new(1, 1, vec![0.5f64.sqrt()]);
        let y = obs(Field::filled(Dims::new(1, 1, 1, 1), 1.3), spec, 1);
        (prior, y)
    }

    #[test]
    fn conjugate_dps_closed_form() {
        let (prior, y) = scalar_setup();
        let cfg = SamplerConfig {
            likelihood_inflation: 0.0,
            ..Default::default()
        };
        let (m, c2, r2, yv) = (0.5, 1.0, 0.5, 1.3);
        for &tau in &[0.05, 0.3, 0.6, 0.95] {
            let xv = 0.37;
            let x = Field::filled(Dims::new(1, 1, 1, 1), xv);
            let got = posterior_score(&prior, &x, tau, Some(&y), &cfg).unwrap().data()[0];
            let (a, g2) = (sched().alpha(tau), sched().sigma(tau).powi(2));
            let var = a * a * c2 + g2;
            let ps = -(xv - a * m) / var;
            let mean0 = m + a * c2 / var * (xv - a * m);
            let want = ps + (yv - mean0) / r2 / a;
            assert!((got - want).abs() < 1e-6 * want.abs().max(1.0), "tau {tau}");
        }
    }

    #[test]
    fn posterior_score_approaches_exact_as_tau_vanishes() {
        let (prior, y) = scalar_setup();
        let cfg = SamplerConfig::default();
        let (m, c2, r2, yv) = (0.5, 1.0, 0.5, 1.3);
        let mut last = f64::INFINITY;
        for &tau in &[0.2, 0.05, 0.01, 0.002] {
            let xv = 0.9;
            let x = Field::filled(Dims::new(1, 1, 1, 1), xv);
            let got = posterior_score(&prior, &x, tau, Some(&y), &cfg).unwrap().data()[0];
            let (a, g2) = (sched().alpha(tau), sched().sigma(tau).powi(2));
            // x0 | y is Gaussian; x(τ) | y adds the forward kernel.
            let pv = 1.0 / (1.0 / c2 + 1.0 / r2);
            let pm = pv * (m / c2 + yv / r2);
            let exact = -(xv - a * pm) / (a * a * pv + g2);
            let err = (got - exact).abs() / exact.abs();
            assert!(err < last);
            last = err;
        }
        assert!(last < 1e-3, "{last}");
    }

    #[test]
    fn huge_noise_removes_guidance_and_single_prior_call() {
        let (prior, mut y) = scalar_setup();
        y.spec.noise_std = vec![1e12];
        let counting = Counting {
            inner: &prior,
            calls: AtomicUsize::new(0),
        };
        let x = Field::filled(Dims::new(1, 1, 1, 1), 0.2);
        let got = posterior_score(&counting, &x, 0.4, Some(&y), &SamplerConfig::default()).unwrap();
        assert_eq!(counting.calls.load(Ordering::Relaxed), 1);
        let p = prior.score(&x, 0.4).unwrap();
        assert!((got.data()[0] - p.data()[0]).abs() < 1e-12);
    }

    #[test]
    fn guidance_vanishes_on_unobserved_frames() {
        let prior = GaussianPriorScore::new((1, 2, 2), vec![0.0; 4], identity(4)).unwrap();
        let d = Dims::new(7, 1, 2, 2);
        let spec = ObservationSpec::new(2, 3, vec![0.1]);
        let y = obs(Field::filled(spec.coarse_dims(d), 2.0), spec, 7);
        let x = Field::filled(d, 0.3);
        let s = posterior_score(&prior, &x, 0.3, Some(&y), &SamplerConfig::default()).unwrap();
        let p = prior.score(&x, 0.3).unwrap();
        for t in 0..7 {
            let same = s.frames(t, 1) == p.frames(t, 1);
            assert_eq!(same, t % 3 != 0, "frame {t}");
        }
    }

    fn identity(n: usize) -> Vec<f64> {
        (0..n * n).map(|k| if k % (n + 1) == 0 { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn determinism_and_seed_dependence() {
        let prior = GaussianPriorScore::new((1, 1, 2), vec![0.0, 1.0], vec![1.0, 0.3, 0.3, 0.5]).unwrap();
        let d = Dims::new(4, 1, 1, 2);
        let cfg = SamplerConfig {
            steps: 16,
            ..Default::default()
        };
        let a = sample(&prior, d, None, &cfg).unwrap();
        let b = sample(&prior, d, None, &cfg).unwrap();
        let c = sample(&prior, d, None, &SamplerConfig { seed: 1, ..cfg.clone() }).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn fully_masked_observation_equals_unconditional() {
        let prior = GaussianPriorScore::new((2, 1, 1), vec![0.0; 2], identity(2)).unwrap();
        let d = Dims::new(5, 2, 1, 1);
        let mut spec = ObservationSpec::new(1, 2, vec![0.1, 0.1]);
        spec.mask = VariableMask::none(2);
        let y = obs(Field::zeros(spec.coarse_dims(d)), spec, 5);
        let cfg = SamplerConfig {
            steps: 12,
            corrector_steps: 2,
            ..Default::default()
        };
        let a = sample(&prior, d, Some(&y), &cfg).unwrap();
        let b = sample(&prior, d, None, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_config() {
        let prior = GaussianPriorScore::new((1, 1, 1), vec![0.0], vec![1.0]).unwrap();
        let cfg = SamplerConfig {
            steps: 1,
            ..Default::default()
        };
        assert!(matches!(sample(&prior, Dims::new(1, 1, 1, 1), None, &cfg), Err(Error::Domain(_))));
    }

    /// Closed-form posterior of i.i.d. frames under a linear observation of
    /// every frame: returns (mean, covariance) of one frame.
    fn gaussian_posterior(mu: &[f64], s: &[f64], hm: &[Vec<f64>], r2: f64, y: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = mu.len();
        let inv = |a: &[f64]| -> Vec<f64> {
            let l = linalg::cholesky(a, n).unwrap();
            let mut out = vec![0.0; n * n];
            for j in 0..n {
                let mut e = vec![0.0; n];
                e[j] = 1.0;
                linalg::cholesky_solve(&l, n, &mut e);
                for i in 0..n {
                    out[i * n + j] = e[i];
                }
            }
            out
        };
        let si = inv(s);
        let mut prec = si.clone();
        for row in hm {
            for i in 0..n {
                for j in 0..n {
                    prec[i * n + j] += row[i] * row[j] / r2;
                }
            }
        }
        let cov = inv(&prec);
        let mut rhs: Vec<f64> = (0..n).map(|i| (0..n).map(|j| si[i * n + j] * mu[j]).sum()).collect();
        for (row, yv) in hm.iter().zip(y) {
            for i in 0..n {
                rhs[i] += row[i] * yv / r2;
            }
        }
        let mean = (0..n).map(|i| (0..n).map(|j| cov[i * n + j] * rhs[j]).sum()).collect();
        (mean, cov)
    }

    /// Max |z| over frame coordinates of the sample mean and variance,
    /// measured in Monte-Carlo standard errors.
    fn conjugate_z(frame: (usize, usize, usize), block: usize, s: Vec<f64>, mu: Vec<f64>, yv: Vec<f64>) -> (f64, f64) {
        let n_samples = 10_000;
        let n = mu.len();
        let prior = GaussianPriorScore::new(frame, mu.clone(), s.clone()).unwrap();
        let d = Dims::new(n_samples, frame.0, frame.1, frame.2);
        let r2: f64 = 0.3;
        let spec = ObservationSpec::new(block, 1, vec![r2.sqrt(); frame.0]);
        let cd = spec.coarse_dims(d);
        let per_frame = cd.frame_len();
        assert_eq!(per_frame, yv.len());
        let y = obs(
            Field::from_fn(cd, |_, v, i, j| yv[(v * cd.h + i) * cd.w + j]),
            spec.clone(),
            n_samples,
        );
        // Rows of h for one frame, recovered by coarsening unit vectors.
        let fd = Dims::new(1, frame.0, frame.1, frame.2);
        let mut hm = vec![vec![0.0; n]; per_frame];
        for k in 0..n {
            let mut e = Field::zeros(fd);
            e.data_mut()[k] = 1.0;
            let c = coarsen_field(&e, &spec).unwrap();
            for (r, v) in c.data().iter().enumerate() {
                hm[r][k] = *v;
            }
        }
        let (pm, pc) = gaussian_posterior(&mu, &s, &hm, r2, &yv);
        let cfg = SamplerConfig {
            steps: 256,
            corrector_steps: 8,
            corrector_snr: 0.07,
            seed: 3,
            ..Default::default()
        };
        let x = sample(&prior, d, Some(&y), &cfg).unwrap();
        let (mut zm, mut zv) = (0.0f64, 0.0f64);
        for k in 0..n {
            let vals: Vec<f64> = x.data().chunks_exact(n).map(|f| f[k]).collect();
            let m = vals.iter().sum::<f64>() / n_samples as f64;
            let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n_samples - 1) as f64;
            let pv = pc[k * n + k];
            zm = zm.max((m - pm[k]).abs() / (pv / n_samples as f64).sqrt());
            zv = zv.max((v - pv).abs() / (pv * (2.0 / n_samples as f64).sqrt()));
        }
        (zm, zv)
    }

    #[test]
    fn conjugate_gaussian_one_dimensional() {
        let (zm, zv) = conjugate_z((1, 1, 1), 1, vec![1.0], vec![0.5], vec![1.3]);
        assert!(zm < 3.0 && zv < 3.0, "mean z {zm}, var z {zv}");
    }

    fn four_dim_cov() -> Vec<f64> {
        vec![
            1.0, 0.5, 0.3, 0.1, //
            0.5, 1.2, 0.4, 0.2, //
            0.3, 0.4, 0.8, 0.3, //
            0.1, 0.2, 0.3, 0.9,
        ]
    }

    #[test]
    fn conjugate_gaussian_block_mean_observation() {
        let (zm, zv) = conjugate_z((1, 2, 2), 2, four_dim_cov(), vec![0.2, -0.4, 0.1, 0.6], vec![0.9]);
        assert!(zm < 3.0 && zv < 3.0, "mean z {zm}, var z {zv}");
    }

    #[test]
    fn conjugate_gaussian_full_observation() {
        let (zm, zv) = conjugate_z((1, 2, 2), 1, four_dim_cov(), vec![0.2, -0.4, 0.1, 0.6], vec![0.9, -0.5, 1.1, 0.0]);
        assert!(zm < 3.0 && zv < 3.0, "mean z {zm}, var z {zv}");
    }

    #[test]
    fn manifest_appends_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("runs.jsonl");
        let m = RunManifest {
            seed: 4,
            steps: 64,
            noise_std: vec![0.1],
            guidance_scale: 1.0,
            corrector_steps: 1,
            corrector_snr: 0.05,
            likelihood_inflation: 1.0,
            checkpoint_sha256: "ab".into(),
            output: "x.sdat".into(),
            residual: vec![0.9],
        };
        append_manifest(&p, &m).unwrap();
        append_manifest(&p, &m).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(serde_json::from_str::<RunManifest>(lines[1]).unwrap(), m);
    }
}
