//! Denoising score-matching training with Adam.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::diffusion::{dsm_loss, Denoiser, Plane, ScheduleKind, TAU_MIN};
use crate::error::{ensure, Result};
use crate::field::{Field, NormStats, Trajectory};
use crate::nn::{UNet, UNetConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Cosine-anneal the learning rate to zero over the run.
    pub cosine_decay: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 16,
            lr: 1e-3,
            cosine_decay: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch >= 1, Domain, "batch must be >= 1");
        ensure!(self.lr > 0.0 && self.lr.is_finite(), Domain, "lr must be positive");
        Ok(())
    }

    /// Learning rate for the `i`-th step of this run.
    pub fn lr_at(&self, i: usize) -> f64 {
        if self.cosine_decay {
            0.5 * self.lr * (1.0 + (std::f64::consts::PI * i as f64 / self.steps as f64).cos())
        } else {
            self.lr
        }
    }
}

/// Runs `cfg.steps` Adam steps on windows drawn from normalized data,
/// numbering them from `first_step`. Returns the loss of every step.
///
/// Each step draws its windows, diffusion times and noise from a generator
/// keyed by `(seed, step)`, so a resumed run sees the same stream as an
/// uninterrupted one.
pub fn fit<D: Denoiser>(
    net: &mut D,
    data: &Field,
    opt: &mut Adam,
    cfg: &TrainConfig,
    first_step: usize,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let d = data.dims();
    let w = net.window_frames();
    ensure!(d.l >= w, Data, "training data has {} frames, window needs {w}", d.l);
    ensure!(
        d.v == net.n_vars(),
        Data,
        "training data has {} variables, model {}",
        d.v,
        net.n_vars()
    );
    ensure!(
        opt.m.len() == net.params().len(),
        Shape,
        "optimizer state for {} parameters, model has {}",
        opt.m.len(),
        net.params().len()
    );
    let plane = Plane { h: d.h, w: d.w };
    let n = w * d.frame_len();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in first_step..first_step + cfg.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(step as u64);
        let starts: Vec<usize> = (0..cfg.batch).map(|_| rng.gen_range(0..=d.l - w)).collect();
        let taus: Vec<f64> = (0..cfg.batch).map(|_| rng.gen_range(TAU_MIN..=1.0)).collect();
        let noises: Vec<Vec<f64>> = (0..cfg.batch)
            .map(|_| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let windows: Vec<&[f64]> = starts.iter().map(|&s| data.frames(s, w)).collect();
        let noise_refs: Vec<&[f64]> = noises.iter().map(Vec::as_slice).collect();
        let (loss, grad) = dsm_loss(net, &windows, plane, &taus, &noise_refs)?;
        ensure!(loss.is_finite(), Numerical, "training loss diverged at step {step}");
        opt.lr = cfg.lr_at(step - first_step);
        opt.step(net.params_mut(), &grad);
        losses.push(loss);
    }
    Ok(losses)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub losses: Vec<f64>,
}

/// Trains a fresh U-Net on a physical-unit trajectory. Parameters are
/// initialized from `cfg.seed` and data is standardized per variable.
pub fn train(data: &Trajectory, model: UNetConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    ensure!(
        model.n_vars == data.dims().v,
        Data,
        "model configured for {} variables, data has {}",
        model.n_vars,
        data.dims().v
    );
    let norm = NormStats::from_field(data.field());
    let net = UNet::new(model, cfg.seed);
    let opt = Adam::new(net.params().len(), cfg.lr);
    let start = Checkpoint {
        schedule: ScheduleKind::default(),
        model,
        params: net.params().to_vec(),
        step: 0,
        seed: cfg.seed,
        norm,
        adam: opt,
    };
    resume(&start, data, cfg)
}

/// Continues training from a checkpoint for `cfg.steps` further steps,
/// keeping its normalization, optimizer state and step counter.
pub fn resume(ckpt: &Checkpoint, data: &Trajectory, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let field = ckpt.norm.normalize(data.field())?;
    let mut net = ckpt.network()?;
    let mut opt = ckpt.adam.clone();
    opt.lr = cfg.lr;
    let losses = fit(&mut net, &field, &mut opt, cfg, ckpt.step)?;
    let mut params = net.params().to_vec();
    for p in &mut params {
        *p = f64::from(*p as f32);
    }
    let checkpoint = Checkpoint {
        params,
        step: ckpt.step + cfg.steps,
        adam: opt,
        ..ckpt.clone()
    };
    Ok(TrainOutcome { checkpoint, losses })
}

/// Mean loss over the first and last tenth of a loss log.
pub fn decile_means(losses: &[f64]) -> (f64, f64) {
    let k = (losses.len() / 10).max(1);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    (mean(&losses[..k]), mean(&losses[losses.len() - k..]))
}
