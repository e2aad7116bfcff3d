//! Trajectory scores assembled from windowed evaluations.
//!
//! A window model sees `2k + 1` consecutive frames. The first window covers
//! frames `1..=k+1`, each interior frame `t` takes the center slot of the
//! window `t-k..=t+k`, and the last window covers the trailing `k + 1`
//! frames. When `L = 2k + 1` a single window covers everything.

use std::ops::RangeInclusive;

use rayon::prelude::*;

use crate::diffusion::{Denoiser, DiffusionSchedule, Plane};
use crate::error::{ensure, Result};
use crate::field::Field;

/// Floor applied to `σ(τ)` when turning a noise prediction into a score.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Anything that returns the joint score of a window of `2k + 1` frames.
pub trait WindowScore: Sync {
    fn markov_order(&self) -> usize;
    fn n_vars(&self) -> usize;

    fn schedule(&self) -> DiffusionSchedule {
        DiffusionSchedule::default()
    }

    fn score_window(&self, window: &[f64], plane: Plane, tau: f64) -> Result<Vec<f64>>;
}

impl<D: Denoiser> WindowScore for D {
    fn markov_order(&self) -> usize {
        Denoiser::markov_order(self)
    }

    fn n_vars(&self) -> usize {
        Denoiser::n_vars(self)
    }

    fn schedule(&self) -> DiffusionSchedule {
        Denoiser::schedule(self)
    }

    fn score_window(&self, window: &[f64], plane: Plane, tau: f64) -> Result<Vec<f64>> {
        ensure!(
            (0.0..=1.0).contains(&tau),
            Domain,
            "diffusion time {tau} outside [0, 1]"
        );
        let sigma = Denoiser::schedule(self).sigma(tau).max(SIGMA_FLOOR);
        let mut eps = self.predict_noise(window, plane, tau)?;
        for e in &mut eps {
            *e = -*e / sigma;
        }
        Ok(eps)
    }
}

/// One window evaluation: its first frame and which of its slots land on
/// which trajectory frames. All indices are 1-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowTask {
    pub start: usize,
    pub slots: RangeInclusive<usize>,
    pub targets: RangeInclusive<usize>,
}

pub fn window_plan(l: usize, k: usize) -> Result<Vec<WindowTask>> {
    let w = 2 * k + 1;
    ensure!(l >= w, Shape, "trajectory length {l} shorter than window {w}");
    if l == w {
        return Ok(vec![WindowTask {
            start: 1,
            slots: 1..=w,
            targets: 1..=l,
        }]);
    }
    let mut plan = Vec::with_capacity(l - 2 * k);
    plan.push(WindowTask {
        start: 1,
        slots: 1..=k + 1,
        targets: 1..=k + 1,
    });
    for t in k + 2..=l - k - 1 {
        plan.push(WindowTask {
            start: t - k,
            slots: k + 1..=k + 1,
            targets: t..=t,
        });
    }
    plan.push(WindowTask {
        start: l - 2 * k,
        slots: k + 1..=w,
        targets: l - k..=l,
    });
    Ok(plan)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComposeConfig {
    pub markov_order: usize,
    /// Maximum number of windows materialized at once.
    pub batch_windows: usize,
}

impl ComposeConfig {
    pub fn new(markov_order: usize, batch_windows: usize) -> Self {
        Self {
            markov_order,
            batch_windows,
        }
    }
}

/// Counters from one composition.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ComposeStats {
    pub windows_evaluated: usize,
    pub peak_live_windows: usize,
}

pub fn compose_score<M: WindowScore + ?Sized>(
    model: &M,
    x: &Field,
    tau: f64,
    cfg: &ComposeConfig,
) -> Result<Field> {
    compose_score_with_stats(model, x, tau, cfg).map(|(f, _)| f)
}

/// [`compose_score`] that also reports how many windows were evaluated and
/// how many were alive at once.
pub fn compose_score_with_stats<M: WindowScore + ?Sized>(
    model: &M,
    x: &Field,
    tau: f64,
    cfg: &ComposeConfig,
) -> Result<(Field, ComposeStats)> {
    let d = x.dims();
    let k = cfg.markov_order;
    ensure!(
        k == model.markov_order(),
        Shape,
        "compose uses k={k}, model has k={}",
        model.markov_order()
    );
    ensure!(
        d.v == model.n_vars(),
        Shape,
        "trajectory has {} variables, model {}",
        d.v,
        model.n_vars()
    );
    ensure!(cfg.batch_windows >= 1, Domain, "batch_windows must be >= 1");
    let plan = window_plan(d.l, k)?;
    let w = 2 * k + 1;
    let plane = Plane { h: d.h, w: d.w };
    let frame = d.frame_len();
    let mut out = Field::zeros(d);
    let mut stats = ComposeStats::default();
    for chunk in plan.chunks(cfg.batch_windows) {
        let scores: Vec<Vec<f64>> = chunk
            .par_iter()
            .map(|task| model.score_window(x.frames(task.start - 1, w), plane, tau))
            .collect::<Result<_>>()?;
        stats.windows_evaluated += chunk.len();
        stats.peak_live_windows = stats.peak_live_windows.max(scores.len());
        for (task, s) in chunk.iter().zip(&scores) {
            let src = &s[(task.slots.start() - 1) * frame..*task.slots.end() * frame];
            out.frames_mut(task.targets.start() - 1, task.targets.clone().count())
                .copy_from_slice(src);
        }
    }
    Ok((out, stats))
}
