//! Evaluation metrics: PIT, radially averaged power spectra, MELR, sliced
//! Wasserstein-1, SSIM, anomalies and wind-power analysis.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::field::Field;

pub const PIT_BINS: usize = 20;

/// Randomized PIT values of `truth` against an ensemble, at the selected flat
/// cell indices (all cells when `cells` is `None`).
pub fn pit_values(samples: &[Field], truth: &Field, cells: Option<&[usize]>, seed: u64) -> Result<Vec<f64>> {
    ensure!(samples.len() >= 2, Data, "PIT needs at least 2 samples, got {}", samples.len());
    for s in samples {
        ensure!(s.dims() == truth.dims(), Shape, "sample shape {:?} != truth {:?}", s.dims(), truth.dims());
    }
    let all: Vec<usize>;
    let cells = match cells {
        Some(c) => c,
        None => {
            all = (0..truth.data().len()).collect();
            &all
        }
    };
    let n = samples.len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cells
        .iter()
        .map(|&c| {
            ensure!(c < truth.data().len(), Shape, "cell index {c} out of range");
            let y = truth.data()[c];
            let below = samples.iter().filter(|s| s.data()[c] < y).count() as f64;
            let ties = samples.iter().filter(|s| s.data()[c] == y).count() as f64;
            let u: f64 = rng.gen();
            Ok((below + u * (ties + 1.0)) / (n + 1.0))
        })
        .collect()
}

/// Bin masses of values in [0,1]; the last bin takes `1 − Σ others` so the
/// masses sum to exactly one.
pub fn histogram_unit(values: &[f64], bins: usize) -> Result<Vec<f64>> {
    ensure!(!values.is_empty(), Data, "no values to histogram");
    ensure!(bins >= 1, Domain, "bins must be >= 1");
    let mut counts = vec![0usize; bins];
    for &u in values {
        ensure!((0.0..=1.0).contains(&u), Domain, "value {u} outside [0,1]");
        counts[((u * bins as f64) as usize).min(bins - 1)] += 1;
    }
    let m = values.len() as f64;
    let mut masses: Vec<f64> = counts.iter().map(|&c| c as f64 / m).collect();
    let head: f64 = masses[..bins - 1].iter().sum();
    masses[bins - 1] = 1.0 - head;
    Ok(masses)
}

pub fn pit(samples: &[Field], truth: &Field, cells: Option<&[usize]>, seed: u64) -> Result<Vec<f64>> {
    histogram_unit(&pit_values(samples, truth, cells, seed)?, PIT_BINS)
}

/// Kolmogorov–Smirnov distance between the empirical distribution of
/// `values` and U(0,1).
pub fn ks_uniform(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| (x - i as f64 / m).max((i + 1) as f64 / m - x))
        .fold(0.0, f64::max)
}

/// Power spectrum binned by integer radius, all radii with at least one
/// non-DC wavenumber.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialSpectrum {
    /// Mean power per radius; index 0 is radius 1.
    pub power: Vec<f64>,
    pub counts: Vec<usize>,
}

fn signed_freq(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// Full radial spectrum of one `h × w` plane, power `|F|²/(HW)`.
pub fn radial_spectrum(plane: &[f64], h: usize, w: usize) -> Result<RadialSpectrum> {
    ensure!(h >= 4 && w >= 4, Shape, "spectrum needs at least 4x4, got {h}x{w}");
    ensure!(plane.len() == h * w, Shape, "plane has {} values, expected {}", plane.len(), h * w);
    let mut planner = FftPlanner::<f64>::new();
    let (row, col) = (planner.plan_fft_forward(w), planner.plan_fft_forward(h));
    let mut buf: Vec<Complex<f64>> = plane.iter().map(|&x| Complex::new(x, 0.0)).collect();
    for r in buf.chunks_exact_mut(w) {
        row.process(r);
    }
    let mut column = vec![Complex::new(0.0, 0.0); h];
    for j in 0..w {
        for i in 0..h {
            column[i] = buf[i * w + j];
        }
        col.process(&mut column);
        for i in 0..h {
            buf[i * w + j] = column[i];
        }
    }
    let rmax = {
        let (a, b) = ((h / 2) as f64, (w / 2) as f64);
        (a * a + b * b).sqrt().round() as usize
    };
    let mut power = vec![0.0; rmax];
    let mut counts = vec![0usize; rmax];
    let norm = (h * w) as f64;
    for i in 0..h {
        for j in 0..w {
            let (ky, kx) = (signed_freq(i, h), signed_freq(j, w));
            let r = (ky * ky + kx * kx).sqrt().round() as usize;
            if r == 0 {
                continue;
            }
            power[r - 1] += buf[i * w + j].norm_sqr() / norm;
            counts[r - 1] += 1;
        }
    }
    for (p, &c) in power.iter_mut().zip(&counts) {
        if c > 0 {
            *p /= c as f64;
        }
    }
    Ok(RadialSpectrum { power, counts })
}

/// RAPSD over wavenumbers `1..=min(h,w)/2`.
pub fn rapsd(plane: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
    let mut s = radial_spectrum(plane, h, w)?.power;
    s.truncate(h.min(w) / 2);
    Ok(s)
}

/// RAPSD of variable `v`, averaged over all frames of all fields.
pub fn mean_rapsd(fields: &[Field], v: usize) -> Result<Vec<f64>> {
    ensure!(!fields.is_empty(), Data, "no fields to average");
    let d = fields[0].dims();
    ensure!(v < d.v, Shape, "variable {v} out of range");
    let curves: Vec<Vec<f64>> = fields
        .par_iter()
        .flat_map_iter(|f| (0..f.dims().l).map(move |t| (f, t)))
        .map(|(f, t)| {
            ensure!(f.dims().h == d.h && f.dims().w == d.w, Shape, "fields differ in grid size");
            rapsd(f.plane(t, v), d.h, d.w)
        })
        .collect::<Result<_>>()?;
    let mut mean = vec![0.0; curves[0].len()];
    for c in &curves {
        for (m, x) in mean.iter_mut().zip(c) {
            *m += x / curves.len() as f64;
        }
    }
    Ok(mean)
}

/// Mean energy log ratio `Σ_k |log(E_pred(k)/E_ref(k))|`.
pub fn melr(pred: &[f64], reference: &[f64]) -> Result<f64> {
    ensure!(pred.len() == reference.len(), Shape, "spectra have {} and {} bins", pred.len(), reference.len());
    let mut total = 0.0;
    for (k, (&p, &r)) in pred.iter().zip(reference).enumerate() {
        ensure!(p > 0.0 && r > 0.0, Numerical, "non-positive energy in bin {}", k + 1);
        total += (p / r).ln().abs();
    }
    Ok(total)
}

/// Exact 1-D Wasserstein-1 distance between two empirical distributions,
/// `∫|F_a − F_b|`.
pub fn wasserstein1_1d(a: &[f64], b: &[f64]) -> f64 {
    let sorted = |x: &[f64]| {
        let mut s = x.to_vec();
        s.sort_by(f64::total_cmp);
        s
    };
    let (a, b) = (sorted(a), sorted(b));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut prev = a[0].min(b[0]);
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let x = match (a.get(i), b.get(j)) {
            (Some(&p), Some(&q)) => p.min(q),
            (Some(&p), None) => p,
            (None, Some(&q)) => q,
            (None, None) => unreachable!(),
        };
        total += (i as f64 / na - j as f64 / nb).abs() * (x - prev);
        prev = x;
        while i < a.len() && a[i] == x {
            i += 1;
        }
        while j < b.len() && b[j] == x {
            j += 1;
        }
    }
    total
}

/// Sliced W1 between two sets of equal-length vectors, averaged over
/// `n_slices` random unit directions.
pub fn sliced_w1(a: &[&[f64]], b: &[&[f64]], n_slices: usize, seed: u64) -> Result<f64> {
    ensure!(!a.is_empty() && !b.is_empty(), Data, "sliced W1 needs non-empty sets");
    ensure!(n_slices >= 1, Domain, "n_slices must be >= 1");
    let dim = a[0].len();
    ensure!(
        a.iter().chain(b).all(|x| x.len() == dim),
        Shape,
        "all members must have dimension {dim}"
    );
    let total: f64 = (0..n_slices)
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s as u64);
            let mut dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
            dir.iter_mut().for_each(|x| *x /= norm);
            let project = |set: &[&[f64]]| -> Vec<f64> {
                set.iter().map(|x| x.iter().zip(&dir).map(|(p, q)| p * q).sum()).collect()
            };
            wasserstein1_1d(&project(a), &project(b))
        })
        .collect::<Vec<_>>()
        .iter()
        .sum();
    Ok(total / n_slices as f64)
}

/// Mean SSIM over all valid `window × window` positions, uniform window
/// statistics.
pub fn ssim(a: &[f64], b: &[f64], h: usize, w: usize, window: usize, data_range: f64) -> Result<f64> {
    ensure!(window % 2 == 1, Domain, "SSIM window must be odd, got {window}");
    ensure!(window <= h.min(w), Shape, "window {window} exceeds {h}x{w}");
    ensure!(a.len() == h * w && b.len() == h * w, Shape, "planes must have {} values", h * w);
    ensure!(data_range > 0.0, Domain, "data_range must be positive");
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    // summed-area tables of a, b, a², b², ab
    let sat = |f: &dyn Fn(usize) -> f64| {
        let mut s = vec![0.0; (h + 1) * (w + 1)];
        for i in 0..h {
            for j in 0..w {
                s[(i + 1) * (w + 1) + j + 1] = f(i * w + j) + s[i * (w + 1) + j + 1] + s[(i + 1) * (w + 1) + j]
                    - s[i * (w + 1) + j];
            }
        }
        s
    };
    let tables = [
        sat(&|k| a[k]),
        sat(&|k| b[k]),
        sat(&|k| a[k] * a[k]),
        sat(&|k| b[k] * b[k]),
        sat(&|k| a[k] * b[k]),
    ];
    let n = (window * window) as f64;
    let rect = |s: &[f64], i: usize, j: usize| {
        let (i1, j1) = (i + window, j + window);
        (s[i1 * (w + 1) + j1] - s[i * (w + 1) + j1] - s[i1 * (w + 1) + j] + s[i * (w + 1) + j]) / n
    };
    let (ni, nj) = (h - window + 1, w - window + 1);
    let mut total = 0.0;
    for i in 0..ni {
        for j in 0..nj {
            let [ma, mb, ea2, eb2, eab] = [0, 1, 2, 3, 4].map(|k| rect(&tables[k], i, j));
            let va = (ea2 - ma * ma).max(0.0);
            let vb = (eb2 - mb * mb).max(0.0);
            let cov = eab - ma * mb;
            total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / (ni * nj) as f64)
}

/// Parametric turbine power curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PowerCurve {
    pub cut_in: f64,
    pub rated_speed: f64,
    pub cut_out: f64,
    /// Watts.
    pub rated_power: f64,
}

impl Default for PowerCurve {
    fn default() -> Self {
        Self {
            cut_in: 2.5,
            rated_speed: 12.0,
            cut_out: 25.0,
            rated_power: 3.0e6,
        }
    }
}

impl PowerCurve {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            0.0 <= self.cut_in && self.cut_in < self.rated_speed && self.rated_speed <= self.cut_out,
            Domain,
            "power curve speeds must satisfy 0 <= cut_in < rated <= cut_out"
        );
        ensure!(self.rated_power > 0.0, Domain, "rated power must be positive");
        Ok(())
    }

    pub fn power(&self, v: f64) -> f64 {
        if v < self.cut_in || v > self.cut_out {
            0.0
        } else if v >= self.rated_speed {
            self.rated_power
        } else {
            let ramp = (v.powi(3) - self.cut_in.powi(3)) / (self.rated_speed.powi(3) - self.cut_in.powi(3));
            self.rated_power * ramp
        }
    }
}

/// Density histogram of wind speeds on equal-width bins starting at `lo`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedHistogram {
    pub lo: f64,
    pub width: f64,
    pub density: Vec<f64>,
}

impl SpeedHistogram {
    pub fn from_samples(speeds: &[f64], lo: f64, hi: f64, bins: usize) -> Result<Self> {
        ensure!(!speeds.is_empty(), Data, "no wind speeds");
        ensure!(hi > lo && bins >= 1, Domain, "invalid histogram range");
        ensure!(speeds.iter().all(|&s| s >= 0.0), Data, "negative wind speed");
        let width = (hi - lo) / bins as f64;
        let mut density = vec![0.0; bins];
        let unit = 1.0 / (speeds.len() as f64 * width);
        for &s in speeds {
            let k = ((s - lo) / width).floor();
            if k >= 0.0 && (k as usize) < bins {
                density[k as usize] += unit;
            } else if s == hi {
                density[bins - 1] += unit;
            }
        }
        Ok(Self { lo, width, density })
    }

    pub fn centers(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.density.len()).map(|k| self.lo + (k as f64 + 0.5) * self.width)
    }
}

/// Expected power `Σ density(v)·pc(v)·Δv` evaluated at bin centres.
pub fn expected_power(hist: &SpeedHistogram, pc: &PowerCurve) -> Result<f64> {
    ensure!(hist.lo >= 0.0, Data, "histogram covers negative speeds");
    Ok(hist.centers().zip(&hist.density).map(|(v, d)| d * pc.power(v) * hist.width).sum())
}

/// Running sum of per-frame power, divided by the number of frames. Speeds
/// come frame by frame, `cells` values each; a frame's power is the mean over
/// its cells.
pub fn cumulative_power(speeds: &[f64], cells: usize, pc: &PowerCurve) -> Result<Vec<f64>> {
    ensure!(cells >= 1 && speeds.len() % cells == 0, Shape, "{} speeds in frames of {cells}", speeds.len());
    ensure!(speeds.iter().all(|&s| s >= 0.0), Data, "negative wind speed");
    let n = (speeds.len() / cells) as f64;
    let mut acc = 0.0;
    Ok(speeds
        .chunks_exact(cells)
        .map(|f| {
            acc += f.iter().map(|&s| pc.power(s)).sum::<f64>() / cells as f64 / n;
            acc
        })
        .collect())
}

/// Wind speed magnitude from the two component variables `u` and `v`.
pub fn wind_speed(x: &Field, u: usize, v: usize) -> Result<Vec<f64>> {
    let d = x.dims();
    ensure!(u < d.v && v < d.v, Shape, "wind components {u},{v} out of range");
    Ok((0..d.l)
        .flat_map(|t| x.plane(t, u).iter().zip(x.plane(t, v)).map(|(a, b)| a.hypot(*b)).collect::<Vec<_>>())
        .collect())
}

pub fn anomaly(x: &Field, baseline: &Field) -> Result<Field> {
    ensure!(x.dims() == baseline.dims(), Shape, "{:?} vs {:?}", x.dims(), baseline.dims());
    Field::from_vec(x.dims(), x.data().iter().zip(baseline.data()).map(|(a, b)| a - b).collect())
}

/// Named scalars and curves produced by an evaluation run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub scalars: BTreeMap<String, f64>,
    pub curves: BTreeMap<String, Vec<f64>>,
}

impl MetricReport {
    pub fn scalar(&mut self, name: impl Into<String>, value: f64) {
        self.scalars.insert(name.into(), value);
    }

    pub fn curve(&mut self, name: impl Into<String>, values: Vec<f64>) {
        self.curves.insert(name.into(), values);
    }

    pub fn validate(&self) -> Result<()> {
        for (k, v) in &self.scalars {
            ensure!(v.is_finite(), Numerical, "metric {k} is not finite");
        }
        for (k, c) in &self.curves {
            ensure!(c.iter().all(|v| v.is_finite()), Numerical, "curve {k} has non-finite values");
            if k.starts_with("pit") {
                let s: f64 = c.iter().sum();
                ensure!((s - 1.0).abs() < 1e-12, Numerical, "PIT histogram {k} sums to {s}");
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        serde_json::to_string_pretty(self).map_err(|e| crate::Error::Format(e.to_string()))
    }

    /// Curves in long form: `curve,index,value`.
    pub fn curves_csv(&self) -> String {
        let mut s = String::from("curve,index,value\n");
        for (k, c) in &self.curves {
            for (i, v) in c.iter().enumerate() {
                s.push_str(&format!("{k},{i},{v}\n"));
            }
        }
        s
    }
}
