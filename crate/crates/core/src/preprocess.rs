//! Empirical quantile mapping and the BCSD interpolation baseline.

use std::path::Path;

use crate::error::{ensure, Result};
use crate::field::{Dims, Field, Trajectory};
use crate::observation::CoarseObservation;
use crate::sdat::{self, Header};

pub const MAGIC: &str = "SDQM1";

/// Pool frames by their position in a cycle of `period` frames, using all
/// phases within `window` frames (centered, circular) of the target phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pooling {
    pub period: usize,
    pub window: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantileMap {
    pub n_q: usize,
    pub pooling: Option<Pooling>,
    /// `source[v][phase]` and `reference[v][phase]` hold `n_q` quantiles.
    pub source: Vec<Vec<Vec<f64>>>,
    pub reference: Vec<Vec<Vec<f64>>>,
}

/// Quantile of sorted data at probability `p`, interpolating between order
/// statistics placed at `(i + 0.5)/n`.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let pos = (p * n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    let i = pos.floor() as usize;
    if i + 1 >= n {
        return sorted[n - 1];
    }
    let f = pos - i as f64;
    sorted[i] + f * (sorted[i + 1] - sorted[i])
}

fn phases(pooling: Option<Pooling>) -> usize {
    pooling.map_or(1, |p| p.period)
}

/// Values of variable `v` from frames whose cycle phase is pooled into `phase`.
fn pooled_values(x: &Field, v: usize, phase: usize, pooling: Option<Pooling>) -> Vec<f64> {
    let d = x.dims();
    let take = |t: usize| match pooling {
        None => true,
        Some(p) => {
            let diff = (t % p.period + p.period - phase) % p.period;
            let dist = diff.min(p.period - diff);
            2 * dist < p.window.max(1)
        }
    };
    (0..d.l).filter(|&t| take(t)).flat_map(|t| x.plane(t, v).iter().copied()).collect()
}

fn quantiles(mut vals: Vec<f64>, n_q: usize) -> Result<Vec<f64>> {
    ensure!(!vals.is_empty(), Data, "no values to estimate quantiles from");
    ensure!(vals.iter().all(|v| v.is_finite()), Data, "non-finite value in quantile data");
    vals.sort_by(f64::total_cmp);
    Ok((0..n_q).map(|i| quantile_sorted(&vals, (i as f64 + 0.5) / n_q as f64)).collect())
}

pub fn fit_qm(source: &Field, reference: &Field, n_q: usize, pooling: Option<Pooling>) -> Result<QuantileMap> {
    let (ds, dr) = (source.dims(), reference.dims());
    ensure!(ds.v == dr.v, Shape, "source has {} variables, reference {}", ds.v, dr.v);
    ensure!(n_q >= 2, Domain, "n_q must be >= 2");
    if let Some(p) = pooling {
        ensure!(p.period >= 1, Domain, "pooling period must be >= 1");
    }
    let fit = |x: &Field| -> Result<Vec<Vec<Vec<f64>>>> {
        (0..x.dims().v)
            .map(|v| {
                (0..phases(pooling))
                    .map(|ph| quantiles(pooled_values(x, v, ph, pooling), n_q))
                    .collect()
            })
            .collect()
    };
    Ok(QuantileMap {
        n_q,
        pooling,
        source: fit(source)?,
        reference: fit(reference)?,
    })
}

/// Maps one value through a pair of quantile tables.
pub fn map_value(x: f64, qs: &[f64], qr: &[f64]) -> f64 {
    let n = qs.len();
    let slope = |i: usize| {
        let ds = qs[i + 1] - qs[i];
        if ds > 0.0 {
            (qr[i + 1] - qr[i]) / ds
        } else {
            0.0
        }
    };
    let at = |f: f64| {
        let i = (f.floor() as usize).min(n - 2);
        qr[i] + (f - i as f64) * (qr[i + 1] - qr[i])
    };
    let lo = qs.partition_point(|&q| q < x);
    let hi = qs.partition_point(|&q| q <= x);
    if lo < hi {
        // x sits on a run of equal source quantiles: use the run's middle level
        return at((lo + hi - 1) as f64 / 2.0);
    }
    if lo == 0 {
        return qr[0] + (x - qs[0]) * slope(0);
    }
    if lo == n {
        return qr[n - 1] + (x - qs[n - 1]) * slope(n - 2);
    }
    let f = (lo - 1) as f64 + (x - qs[lo - 1]) / (qs[lo] - qs[lo - 1]);
    at(f)
}

impl QuantileMap {
    pub fn n_vars(&self) -> usize {
        self.source.len()
    }

    /// Maps a value of variable `v` observed at frame `t`.
    pub fn map(&self, v: usize, t: usize, x: f64) -> f64 {
        let ph = t % phases(self.pooling);
        map_value(x, &self.source[v][ph], &self.reference[v][ph])
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut h = Header::new();
        h.push("magic", MAGIC)
            .push("n_q", self.n_q)
            .push("vars", self.n_vars())
            .push("period", self.pooling.map_or(0, |p| p.period))
            .push("window", self.pooling.map_or(0, |p| p.window));
        let mut payload = Vec::new();
        for v in 0..self.n_vars() {
            for ph in 0..phases(self.pooling) {
                for q in self.source[v][ph].iter().chain(&self.reference[v][ph]) {
                    payload.extend_from_slice(&q.to_le_bytes());
                }
            }
        }
        sdat::write_bytes(path.as_ref(), &h, &payload)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = sdat::read_bytes(path.as_ref())?;
        let (h, payload) = sdat::split_file(&bytes)?;
        ensure!(h.get("magic") == Some(MAGIC), Format, "bad magic {:?}", h.get("magic"));
        let n_q: usize = h.parse_value("n_q")?;
        let vars: usize = h.parse_value("vars")?;
        let period: usize = h.parse_value("period")?;
        let pooling = (period > 0).then(|| -> Result<Pooling> {
            Ok(Pooling {
                period,
                window: h.parse_value("window")?,
            })
        });
        let pooling = pooling.transpose()?;
        ensure!(n_q >= 2, Format, "n_q must be >= 2");
        let np = phases(pooling);
        ensure!(
            payload.len() == vars * np * 2 * n_q * 8,
            Format,
            "table payload has {} bytes, expected {}",
            payload.len(),
            vars * np * 2 * n_q * 8
        );
        let vals: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let mut it = vals.chunks_exact(n_q);
        let mut source = vec![Vec::with_capacity(np); vars];
        let mut reference = vec![Vec::with_capacity(np); vars];
        for v in 0..vars {
            for _ in 0..np {
                source[v].push(it.next().expect("sized above").to_vec());
                reference[v].push(it.next().expect("sized above").to_vec());
            }
        }
        let qm = Self {
            n_q,
            pooling,
            source,
            reference,
        };
        let sorted = |q: &Vec<f64>| q.windows(2).all(|w| w[0] <= w[1]);
        ensure!(
            qm.source.iter().chain(&qm.reference).flatten().all(sorted),
            Format,
            "quantile tables are not nondecreasing"
        );
        Ok(qm)
    }
}

pub fn apply_qm_field(x: &Field, qm: &QuantileMap) -> Result<Field> {
    let d = x.dims();
    ensure!(d.v == qm.n_vars(), Shape, "field has {} variables, map {}", d.v, qm.n_vars());
    let mut out = x.clone();
    for t in 0..d.l {
        for v in 0..d.v {
            for y in out.plane_mut(t, v) {
                *y = qm.map(v, t, *y);
            }
        }
    }
    Ok(out)
}

pub fn apply_qm(x: &Trajectory, qm: &QuantileMap) -> Result<Trajectory> {
    x.with_field(apply_qm_field(x.field(), qm)?)
}

/// Bilinear weights along one axis: fine index → (lower coarse index,
/// upper coarse index, weight of the upper one), clamped at the edges.
fn axis_weights(fine: usize, coarse: usize) -> Vec<(usize, usize, f64)> {
    let b = fine as f64 / coarse as f64;
    (0..fine)
        .map(|i| {
            let u = ((i as f64 + 0.5) / b - 0.5).clamp(0.0, (coarse - 1) as f64);
            let i0 = (u.floor() as usize).min(coarse - 1);
            let i1 = (i0 + 1).min(coarse - 1);
            (i0, i1, u - i0 as f64)
        })
        .collect()
}

/// Bilinear interpolation of each plane to `h × w`.
pub fn bilinear_upsample(x: &Field, h: usize, w: usize) -> Result<Field> {
    let d = x.dims();
    ensure!(d.h >= 1 && d.w >= 1, Shape, "empty coarse grid");
    ensure!(h % d.h == 0 && w % d.w == 0, Shape, "{h}x{w} is not a multiple of {}x{}", d.h, d.w);
    let (wi, wj) = (axis_weights(h, d.h), axis_weights(w, d.w));
    let mut out = Field::zeros(Dims::new(d.l, d.v, h, w));
    for t in 0..d.l {
        for v in 0..d.v {
            let src = x.plane(t, v);
            let dst = out.plane_mut(t, v);
            for (i, &(a0, a1, fa)) in wi.iter().enumerate() {
                for (j, &(b0, b1, fb)) in wj.iter().enumerate() {
                    let top = src[a0 * d.w + b0] * (1.0 - fb) + src[a0 * d.w + b1] * fb;
                    let bot = src[a1 * d.w + b0] * (1.0 - fb) + src[a1 * d.w + b1] * fb;
                    dst[i * w + j] = top * (1.0 - fa) + bot * fa;
                }
            }
        }
    }
    Ok(out)
}

/// Linear interpolation in time from observed frames `phase + k·stride` to
/// `l` frames, holding the first/last observed frame constant outside.
pub fn temporal_interpolate(x: &Field, stride: usize, phase: usize, l: usize) -> Result<Field> {
    let d = x.dims();
    ensure!(d.l >= 1, Shape, "no observed frames to interpolate");
    let n = d.frame_len();
    let mut out = Field::zeros(d.with_l(l));
    for t in 0..l {
        let pos = (t as f64 - phase as f64) / stride as f64;
        let pos = pos.clamp(0.0, (d.l - 1) as f64);
        let k0 = pos.floor() as usize;
        let k1 = (k0 + 1).min(d.l - 1);
        let f = pos - k0 as f64;
        let (a, b) = (x.frames(k0, 1), x.frames(k1, 1));
        let dst = out.frames_mut(t, 1);
        for c in 0..n {
            dst[c] = a[c] * (1.0 - f) + b[c] * f;
        }
    }
    Ok(out)
}

/// Bias-correction spatial disaggregation: quantile-map the coarse values,
/// then interpolate bilinearly in space and linearly in time to the fine
/// grid of the observation. Covers the observed variables only.
pub fn bcsd(y: &CoarseObservation, qm: &QuantileMap) -> Result<Field> {
    let fine = y.fine_dims();
    ensure!(
        qm.n_vars() == y.data.dims().v,
        Shape,
        "map covers {} variables, observation {}",
        qm.n_vars(),
        y.data.dims().v
    );
    let corrected = apply_qm_field(&y.data, qm)?;
    let spatial = bilinear_upsample(&corrected, fine.h, fine.w)?;
    temporal_interpolate(&spatial, y.spec.stride_t, y.spec.phase, fine.l)
}

/// Map whose tables are identical, i.e. the identity inside the table range
/// and unit-slope extrapolation outside.
pub fn identity_qm(v: usize, n_q: usize) -> QuantileMap {
    let q: Vec<f64> = (0..n_q).map(|i| i as f64).collect();
    QuantileMap {
        n_q,
        pooling: None,
        source: vec![vec![q.clone()]; v],
        reference: vec![vec![q]; v],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::field::VariableMask;
    use crate::metrics::wasserstein1_1d;
    use crate::observation::{coarsen_field, ObservationSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Gamma, StandardNormal};

    fn normal_field(d: Dims, m: f64, s: f64, seed: u64) -> Field {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Field::from_fn(d, |_, _, _, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            m + s * z
        })
    }

    #[test]
    fn quantile_levels_are_centered() {
        let q = quantiles((0..4).map(f64::from).collect(), 4).unwrap();
        assert_eq!(q, vec![0.0, 1.0, 2.0, 3.0]);
        let q = quantiles(vec![0.0, 10.0], 4).unwrap();
        assert_eq!(q, vec![0.0, 2.5, 7.5, 10.0]);
    }

    #[test]
    fn self_map_is_identity_within_table_spacing() {
        let r = normal_field(Dims::new(50, 2, 8, 8), 1.0, 2.0, 1);
        let qm = fit_qm(&r, &r, 256, None).unwrap();
        let out = apply_qm_field(&r, &qm).unwrap();
        for v in 0..2 {
            let q = &qm.reference[v][0];
            let gap = q.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
            for t in 0..50 {
                for (a, b) in out.plane(t, v).iter().zip(r.plane(t, v)) {
                    assert!((a - b).abs() <= gap, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn shift_and_scale_are_undone_in_bulk() {
        let r = normal_field(Dims::new(40, 1, 8, 8), 0.0, 1.0, 2);
        let shifted = Field::from_vec(r.dims(), r.data().iter().map(|x| x + 5.0).collect()).unwrap();
        let qm = fit_qm(&shifted, &r, 256, None).unwrap();
        for x in [3.5, 5.0, 6.5] {
            assert!((qm.map(0, 0, x) - (x - 5.0)).abs() < 0.05, "at {x}");
        }
        let scaled = Field::from_vec(r.dims(), r.data().iter().map(|x| 2.0 * x).collect()).unwrap();
        let qm = fit_qm(&scaled, &r, 256, None).unwrap();
        for x in [-2.0, 0.5, 2.0] {
            assert!((qm.map(0, 0, x) - x / 2.0).abs() < 0.05, "at {x}");
        }
    }

    #[test]
    fn biased_marginal_is_corrected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Gamma::new(2.0, 1.5).unwrap();
        let d = Dims::new(100, 1, 4, 4);
        let reference = Field::from_fn(d, |_, _, _, _| g.sample(&mut rng));
        let biased = Field::from_fn(d, |_, _, _, _| 1.7 * g.sample(&mut rng) + 2.0);
        let qm = fit_qm(&biased, &reference, 256, None).unwrap();
        let fixed = apply_qm_field(&biased, &qm).unwrap();
        let before = wasserstein1_1d(biased.data(), reference.data());
        let after = wasserstein1_1d(fixed.data(), reference.data());
        assert!(before > 5.0 * after, "before {before} after {after}");
    }

    #[test]
    fn constant_tables_give_constant_output() {
        let qm = QuantileMap {
            n_q: 3,
            pooling: None,
            source: vec![vec![vec![-1.0, 0.0, 4.0]]],
            reference: vec![vec![vec![2.0; 3]]],
        };
        for x in [-100.0, -1.0, 0.3, 4.0, 9.0] {
            assert_eq!(qm.map(0, 0, x), 2.0);
        }
    }

    #[test]
    fn degenerate_source_runs_stay_monotone() {
        let qs = [0.0, 1.0, 1.0, 1.0, 2.0];
        let qr = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(map_value(1.0, &qs, &qr), 2.0);
        assert!(map_value(0.999, &qs, &qr) <= 2.0);
        assert!(map_value(1.001, &qs, &qr) >= 2.0);
        assert_eq!(map_value(-1.0, &qs, &qr), -1.0);
        assert_eq!(map_value(3.0, &qs, &qr), 5.0);
    }

    #[test]
    fn pooling_separates_cycle_phases() {
        let d = Dims::new(48, 1, 2, 2);
        let src = Field::from_fn(d, |t, _, i, j| if t % 2 == 0 { 10.0 } else { 0.0 } + (i + j) as f64 * 0.01);
        let reference = Field::from_fn(d, |_, _, i, j| (i + j) as f64 * 0.01);
        let qm = fit_qm(&src, &reference, 8, Some(Pooling { period: 2, window: 1 })).unwrap();
        assert!((qm.map(0, 0, 10.01) - 0.01).abs() < 1e-9);
        assert!((qm.map(0, 1, 0.01) - 0.01).abs() < 1e-9);
        let pooled = fit_qm(&src, &reference, 8, None).unwrap();
        assert!((pooled.map(0, 0, 10.01) - 0.01).abs() > 0.001);
    }

    #[test]
    fn table_file_round_trip() {
        let r = normal_field(Dims::new(30, 2, 4, 4), 0.0, 1.0, 5);
        let s = normal_field(Dims::new(30, 2, 4, 4), 1.0, 3.0, 6);
        let qm = fit_qm(&s, &r, 32, Some(Pooling { period: 6, window: 3 })).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("qm.sdqm");
        qm.save(&p).unwrap();
        assert_eq!(QuantileMap::load(&p).unwrap(), qm);
        std::fs::write(&p, b"magic=SDQM1 n_q=4 vars=1 period=0 window=0\n\0\0").unwrap();
        assert!(matches!(QuantileMap::load(&p), Err(Error::Format(_))));
    }

    fn obs(x: &Field, spec: ObservationSpec) -> CoarseObservation {
        let data = coarsen_field(x, &spec).unwrap();
        let n = data.dims().v;
        CoarseObservation::new(data, spec, x.dims().l, (0..n).map(|i| format!("v{i}")).collect()).unwrap()
    }

    #[test]
    fn bcsd_trivial_cases() {
        let d = Dims::new(7, 2, 6, 6);
        let c = Field::filled(d, 3.25);
        let y = obs(&c, ObservationSpec::new(3, 2, vec![1.0, 1.0]));
        let out = bcsd(&y, &identity_qm(2, 4)).unwrap();
        assert!(out.data().iter().all(|&v| (v - 3.25).abs() < 1e-12));

        let x = normal_field(d, 0.0, 1.0, 8);
        let y = obs(&x, ObservationSpec::new(1, 1, vec![1.0, 1.0]));
        let out = bcsd(&y, &identity_qm(2, 4)).unwrap();
        for (a, b) in out.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_hits_block_centers() {
        let x = normal_field(Dims::new(1, 1, 3, 4), 0.0, 1.0, 9);
        let up = bilinear_upsample(&x, 9, 12).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert!((up.get(0, 0, 3 * i + 1, 3 * j + 1) - x.get(0, 0, i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn temporal_interpolation_holds_ends() {
        let x = Field::from_fn(Dims::new(3, 1, 1, 1), |t, _, _, _| (t * t) as f64);
        let out = temporal_interpolate(&x, 2, 1, 7).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 0.5, 1.0, 2.5, 4.0, 4.0]);
    }

    #[test]
    fn bcsd_masked_observation_covers_observed_vars() {
        let d = Dims::new(4, 3, 4, 4);
        let mut spec = ObservationSpec::new(2, 1, vec![1.0; 3]);
        spec.mask = VariableMask::complement_of(3, 1);
        let y = obs(&normal_field(d, 0.0, 1.0, 1), spec);
        let out = bcsd(&y, &identity_qm(2, 4)).unwrap();
        assert_eq!(out.dims(), Dims::new(4, 2, 4, 4));
        assert!(bcsd(&y, &identity_qm(3, 4)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn mapping_is_monotone(seed in any::<u64>(), a in -20.0f64..20.0, b in -20.0f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = Field::from_fn(Dims::new(20, 1, 2, 2), |_, _, _, _| (rng.gen_range(-3.0f64..3.0) * 4.0).round() / 4.0);
            let r = normal_field(Dims::new(25, 1, 2, 2), 1.0, 2.0, seed ^ 1);
            let qm = fit_qm(&s, &r, 16, None).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(qm.map(0, 0, lo) <= qm.map(0, 0, hi));
        }

        #[test]
        fn bcsd_commutes_with_constants(seed in any::<u64>(), c in -50.0f64..50.0) {
            let d = Dims::new(5, 1, 4, 6);
            let x = normal_field(d, 0.0, 1.0, seed);
            let spec = ObservationSpec::new(2, 2, vec![1.0]);
            let shifted = Field::from_vec(d, x.data().iter().map(|v| v + c).collect()).unwrap();
            let a = bcsd(&obs(&x, spec.clone()), &identity_qm(1, 8)).unwrap();
            let b = bcsd(&obs(&shifted, spec), &identity_qm(1, 8)).unwrap();
            for (p, q) in a.data().iter().zip(b.data()) {
                prop_assert!((p + c - q).abs() < 1e-9);
            }
        }
    }
}
