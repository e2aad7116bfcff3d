//! Linear coarsening operator and Gaussian observation model.
//!
//! `h(X)` averages each variable over `b × b` blocks and keeps every `s`-th
//! frame starting at frame `phase + 1`. Masked-out variables are dropped
//! from the observation entirely.

use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::field::{Dims, Field, NormStats, Trajectory, VariableMask};
use crate::sdat::{self, Header};

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSpec {
    pub block: usize,
    pub stride_t: usize,
    /// 0-based index of the first observed frame.
    pub phase: usize,
    /// Observation noise standard deviation for every variable of the fine
    /// trajectory; entries of masked variables are ignored.
    pub noise_std: Vec<f64>,
    pub mask: VariableMask,
}

impl ObservationSpec {
    pub fn new(block: usize, stride_t: usize, noise_std: Vec<f64>) -> Self {
        let v = noise_std.len();
        Self {
            block,
            stride_t,
            phase: 0,
            noise_std,
            mask: VariableMask::all(v),
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.block >= 1, Domain, "block must be >= 1");
        ensure!(self.stride_t >= 1, Domain, "stride_t must be >= 1");
        ensure!(self.phase < self.stride_t, Domain, "phase {} not below stride {}", self.phase, self.stride_t);
        ensure!(
            self.noise_std.len() == self.mask.len(),
            Shape,
            "{} noise levels for a mask over {} variables",
            self.noise_std.len(),
            self.mask.len()
        );
        ensure!(
            self.noise_std.iter().all(|s| s.is_finite() && *s > 0.0),
            Domain,
            "noise_std must be positive"
        );
        Ok(())
    }

    pub fn check_fine(&self, d: Dims) -> Result<()> {
        self.validate()?;
        ensure!(
            d.h % self.block == 0 && d.w % self.block == 0,
            Shape,
            "grid {}x{} not divisible by block {}",
            d.h,
            d.w,
            self.block
        );
        ensure!(
            d.v == self.mask.len(),
            Shape,
            "field has {} variables, mask {}",
            d.v,
            self.mask.len()
        );
        ensure!(d.l > self.phase, Shape, "trajectory of {} frames has no observed frame", d.l);
        Ok(())
    }

    /// Number of observed frames in a trajectory of `l` frames.
    pub fn observed_len(&self, l: usize) -> usize {
        if l <= self.phase {
            0
        } else {
            (l - self.phase).div_ceil(self.stride_t)
        }
    }

    /// 0-based fine frame of coarse frame `tc`.
    pub fn fine_frame(&self, tc: usize) -> usize {
        self.phase + tc * self.stride_t
    }

    pub fn is_observed(&self, t: usize) -> bool {
        t >= self.phase && (t - self.phase) % self.stride_t == 0
    }

    pub fn coarse_dims(&self, fine: Dims) -> Dims {
        Dims::new(
            self.observed_len(fine.l),
            self.mask.indices().len(),
            fine.h / self.block,
            fine.w / self.block,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseObservation {
    pub data: Field,
    pub spec: ObservationSpec,
    pub origin_l: usize,
    /// Names of the observed variables, in mask order.
    pub var_names: Vec<String>,
}

impl CoarseObservation {
    pub fn new(data: Field, spec: ObservationSpec, origin_l: usize, var_names: Vec<String>) -> Result<Self> {
        spec.validate()?;
        let d = data.dims();
        ensure!(
            d.l == spec.observed_len(origin_l),
            Shape,
            "{} coarse frames, but {} frames with stride {} phase {} give {}",
            d.l,
            origin_l,
            spec.stride_t,
            spec.phase,
            spec.observed_len(origin_l)
        );
        ensure!(
            d.v == spec.mask.indices().len(),
            Shape,
            "{} coarse variables, mask selects {}",
            d.v,
            spec.mask.indices().len()
        );
        ensure!(var_names.len() == d.v, Shape, "{} names for {} variables", var_names.len(), d.v);
        Ok(Self {
            data,
            spec,
            origin_l,
            var_names,
        })
    }

    /// Fine-grid dims this observation was taken from.
    pub fn fine_dims(&self) -> Dims {
        let d = self.data.dims();
        Dims::new(
            self.origin_l,
            self.spec.mask.len(),
            d.h * self.spec.block,
            d.w * self.spec.block,
        )
    }

    /// Maps the observation into standardized units: values become
    /// `(Y − mean)/std` and noise levels `noise/std`, per fine variable.
    pub fn normalized(&self, stats: &NormStats) -> Result<Self> {
        ensure!(
            stats.n_vars() == self.spec.mask.len(),
            Shape,
            "stats cover {} variables, observation {}",
            stats.n_vars(),
            self.spec.mask.len()
        );
        let sel = self.spec.mask.indices();
        let sub = NormStats::new(
            sel.iter().map(|&v| stats.mean[v]).collect(),
            sel.iter().map(|&v| stats.std[v]).collect(),
        )?;
        let data = if sel.is_empty() {
            self.data.clone()
        } else {
            sub.normalize(&self.data)?
        };
        let mut spec = self.spec.clone();
        for (n, s) in spec.noise_std.iter_mut().zip(&stats.std) {
            *n /= s;
        }
        Ok(Self { data, spec, ..self.clone() })
    }
}

/// Applies `h` to a fine field; the result is noiseless.
pub fn coarsen_field(x: &Field, spec: &ObservationSpec) -> Result<Field> {
    let fine = x.dims();
    spec.check_fine(fine)?;
    let cd = spec.coarse_dims(fine);
    let b = spec.block;
    let inv = 1.0 / (b * b) as f64;
    let vars = spec.mask.indices();
    let mut out = Field::zeros(cd);
    for tc in 0..cd.l {
        let t = spec.fine_frame(tc);
        for (vc, &v) in vars.iter().enumerate() {
            let src = x.plane(t, v);
            let dst = out.plane_mut(tc, vc);
            for i in 0..fine.h {
                for j in 0..fine.w {
                    dst[(i / b) * cd.w + j / b] += src[i * fine.w + j];
                }
            }
            for y in dst {
                *y *= inv;
            }
        }
    }
    Ok(out)
}

pub fn coarsen(x: &Trajectory, spec: &ObservationSpec) -> Result<CoarseObservation> {
    let data = coarsen_field(x.field(), spec)?;
    let names = spec
        .mask
        .indices()
        .iter()
        .map(|&v| x.var_names()[v].clone())
        .collect();
    CoarseObservation::new(data, spec.clone(), x.dims().l, names)
}

fn check_xhat(y: &CoarseObservation, xhat0: &Field) -> Result<()> {
    let want = y.fine_dims();
    ensure!(
        xhat0.dims() == want,
        Shape,
        "estimate has dims {}, observation implies {want}",
        xhat0.dims()
    );
    Ok(())
}

/// Gradient of `−½ Σ (Y − h(x̂))² / noise²` with respect to `x̂`.
pub fn log_likelihood_grad_wrt_xhat(y: &CoarseObservation, xhat0: &Field) -> Result<Field> {
    let zero = vec![0.0; y.spec.noise_std.len()];
    log_likelihood_grad_inflated(y, xhat0, &zero)
}

/// Like [`log_likelihood_grad_wrt_xhat`] but with per-variable variance
/// `noise² + extra_var[v]` in the denominator.
pub fn log_likelihood_grad_inflated(y: &CoarseObservation, xhat0: &Field, extra_var: &[f64]) -> Result<Field> {
    check_xhat(y, xhat0)?;
    ensure!(
        extra_var.len() == y.spec.mask.len(),
        Shape,
        "{} variance terms for {} variables",
        extra_var.len(),
        y.spec.mask.len()
    );
    let spec = &y.spec;
    let fine = xhat0.dims();
    let hx = coarsen_field(xhat0, spec)?;
    let cd = hx.dims();
    let b = spec.block;
    let inv = 1.0 / (b * b) as f64;
    let mut g = Field::zeros(fine);
    for tc in 0..cd.l {
        let t = spec.fine_frame(tc);
        for (vc, &v) in spec.mask.indices().iter().enumerate() {
            let var = spec.noise_std[v].powi(2) + extra_var[v];
            let obs = y.data.plane(tc, vc);
            let pred = hx.plane(tc, vc);
            let dst = g.plane_mut(t, v);
            for i in 0..fine.h {
                for j in 0..fine.w {
                    let c = (i / b) * cd.w + j / b;
                    dst[i * fine.w + j] = (obs[c] - pred[c]) / var * inv;
                }
            }
        }
    }
    Ok(g)
}

/// `−½ Σ (Y − h(x̂))² / noise²`, up to the normalizing constant.
pub fn log_likelihood(y: &CoarseObservation, xhat0: &Field) -> Result<f64> {
    check_xhat(y, xhat0)?;
    let hx = coarsen_field(xhat0, &y.spec)?;
    let cd = hx.dims();
    let mut acc = 0.0;
    for tc in 0..cd.l {
        for (vc, &v) in y.spec.mask.indices().iter().enumerate() {
            let var = y.spec.noise_std[v].powi(2);
            for (o, p) in y.data.plane(tc, vc).iter().zip(hx.plane(tc, vc)) {
                acc += (o - p) * (o - p) / var;
            }
        }
    }
    Ok(-0.5 * acc)
}

/// RMS of `(Y − h(x))/noise` for each observed variable.
pub fn residual_rms(y: &CoarseObservation, x: &Field) -> Result<Vec<f64>> {
    check_xhat(y, x)?;
    let hx = coarsen_field(x, &y.spec)?;
    let cd = hx.dims();
    Ok(y.spec
        .mask
        .indices()
        .iter()
        .enumerate()
        .map(|(vc, &v)| {
            let s = y.spec.noise_std[v];
            let ss: f64 = (0..cd.l)
                .flat_map(|t| y.data.plane(t, vc).iter().zip(hx.plane(t, vc)))
                .map(|(o, p)| ((o - p) / s).powi(2))
                .sum();
            (ss / (cd.l * cd.h * cd.w) as f64).sqrt()
        })
        .collect())
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Writes the observation as SDAT1 with the operator stored in extra keys.
pub fn write_observation(path: impl AsRef<Path>, y: &CoarseObservation, units: &[String], dt_hours: f64) -> Result<()> {
    let x = Trajectory::new(y.data.clone(), y.var_names.clone(), units.to_vec(), dt_hours * y.spec.stride_t as f64)?;
    let mut h = sdat::trajectory_header(&x);
    h.push("block", y.spec.block)
        .push("stride_t", y.spec.stride_t)
        .push("phase", y.spec.phase)
        .push("mask", y.spec.mask.to_header())
        .push("noise_std", join(&y.spec.noise_std))
        .push("origin_L", y.origin_l);
    sdat::write_with_header(path.as_ref(), &h, &x)
}

pub fn read_observation(path: impl AsRef<Path>) -> Result<CoarseObservation> {
    let (x, h) = sdat::read_with_header(path.as_ref())?;
    observation_from_parts(x, &h)
}

fn observation_from_parts(x: Trajectory, h: &Header) -> Result<CoarseObservation> {
    let spec = ObservationSpec {
        block: h.parse_value("block")?,
        stride_t: h.parse_value("stride_t")?,
        phase: h.get("phase").map(str::parse).transpose().map_err(|_| Error::Format("bad phase".into()))?.unwrap_or(0),
        noise_std: h.parse_list("noise_std")?,
        mask: VariableMask::from_header(h.require("mask")?)?,
    };
    let origin_l = h.parse_value("origin_L")?;
    let names = x.var_names().to_vec();
    CoarseObservation::new(x.into_field(), spec, origin_l, names).map_err(|e| match e {
        Error::Shape(m) | Error::Domain(m) => Error::Format(m),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(d: Dims, seed: u64) -> Field {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Field::from_fn(d, |_, _, _, _| rng.gen_range(-3.0..3.0))
    }

    #[test]
    fn residual_of_truth_is_zero_and_scales_with_noise() {
        let x = random_field(Dims::new(4, 2, 4, 4), 8);
        let spec = ObservationSpec::new(2, 2, vec![0.5, 2.0]);
        let y = coarsen(&Trajectory::unnamed(x.clone()).unwrap(), &spec).unwrap();
        assert_eq!(residual_rms(&y, &x).unwrap(), vec![0.0, 0.0]);
        let shifted = Field::from_vec(x.dims(), x.data().iter().map(|v| v + 1.0).collect()).unwrap();
        let r = residual_rms(&y, &shifted).unwrap();
        assert!((r[0] - 2.0).abs() < 1e-12 && (r[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn constant_field_stays_constant() {
        let x = Field::filled(Dims::new(7, 2, 6, 6), 2.5);
        for (b, s) in [(1, 1), (2, 3), (3, 2), (6, 7)] {
            let y = coarsen_field(&x, &ObservationSpec::new(b, s, vec![1.0, 1.0])).unwrap();
            assert!(y.data().iter().all(|&v| v == 2.5));
            assert_eq!(y.dims().l, 7usize.div_ceil(s));
        }
    }

    #[test]
    fn block16_stride6_grid() {
        let spec = ObservationSpec::new(16, 6, vec![0.1]);
        let fine = Dims::new(48, 1, 128, 128);
        let c = spec.coarse_dims(fine);
        assert_eq!((c.h, c.w, c.l), (8, 8, 8));
        assert_eq!(fine.len() / c.len(), 1536);
    }

    #[test]
    fn brute_force_block_means() {
        let x = random_field(Dims::new(1, 1, 4, 4), 3);
        let y = coarsen_field(&x, &ObservationSpec::new(2, 1, vec![1.0])).unwrap();
        for bi in 0..2 {
            for bj in 0..2 {
                let mut s = 0.0;
                for di in 0..2 {
                    for dj in 0..2 {
                        s += x.get(0, 0, 2 * bi + di, 2 * bj + dj);
                    }
                }
                assert!((y.get(0, 0, bi, bj) - s / 4.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn indivisible_grid_is_rejected() {
        let x = Field::zeros(Dims::new(2, 1, 5, 4));
        assert!(matches!(
            coarsen_field(&x, &ObservationSpec::new(2, 1, vec![1.0])),
            Err(Error::Shape(_))
        ));
    }

    fn obs_of(x: &Field, spec: &ObservationSpec) -> CoarseObservation {
        let data = coarsen_field(x, spec).unwrap();
        let n = data.dims().v;
        CoarseObservation::new(data, spec.clone(), x.dims().l, (0..n).map(|i| format!("v{i}")).collect()).unwrap()
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let x = random_field(Dims::new(5, 2, 4, 4), 1);
        let spec = ObservationSpec::new(2, 2, vec![0.3, 0.5]);
        let y = obs_of(&x, &spec);
        let g = log_likelihood_grad_wrt_xhat(&y, &x).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_operator_gradient() {
        let spec = ObservationSpec::new(1, 1, vec![0.5]);
        let x = Field::zeros(Dims::new(1, 1, 1, 1));
        let y = CoarseObservation::new(Field::filled(Dims::new(1, 1, 1, 1), 2.0), spec, 1, vec!["a".into()]).unwrap();
        let g = log_likelihood_grad_wrt_xhat(&y, &x).unwrap();
        assert!((g.data()[0] - 2.0 / 0.25).abs() < 1e-15);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let d = Dims::new(5, 2, 4, 4);
        let mut spec = ObservationSpec::new(2, 2, vec![0.7, 1.3]);
        spec.phase = 1;
        let y = obs_of(&random_field(d, 8), &spec);
        let x = random_field(d, 9);
        let g = log_likelihood_grad_wrt_xhat(&y, &x).unwrap();
        let h = 1e-5;
        for idx in 0..d.len() {
            let mut up = x.clone();
            up.data_mut()[idx] += h;
            let mut dn = x.clone();
            dn.data_mut()[idx] -= h;
            let fd = (log_likelihood(&y, &up).unwrap() - log_likelihood(&y, &dn).unwrap()) / (2.0 * h);
            let a = g.data()[idx];
            let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-12);
            if a == 0.0 {
                assert!(fd.abs() < 1e-9, "idx {idx}: fd {fd}");
            } else {
                assert!(err < 1e-6, "idx {idx}: fd {fd} analytic {a}");
            }
        }
    }

    #[test]
    fn gradient_is_sparse() {
        let d = Dims::new(7, 3, 4, 4);
        let mut spec = ObservationSpec::new(2, 3, vec![1.0; 3]);
        spec.mask = VariableMask::complement_of(3, 1);
        let y = obs_of(&random_field(d, 1), &spec);
        let g = log_likelihood_grad_wrt_xhat(&y, &random_field(d, 2)).unwrap();
        for t in 0..d.l {
            for v in 0..d.v {
                let nonzero = g.plane(t, v).iter().any(|&e| e != 0.0);
                let observed = t % 3 == 0 && v != 1;
                assert_eq!(nonzero, observed, "t={t} v={v}");
            }
        }
    }

    #[test]
    fn normalized_maps_values_and_noise() {
        let d = Dims::new(3, 2, 2, 2);
        let mut spec = ObservationSpec::new(2, 1, vec![0.5, 2.0]);
        spec.mask = VariableMask::complement_of(2, 0);
        let y = obs_of(&random_field(d, 4), &spec);
        let st = NormStats::new(vec![1.0, -3.0], vec![2.0, 4.0]).unwrap();
        let n = y.normalized(&st).unwrap();
        assert_eq!(n.spec.noise_std, vec![0.25, 0.5]);
        assert!((n.data.get(1, 0, 0, 0) - (y.data.get(1, 0, 0, 0) + 3.0) / 4.0).abs() < 1e-15);
    }

    #[test]
    fn file_round_trip() {
        let d = Dims::new(7, 2, 4, 4);
        let mut spec = ObservationSpec::new(2, 3, vec![0.5, 0.25]);
        spec.phase = 2;
        spec.mask = VariableMask::complement_of(2, 0);
        let mut y = obs_of(&random_field(d, 4), &spec);
        y.data.round_to_f32();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("y.sdat");
        write_observation(&p, &y, &["K".into()], 1.0).unwrap();
        let back = read_observation(&p).unwrap();
        assert_eq!(back, y);
        assert_eq!(back.fine_dims(), d);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn coarsening_is_linear(a in -5.0f64..5.0, c in -5.0f64..5.0, seed in any::<u64>(), s in 1usize..4) {
            let d = Dims::new(6, 2, 6, 6);
            let spec = ObservationSpec::new(3, s, vec![1.0, 1.0]);
            let x = random_field(d, seed);
            let z = random_field(d, seed.wrapping_add(1));
            let mix = Field::from_vec(d, x.data().iter().zip(z.data()).map(|(p, q)| a * p + c * q).collect()).unwrap();
            let lhs = coarsen_field(&mix, &spec).unwrap();
            let hx = coarsen_field(&x, &spec).unwrap();
            let hz = coarsen_field(&z, &spec).unwrap();
            for ((l, p), q) in lhs.data().iter().zip(hx.data()).zip(hz.data()) {
                prop_assert!((l - (a * p + c * q)).abs() < 1e-12);
            }
        }

        #[test]
        fn block_mean_within_block_range(seed in any::<u64>(), b in 1usize..4) {
            let d = Dims::new(2, 1, 6 * b, 3 * b);
            let x = random_field(d, seed);
            let y = coarsen_field(&x, &ObservationSpec::new(b, 1, vec![1.0])).unwrap();
            for t in 0..2 {
                for bi in 0..6 {
                    for bj in 0..3 {
                        let cell: Vec<f64> = (0..b * b).map(|k| x.get(t, 0, bi * b + k / b, bj * b + k % b)).collect();
                        let lo = cell.iter().cloned().fold(f64::INFINITY, f64::min);
                        let hi = cell.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let m = y.get(t, 0, bi, bj);
                        prop_assert!(m >= lo - 1e-12 && m <= hi + 1e-12);
                    }
                }
            }
        }
    }
}
