//! Trajectory containers and per-variable standardization.
//!
//! All 4-axis arrays are stored row-major in `(t, v, i, j)` order, so the
//! frames `t0..t0 + w` of a trajectory form one contiguous block.

use crate::error::{ensure, Error, Result};

/// Extents of a `(time, variable, lat, lon)` array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub l: usize,
    pub v: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub const fn new(l: usize, v: usize, h: usize, w: usize) -> Self {
        Self { l, v, h, w }
    }

    pub const fn len(&self) -> usize {
        self.l * self.v * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of values in one frame (all variables).
    pub const fn frame_len(&self) -> usize {
        self.v * self.h * self.w
    }

    pub const fn plane_len(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub const fn index(&self, t: usize, v: usize, i: usize, j: usize) -> usize {
        ((t * self.v + v) * self.h + i) * self.w + j
    }

    pub fn with_l(self, l: usize) -> Self {
        Self { l, ..self }
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},{},{},{}", self.l, self.v, self.h, self.w)
    }
}

/// Dense 4-axis array of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    dims: Dims,
    data: Vec<f64>,
}

impl Field {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.len()],
        }
    }

    pub fn filled(dims: Dims, value: f64) -> Self {
        Self {
            dims,
            data: vec![value; dims.len()],
        }
    }

    pub fn from_vec(dims: Dims, data: Vec<f64>) -> Result<Self> {
        ensure!(
            data.len() == dims.len(),
            Shape,
            "dims {dims} need {} values, got {}",
            dims.len(),
            data.len()
        );
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for t in 0..dims.l {
            for v in 0..dims.v {
                for i in 0..dims.h {
                    for j in 0..dims.w {
                        data.push(f(t, v, i, j));
                    }
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, t: usize, v: usize, i: usize, j: usize) -> f64 {
        self.data[self.dims.index(t, v, i, j)]
    }

    #[inline]
    pub fn set(&mut self, t: usize, v: usize, i: usize, j: usize, value: f64) {
        let idx = self.dims.index(t, v, i, j);
        self.data[idx] = value;
    }

    /// Values of frames `start..start + count` as one contiguous slice.
    pub fn frames(&self, start: usize, count: usize) -> &[f64] {
        let n = self.dims.frame_len();
        &self.data[start * n..(start + count) * n]
    }

    pub fn frames_mut(&mut self, start: usize, count: usize) -> &mut [f64] {
        let n = self.dims.frame_len();
        &mut self.data[start * n..(start + count) * n]
    }

    /// One `(h, w)` plane.
    pub fn plane(&self, t: usize, v: usize) -> &[f64] {
        let start = self.dims.index(t, v, 0, 0);
        &self.data[start..start + self.dims.plane_len()]
    }

    pub fn plane_mut(&mut self, t: usize, v: usize) -> &mut [f64] {
        let start = self.dims.index(t, v, 0, 0);
        let n = self.dims.plane_len();
        &mut self.data[start..start + n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Rounds every entry to the nearest `f32`, the precision used on disk.
    pub fn round_to_f32(&mut self) {
        for x in &mut self.data {
            *x = f64::from(*x as f32);
        }
    }

    /// Keeps only the variables whose indices are listed, in order.
    pub fn select_vars(&self, vars: &[usize]) -> Result<Field> {
        for &v in vars {
            ensure!(v < self.dims.v, Shape, "variable index {v} out of range");
        }
        let dims = Dims { v: vars.len(), ..self.dims };
        let mut out = Vec::with_capacity(dims.len());
        for t in 0..self.dims.l {
            for &v in vars {
                out.extend_from_slice(self.plane(t, v));
            }
        }
        Field::from_vec(dims, out)
    }
}

/// Names must survive the comma-separated, space-delimited file header.
pub(crate) fn validate_name(name: &str) -> Result<()> {
    ensure!(
        !name.is_empty() && !name.chars().any(|c| c.is_whitespace() || c == ',' || c == '='),
        Format,
        "invalid identifier {name:?}"
    );
    Ok(())
}

/// A field trajectory in physical units plus its metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    field: Field,
    var_names: Vec<String>,
    units: Vec<String>,
    dt_hours: f64,
}

impl Trajectory {
    pub fn new(field: Field, var_names: Vec<String>, units: Vec<String>, dt_hours: f64) -> Result<Self> {
        let d = field.dims();
        ensure!(
            d.l >= 1 && d.v >= 1 && d.h >= 1 && d.w >= 1,
            Shape,
            "all extents must be positive, got {d}"
        );
        ensure!(
            var_names.len() == d.v,
            Shape,
            "{} variable names for V={}",
            var_names.len(),
            d.v
        );
        ensure!(units.len() == d.v, Shape, "{} units for V={}", units.len(), d.v);
        for n in var_names.iter().chain(units.iter()) {
            validate_name(n)?;
        }
        ensure!(
            dt_hours.is_finite() && dt_hours > 0.0,
            Domain,
            "dt_hours must be positive, got {dt_hours}"
        );
        ensure!(field.is_finite(), Data, "trajectory contains non-finite values");
        Ok(Self {
            field,
            var_names,
            units,
            dt_hours,
        })
    }

    /// Trajectory with generated names `var0..` and unit `1`.
    pub fn unnamed(field: Field) -> Result<Self> {
        let v = field.dims().v;
        let names = (0..v).map(|i| format!("var{i}")).collect();
        let units = vec!["1".to_string(); v];
        Self::new(field, names, units, 1.0)
    }

    pub fn dims(&self) -> Dims {
        self.field.dims()
    }

    pub fn field(&self) -> &Field {
        &self.field
    }

    pub fn into_field(self) -> Field {
        self.field
    }

    pub fn var_names(&self) -> &[String] {
        &self.var_names
    }

    pub fn units(&self) -> &[String] {
        &self.units
    }

    pub fn dt_hours(&self) -> f64 {
        self.dt_hours
    }

    pub fn var_index(&self, name: &str) -> Option<usize> {
        self.var_names.iter().position(|n| n == name)
    }

    /// Same metadata, different values.
    pub fn with_field(&self, field: Field) -> Result<Self> {
        ensure!(
            field.dims().v == self.dims().v,
            Shape,
            "variable count changed from {} to {}",
            self.dims().v,
            field.dims().v
        );
        Self::new(field, self.var_names.clone(), self.units.clone(), self.dt_hours)
    }
}

/// Per-variable mean and standard deviation used to standardize fields.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        ensure!(mean.len() == std.len(), Shape, "mean/std length mismatch");
        ensure!(
            std.iter().all(|s| s.is_finite() && *s > 0.0),
            Domain,
            "standard deviations must be positive"
        );
        ensure!(mean.iter().all(|m| m.is_finite()), Domain, "non-finite mean");
        Ok(Self { mean, std })
    }

    pub fn identity(v: usize) -> Self {
        Self {
            mean: vec![0.0; v],
            std: vec![1.0; v],
        }
    }

    /// Global statistics per variable over all frames and cells.
    ///
    /// A variable with zero spread gets unit scale.
    pub fn from_field(x: &Field) -> Self {
        let d = x.dims();
        let n = (d.l * d.plane_len()) as f64;
        let mut mean = vec![0.0; d.v];
        let mut std = vec![0.0; d.v];
        for v in 0..d.v {
            let s: f64 = (0..d.l).flat_map(|t| x.plane(t, v)).sum();
            let m = s / n;
            let ss: f64 = (0..d.l)
                .flat_map(|t| x.plane(t, v))
                .map(|y| (y - m) * (y - m))
                .sum();
            let sd = (ss / n).sqrt();
            mean[v] = m;
            std[v] = if sd > 0.0 && sd.is_finite() { sd } else { 1.0 };
        }
        Self { mean, std }
    }

    pub fn n_vars(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, x: &Field) -> Result<()> {
        ensure!(
            x.dims().v == self.n_vars(),
            Shape,
            "stats cover {} variables, field has {}",
            self.n_vars(),
            x.dims().v
        );
        Ok(())
    }

    pub fn normalize(&self, x: &Field) -> Result<Field> {
        self.check(x)?;
        let mut out = x.clone();
        let d = x.dims();
        for t in 0..d.l {
            for v in 0..d.v {
                let (m, s) = (self.mean[v], self.std[v]);
                for y in out.plane_mut(t, v) {
                    *y = (*y - m) / s;
                }
            }
        }
        Ok(out)
    }

    pub fn denormalize(&self, x: &Field) -> Result<Field> {
        self.check(x)?;
        let mut out = x.clone();
        let d = x.dims();
        for t in 0..d.l {
            for v in 0..d.v {
                let (m, s) = (self.mean[v], self.std[v]);
                for y in out.plane_mut(t, v) {
                    *y = *y * s + m;
                }
            }
        }
        Ok(out)
    }
}

/// Which variables take part in conditioning.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VariableMask {
    pub included: Vec<bool>,
}

impl VariableMask {
    pub fn all(v: usize) -> Self {
        Self {
            included: vec![true; v],
        }
    }

    pub fn none(v: usize) -> Self {
        Self {
            included: vec![false; v],
        }
    }

    /// Every variable except `excluded`.
    pub fn complement_of(v: usize, excluded: usize) -> Self {
        Self {
            included: (0..v).map(|i| i != excluded).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.included.len()
    }

    pub fn is_empty(&self) -> bool {
        self.included.is_empty()
    }

    /// Indices of the included variables.
    pub fn indices(&self) -> Vec<usize> {
        self.included
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn to_header(&self) -> String {
        self.included
            .iter()
            .map(|&b| if b { "1" } else { "0" })
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn from_header(s: &str) -> Result<Self> {
        let included = s
            .split(',')
            .map(|p| match p {
                "1" => Ok(true),
                "0" => Ok(false),
                other => Err(Error::Format(format!("bad mask entry {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { included })
    }
}
