//! SDCK1 checkpoint files.
//!
//! A header line with the architecture, step counter, seed and
//! normalization, one `array name=… offset=… shape=…` line per stored
//! array, then all arrays as little-endian `f32`. Offsets count values.

use std::path::Path;

use crate::diffusion::{Denoiser, ScheduleKind};
use crate::error::{ensure, Error, Result};
use crate::field::NormStats;
use crate::nn::{UNet, UNetConfig};
use crate::sdat::{self, Header};
use crate::train::Adam;

pub const MAGIC: &str = "SDCK1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub schedule: ScheduleKind,
    pub model: UNetConfig,
    pub params: Vec<f64>,
    pub step: usize,
    pub seed: u64,
    pub norm: NormStats,
    pub adam: Adam,
}

impl Checkpoint {
    pub fn network(&self) -> Result<UNet> {
        UNet::from_params(self.model, self.params.clone())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let net = self.network()?;
        let join = |xs: &[f64]| xs.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        let mut h = Header::new();
        h.push("magic", MAGIC)
            .push("schedule", self.schedule.as_str())
            .push("k", self.model.markov_order)
            .push("vars", self.model.n_vars)
            .push("base_channels", self.model.base_channels)
            .push("mid_channels", self.model.mid_channels)
            .push("emb_dim", self.model.emb_dim)
            .push("step", self.step)
            .push("seed", self.seed)
            .push("norm_mean", join(&self.norm.mean))
            .push("norm_std", join(&self.norm.std))
            .push("adam_t", self.adam.t)
            .push("adam_lr", self.adam.lr);
        let mut text = h.to_line();
        let n = self.params.len();
        let mut arrays: Vec<(String, Vec<usize>, usize)> = net
            .param_specs()
            .iter()
            .map(|s| (s.name.clone(), s.shape.clone(), s.offset))
            .collect();
        arrays.push(("adam.m".into(), vec![n], n));
        arrays.push(("adam.v".into(), vec![n], 2 * n));
        text.push_str(&format!("arrays={}\n", arrays.len()));
        for (name, shape, offset) in &arrays {
            let shape = shape.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
            text.push_str(&format!("array name={name} offset={offset} shape={shape}\n"));
        }
        let mut values = self.params.clone();
        values.extend_from_slice(&self.adam.m);
        values.extend_from_slice(&self.adam.v);
        let mut bytes = text.into_bytes();
        bytes.extend(sdat::f32_payload(&values));
        let path = path.as_ref();
        std::fs::write(path, bytes).map_err(|source| Error::Write {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&sdat::read_bytes(path.as_ref())?)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (h, mut rest) = sdat::split_file(bytes)?;
        ensure!(h.get("magic") == Some(MAGIC), Format, "bad magic {:?}", h.get("magic"));
        let schedule = ScheduleKind::parse(h.require("schedule")?)
            .ok_or_else(|| Error::Format(format!("unknown schedule {:?}", h.get("schedule"))))?;
        let model = UNetConfig {
            markov_order: h.parse_value("k")?,
            n_vars: h.parse_value("vars")?,
            base_channels: h.parse_value("base_channels")?,
            mid_channels: h.parse_value("mid_channels")?,
            emb_dim: h.parse_value("emb_dim")?,
        };
        let norm = NormStats::new(h.parse_list("norm_mean")?, h.parse_list("norm_std")?)
            .map_err(|e| Error::Format(e.to_string()))?;
        ensure!(norm.n_vars() == model.n_vars, Format, "normalization covers {} variables", norm.n_vars());

        let (raw, tail) = split_line(rest)?;
        rest = tail;
        let count: usize = Header::parse(raw)?.parse_value("arrays")?;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let (raw, tail) = split_line(rest)?;
            rest = tail;
            let body = raw
                .strip_prefix("array ")
                .ok_or_else(|| Error::Format(format!("expected an array line, got {raw:?}")))?;
            let line = Header::parse(body)?;
            let name = line.require("name")?.to_string();
            let offset: usize = line.parse_value("offset")?;
            let shape: Vec<usize> = line.parse_list("shape")?;
            arrays.push((name, offset, shape.iter().product::<usize>()));
        }
        let values = sdat::decode_f32(rest);
        ensure!(rest.len() == values.len() * 4, Format, "payload is not a whole number of floats");
        let take = |name: &str| -> Result<Vec<f64>> {
            let (_, off, len) = arrays
                .iter()
                .find(|(n, _, _)| n == name)
                .ok_or_else(|| Error::Format(format!("missing array {name}")))?;
            ensure!(off + len <= values.len(), Format, "array {name} runs past the payload");
            Ok(values[*off..off + len].to_vec())
        };

        let probe = UNet::new(model, 0);
        let mut params = vec![0.0; probe.params().len()];
        for spec in probe.param_specs() {
            let v = take(&spec.name)?;
            ensure!(v.len() == spec.len(), Format, "array {} has wrong size", spec.name);
            params[spec.offset..spec.offset + spec.len()].copy_from_slice(&v);
        }
        let total: usize = arrays.iter().map(|a| a.2).sum();
        ensure!(total == values.len(), Format, "payload has {} values, manifest {total}", values.len());
        let adam = Adam {
            lr: h.parse_value("adam_lr")?,
            t: h.parse_value("adam_t")?,
            m: take("adam.m")?,
            v: take("adam.v")?,
            ..Adam::new(0, 1.0)
        };
        ensure!(adam.m.len() == params.len(), Format, "optimizer state size mismatch");
        Ok(Self {
            schedule,
            model,
            params,
            step: h.parse_value("step")?,
            seed: h.parse_value("seed")?,
            norm,
            adam,
        })
    }
}

fn split_line(bytes: &[u8]) -> Result<(&str, &[u8])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("truncated array manifest".into()))?;
    let line = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::Format("manifest is not UTF-8".into()))?;
    Ok((line, &bytes[nl + 1..]))
}
