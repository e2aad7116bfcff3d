//! Run configuration: a TOML file with sections `data`, `model`, `train`,
//! `observe`, `sample`, `eval`, patched by `--set section.key=value`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sda_core::nn::UNetConfig;
use sda_core::observation::ObservationSpec;
use sda_core::sampler::SamplerConfig;
use sda_core::synth::SynthConfig;
use sda_core::train::TrainConfig;
use sda_core::VariableMask;

use crate::Failure;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root of every command's randomness.
    pub seed: u64,
    pub data: DataSection,
    pub model: UNetConfig,
    pub train: TrainSection,
    pub observe: ObserveSection,
    pub sample: SampleSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Output root; falls back to `$SDA_DATA_DIR`, then the working directory.
    pub dir: Option<PathBuf>,
    pub fine: String,
    pub coarse: String,
    pub checkpoint: String,
    pub loss_log: String,
    /// Prefix of downscaled sample files, `<prefix>_<i>.sdat`.
    pub samples: String,
    /// Variable names for generated data; empty means `var0, var1, …`.
    pub var_names: Vec<String>,
    pub units: Vec<String>,
    pub dt_hours: f64,
    pub synth: SynthConfig,
    pub bias: BiasSection,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dir: None,
            fine: "fine.sdat".into(),
            coarse: "coarse.sdat".into(),
            checkpoint: "model.sdck".into(),
            loss_log: "loss.csv".into(),
            samples: "sample".into(),
            var_names: Vec::new(),
            units: Vec::new(),
            dt_hours: 1.0,
            synth: SynthConfig::default(),
            bias: BiasSection::default(),
        }
    }
}

/// Quantile-mapping bias correction of a coarse source against a coarse
/// reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BiasSection {
    pub source: String,
    pub reference: String,
    pub output: String,
    pub table: String,
    pub quantiles: usize,
    /// Pool frames by phase within this cycle length; 0 pools everything.
    pub period: usize,
    pub window: usize,
}

impl Default for BiasSection {
    fn default() -> Self {
        Self {
            source: "esm.sdat".into(),
            reference: "coarse.sdat".into(),
            output: "esm_corrected.sdat".into(),
            table: "qm.sdqm".into(),
            quantiles: 256,
            period: 0,
            window: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub cosine_decay: bool,
    /// Continue from the existing checkpoint instead of starting afresh.
    pub resume: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: t.steps,
            batch: t.batch,
            lr: t.lr,
            cosine_decay: t.cosine_decay,
            resume: false,
        }
    }
}

impl TrainSection {
    pub fn to_core(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch: self.batch,
            lr: self.lr,
            cosine_decay: self.cosine_decay,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObserveSection {
    pub block: usize,
    pub stride_t: usize,
    pub phase: usize,
    /// One value per variable, or a single value for all.
    pub noise_std: Vec<f64>,
    /// Add observation noise to generated coarse data.
    pub add_noise: bool,
    /// Variables withheld from conditioning at downscale time.
    pub exclude: Vec<String>,
}

impl Default for ObserveSection {
    fn default() -> Self {
        Self {
            block: 4,
            stride_t: 4,
            phase: 0,
            noise_std: vec![0.1],
            add_noise: true,
            exclude: Vec::new(),
        }
    }
}

impl ObserveSection {
    pub fn spec(&self, n_vars: usize) -> Result<ObservationSpec, Failure> {
        let noise = match self.noise_std.len() {
            1 => vec![self.noise_std[0]; n_vars],
            n if n == n_vars => self.noise_std.clone(),
            n => return Err(Failure::config(format!("observe.noise_std has {n} entries for {n_vars} variables"))),
        };
        let spec = ObservationSpec {
            block: self.block,
            stride_t: self.stride_t,
            phase: self.phase,
            noise_std: noise,
            mask: VariableMask::all(n_vars),
        };
        spec.validate().map_err(|e| Failure::config(e.to_string()))?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    pub n_samples: usize,
    pub steps: usize,
    pub guidance_scale: f64,
    pub corrector_steps: usize,
    pub corrector_snr: f64,
    pub likelihood_inflation: f64,
    pub batch_windows: usize,
    /// Ignore the observation and sample the prior.
    pub unconditional: bool,
}

impl Default for SampleSection {
    fn default() -> Self {
        let s = SamplerConfig::default();
        Self {
            n_samples: 2,
            steps: s.steps,
            guidance_scale: s.guidance_scale,
            corrector_steps: s.corrector_steps,
            corrector_snr: s.corrector_snr,
            likelihood_inflation: s.likelihood_inflation,
            batch_windows: 64,
            unconditional: false,
        }
    }
}

impl SampleSection {
    pub fn to_core(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            steps: self.steps,
            guidance_scale: self.guidance_scale,
            corrector_steps: self.corrector_steps,
            corrector_snr: self.corrector_snr,
            likelihood_inflation: self.likelihood_inflation,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Report file stem: writes `<report>.json`, `<report>.csv` and
    /// `<report>.schema.json`.
    pub report: String,
    /// Optional baseline trajectory (e.g. BCSD output) scored alongside.
    pub baseline: Option<String>,
    pub n_slices: usize,
    pub ssim_window: usize,
    /// `[u, v]` wind component names for the wind-power analysis.
    pub wind: Vec<String>,
    pub power_curve: sda_core::metrics::PowerCurve,
    pub speed_bins: usize,
    pub speed_max: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            report: "report".into(),
            baseline: None,
            n_slices: 128,
            ssim_window: 15,
            wind: Vec::new(),
            power_curve: Default::default(),
            speed_bins: 60,
            speed_max: 30.0,
        }
    }
}

impl RunConfig {
    /// Reads the optional config file, applies `--set` overrides and the
    /// `--seed` flag, and checks for unknown keys.
    pub fn resolve(path: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<Self, Failure> {
        let mut root = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Failure::missing(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Failure::config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for s in sets {
            apply_override(&mut root, s)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Failure::config(e.to_string()))?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.data
            .dir
            .clone()
            .or_else(|| std::env::var_os("SDA_DATA_DIR").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn path(&self, name: &str) -> PathBuf {
        let p = Path::new(name);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out_dir().join(p)
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// `a.b.c=value`; the value is parsed as TOML and falls back to a string.
fn apply_override(root: &mut toml::Table, s: &str) -> Result<(), Failure> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| Failure::config(format!("--set expects key=value, got {s:?}")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut table = root;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Failure::config(format!("{key}: {p} is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}
