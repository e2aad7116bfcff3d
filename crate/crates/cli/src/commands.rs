use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;
use sha2::{Digest, Sha256};

use sda_core::checkpoint::Checkpoint;
use sda_core::metrics::{
    cumulative_power, expected_power, mean_rapsd, melr, pit, sliced_w1, ssim, wind_speed, MetricReport,
    SpeedHistogram,
};
use sda_core::observation::{coarsen, read_observation, residual_rms, write_observation, CoarseObservation};
use sda_core::preprocess::{apply_qm, apply_qm_field, fit_qm, Pooling, QuantileMap};
use sda_core::sampler::{append_manifest, sample, RunManifest, SequenceScore};
use sda_core::sdat::{read_trajectory, write_trajectory};
use sda_core::synth::{add_observation_noise, make_pair};
use sda_core::train::{resume, train};
use sda_core::{Dims, Error, Field, Trajectory, VariableMask};

use crate::config::RunConfig;
use crate::Failure;

pub fn sha256_file(path: &Path) -> Result<String, Failure> {
    let bytes = std::fs::read(path).map_err(|e| Failure::missing(format!("{}: {e}", path.display())))?;
    Ok(format!("{:x}", Sha256::digest(bytes)))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|source| {
        Failure::from(Error::Write {
            path: path.to_path_buf(),
            source,
        })
    })
}

/// Writes the fully resolved configuration next to the outputs.
pub fn emit_config(cfg: &RunConfig, command: &str) -> Result<(), Failure> {
    let dir = cfg.out_dir();
    std::fs::create_dir_all(&dir).map_err(|source| Failure::from(Error::Write { path: dir.clone(), source }))?;
    write_text(&dir.join(format!("{command}.config.toml")), &cfg.to_toml())
}

fn names_or_default(names: &[String], n: usize, stem: &str) -> Result<Vec<String>, Failure> {
    match names.len() {
        0 => Ok((0..n).map(|i| format!("{stem}{i}")).collect()),
        k if k == n => Ok(names.to_vec()),
        k => Err(Failure::config(format!("{k} names given for {n} variables"))),
    }
}

pub fn generate(cfg: &RunConfig) -> Result<(), Failure> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let synth = sda_core::synth::SynthConfig {
        seed: rng.gen(),
        ..cfg.data.synth.clone()
    };
    synth.validate().map_err(|e| Failure::config(e.to_string()))?;
    let spec = cfg.observe.spec(synth.v)?;
    spec.check_fine(Dims::new(synth.l, synth.v, synth.h, synth.w))
        .map_err(|e| Failure::config(e.to_string()))?;
    let (fine, _) = make_pair(&synth, &spec)?;
    let names = names_or_default(&cfg.data.var_names, synth.v, "var")?;
    let units = match cfg.data.units.len() {
        0 => vec!["1".to_string(); synth.v],
        _ => names_or_default(&cfg.data.units, synth.v, "")?,
    };
    let fine = Trajectory::new(fine.into_field(), names, units.clone(), cfg.data.dt_hours)?;
    let mut y = coarsen(&fine, &spec)?;
    if cfg.observe.add_noise {
        y = add_observation_noise(&y, rng.gen())?;
    }
    let (fp, cp) = (cfg.path(&cfg.data.fine), cfg.path(&cfg.data.coarse));
    write_trajectory(&fp, &fine)?;
    write_observation(&cp, &y, &units, cfg.data.dt_hours)?;
    let manifest = json!({
        "command": "generate",
        "seed": cfg.seed,
        "fine": { "path": cfg.data.fine, "dims": fine.dims().to_string(), "sha256": sha256_file(&fp)? },
        "coarse": { "path": cfg.data.coarse, "dims": y.data.dims().to_string(), "sha256": sha256_file(&cp)? },
    });
    write_text(&cfg.out_dir().join("generate_manifest.json"), &format!("{manifest:#}\n"))?;
    println!("wrote {} ({}) and {} ({})", fp.display(), fine.dims(), cp.display(), y.data.dims());
    Ok(())
}

pub fn train_cmd(cfg: &RunConfig) -> Result<(), Failure> {
    let data = read_trajectory(cfg.path(&cfg.data.fine))?;
    let tc = cfg.train.to_core(cfg.seed);
    tc.validate().map_err(|e| Failure::config(e.to_string()))?;
    let ckpt_path = cfg.path(&cfg.data.checkpoint);
    let log_path = cfg.path(&cfg.data.loss_log);
    let (out, first_step) = if cfg.train.resume {
        let ckpt = Checkpoint::load(&ckpt_path)?;
        let first = ckpt.step;
        (resume(&ckpt, &data, &tc)?, first)
    } else {
        let model = sda_core::nn::UNetConfig {
            n_vars: data.dims().v,
            ..cfg.model
        };
        (train(&data, model, &tc)?, 0)
    };
    out.checkpoint.save(&ckpt_path)?;
    let mut log = if cfg.train.resume {
        std::fs::read_to_string(&log_path).unwrap_or_else(|_| "step,loss,lr\n".into())
    } else {
        "step,loss,lr\n".to_string()
    };
    for (i, l) in out.losses.iter().enumerate() {
        log.push_str(&format!("{},{l},{}\n", first_step + i + 1, tc.lr_at(i)));
    }
    write_text(&log_path, &log)?;
    let (a, b) = sda_core::train::decile_means(&out.losses);
    println!(
        "trained to step {}; loss first decile {a:.4}, last decile {b:.4}; wrote {}",
        out.checkpoint.step,
        ckpt_path.display()
    );
    Ok(())
}

pub fn bias_correct(cfg: &RunConfig) -> Result<(), Failure> {
    let b = &cfg.data.bias;
    let src_path = cfg.path(&b.source);
    let source = read_trajectory(&src_path)?;
    let reference = read_trajectory(cfg.path(&b.reference))?;
    let pooling = (b.period > 0).then_some(Pooling {
        period: b.period,
        window: b.window,
    });
    let qm = fit_qm(source.field(), reference.field(), b.quantiles, pooling).map_err(|e| match e {
        Error::Domain(m) => Failure::config(m),
        other => other.into(),
    })?;
    let out_path = cfg.path(&b.output);
    match read_observation(&src_path) {
        Ok(y) => {
            let data = apply_qm_field(&y.data, &qm)?;
            let y = CoarseObservation::new(data, y.spec.clone(), y.origin_l, y.var_names.clone())?;
            write_observation(&out_path, &y, source.units(), source.dt_hours() / y.spec.stride_t as f64)?;
        }
        Err(Error::Format(_)) => write_trajectory(&out_path, &apply_qm(&source, &qm)?)?,
        Err(e) => return Err(e.into()),
    }
    let table = cfg.path(&b.table);
    qm.save(&table)?;
    QuantileMap::load(&table)?;
    println!("wrote {} and {}", out_path.display(), table.display());
    Ok(())
}

/// Drops the excluded variables from the conditioning observation.
fn ablate(y: &CoarseObservation, exclude: &[String]) -> Result<CoarseObservation, Failure> {
    for name in exclude {
        if !y.var_names.contains(name) {
            return Err(Failure::config(format!("observe.exclude: {name:?} is not an observed variable")));
        }
    }
    let observed = y.spec.mask.indices();
    let keep: Vec<usize> = (0..observed.len()).filter(|&vc| !exclude.contains(&y.var_names[vc])).collect();
    let mut include = vec![false; y.spec.mask.len()];
    for &vc in &keep {
        include[observed[vc]] = true;
    }
    let mut spec = y.spec.clone();
    spec.mask = VariableMask { included: include };
    let data = if keep.is_empty() {
        let d = y.data.dims();
        Field::zeros(Dims::new(d.l, 0, d.h, d.w))
    } else {
        y.data.select_vars(&keep)?
    };
    let names = keep.iter().map(|&vc| y.var_names[vc].clone()).collect();
    Ok(CoarseObservation::new(data, spec, y.origin_l, names)?)
}

pub fn downscale(cfg: &RunConfig) -> Result<(), Failure> {
    let ckpt_path = cfg.path(&cfg.data.checkpoint);
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let sha = sha256_file(&ckpt_path)?;
    let coarse_path = cfg.path(&cfg.data.coarse);
    let y = read_observation(&coarse_path)?;
    let meta = read_trajectory(&coarse_path)?;
    let v = ckpt.model.n_vars;
    if y.spec.mask.len() != v {
        return Err(Failure::shape(format!(
            "observation covers {} variables, model {v}",
            y.spec.mask.len()
        )));
    }
    let cond = ablate(&y, &cfg.observe.exclude)?;
    let cond_n = cond.normalized(&ckpt.norm)?;
    let dims = y.fine_dims();
    let (names, units) = if y.spec.mask.indices().len() == v {
        (y.var_names.clone(), meta.units().to_vec())
    } else {
        ((0..v).map(|i| format!("var{i}")).collect(), vec!["1".to_string(); v])
    };
    let dt = meta.dt_hours() / y.spec.stride_t as f64;
    let net = ckpt.network()?;
    let prior = SequenceScore::new(&net, cfg.sample.batch_windows);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let seeds: Vec<u64> = (0..cfg.sample.n_samples).map(|_| rng.gen()).collect();
    for s in &seeds {
        cfg.sample.to_core(*s).validate().map_err(|e| Failure::config(e.to_string()))?;
    }
    let obs = (!cfg.sample.unconditional).then_some(&cond_n);
    let results: Vec<(String, RunManifest)> = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &seed)| -> Result<_, Failure> {
            let sc = cfg.sample.to_core(seed);
            let x = ckpt.norm.denormalize(&sample(&prior, dims, obs, &sc)?)?;
            let residual = residual_rms(&y, &x)?;
            let name = format!("{}_{i}.sdat", cfg.data.samples);
            write_trajectory(cfg.path(&name), &Trajectory::new(x, names.clone(), units.clone(), dt)?)?;
            let m = RunManifest {
                seed,
                steps: sc.steps,
                noise_std: y.spec.noise_std.clone(),
                guidance_scale: sc.guidance_scale,
                corrector_steps: sc.corrector_steps,
                corrector_snr: sc.corrector_snr,
                likelihood_inflation: sc.likelihood_inflation,
                checkpoint_sha256: sha.clone(),
                output: name.clone(),
                residual,
            };
            Ok((name, m))
        })
        .collect::<Result<_, _>>()?;
    let manifest = cfg.out_dir().join("downscale_manifest.jsonl");
    if manifest.exists() {
        std::fs::remove_file(&manifest).map_err(|source| Failure::from(Error::Write { path: manifest.clone(), source }))?;
    }
    for (name, m) in &results {
        append_manifest(&manifest, m)?;
        let r: Vec<String> = m.residual.iter().map(|r| format!("{r:.3}")).collect();
        println!("{name}: seed {}, residual/noise [{}]", m.seed, r.join(", "));
    }
    Ok(())
}

const REPORT_SCHEMA: &str = r#"{
  "$schema": "https://json-schema.org/draft/2020-12/schema",
  "title": "MetricReport",
  "type": "object",
  "required": ["scalars", "curves"],
  "additionalProperties": false,
  "properties": {
    "scalars": { "type": "object", "additionalProperties": { "type": "number" } },
    "curves": {
      "type": "object",
      "additionalProperties": { "type": "array", "items": { "type": "number" } }
    }
  }
}
"#;

fn frames(fields: &[&Field], v: usize) -> Vec<Vec<f64>> {
    fields
        .iter()
        .flat_map(|f| (0..f.dims().l).map(move |t| f.plane(t, v).to_vec()))
        .collect()
}

fn refs(x: &[Vec<f64>]) -> Vec<&[f64]> {
    x.iter().map(Vec::as_slice).collect()
}

/// SSIM, MELR and sliced W1 of `pred` against `truth` for variable `v`.
fn score_set(
    report: &mut MetricReport,
    prefix: &str,
    pred: &[&Field],
    truth: &Field,
    v: usize,
    name: &str,
    cfg: &RunConfig,
) -> Result<(), Failure> {
    let d = truth.dims();
    let (lo, hi) = (0..d.l)
        .flat_map(|t| truth.plane(t, v).iter().copied())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let range = if hi > lo { hi - lo } else { 1.0 };
    let mut total = 0.0;
    for p in pred {
        for t in 0..d.l {
            total += ssim(p.plane(t, v), truth.plane(t, v), d.h, d.w, cfg.eval.ssim_window, range)?;
        }
    }
    report.scalar(format!("{prefix}ssim.{name}"), total / (pred.len() * d.l) as f64);
    let owned: Vec<Field> = pred.iter().map(|f| (*f).clone()).collect();
    let rp = mean_rapsd(&owned, v)?;
    let rr = mean_rapsd(std::slice::from_ref(truth), v)?;
    report.scalar(format!("{prefix}melr.{name}"), melr(&rp, &rr)?);
    let (a, b) = (frames(pred, v), frames(&[truth], v));
    report.scalar(
        format!("{prefix}sliced_w1.{name}"),
        sliced_w1(&refs(&a), &refs(&b), cfg.eval.n_slices, cfg.seed)?,
    );
    report.curve(format!("{prefix}rapsd.{name}"), rp);
    Ok(())
}

pub fn evaluate(cfg: &RunConfig) -> Result<(), Failure> {
    let truth = read_trajectory(cfg.path(&cfg.data.fine))?;
    let d = truth.dims();
    let samples: Vec<Field> = (0..cfg.sample.n_samples)
        .map(|i| -> Result<Field, Failure> {
            let s = read_trajectory(cfg.path(&format!("{}_{i}.sdat", cfg.data.samples)))?;
            if s.dims() != d {
                return Err(Failure::shape(format!("sample {i} has dims {}, truth {d}", s.dims())));
            }
            Ok(s.into_field())
        })
        .collect::<Result<_, _>>()?;
    if samples.is_empty() {
        return Err(Failure::config("sample.n_samples must be >= 1".into()));
    }
    let baseline = match &cfg.eval.baseline {
        Some(p) => {
            let b = read_trajectory(cfg.path(p))?;
            if b.dims() != d {
                return Err(Failure::shape(format!("baseline has dims {}, truth {d}", b.dims())));
            }
            Some(b.into_field())
        }
        None => None,
    };
    let pred: Vec<&Field> = samples.iter().collect();
    let mut report = MetricReport::default();
    for (v, name) in truth.var_names().iter().enumerate() {
        score_set(&mut report, "", &pred, truth.field(), v, name, cfg)?;
        report.curve(
            format!("rapsd.{name}.reference"),
            mean_rapsd(std::slice::from_ref(truth.field()), v)?,
        );
        if let Some(b) = &baseline {
            score_set(&mut report, "baseline.", &[b], truth.field(), v, name, cfg)?;
        }
        if samples.len() >= 2 {
            let one: Vec<Field> = samples.iter().map(|s| s.select_vars(&[v])).collect::<Result<_, _>>()?;
            let t = truth.field().select_vars(&[v])?;
            report.curve(format!("pit.{name}"), pit(&one, &t, None, cfg.seed)?);
        }
    }
    if !cfg.eval.wind.is_empty() {
        wind_report(&mut report, &truth, &samples, cfg)?;
    }
    report.validate()?;
    let stem = &cfg.eval.report;
    write_text(&cfg.path(&format!("{stem}.json")), &(report.to_json()? + "\n"))?;
    write_text(&cfg.path(&format!("{stem}.csv")), &report.curves_csv())?;
    write_text(&cfg.path(&format!("{stem}.schema.json")), REPORT_SCHEMA)?;
    for (k, v) in &report.scalars {
        println!("{k} = {v:.6}");
    }
    Ok(())
}

fn wind_report(report: &mut MetricReport, truth: &Trajectory, samples: &[Field], cfg: &RunConfig) -> Result<(), Failure> {
    let w = &cfg.eval.wind;
    if w.len() != 2 {
        return Err(Failure::config(format!("eval.wind needs two component names, got {}", w.len())));
    }
    let idx = |n: &String| {
        truth
            .var_index(n)
            .ok_or_else(|| Failure::config(format!("eval.wind: no variable {n:?}")))
    };
    let (u, v) = (idx(&w[0])?, idx(&w[1])?);
    let pc = &cfg.eval.power_curve;
    pc.validate().map_err(|e| Failure::config(e.to_string()))?;
    let cells = truth.dims().frame_len() / truth.dims().v;
    let mut add = |key: &str, x: &Field| -> Result<(), Failure> {
        let s = wind_speed(x, u, v)?;
        let hist = SpeedHistogram::from_samples(&s, 0.0, cfg.eval.speed_max, cfg.eval.speed_bins)?;
        report.scalar(format!("wind_power.{key}"), expected_power(&hist, pc)?);
        report.curve(format!("wind_density.{key}"), hist.density);
        report.curve(format!("cumulative_power.{key}"), cumulative_power(&s, cells, pc)?);
        Ok(())
    };
    add("reference", truth.field())?;
    // the pooled ensemble: every sample's speeds, frames in sample order
    let mut pooled = samples[0].clone();
    if samples.len() > 1 {
        let d = samples[0].dims();
        let mut data = Vec::with_capacity(d.len() * samples.len());
        for s in samples {
            data.extend_from_slice(s.data());
        }
        pooled = Field::from_vec(d.with_l(d.l * samples.len()), data)?;
    }
    add("downscaled", &pooled)
}
