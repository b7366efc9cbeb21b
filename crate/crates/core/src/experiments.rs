//! Drivers behind the CLI subcommands. Each one takes a [`RunConfig`] and
//! writes its results under `experiment.out_dir`.
//!
//! CSV tables are written to `<name>.partial` first and renamed once every
//! unit has finished; a failed sweep leaves only the `.partial` file.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{load_tensor, save_dataset, save_tensor, Dataset};
use crate::encoders::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::gradcheck::{run_grad_checks, GradCheckRow};
use crate::losses::{LossWeights, Temperature};
use crate::numerics::OpKind;
use crate::train::{evaluate, train, EpochMetrics, EvalMode, Model, SamplerMode, TrainConfig, TrainOutput};

pub const METRICS_CSV: &str = "metrics.csv";
pub const EVAL_CSV: &str = "eval.csv";
pub const GAMMA_CSV: &str = "gamma_sweep.csv";
pub const BATCH_CSV: &str = "batch_sweep.csv";
pub const NOISE_CSV: &str = "noise_exp.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const EVAL_KS: [usize; 4] = [1, 5, 10, 25];

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn partial_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".partial");
    PathBuf::from(s)
}

/// Writes header and rows to `<path>.partial`.
fn write_partial(path: &Path, header: &str, rows: &[String]) -> Result<PathBuf> {
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    let tmp = partial_path(path);
    let mut text = String::with_capacity(64 * (rows.len() + 1));
    text.push_str(header);
    text.push('\n');
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    Ok(tmp)
}

/// Writes the table and renames it into place, unless `failure` is set, in
/// which case the `.partial` file stays and the failure is returned.
fn write_table(path: &Path, header: &str, rows: &[String], failure: Option<Error>) -> Result<()> {
    let tmp = write_partial(path, header, rows)?;
    if let Some(e) = failure {
        return Err(e);
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Runs `units` on the configured worker pool. Results come back in input
/// order; rows of units that finished before the first failure are kept.
fn run_units<U, R, F>(cfg: &RunConfig, units: &[U], f: F) -> Result<(Vec<R>, Option<Error>)>
where
    U: Sync,
    R: Send,
    F: Fn(&U) -> Result<R> + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.experiment.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let results: Vec<Result<R>> = pool.install(|| units.par_iter().map(&f).collect());
    let mut done = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(v) => done.push(v),
            Err(e) => return Ok((done, Some(e))),
        }
    }
    Ok((done, None))
}

fn fmt_recalls(r: &[f64]) -> String {
    r.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(",")
}

struct Prepared {
    train: Dataset,
    test: Dataset,
    video: EncoderConfig,
    music: EncoderConfig,
}

fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let ds = cfg.dataset()?;
    let (video, music) = cfg.encoders(&ds)?;
    let (train, test) = cfg.split(&ds)?;
    Ok(Prepared {
        train,
        test,
        video,
        music,
    })
}

impl Prepared {
    fn run(&self, tc: &TrainConfig) -> Result<TrainOutput> {
        train(&self.train, &self.test, &self.video, &self.music, tc)
    }
}

fn final_metrics(out: &TrainOutput) -> Result<&EpochMetrics> {
    out.metrics
        .last()
        .ok_or_else(|| Error::Config("sweeps need epochs >= 1".into()))
}

/// Generates the synthetic dataset into `<out>/data`. Returns the manifest
/// path and the number of pairs.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<(PathBuf, usize)> {
    cfg.validate()?;
    let ds = crate::data::generate_synthetic(&cfg.synth)?;
    let dir = cfg.experiment.out_dir.join("data");
    create_dir(&dir)?;
    let manifest = save_dataset(&ds, &dir)?;
    Ok((manifest, ds.len()))
}

/// One training run: writes `metrics.csv` and the final checkpoint.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutput> {
    let p = prepare(cfg)?;
    let out_dir = &cfg.experiment.out_dir;
    create_dir(out_dir)?;
    let out = p.run(&cfg.train_config());
    let out = match out {
        Ok(o) => o,
        Err(e) => {
            write_partial(&out_dir.join(METRICS_CSV), EpochMetrics::CSV_HEADER, &[])?;
            return Err(e);
        }
    };
    let rows: Vec<String> = out.metrics.iter().map(EpochMetrics::csv_row).collect();
    write_table(&out_dir.join(METRICS_CSV), EpochMetrics::CSV_HEADER, &rows, None)?;
    save_checkpoint(&out.model, &out_dir.join(CHECKPOINT_DIR))?;
    Ok(out)
}

/// Loads `<out>/checkpoint` and evaluates on the test split. Writes
/// `eval.csv` (`k,recall`) and returns the `(k, R@k)` pairs.
pub fn cmd_eval(cfg: &RunConfig) -> Result<Vec<(usize, f64)>> {
    let p = prepare(cfg)?;
    let model = load_checkpoint(&cfg.experiment.out_dir.join(CHECKPOINT_DIR))?;
    if model.video_cfg.input_dim != p.train.video_dim() || model.music_cfg.input_dim != p.train.music_dim() {
        return Err(Error::DimMismatch("checkpoint does not match the dataset".into()));
    }
    let tc = cfg.train_config();
    let ks: Vec<usize> = EVAL_KS.iter().map(|&k| k.min(p.test.len())).collect();
    let r = evaluate(&model, &p.test, tc.sampling(), tc.eval_mode, &ks)?;
    let pairs: Vec<(usize, f64)> = ks.into_iter().zip(r).collect();
    let rows: Vec<String> = pairs.iter().map(|(k, v)| format!("{k},{v:.6}")).collect();
    write_table(&cfg.experiment.out_dir.join(EVAL_CSV), "k,recall", &rows, None)?;
    Ok(pairs)
}

/// One model per (gamma2, seed), all sharing the data order of their seed.
pub fn cmd_sweep_gamma(cfg: &RunConfig) -> Result<PathBuf> {
    if cfg.experiment.gamma2_list.is_empty() || cfg.experiment.seeds.is_empty() {
        return Err(Error::Config("gamma2_list and seeds must be nonempty".into()));
    }
    let p = prepare(cfg)?;
    let base = cfg.train_config();
    let units: Vec<(f64, u64)> = cfg
        .experiment
        .gamma2_list
        .iter()
        .flat_map(|&g| cfg.experiment.seeds.iter().map(move |&s| (g, s)))
        .collect();
    for (g, _) in &units {
        LossWeights { gamma2: *g, ..base.weights.clone() }.validate()?;
    }
    let (rows, failure) = run_units(cfg, &units, |&(g, seed)| {
        let tc = TrainConfig {
            seed,
            weights: LossWeights { gamma2: g, ..base.weights.clone() },
            ..base.clone()
        };
        let out = p.run(&tc)?;
        let m = final_metrics(&out)?;
        Ok(format!("{g},{seed},{}", fmt_recalls(&[m.r1, m.r10, m.r25])))
    })?;
    let path = cfg.experiment.out_dir.join(GAMMA_CSV);
    write_table(&path, "gamma2,seed,r1,r10,r25", &rows, failure)?;
    Ok(path)
}

/// Variant names used in the sweep tables.
pub const VARIANTS: [&str; 2] = ["inter", "ii"];

fn variant_weights(base: &LossWeights, variant: &str) -> LossWeights {
    match variant {
        "inter" => LossWeights {
            gamma2: 0.0,
            ..base.clone()
        },
        _ => base.clone(),
    }
}

/// Inter-only and II models for every (batch size, seed).
pub fn cmd_sweep_batch(cfg: &RunConfig) -> Result<PathBuf> {
    if cfg.experiment.batch_list.is_empty() || cfg.experiment.seeds.is_empty() {
        return Err(Error::Config("batch_list and seeds must be nonempty".into()));
    }
    let p = prepare(cfg)?;
    let base = cfg.train_config();
    let mut units = Vec::new();
    for &b in &cfg.experiment.batch_list {
        TrainConfig { batch_n: b, ..base.clone() }.validate()?;
        for v in VARIANTS {
            for &s in &cfg.experiment.seeds {
                units.push((b, v, s));
            }
        }
    }
    let (rows, failure) = run_units(cfg, &units, |&(b, v, seed)| {
        let tc = TrainConfig {
            batch_n: b,
            seed,
            weights: variant_weights(&base.weights, v),
            ..base.clone()
        };
        let out = p.run(&tc)?;
        let m = final_metrics(&out)?;
        Ok(format!("{b},{v},{seed},{}", fmt_recalls(&[m.r1, m.r10, m.r25])))
    })?;
    let path = cfg.experiment.out_dir.join(BATCH_CSV);
    write_table(&path, "batch_n,variant,seed,r1,r10,r25", &rows, failure)?;
    Ok(path)
}

/// The four batch-composition modes against both variants, evaluated in
/// category mode with `experiment.noise_batch_n`.
pub fn cmd_noise_exp(cfg: &RunConfig) -> Result<PathBuf> {
    if cfg.experiment.seeds.is_empty() {
        return Err(Error::Config("seeds must be nonempty".into()));
    }
    let p = prepare(cfg)?;
    let base = TrainConfig {
        batch_n: cfg.experiment.noise_batch_n,
        eval_mode: EvalMode::Category,
        ..cfg.train_config()
    };
    let mut units = Vec::new();
    for mode in SamplerMode::NOISE_MODES {
        TrainConfig { sampler_mode: mode, ..base.clone() }.validate()?;
        for v in VARIANTS {
            for &s in &cfg.experiment.seeds {
                units.push((mode, v, s));
            }
        }
    }
    let (rows, failure) = run_units(cfg, &units, |&(mode, v, seed)| {
        let tc = TrainConfig {
            sampler_mode: mode,
            seed,
            weights: variant_weights(&base.weights, v),
            epochs: base.epochs.max(1),
            ..base.clone()
        };
        let out = p.run(&tc)?;
        let ks: Vec<usize> = [1, 5, 10].iter().map(|&k| k.min(p.test.len())).collect();
        let r = evaluate(&out.model, &p.test, tc.sampling(), EvalMode::Category, &ks)?;
        Ok(format!("{},{v},{seed},{}", mode.name(), fmt_recalls(&r)))
    })?;
    let path = cfg.experiment.out_dir.join(NOISE_CSV);
    write_table(&path, "mode,variant,seed,r1,r5,r10", &rows, failure)?;
    Ok(path)
}

/// Gradient check table. `fault` corrupts one backward rule.
pub fn cmd_grad_check(fault: Option<OpKind>) -> Result<Vec<GradCheckRow>> {
    run_grad_checks(fault)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointIndex {
    log_scale: f64,
    video: CheckpointEncoder,
    music: CheckpointEncoder,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointEncoder {
    config: EncoderConfig,
    params: BTreeMap<String, String>,
}

pub const CHECKPOINT_INDEX: &str = "index.toml";

/// Writes one tensor file per parameter plus `index.toml`. Parameters are
/// stored at f32 precision.
pub fn save_checkpoint(model: &Model, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let entry = |tag: &str, cfg: &EncoderConfig, params: &EncoderParams| -> Result<CheckpointEncoder> {
        let mut files = BTreeMap::new();
        for (name, t) in params.named() {
            let file = format!("{tag}.{name}.iit");
            save_tensor(dir.join(&file), t)?;
            files.insert(name.clone(), file);
        }
        Ok(CheckpointEncoder {
            config: cfg.clone(),
            params: files,
        })
    };
    let index = CheckpointIndex {
        log_scale: model.temperature.log_scale,
        video: entry("video", &model.video_cfg, &model.video)?,
        music: entry("music", &model.music_cfg, &model.music)?,
    };
    let text = toml::to_string(&index).map_err(|e| Error::Config(e.to_string()))?;
    let path = dir.join(CHECKPOINT_INDEX);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Model> {
    let path = dir.join(CHECKPOINT_INDEX);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: CheckpointIndex = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let load = |e: &CheckpointEncoder| -> Result<EncoderParams> {
        e.config.validate()?;
        let mut tensors = Vec::new();
        for (name, _) in e.config.param_shapes() {
            let file = e
                .params
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint is missing parameter {name}")))?;
            tensors.push((name.to_string(), load_tensor(dir.join(file))?));
        }
        EncoderParams::from_named(&e.config, tensors)
    };
    let mut temperature = Temperature::new(index.log_scale);
    if !index.log_scale.is_finite() {
        return Err(Error::NonFinite("checkpoint log_scale".into()));
    }
    temperature.clamp();
    Ok(Model {
        video: load(&index.video)?,
        video_cfg: index.video.config,
        music: load(&index.music)?,
        music_cfg: index.music.config,
        temperature,
    })
}
