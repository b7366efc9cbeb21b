use std::collections::HashMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use super::batches::{make_batches, SamplerMode};
use super::eval::Truth;
use crate::data::{Dataset, Sampling};
use crate::encoders::{encode_plain, init_params, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::losses::{ii_loss, BoundEncoder, LossWeights, PairBatch, Temperature};
use crate::numerics::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMethod {
    Gs,
    Fd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Only the paired item counts.
    Pair,
    /// Any item of the query's category counts.
    Category,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Video,
    Music,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_n: usize,
    pub epochs: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Initial `n_t`; logits are scaled by `exp(n_t)`.
    pub temp_init: f64,
    pub sampler_mode: SamplerMode,
    pub sampling: SamplingMethod,
    pub gs_t: usize,
    pub fd_window: usize,
    pub eval_mode: EvalMode,
    /// Evaluate on a seeded random subset of this many test pairs; `None`
    /// uses the whole test split.
    pub eval_pool: Option<usize>,
    pub seed: u64,
    /// Filled from the `[loss]` section of a run config.
    #[serde(skip)]
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_n: 32,
            epochs: 30,
            lr: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            temp_init: Temperature::INIT,
            sampler_mode: SamplerMode::Uniform,
            sampling: SamplingMethod::Gs,
            gs_t: 16,
            fd_window: 30,
            eval_mode: EvalMode::Pair,
            eval_pool: None,
            seed: 1,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn sampling(&self) -> Sampling {
        match self.sampling {
            SamplingMethod::Gs => Sampling::Gs { clips: self.gs_t },
            SamplingMethod::Fd => Sampling::Fd { window: self.fd_window },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_n < 2 {
            return Err(Error::Config("train.batch_n must be >= 2".into()));
        }
        if self.sampler_mode != SamplerMode::Uniform && !self.batch_n.is_multiple_of(12) {
            return Err(Error::Config(format!(
                "train.batch_n = {} must be divisible by 12 for {}",
                self.batch_n,
                self.sampler_mode.name()
            )));
        }
        if self.gs_t == 0 || self.fd_window == 0 {
            return Err(Error::Config("train.gs_t and train.fd_window must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !(self.adam_eps > 0.0) || !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        if !self.temp_init.is_finite() {
            return Err(Error::Config("train.temp_init must be finite".into()));
        }
        if self.eval_pool == Some(0) {
            return Err(Error::Config("train.eval_pool must be >= 1".into()));
        }
        Ok(())
    }
}

/// Both encoders plus the shared temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub video_cfg: EncoderConfig,
    pub video: EncoderParams,
    pub music_cfg: EncoderConfig,
    pub music: EncoderParams,
    pub temperature: Temperature,
}

impl Model {
    /// Fresh parameters. Each encoder's init seed mixes the run seed with the
    /// encoder's own seed, so one run seed fixes the whole model.
    pub fn init(video_cfg: &EncoderConfig, music_cfg: &EncoderConfig, run_seed: u64, temp_init: f64) -> Result<Self> {
        let derive = |cfg: &EncoderConfig, tag: u64| EncoderConfig {
            seed: mix_seed(run_seed, cfg.seed.wrapping_mul(2).wrapping_add(tag)),
            ..cfg.clone()
        };
        Ok(Model {
            video_cfg: video_cfg.clone(),
            video: init_params(&derive(video_cfg, 1))?,
            music_cfg: music_cfg.clone(),
            music: init_params(&derive(music_cfg, 2))?,
            temperature: Temperature::new(temp_init),
        })
    }

    fn param_slices(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        out.extend(self.video.tensors_mut().map(|t| t.data_mut()));
        out.extend(self.music.tensors_mut().map(|t| t.data_mut()));
        out.push(std::slice::from_mut(&mut self.temperature.log_scale));
        out
    }

    /// Adam update of every parameter followed by the temperature clamp.
    pub fn adam_step(&mut self, grads: &[Vec<f64>], state: &mut AdamState, hp: &AdamConfig) -> Result<()> {
        let grads: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        state.step(&mut self.param_slices(), &grads, hp)?;
        self.temperature.clamp();
        Ok(())
    }

    pub fn encoder(&self, side: Side) -> (&EncoderConfig, &EncoderParams) {
        match side {
            Side::Video => (&self.video_cfg, &self.video),
            Side::Music => (&self.music_cfg, &self.music),
        }
    }
}

fn mix_seed(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = a ^ b.rotate_left(32) ^ 0x9e37_79b9_7f4a_7c15;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub inter_loss: f64,
    /// Weighted intra term, `beta1 * intra_v + beta2 * intra_m`.
    pub intra_loss: f64,
    pub r1: f64,
    pub r10: f64,
    pub r25: f64,
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str = "epoch,inter_loss,intra_loss,r1,r10,r25";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.epoch, self.inter_loss, self.intra_loss, self.r1, self.r10, self.r25
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutput {
    pub model: Model,
    pub metrics: Vec<EpochMetrics>,
}

fn sample_side(ds: &Dataset, side: Side, sampling: Sampling) -> Result<Vec<Tensor>> {
    ds.records()
        .iter()
        .map(|r| {
            sampling.apply(match side {
                Side::Video => &r.video,
                Side::Music => &r.music,
            })
        })
        .collect()
}

fn stack(items: &[&Tensor]) -> Result<Tensor> {
    let (t, e) = (items[0].rows(), items[0].cols());
    let mut data = Vec::with_capacity(items.len() * t * e);
    for it in items {
        data.extend_from_slice(it.data());
    }
    Tensor::new(data, &[items.len(), t, e])
}

/// Embeds every record of one modality with the plain (untaped) forward.
pub fn encode_corpus(model: &Model, ds: &Dataset, side: Side, sampling: Sampling) -> Result<Tensor> {
    let (cfg, params) = model.encoder(side);
    let mut data = Vec::with_capacity(ds.len() * cfg.output_dim);
    for seq in sample_side(ds, side, sampling)? {
        data.extend(encode_plain(cfg, params, &seq)?);
    }
    Tensor::new(data, &[ds.len(), cfg.output_dim])
}

/// Video-to-music retrieval over `ds`; returns R@k for each `k`, with `k`
/// capped at the pool size.
pub fn evaluate(model: &Model, ds: &Dataset, sampling: Sampling, mode: EvalMode, ks: &[usize]) -> Result<Vec<f64>> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let q = encode_corpus(model, ds, Side::Video, sampling)?;
    let c = encode_corpus(model, ds, Side::Music, sampling)?;
    let ranked = crate::train::rank_by_cosine(&q, &c)?;
    let partners: Vec<usize> = (0..ds.len()).collect();
    let labels: Vec<u32> = ds.records().iter().map(|r| r.category).collect();
    let truth = match mode {
        EvalMode::Pair => Truth::Pair(&partners),
        EvalMode::Category => Truth::Category {
            query: &labels,
            corpus: &labels,
        },
    };
    ks.iter().map(|&k| ranked.recall(truth, k.min(ranked.corpus_size()))).collect()
}

fn eval_subset(test: &Dataset, pool: Option<usize>, seed: u64) -> Result<Dataset> {
    match pool {
        Some(p) if p < test.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xe7a1));
            let mut idx = sample(&mut rng, test.len(), p).into_vec();
            idx.sort_unstable();
            let recs = idx.into_iter().map(|i| test.records()[i].clone()).collect();
            Dataset::new(recs, test.video_dim(), test.music_dim())
        }
        _ => Ok(test.clone()),
    }
}

/// Runs `cfg.epochs` epochs of mini-batch training and evaluates on `test`
/// after each one. Deterministic given the configs.
pub fn train(
    train_ds: &Dataset,
    test_ds: &Dataset,
    video_cfg: &EncoderConfig,
    music_cfg: &EncoderConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    video_cfg.validate()?;
    music_cfg.validate()?;
    if video_cfg.input_dim != train_ds.video_dim() || music_cfg.input_dim != train_ds.music_dim() {
        return Err(Error::DimMismatch(format!(
            "encoders take ({}, {}), dataset has ({}, {})",
            video_cfg.input_dim,
            music_cfg.input_dim,
            train_ds.video_dim(),
            train_ds.music_dim()
        )));
    }
    if video_cfg.output_dim != music_cfg.output_dim {
        return Err(Error::Config("video and music encoders must share output_dim".into()));
    }

    let mut model = Model::init(video_cfg, music_cfg, cfg.seed, cfg.temp_init)?;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    if cfg.epochs == 0 {
        return Ok(TrainOutput { model, metrics });
    }
    if test_ds.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let sampling = cfg.sampling();
    let videos = sample_side(train_ds, Side::Video, sampling)?;
    let musics = sample_side(train_ds, Side::Music, sampling)?;
    let index: HashMap<u64, usize> = train_ds.records().iter().enumerate().map(|(i, r)| (r.pair_id, i)).collect();
    let eval_ds = eval_subset(test_ds, cfg.eval_pool, cfg.seed)?;
    let adam = cfg.adam();
    let mut state = AdamState::new();

    for epoch in 0..cfg.epochs {
        let batches = make_batches(train_ds, cfg.sampler_mode, cfg.batch_n, cfg.seed, epoch)?;
        let (mut inter_sum, mut intra_sum) = (0.0, 0.0);
        for ids in &batches {
            let rows: Vec<usize> = ids.iter().map(|id| index[id]).collect();
            let batch = PairBatch {
                video: stack(&rows.iter().map(|&i| &videos[i]).collect::<Vec<_>>())?,
                music: stack(&rows.iter().map(|&i| &musics[i]).collect::<Vec<_>>())?,
            };
            let mut tape = Tape::new();
            let vp = model.video.bind(&mut tape, true)?;
            let mp = model.music.bind(&mut tape, true)?;
            let temp = model.temperature.bind(&mut tape, true)?;
            let nodes = ii_loss(
                &mut tape,
                &batch,
                BoundEncoder {
                    cfg: &model.video_cfg,
                    params: &vp,
                },
                BoundEncoder {
                    cfg: &model.music_cfg,
                    params: &mp,
                },
                temp,
                &cfg.weights,
            )
            .map_err(|e| match e {
                Error::NonFinite(_) | Error::ZeroNorm { .. } => Error::Diverged(format!("epoch {epoch}: {e}")),
                other => other,
            })?;
            let values = nodes.values(&tape);
            if !values.total.is_finite() {
                return Err(Error::Diverged(format!("epoch {epoch}: loss {values:?}")));
            }
            let table = tape.backward(nodes.total)?;
            let grads: Vec<Vec<f64>> = vp
                .iter()
                .chain(&mp)
                .chain(std::iter::once(&temp))
                .map(|id| table.get(*id).map(|g| g.data().to_vec()).unwrap_or_default())
                .collect();
            model.adam_step(&grads, &mut state, &adam)?;
            inter_sum += values.inter;
            intra_sum += values.intra(&cfg.weights);
        }
        let r = evaluate(&model, &eval_ds, sampling, cfg.eval_mode, &[1, 10, 25])?;
        let n = batches.len() as f64;
        metrics.push(EpochMetrics {
            epoch: epoch + 1,
            inter_loss: inter_sum / n,
            intra_loss: intra_sum / n,
            r1: r[0],
            r10: r[1],
            r25: r[2],
        });
    }
    Ok(TrainOutput { model, metrics })
}
