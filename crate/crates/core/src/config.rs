//! Run configuration: one TOML document with fixed sections. Unknown keys
//! anywhere are rejected.
//!
//! ```toml
//! [synth]            # synthetic data, used when data.manifest is absent
//! [data]             # manifest path and train/test split
//! [video_encoder]
//! [music_encoder]
//! [train]
//! [loss]
//! [experiment]       # output dir, seeds and sweep lists
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, load_dataset, split_train_test, Dataset, SynthConfig};
use crate::encoders::{EncoderConfig, EncoderKind};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Manifest to load; synthesize from `[synth]` when unset.
    pub manifest: Option<PathBuf>,
    pub test_pairs_per_category: usize,
    pub split_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            manifest: None,
            test_pairs_per_category: 4,
            split_seed: 1,
        }
    }
}

/// Encoder section; `input_dim` defaults to the dataset's feature dim.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub kind: EncoderKind,
    pub input_dim: Option<usize>,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub seed: u64,
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection {
            kind: EncoderKind::MeanpoolLinear,
            input_dim: None,
            hidden_dim: 256,
            output_dim: 32,
            seed: 0,
        }
    }
}

impl EncoderSection {
    pub fn resolve(&self, data_dim: usize) -> Result<EncoderConfig> {
        let input_dim = self.input_dim.unwrap_or(data_dim);
        if input_dim != data_dim {
            return Err(Error::DimMismatch(format!("encoder input_dim {input_dim}, data has {data_dim}")));
        }
        let cfg = EncoderConfig::new(self.kind, input_dim, self.hidden_dim, self.output_dim, self.seed);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub gamma2_list: Vec<f64>,
    pub batch_list: Vec<usize>,
    /// Batch size for the batch-composition noise experiment.
    pub noise_batch_n: usize,
    /// Worker threads for sweep points; 0 uses every core.
    pub workers: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            out_dir: PathBuf::from("out"),
            seeds: vec![1, 2, 3],
            gamma2_list: vec![0.0, 3.0, 6.0, 10.0],
            batch_list: vec![24, 48, 96],
            noise_batch_n: 48,
            workers: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub data: DataSection,
    pub video_encoder: EncoderSection,
    pub music_encoder: EncoderSection,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub experiment: ExperimentSection,
}


impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. A relative `data.manifest` resolves against the
    /// config file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        if let (Some(m), Some(dir)) = (&cfg.data.manifest, path.parent()) {
            if m.is_relative() {
                cfg.data.manifest = Some(dir.join(m));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train_config().validate()?;
        if self.video_encoder.output_dim != self.music_encoder.output_dim {
            return Err(Error::Config("video and music encoders must share output_dim".into()));
        }
        Ok(())
    }

    /// `[train]` with the `[loss]` weights folded in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            weights: self.loss.clone(),
            ..self.train.clone()
        }
    }

    pub fn dataset(&self) -> Result<Dataset> {
        match &self.data.manifest {
            Some(m) => load_dataset(m),
            None => generate_synthetic(&self.synth),
        }
    }

    pub fn split(&self, ds: &Dataset) -> Result<(Dataset, Dataset)> {
        split_train_test(ds, self.data.test_pairs_per_category, self.data.split_seed)
    }

    pub fn encoders(&self, ds: &Dataset) -> Result<(EncoderConfig, EncoderConfig)> {
        Ok((
            self.video_encoder.resolve(ds.video_dim())?,
            self.music_encoder.resolve(ds.music_dim())?,
        ))
    }
}
