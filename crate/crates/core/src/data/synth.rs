//! Clustered paired-feature generator.
//!
//! Every draw comes from one `ChaCha8Rng` seeded with `SynthConfig::seed`,
//! in this order: category centers, the video projection, the music
//! projection, then per record (category-major) the latent offset, the video
//! length, the music length, video frame noise and music frame noise.
//! Generated values are rounded to f32 so a dataset written to disk and read
//! back is identical to the in-memory one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, PairRecord};
use super::sequence::FeatureSequence;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_categories: usize,
    pub pairs_per_category: usize,
    pub latent_dim: usize,
    pub video_dim: usize,
    pub music_dim: usize,
    /// Inclusive (min, max) sequence length.
    pub seq_len_range: (usize, usize),
    /// Standard deviation of a pair's latent around its category center.
    pub cluster_spread: f64,
    /// Standard deviation of independent per-frame noise.
    pub frame_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_categories: 64,
            pairs_per_category: 40,
            latent_dim: 16,
            video_dim: 32,
            music_dim: 24,
            seq_len_range: (20, 60),
            cluster_spread: 0.05,
            frame_noise: 1.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_categories", self.n_categories),
            ("pairs_per_category", self.pairs_per_category),
            ("latent_dim", self.latent_dim),
            ("video_dim", self.video_dim),
            ("music_dim", self.music_dim),
            ("seq_len_range.0", self.seq_len_range.0),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("synth.{name} must be >= 1")));
        }
        if self.seq_len_range.0 > self.seq_len_range.1 {
            return Err(Error::Config("synth.seq_len_range min exceeds max".into()));
        }
        if !(self.cluster_spread >= 0.0 && self.frame_noise >= 0.0)
            || !self.cluster_spread.is_finite()
            || !self.frame_noise.is_finite()
        {
            return Err(Error::Config("synth noise levels must be finite and >= 0".into()));
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Random `rows x cols` matrix whose shorter side is orthonormal
/// (modified Gram-Schmidt), so latents embed isometrically when the
/// feature dim is at least the latent dim.
fn random_projection(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let mut m: Vec<f64> = (0..rows * cols).map(|_| gaussian(rng)).collect();
    let (count, len) = if rows >= cols { (cols, rows) } else { (rows, cols) };
    let get = |m: &[f64], v: usize, k: usize| if rows >= cols { m[k * cols + v] } else { m[v * cols + k] };
    let idx = |v: usize, k: usize| if rows >= cols { k * cols + v } else { v * cols + k };
    for v in 0..count {
        for u in 0..v {
            let proj: f64 = (0..len).map(|k| get(&m, v, k) * get(&m, u, k)).sum();
            for k in 0..len {
                let val = get(&m, u, k);
                m[idx(v, k)] -= proj * val;
            }
        }
        let norm = (0..len).map(|k| get(&m, v, k).powi(2)).sum::<f64>().sqrt();
        for k in 0..len {
            m[idx(v, k)] /= norm;
        }
    }
    m
}

fn project(p: &[f64], z: &[f64], out_dim: usize) -> Vec<f64> {
    (0..out_dim)
        .map(|r| p[r * z.len()..(r + 1) * z.len()].iter().zip(z).map(|(a, b)| a * b).sum())
        .collect()
}

fn sequence(rng: &mut ChaCha8Rng, clean: &[f64], len: usize, noise: f64) -> Result<FeatureSequence> {
    let mut data = Vec::with_capacity(len * clean.len());
    for _ in 0..len {
        for &c in clean {
            let v = c + noise * gaussian(rng);
            data.push(v as f32 as f64);
        }
    }
    FeatureSequence::new(Tensor::matrix(len, clean.len(), data)?)
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.latent_dim;

    let centers: Vec<Vec<f64>> = (0..cfg.n_categories)
        .map(|_| {
            let mut c: Vec<f64> = (0..k).map(|_| gaussian(&mut rng)).collect();
            let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            c.iter_mut().for_each(|v| *v /= norm);
            c
        })
        .collect();
    let pv = random_projection(&mut rng, cfg.video_dim, k);
    let pm = random_projection(&mut rng, cfg.music_dim, k);

    let (lo, hi) = cfg.seq_len_range;
    let mut records = Vec::with_capacity(cfg.n_categories * cfg.pairs_per_category);
    for (category, center) in centers.iter().enumerate() {
        for _ in 0..cfg.pairs_per_category {
            let z: Vec<f64> = center
                .iter()
                .map(|c| c + cfg.cluster_spread * gaussian(&mut rng))
                .collect();
            let lv = rng.random_range(lo..=hi);
            let lm = rng.random_range(lo..=hi);
            let video = sequence(&mut rng, &project(&pv, &z, cfg.video_dim), lv, cfg.frame_noise)?;
            let music = sequence(&mut rng, &project(&pm, &z, cfg.music_dim), lm, cfg.frame_noise)?;
            records.push(PairRecord {
                pair_id: records.len() as u64,
                category: category as u32,
                video,
                music,
            });
        }
    }
    Dataset::new(records, cfg.video_dim, cfg.music_dim)
}
