use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// L frames of E-dimensional features for one media item.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    frames: Tensor,
}

impl FeatureSequence {
    pub fn new(frames: Tensor) -> Result<Self> {
        if frames.shape().rank() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "feature sequence must be L x E, got {:?}",
                frames.dims()
            )));
        }
        if !frames.is_finite() {
            return Err(Error::NonFinite("feature sequence".into()));
        }
        Ok(FeatureSequence { frames })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Tensor::from_rows(rows)?)
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        self.frames.row(i)
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }
}

/// How a variable-length sequence is reduced to a fixed number of frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum Sampling {
    /// Global sparse: `clips` even clips, each averaged.
    Gs { clips: usize },
    /// Fixed duration: one centered window of `window` frames.
    Fd { window: usize },
}

impl Sampling {
    pub fn frames(&self) -> usize {
        match *self {
            Sampling::Gs { clips } => clips,
            Sampling::Fd { window } => window,
        }
    }

    pub fn apply(&self, seq: &FeatureSequence) -> Result<Tensor> {
        match *self {
            Sampling::Gs { clips } => gs_sample(seq, clips),
            Sampling::Fd { window } => fd_sample(seq, window),
        }
    }
}

/// Splits the sequence into `t` even clips and averages each one. Clip `i`
/// spans frames `[floor(i*L/t), floor((i+1)*L/t))`; when that range is empty
/// (L < t) the clip is the single frame at `min(floor(i*L/t), L-1)`.
pub fn gs_sample(seq: &FeatureSequence, t: usize) -> Result<Tensor> {
    if t == 0 {
        return Err(Error::InvalidArgument("clip count must be >= 1".into()));
    }
    let (l, e) = (seq.len(), seq.dim());
    let mut out = Vec::with_capacity(t * e);
    for i in 0..t {
        let start = i * l / t;
        let end = (i + 1) * l / t;
        if start >= end {
            out.extend_from_slice(seq.frame(start.min(l - 1)));
            continue;
        }
        let mut acc = vec![0.0; e];
        for f in start..end {
            acc.iter_mut().zip(seq.frame(f)).for_each(|(a, v)| *a += v);
        }
        let n = (end - start) as f64;
        out.extend(acc.into_iter().map(|v| v / n));
    }
    Tensor::matrix(t, e, out)
}

/// Centered contiguous window of `w` frames starting at `floor((L-w)/2)`.
/// Shorter sequences are edge-padded, `floor((w-L)/2)` copies of the first
/// frame in front and the rest as copies of the last frame behind.
pub fn fd_sample(seq: &FeatureSequence, w: usize) -> Result<Tensor> {
    if w == 0 {
        return Err(Error::InvalidArgument("window length must be >= 1".into()));
    }
    let (l, e) = (seq.len(), seq.dim());
    let mut out = Vec::with_capacity(w * e);
    if l >= w {
        let start = (l - w) / 2;
        for f in start..start + w {
            out.extend_from_slice(seq.frame(f));
        }
    } else {
        let front = (w - l) / 2;
        let back = w - l - front;
        for _ in 0..front {
            out.extend_from_slice(seq.frame(0));
        }
        for f in 0..l {
            out.extend_from_slice(seq.frame(f));
        }
        for _ in 0..back {
            out.extend_from_slice(seq.frame(l - 1));
        }
    }
    Tensor::matrix(w, e, out)
}

pub fn temporal_mean(seq: &FeatureSequence) -> Vec<f64> {
    temporal_mean_of(seq.frames())
}

pub fn temporal_mean_of(m: &Tensor) -> Vec<f64> {
    let (l, e) = (m.rows(), m.cols());
    let mut acc = vec![0.0; e];
    for i in 0..l {
        acc.iter_mut().zip(m.row(i)).for_each(|(a, v)| *a += v);
    }
    acc.into_iter().map(|v| v / l as f64).collect()
}
