//! Differentiable sequence encoders: (N, T, E) sampled features to (N, D)
//! embeddings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{NodeId, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// temporal mean -> affine E->D
    MeanpoolLinear,
    /// temporal mean -> affine E->H -> tanh -> affine H->D
    Mlp,
    /// softmax_t(q . x_t / sqrt(E)) weighted sum -> affine E->D
    Attnpool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub input_dim: usize,
    /// Only read by the MLP.
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    pub output_dim: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_hidden() -> usize {
    256
}

impl EncoderConfig {
    pub fn new(kind: EncoderKind, input_dim: usize, hidden_dim: usize, output_dim: usize, seed: u64) -> Self {
        EncoderConfig {
            kind,
            input_dim,
            hidden_dim,
            output_dim,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || (self.kind == EncoderKind::Mlp && self.hidden_dim == 0) {
            return Err(Error::Config(format!("encoder dims must be >= 1: {self:?}")));
        }
        Ok(())
    }

    /// Parameter names and shapes, in the order they are stored and bound.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (e, h, d) = (self.input_dim, self.hidden_dim, self.output_dim);
        match self.kind {
            EncoderKind::MeanpoolLinear => vec![("weight", vec![e, d]), ("bias", vec![d])],
            EncoderKind::Mlp => vec![
                ("w1", vec![e, h]),
                ("b1", vec![h]),
                ("w2", vec![h, d]),
                ("b2", vec![d]),
            ],
            EncoderKind::Attnpool => vec![("query", vec![e]), ("weight", vec![e, d]), ("bias", vec![d])],
        }
    }
}

/// Named parameter tensors, ordered as in [`EncoderConfig::param_shapes`].
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    tensors: Vec<(String, Tensor)>,
}

impl EncoderParams {
    pub fn from_named(cfg: &EncoderConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let expected = cfg.param_shapes();
        if tensors.len() != expected.len() {
            return Err(Error::ShapeMismatch(format!(
                "{:?} encoder takes {} tensors, got {}",
                cfg.kind,
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, t), (want, dims)) in tensors.iter().zip(&expected) {
            if name != want || t.dims() != dims.as_slice() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {name} {:?}, expected {want} {dims:?}",
                    t.dims()
                )));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("parameter {name}")));
            }
        }
        Ok(EncoderParams { tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn named(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut().map(|(_, t)| t)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Puts every parameter on the tape as a leaf; ids come back in order.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Result<Vec<NodeId>> {
        self.tensors
            .iter()
            .map(|(_, t)| tape.leaf(t.clone(), requires_grad))
            .collect()
    }
}

/// Xavier-uniform weights, zero biases. The attention query counts as an
/// (E, 1) weight.
pub fn init_params(cfg: &EncoderConfig) -> Result<EncoderParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let tensors = cfg
        .param_shapes()
        .into_iter()
        .map(|(name, dims)| {
            let n: usize = dims.iter().product();
            let data = if name.starts_with('b') {
                vec![0.0; n]
            } else {
                let (fan_in, fan_out) = (dims[0], dims.get(1).copied().unwrap_or(1));
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            };
            Ok((name.to_string(), Tensor::new(data, &dims)?))
        })
        .collect::<Result<Vec<_>>>()?;
    EncoderParams::from_named(cfg, tensors)
}

/// Records the encoder forward pass for a (N, T, E) batch node.
pub fn encode(tape: &mut Tape, cfg: &EncoderConfig, params: &[NodeId], batch: NodeId) -> Result<NodeId> {
    let dims = tape.value(batch).dims().to_vec();
    if dims.len() != 3 || dims[2] != cfg.input_dim {
        return Err(Error::ShapeMismatch(format!(
            "encoder expects (N, T, {}), got {dims:?}",
            cfg.input_dim
        )));
    }
    let expected = cfg.param_shapes().len();
    if params.len() != expected {
        return Err(Error::ShapeMismatch(format!("{} parameter nodes, expected {expected}", params.len())));
    }
    match cfg.kind {
        EncoderKind::MeanpoolLinear => {
            let pooled = tape.time_mean(batch)?;
            affine(tape, pooled, params[0], params[1])
        }
        EncoderKind::Mlp => {
            let pooled = tape.time_mean(batch)?;
            let h = affine(tape, pooled, params[0], params[1])?;
            let h = tape.tanh(h)?;
            affine(tape, h, params[2], params[3])
        }
        EncoderKind::Attnpool => {
            let (n, t, e) = (dims[0], dims[1], dims[2]);
            let flat = tape.reshape(batch, &[n * t, e])?;
            let q = tape.reshape(params[0], &[e, 1])?;
            let scores = tape.matmul(flat, q)?;
            let scores = tape.reshape(scores, &[n, t])?;
            let scores = tape.scale(scores, 1.0 / (e as f64).sqrt())?;
            let attn = tape.row_softmax(scores)?;
            let pooled = tape.time_weighted_sum(attn, batch)?;
            affine(tape, pooled, params[1], params[2])
        }
    }
}

fn affine(tape: &mut Tape, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let y = tape.matmul(x, w)?;
    tape.add_row_bias(y, b)
}

/// Encodes a single sampled (T, E) sequence without recording a graph.
pub fn encode_plain(cfg: &EncoderConfig, params: &EncoderParams, seq: &Tensor) -> Result<Vec<f64>> {
    if seq.shape().rank() != 2 || seq.cols() != cfg.input_dim {
        return Err(Error::ShapeMismatch(format!(
            "encoder expects (T, {}), got {:?}",
            cfg.input_dim,
            seq.dims()
        )));
    }
    let p = |name: &str| params.get(name).expect("validated parameter set");
    let (t, e) = (seq.rows(), seq.cols());
    let pooled = match cfg.kind {
        EncoderKind::MeanpoolLinear | EncoderKind::Mlp => crate::data::temporal_mean_of(seq),
        EncoderKind::Attnpool => {
            let q = p("query").data();
            let scale = 1.0 / (e as f64).sqrt();
            let scores: Vec<f64> = (0..t)
                .map(|s| seq.row(s).iter().zip(q).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            let mut pooled = vec![0.0; e];
            for (s, w) in exps.iter().enumerate() {
                let a = w / total;
                pooled.iter_mut().zip(seq.row(s)).for_each(|(o, v)| *o += a * v);
            }
            pooled
        }
    };
    Ok(match cfg.kind {
        EncoderKind::MeanpoolLinear | EncoderKind::Attnpool => dense(&pooled, p("weight"), p("bias")),
        EncoderKind::Mlp => {
            let h: Vec<f64> = dense(&pooled, p("w1"), p("b1")).into_iter().map(f64::tanh).collect();
            dense(&h, p("w2"), p("b2"))
        }
    })
}

fn dense(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let d = w.cols();
    let mut out = b.data().to_vec();
    for (i, &xi) in x.iter().enumerate() {
        out.iter_mut().zip(w.row(i)).for_each(|(o, wv)| *o += xi * wv);
    }
    debug_assert_eq!(out.len(), d);
    out
}
