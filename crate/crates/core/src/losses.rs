//! Inter-modal contrastive loss, intra-modal structure-preservation loss,
//! and their weighted combination.

use serde::{Deserialize, Serialize};

use crate::encoders::{encode, EncoderConfig};
use crate::error::{Error, Result};
use crate::numerics::{NodeId, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Row (video -> music) cross-entropy weight.
    pub alpha1: f64,
    /// Column (music -> video) cross-entropy weight.
    pub alpha2: f64,
    /// Video intra weight.
    pub beta1: f64,
    /// Music intra weight.
    pub beta2: f64,
    /// Inter term weight in the total.
    pub gamma1: f64,
    /// Intra term weight in the total; 0 gives the inter-only baseline.
    pub gamma2: f64,
    /// Row/column weights of the unsimplified intra form.
    pub delta1: f64,
    pub delta2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha1: 0.5,
            alpha2: 0.5,
            beta1: 0.5,
            beta2: 0.5,
            gamma1: 1.0,
            gamma2: 3.0,
            delta1: 0.5,
            delta2: 0.5,
        }
    }
}

impl LossWeights {
    pub fn inter_only() -> Self {
        LossWeights {
            gamma2: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.alpha1, self.alpha2, self.beta1, self.beta2, self.gamma1, self.gamma2, self.delta1, self.delta2,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }

    /// Weighted total from component values, in the same operation order the
    /// tape uses.
    pub fn combine(&self, inter: f64, intra_v: f64, intra_m: f64) -> f64 {
        0.5 * (self.gamma1 * inter + self.gamma2 * (self.beta1 * intra_v + self.beta2 * intra_m))
    }
}

/// Learnable log logit scale `n_t`; logits are `exp(n_t) * S`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Temperature {
    pub log_scale: f64,
}

impl Temperature {
    pub const INIT: f64 = 0.07;
    pub const MIN_LOG_SCALE: f64 = -1.0;
    /// ln(100)
    pub const MAX_LOG_SCALE: f64 = 4.605_170_185_988_092;

    pub fn new(log_scale: f64) -> Self {
        Temperature { log_scale }
    }

    pub fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    /// Keeps `exp(n_t)` inside `[e^-1, 100]`.
    pub fn clamp(&mut self) {
        self.log_scale = self.log_scale.clamp(Self::MIN_LOG_SCALE, Self::MAX_LOG_SCALE);
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Result<NodeId> {
        tape.leaf(Tensor::scalar(self.log_scale), requires_grad)
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Temperature::new(Self::INIT)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub inter: f64,
    pub intra_v: f64,
    pub intra_m: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `beta1 * intra_v + beta2 * intra_m`
    pub fn intra(&self, w: &LossWeights) -> f64 {
        w.beta1 * self.intra_v + w.beta2 * self.intra_m
    }
}

/// Tape nodes of one batch's loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossNodes {
    pub inter: NodeId,
    pub intra_v: NodeId,
    pub intra_m: NodeId,
    pub total: NodeId,
}

impl LossNodes {
    pub fn values(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            inter: tape.scalar(self.inter),
            intra_v: tape.scalar(self.intra_v),
            intra_m: tape.scalar(self.intra_m),
            total: tape.scalar(self.total),
        }
    }
}

/// `(alpha1 * sum_i CE(row i) + alpha2 * sum_j CE(col j)) / N` over the
/// logits `exp(n_t) * cos(v_i, m_j)`, with the matching pair as target.
pub fn inter_loss(tape: &mut Tape, v_emb: NodeId, m_emb: NodeId, log_scale: NodeId, w: &LossWeights) -> Result<NodeId> {
    let sim = tape.cosine_sim_matrix(v_emb, m_emb)?;
    let n = tape.value(sim).rows();
    if tape.value(sim).cols() != n {
        return Err(Error::ShapeMismatch(format!("{n} videos vs {} music", tape.value(sim).cols())));
    }
    let scale = tape.exp(log_scale)?;
    let logits = tape.mul_scalar(sim, scale)?;
    let diag: Vec<usize> = (0..n).collect();
    let rows = tape.row_log_softmax_ce(logits, &diag)?;
    let logits_t = tape.transpose(logits)?;
    let cols = tape.row_log_softmax_ce(logits_t, &diag)?;
    let rows = tape.scale(rows, w.alpha1)?;
    let cols = tape.scale(cols, w.alpha2)?;
    tape.add(rows, cols)
}

/// Cosine similarity between pre-encoder temporal means. Constant input to
/// the intra loss: the pretrained features carry no gradient.
pub fn intra_sim_pre(mean_feats: &Tensor) -> Result<Tensor> {
    crate::numerics::cosine_matrix_of(mean_feats, mean_feats)
}

pub fn intra_sim_post(tape: &mut Tape, emb: NodeId) -> Result<NodeId> {
    tape.cosine_sim_matrix(emb, emb)
}

/// `(1/N) sum_i (1 - cos(s_pre[i, :], s_post[i, :]))`.
pub fn intra_loss_modality(tape: &mut Tape, s_pre: NodeId, s_post: NodeId) -> Result<NodeId> {
    let cos = row_cosines(tape, s_pre, s_post)?;
    let m = tape.mean(cos)?;
    let neg = tape.scale(m, -1.0)?;
    tape.add_const(neg, 1.0)
}

/// Unsimplified form with separate row and column terms:
/// `delta1/N sum_i (1 - cos rows_i) + delta2/N sum_j (1 - cos cols_j)`.
/// Equals [`intra_loss_modality`] when both matrices are symmetric and
/// `delta1 + delta2 = 1`.
pub fn intra_loss_general(tape: &mut Tape, s_pre: NodeId, s_post: NodeId, delta1: f64, delta2: f64) -> Result<NodeId> {
    let rows = row_cosines(tape, s_pre, s_post)?;
    let pre_t = tape.transpose(s_pre)?;
    let post_t = tape.transpose(s_post)?;
    let cols = row_cosines(tape, pre_t, post_t)?;
    let mut terms = Vec::new();
    for (c, delta) in [(rows, delta1), (cols, delta2)] {
        let m = tape.mean(c)?;
        let neg = tape.scale(m, -delta)?;
        terms.push(tape.add_const(neg, delta)?);
    }
    tape.add(terms[0], terms[1])
}

fn row_cosines(tape: &mut Tape, a: NodeId, b: NodeId) -> Result<NodeId> {
    if tape.value(a).dims() != tape.value(b).dims() || tape.value(a).shape().rank() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "intra similarity matrices {:?} vs {:?}",
            tape.value(a).dims(),
            tape.value(b).dims()
        )));
    }
    let an = tape.row_l2_normalize(a)?;
    let bn = tape.row_l2_normalize(b)?;
    let prod = tape.mul(an, bn)?;
    tape.row_sum(prod)
}

/// One mini-batch of N matched pairs after sampling: (N, T, E_v) video and
/// (N, T, E_m) music.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub video: Tensor,
    pub music: Tensor,
}

/// An encoder's config together with its parameter nodes on the tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundEncoder<'a> {
    pub cfg: &'a EncoderConfig,
    pub params: &'a [NodeId],
}

/// Encodes both modalities and records the full weighted loss.
pub fn ii_loss(
    tape: &mut Tape,
    batch: &PairBatch,
    video: BoundEncoder<'_>,
    music: BoundEncoder<'_>,
    log_scale: NodeId,
    w: &LossWeights,
) -> Result<LossNodes> {
    let v_in = tape.constant(batch.video.clone())?;
    let m_in = tape.constant(batch.music.clone())?;
    let v_emb = encode(tape, video.cfg, video.params, v_in)?;
    let m_emb = encode(tape, music.cfg, music.params, m_in)?;
    let inter = inter_loss(tape, v_emb, m_emb, log_scale, w)?;

    let mut intra = [None, None];
    for (slot, (input, emb)) in intra.iter_mut().zip([(&batch.video, v_emb), (&batch.music, m_emb)]) {
        let pre = intra_sim_pre(&sequence_means(input)?)?;
        let pre = tape.constant(pre)?;
        let post = intra_sim_post(tape, emb)?;
        *slot = Some(intra_loss_modality(tape, pre, post)?);
    }
    let (intra_v, intra_m) = (intra[0].unwrap(), intra[1].unwrap());

    let a = tape.scale(intra_v, w.beta1)?;
    let b = tape.scale(intra_m, w.beta2)?;
    let intra_sum = tape.add(a, b)?;
    let inter_w = tape.scale(inter, w.gamma1)?;
    let intra_w = tape.scale(intra_sum, w.gamma2)?;
    let sum = tape.add(inter_w, intra_w)?;
    let total = tape.scale(sum, 0.5)?;
    Ok(LossNodes {
        inter,
        intra_v,
        intra_m,
        total,
    })
}

/// (N, T, E) -> (N, E) temporal means.
pub fn sequence_means(batch: &Tensor) -> Result<Tensor> {
    let [n, t, e] = *batch.dims() else {
        return Err(Error::ShapeMismatch(format!("expected (N,T,E), got {:?}", batch.dims())));
    };
    let x = batch.data();
    let mut out = vec![0.0; n * e];
    for i in 0..n {
        for s in 0..t {
            let frame = &x[(i * t + s) * e..(i * t + s + 1) * e];
            out[i * e..(i + 1) * e].iter_mut().zip(frame).for_each(|(o, v)| *o += v);
        }
    }
    out.iter_mut().for_each(|v| *v /= t as f64);
    Tensor::matrix(n, e, out)
}
