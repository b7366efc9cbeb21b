//! The gradient-fidelity suite: every differentiable tape op, every encoder,
//! and the composed loss, each checked against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::encoders::{init_params, EncoderConfig, EncoderKind};
use crate::error::Result;
use crate::losses::{ii_loss, inter_loss, intra_loss_modality, intra_sim_post, BoundEncoder, LossWeights, PairBatch};
use crate::numerics::{finite_diff_check, NodeId, OpKind, Tape, Tensor};

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckRow {
    pub name: String,
    pub max_rel_error: f64,
    pub elements: usize,
}

impl GradCheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

struct Gen(ChaCha8Rng);

impl Gen {
    fn normal(&mut self, dims: &[usize]) -> Tensor {
        let n = dims.iter().product();
        Tensor::new((0..n).map(|_| self.0.sample(StandardNormal)).collect(), dims).unwrap()
    }

    fn positive(&mut self, dims: &[usize]) -> Tensor {
        let n = dims.iter().product();
        Tensor::new((0..n).map(|_| self.0.random_range(0.5..2.0)).collect(), dims).unwrap()
    }
}

type OpBuilder = Box<dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>>;

/// Projects an op output onto a fixed random direction so that no gradient
/// element is structurally zero.
fn weighted(probe: Tensor, f: impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId> + 'static) -> OpBuilder {
    Box::new(move |tape, p| {
        let out = f(tape, p)?;
        let w = tape.constant(probe.reshape(tape.value(out).dims())?)?;
        let prod = tape.mul(out, w)?;
        tape.sum(prod)
    })
}

fn op_cases(g: &mut Gen) -> Vec<(&'static str, OpBuilder, Vec<Tensor>)> {
    let mut cases: Vec<(&'static str, OpBuilder, Vec<Tensor>)> = Vec::new();
    macro_rules! case {
        ($name:expr, $out:expr, [$($p:expr),*], $f:expr) => {{
            let probe = g.normal(&$out);
            let params = vec![$($p),*];
            cases.push(($name, weighted(probe, $f), params));
        }};
    }
    case!("matmul", [3, 2], [g.normal(&[3, 4]), g.normal(&[4, 2])], |t, p| t.matmul(p[0], p[1]));
    case!("add", [2, 3], [g.normal(&[2, 3]), g.normal(&[2, 3])], |t, p| t.add(p[0], p[1]));
    case!("sub", [2, 3], [g.normal(&[2, 3]), g.normal(&[2, 3])], |t, p| t.sub(p[0], p[1]));
    case!("mul", [2, 3], [g.normal(&[2, 3]), g.normal(&[2, 3])], |t, p| t.mul(p[0], p[1]));
    case!("scale", [2, 3], [g.normal(&[2, 3])], |t, p| t.scale(p[0], -1.7));
    case!("add_const", [2, 3], [g.normal(&[2, 3])], |t, p| t.add_const(p[0], 0.4));
    case!("mul_scalar", [2, 3], [g.normal(&[2, 3]), g.normal(&[1])], |t, p| t.mul_scalar(p[0], p[1]));
    case!("exp", [2, 3], [g.normal(&[2, 3])], |t, p| t.exp(p[0]));
    case!("log", [2, 3], [g.positive(&[2, 3])], |t, p| t.log(p[0]));
    case!("tanh", [2, 3], [g.normal(&[2, 3])], |t, p| t.tanh(p[0]));
    case!("transpose", [3, 2], [g.normal(&[2, 3])], |t, p| t.transpose(p[0]));
    case!("reshape", [3, 2], [g.normal(&[2, 3])], |t, p| t.reshape(p[0], &[3, 2]));
    case!("add_row_bias", [3, 4], [g.normal(&[3, 4]), g.normal(&[4])], |t, p| t.add_row_bias(p[0], p[1]));
    case!("row_l2_normalize", [3, 4], [g.normal(&[3, 4])], |t, p| t.row_l2_normalize(p[0]));
    case!("cosine_sim_matrix", [3, 2], [g.normal(&[3, 4]), g.normal(&[2, 4])], |t, p| t.cosine_sim_matrix(p[0], p[1]));
    case!("row_softmax", [3, 4], [g.normal(&[3, 4])], |t, p| t.row_softmax(p[0]));
    case!("row_log_softmax_ce", [1], [g.normal(&[3, 3])], |t, p| t.row_log_softmax_ce(p[0], &[0, 1, 2]));
    case!("sum", [1], [g.normal(&[2, 3])], |t, p| t.sum(p[0]));
    case!("mean", [1], [g.normal(&[2, 3])], |t, p| t.mean(p[0]));
    case!("row_sum", [3], [g.normal(&[3, 4])], |t, p| t.row_sum(p[0]));
    case!("time_mean", [2, 3], [g.normal(&[2, 4, 3])], |t, p| t.time_mean(p[0]));
    case!("time_weighted_sum", [2, 3], [g.normal(&[2, 4]), g.normal(&[2, 4, 3])], |t, p| t.time_weighted_sum(p[0], p[1]));
    cases
}

fn encoder_pair(kind: EncoderKind, seed: u64) -> Result<(EncoderConfig, EncoderConfig, Vec<Tensor>, usize)> {
    let v = EncoderConfig::new(kind, 3, 4, 3, seed);
    let m = EncoderConfig::new(kind, 4, 4, 3, seed + 1);
    let mut params: Vec<Tensor> = Vec::new();
    for cfg in [&v, &m] {
        let p = init_params(cfg)?;
        params.extend(p.named().iter().map(|(_, t)| t.clone()));
    }
    let split = v.param_shapes().len();
    Ok((v, m, params, split))
}

/// Runs the whole suite. `fault` skews one backward rule on every tape, for
/// demonstrating that the suite fails loudly.
pub fn run_grad_checks(fault: Option<OpKind>) -> Result<Vec<GradCheckRow>> {
    let mut g = Gen(ChaCha8Rng::seed_from_u64(20_240_601));
    let mut rows = Vec::new();
    let mut record = |name: String, build: &dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>, params: &[Tensor]| -> Result<()> {
        let report = finite_diff_check(
            |tape, ids| {
                tape.inject_backward_fault(fault);
                build(tape, ids)
            },
            params,
            STEP,
        )?;
        rows.push(GradCheckRow {
            name,
            max_rel_error: report.max_rel_error,
            elements: report.elements,
        });
        Ok(())
    };

    for (name, build, params) in op_cases(&mut g) {
        record(name.to_string(), &*build, &params)?;
    }

    let w = LossWeights::default();
    let n = 4;
    let (v_emb, m_emb) = (g.normal(&[n, 5]), g.normal(&[n, 5]));
    record(
        "inter_loss".into(),
        &|t, p| inter_loss(t, p[0], p[1], p[2], &w),
        &[v_emb.clone(), m_emb, Tensor::scalar(0.07)],
    )?;
    let pre = crate::losses::intra_sim_pre(&g.normal(&[n, 6]))?;
    record(
        "intra_loss".into(),
        &move |t, p| {
            let s_pre = t.constant(pre.clone())?;
            let post = intra_sim_post(t, p[0])?;
            intra_loss_modality(t, s_pre, post)
        },
        &[v_emb],
    )?;

    for kind in [EncoderKind::MeanpoolLinear, EncoderKind::Mlp, EncoderKind::Attnpool] {
        let (vc, _, params, split) = encoder_pair(kind, 5)?;
        let x = g.normal(&[3, 4, 3]);
        let probe = g.normal(&[3, 3]);
        let name = format!("encode[{}]", kind_name(kind));
        record(
            name,
            &move |t, p| {
                let xi = t.constant(x.clone())?;
                let out = crate::encoders::encode(t, &vc, &p[..split], xi)?;
                let w = t.constant(probe.clone())?;
                let prod = t.mul(out, w)?;
                t.sum(prod)
            },
            &params[..split],
        )?;
    }

    for kind in [EncoderKind::MeanpoolLinear, EncoderKind::Mlp, EncoderKind::Attnpool] {
        for n in [2usize, 4, 8] {
            let (vc, mc, mut params, split) = encoder_pair(kind, n as u64)?;
            let batch = PairBatch {
                video: g.normal(&[n, 3, 3]),
                music: g.normal(&[n, 3, 4]),
            };
            let mid = params.len();
            params.push(Tensor::scalar(0.07));
            let w = w.clone();
            record(
                format!("ii_loss[{},N={n}]", kind_name(kind)),
                &move |t, p| {
                    let nodes = ii_loss(
                        t,
                        &batch,
                        BoundEncoder {
                            cfg: &vc,
                            params: &p[..split],
                        },
                        BoundEncoder {
                            cfg: &mc,
                            params: &p[split..mid],
                        },
                        p[mid],
                        &w,
                    )?;
                    Ok(nodes.total)
                },
                &params,
            )?;
        }
    }
    Ok(rows)
}

fn kind_name(kind: EncoderKind) -> &'static str {
    match kind {
        EncoderKind::MeanpoolLinear => "meanpool_linear",
        EncoderKind::Mlp => "mlp",
        EncoderKind::Attnpool => "attnpool",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        let rows = run_grad_checks(None).unwrap();
        for r in &rows {
            assert!(r.passed(), "{} rel err {:e}", r.name, r.max_rel_error);
        }
        assert!(rows.iter().any(|r| r.name.starts_with("ii_loss")));
    }

    #[test]
    fn corrupted_rule_is_caught() {
        let rows = run_grad_checks(Some(OpKind::RowL2Normalize)).unwrap();
        assert!(rows.iter().any(|r| !r.passed()));
        assert!(rows.iter().find(|r| r.name == "tanh").unwrap().passed());
    }
}
