use super::tape::{NodeId, Tape};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over elements of |analytic - numeric| / max(|analytic|, |numeric|, 1e-12)
    pub max_rel_error: f64,
    /// (parameter index, element index) of the worst element.
    pub worst: Option<(usize, usize)>,
    pub elements: usize,
}

/// Compares tape gradients against central differences
/// `(f(x + h) - f(x - h)) / 2h` for every element of every parameter.
///
/// `build` receives a fresh tape and the leaf ids of `params` (in order) and
/// must return a scalar loss node.
pub fn finite_diff_check<F>(build: F, params: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step h must be positive, got {h}")));
    }
    let eval = |values: &[Tensor], with_grad: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let ids = values
            .iter()
            .map(|v| tape.leaf(v.clone(), with_grad))
            .collect::<Result<Vec<_>>>()?;
        let root = build(&mut tape, &ids)?;
        let loss = tape.scalar(root);
        if !loss.is_finite() {
            return Err(Error::NonFinite("loss while probing".into()));
        }
        let grads = if with_grad {
            let table = tape.backward(root)?;
            ids.iter()
                .zip(values)
                .map(|(id, v)| {
                    table
                        .get(*id)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(v.dims()).unwrap())
                })
                .collect()
        } else {
            vec![]
        };
        Ok((loss, grads))
    };

    let (_, analytic) = eval(params, true)?;
    let mut probe = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        elements: 0,
    };
    for p in 0..params.len() {
        for e in 0..params[p].numel() {
            let orig = params[p].data()[e];
            probe[p].data_mut()[e] = orig + h;
            let (plus, _) = eval(&probe, false)?;
            probe[p].data_mut()[e] = orig - h;
            let (minus, _) = eval(&probe, false)?;
            probe[p].data_mut()[e] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[p].data()[e];
            let denom = a.abs().max(numeric.abs()).max(1e-12);
            let rel = (a - numeric).abs() / denom;
            report.elements += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((p, e));
            }
        }
    }
    Ok(report)
}
