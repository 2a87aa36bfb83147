use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::Params;
use super::tape::{NodeId, Tape};
use super::tensor::Tensor;
use crate::error::Result;
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Relative error with a small absolute floor so that two near-zero
/// gradients compare equal.
pub fn rel_err(a: f64, b: f64) -> f64 {
    math::abs(a - b) / math::abs(a).max(math::abs(b)).max(1e-6)
}

fn probe_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        (0..max).map(|k| k * len / max).collect()
    }
}

/// Compares tape gradients of `sum(r * f(inputs))` for a fixed random `r`
/// against central differences, over trainable parameters and inputs.
/// At most `max_per_tensor` entries of each tensor are probed.
pub fn grad_check<F>(params: &Params, inputs: &[Tensor], f: F, h: f64, max_per_tensor: usize) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let run = |p: &Params, xs: &[Tensor]| -> Result<Tensor> {
        let mut tape = Tape::new(p);
        let ids = xs.iter().map(|x| tape.input(x.clone())).collect::<Result<Vec<_>>>()?;
        let y = f(&mut tape, &ids)?;
        Ok(tape.value(y).clone())
    };
    let y0 = run(params, inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let r = Tensor::new(y0.shape(), (0..y0.len()).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let loss = |p: &Params, xs: &[Tensor]| -> Result<f64> { Ok(run(p, xs)?.dot(&r)) };

    let mut grads = params.zero_grads();
    let mut tape = Tape::new(params);
    let ids = inputs.iter().map(|x| tape.input(x.clone())).collect::<Result<Vec<_>>>()?;
    let y = f(&mut tape, &ids)?;
    let node_grads = tape.backward(&[(y, &r)], &mut grads)?;

    let mut report = GradCheckReport { max_rel_err: 0.0, checked: 0 };
    let mut p = params.clone();
    for id in params.ids().filter(|id| params.is_trainable(*id)) {
        for k in probe_indices(params.value(id).len(), max_per_tensor) {
            let orig = params.value(id).data()[k];
            p.value_mut(id).data_mut()[k] = orig + h;
            let lp = loss(&p, inputs)?;
            p.value_mut(id).data_mut()[k] = orig - h;
            let lm = loss(&p, inputs)?;
            p.value_mut(id).data_mut()[k] = orig;
            let fd = (lp - lm) / (2.0 * h);
            report.max_rel_err = report.max_rel_err.max(rel_err(grads.get(id).data()[k], fd));
            report.checked += 1;
        }
    }
    let mut xs = inputs.to_vec();
    for (i, id) in ids.iter().enumerate() {
        let analytic = node_grads[id.index()].clone().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for k in probe_indices(inputs[i].len(), max_per_tensor) {
            let orig = inputs[i].data()[k];
            xs[i].data_mut()[k] = orig + h;
            let lp = loss(params, &xs)?;
            xs[i].data_mut()[k] = orig - h;
            let lm = loss(params, &xs)?;
            xs[i].data_mut()[k] = orig;
            let fd = (lp - lm) / (2.0 * h);
            report.max_rel_err = report.max_rel_err.max(rel_err(analytic.data()[k], fd));
            report.checked += 1;
        }
    }
    Ok(report)
}
