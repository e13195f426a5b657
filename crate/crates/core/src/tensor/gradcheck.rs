//! Central finite-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Graph, NodeId, Result, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Gradients smaller than this in every entry are compared absolutely.
const SCALE_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub index: usize,
    pub shape: Vec<usize>,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }
}

/// Compares analytic gradients of `build` against central differences.
///
/// `build` receives a fresh graph with every entry of `inputs` registered as a
/// trainable leaf and returns an output node. Non-scalar outputs are reduced
/// with a fixed random projection so every output entry contributes.
pub fn grad_check<F>(
    name: &str,
    inputs: &[Tensor],
    tolerance: f64,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut projection: Option<Tensor> = None;
    let mut forward = |values: &[Tensor], with_grad: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &ids)?;
        let loss = if g.value(out).numel() == 1 {
            out
        } else {
            let shape = g.shape(out).to_vec();
            let proj = projection.get_or_insert_with(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
                Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0))
            });
            let p = g.constant(proj.clone());
            let prod = g.mul(out, p)?;
            g.sum(prod)
        };
        let value = g.value(loss).item();
        if !with_grad {
            return Ok((value, vec![]));
        }
        g.backward(loss)?;
        let grads = ids
            .iter()
            .map(|&i| g.grad(i).expect("leaf grad").clone())
            .collect();
        Ok((value, grads))
    };

    let (_, analytic) = forward(inputs, true)?;
    let mut values = inputs.to_vec();
    let mut params = Vec::with_capacity(inputs.len());
    for (pi, grad) in analytic.iter().enumerate() {
        let mut numeric = Tensor::zeros(grad.shape());
        for e in 0..grad.numel() {
            let orig = values[pi].data()[e];
            values[pi].data_mut()[e] = orig + DEFAULT_EPS;
            let (plus, _) = forward(&values, false)?;
            values[pi].data_mut()[e] = orig - DEFAULT_EPS;
            let (minus, _) = forward(&values, false)?;
            values[pi].data_mut()[e] = orig;
            numeric.data_mut()[e] = (plus - minus) / (2.0 * DEFAULT_EPS);
        }
        let scale = grad.max_abs().max(numeric.max_abs()).max(SCALE_FLOOR);
        let err = grad.max_abs_diff(&numeric) / scale;
        params.push(ParamCheck {
            index: pi,
            shape: grad.shape().to_vec(),
            max_rel_error: err,
            passed: err < tolerance,
        });
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        tolerance,
        params,
    })
}
