//! Finite-difference checks of whole models.

use rand::Rng;

use crate::model::{init_model, ModelConfig};
use crate::nn::{Bound, ForwardCtx};
use crate::rng::{substream, trunc_normal};
use crate::tensor::{grad_check, GradCheckReport};
use crate::tensor::Tensor;
use crate::tokenizers::{TokenInput, TokenizerConfig};
use crate::{Error, Result};

/// Default finite-difference step.
pub const STEP: f64 = 1e-5;
/// Default relative-error tolerance.
pub const TOL: f64 = 1e-4;

/// Checks the cross-entropy gradient of every parameter of an id-sequence
/// model on a random batch of `batch` full-length sequences.
///
/// Parameters are jittered away from their initial values first so that
/// zero-initialised heads do not mask upstream gradients.
pub fn model_grad_check(config: &ModelConfig, seed: u64, batch: usize, step: f64, tol: f64) -> Result<GradCheckReport> {
    let TokenizerConfig::Ids { vocab, max_len } = config.tokenizer else {
        return Err(Error::Config("gradient check expects an id tokenizer".into()));
    };
    let model = init_model::<f64>(config, seed)?;
    let mut rng = substream(seed, "gradcheck");
    let ids: Vec<Vec<usize>> = (0..batch)
        .map(|b| {
            let len = if b == 0 { max_len } else { rng.gen_range(1..=max_len) };
            (0..len).map(|_| rng.gen_range(0..vocab)).collect()
        })
        .collect();
    let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..config.num_classes)).collect();
    let params: Vec<(String, Tensor<f64>)> = model
        .params
        .entries()
        .iter()
        .map(|e| {
            let mut v = e.value.clone();
            v.data_mut().iter_mut().for_each(|x| *x += trunc_normal(&mut rng, 0.2));
            (e.name.clone(), v)
        })
        .collect();
    let input = TokenInput::Ids(ids);
    let report = grad_check(
        |_, vars| {
            let p = Bound::from_vars(vars.to_vec());
            let logits = model.logits(&p, &ForwardCtx::eval(), &input).map_err(|e| match e {
                Error::Tensor(t) => t,
                other => crate::TensorError::Invalid {
                    op: "model",
                    msg: other.to_string(),
                },
            })?;
            logits.cross_entropy(&labels)
        },
        &params,
        step,
        tol,
    )?;
    Ok(report)
}
