//! Central finite-difference validation of the full model gradient.
//!
//! The checker builds the exact training loss once for the analytic
//! gradients, then perturbs every parameter scalar in both directions and
//! replays the identical forward pass (same batch, same visible set, same
//! latent noise) to form the numeric estimate.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::LossConfig;
use crate::data::EmbeddingRecord;
use crate::error::{Error, Result};
use crate::model::{EpsSource, ModelParams, VisibleSet};
use crate::streams::stream_rng;
use crate::trainer::build_loss_graph;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over parameters of |analytic - numeric| / max(1, |numeric|).
    pub max_rel_err: f64,
    pub worst_param: String,
    pub scalars_checked: usize,
}

pub fn grad_check(
    params: &mut ModelParams,
    batch: &[&EmbeddingRecord],
    vs: &VisibleSet,
    loss_cfg: &LossConfig,
    step: f64,
    eps_seed: u64,
) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&step) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {step} outside [1e-7, 1e-3]"
        )));
    }
    let e = params.config.encoder_dim;
    let mut eps_rng = stream_rng(eps_seed, "gradcheck-eps");
    let fixed_eps: Vec<Vec<f64>> = vs
        .targets
        .iter()
        .map(|_| {
            (0..batch.len() * e)
                .map(|_| eps_rng.sample(StandardNormal))
                .collect()
        })
        .collect();

    // Analytic gradients from one backward pass.
    let mut lg = build_loss_graph(params, batch, vs, loss_cfg, &mut EpsSource::Fixed(&fixed_eps))?;
    lg.graph.backward(lg.total)?;
    let analytic: Vec<Vec<f64>> = lg
        .binding
        .ids
        .iter()
        .map(|&id| lg.graph.grad(id).to_vec())
        .collect();
    drop(lg);

    let names: Vec<String> = params.tensors().map(|(m, _)| m.name.clone()).collect();
    let mut max_rel = 0.0f64;
    let mut worst = String::from("-");
    let mut checked = 0usize;

    for ti in 0..params.tensor_count() {
        for j in 0..params.tensor(ti).data.len() {
            let original = params.tensor(ti).data[j];

            params.tensor_mut(ti).data[j] = original + step;
            let plus = eval_loss(params, batch, vs, loss_cfg, &fixed_eps)?;
            params.tensor_mut(ti).data[j] = original - step;
            let minus = eval_loss(params, batch, vs, loss_cfg, &fixed_eps)?;
            params.tensor_mut(ti).data[j] = original;

            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("perturbed loss at {}[{j}]", names[ti]),
                });
            }
            let numeric = (plus - minus) / (2.0 * step);
            let rel = (analytic[ti][j] - numeric).abs() / numeric.abs().max(1.0);
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{}[{j}]", names[ti]);
            }
            checked += 1;
        }
    }

    Ok(GradCheckReport {
        max_rel_err: max_rel,
        worst_param: worst,
        scalars_checked: checked,
    })
}

fn eval_loss(
    params: &ModelParams,
    batch: &[&EmbeddingRecord],
    vs: &VisibleSet,
    loss_cfg: &LossConfig,
    fixed_eps: &[Vec<f64>],
) -> Result<f64> {
    let lg = build_loss_graph(params, batch, vs, loss_cfg, &mut EpsSource::Fixed(fixed_eps))?;
    lg.graph.scalar_value(lg.total)
}
