//! Masking policy, AdamW with cosine decay, and the epoch loop.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::checkpoint;
use crate::config::{LossConfig, LossKind, RunConfig, TrainConfig};
use crate::data::{Dataset, EmbeddingRecord};
use crate::error::{Error, Result};
use crate::graph::{Graph, TensorId};
use crate::losses;
use crate::model::{Binding, EpsSource, ModelParams, VisibleSet};
use crate::streams::stream_rng;

/// Draws the visible set for one step: one or two visible modalities with
/// equal probability, then a uniform subset of that size. Targets cover all
/// modalities unless `masked_only` is set, in which case they cover the
/// complement (falling back to all modalities if the complement is empty).
pub fn sample_visible_set(
    rng: &mut ChaCha8Rng,
    modality_count: usize,
    masked_only: bool,
) -> Result<VisibleSet> {
    if modality_count < 2 {
        return Err(Error::InvalidArgument("modality_count must be >= 2".into()));
    }
    let size = if rng.gen_bool(0.5) { 1 } else { 2 };
    let first = rng.gen_range(0..modality_count);
    let visible = if size == 1 {
        vec![first]
    } else {
        let mut second = rng.gen_range(0..modality_count - 1);
        if second >= first {
            second += 1;
        }
        vec![first, second]
    };
    if masked_only && visible.len() < modality_count {
        VisibleSet::with_masked_targets(visible, modality_count)
    } else {
        VisibleSet::with_all_targets(visible, modality_count)
    }
}

/// One step's loss graph, kept together so training, evaluation and the
/// finite-difference checker all run the identical computation.
pub struct LossGraph {
    pub graph: Graph,
    pub binding: Binding,
    pub total: TensorId,
    pub recon_losses: Vec<TensorId>,
    pub vib: TensorId,
}

pub fn build_loss_graph(
    params: &ModelParams,
    batch: &[&EmbeddingRecord],
    vs: &VisibleSet,
    loss_cfg: &LossConfig,
    eps: &mut EpsSource,
) -> Result<LossGraph> {
    let mut g = Graph::new();
    let binding = params.bind(&mut g)?;
    let out = params.forward(&mut g, &binding, batch, vs, eps)?;
    let truth = params.input_leaves(&mut g, batch, &vs.targets)?;
    let mut recon_losses = Vec::with_capacity(vs.targets.len());
    for ((m, recon), (tm, truth_id)) in out.recons.iter().zip(&truth) {
        debug_assert_eq!(m, tm);
        let loss = match loss_cfg.loss_kind {
            LossKind::Contrastive => {
                let d = losses::distance_matrix(&mut g, *recon, *truth_id)?;
                if loss_cfg.verbatim_softmax_ratio {
                    losses::softmax_ratio_loss(
                        &mut g,
                        d,
                        binding.alpha(params),
                        binding.beta(params),
                    )?
                } else {
                    losses::contrastive_recon_loss(
                        &mut g,
                        d,
                        binding.alpha(params),
                        binding.beta(params),
                    )?
                }
            }
            LossKind::Mse => losses::mse_loss(&mut g, *recon, *truth_id)?,
        };
        recon_losses.push(loss);
    }
    let vib = losses::vib_loss(&mut g, out.encode.mu, out.encode.log_var)?;
    let total = losses::total_loss(&mut g, &recon_losses, vib, loss_cfg.lambda)?;
    Ok(LossGraph {
        graph: g,
        binding,
        total,
        recon_losses,
        vib,
    })
}

/// Scalar losses observed at one step, before the update.
#[derive(Clone, Copy, Debug)]
pub struct StepLosses {
    pub total: f64,
    pub recon_mean: f64,
    pub vib: f64,
}

/// AdamW with decoupled weight decay. Decay only touches weight matrices;
/// learned tokens, gains, biases and the loss scalars are exempt.
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl AdamW {
    pub fn new(params: &ModelParams, cfg: &TrainConfig) -> Self {
        AdamW {
            m: params.tensors().map(|(_, t)| vec![0.0; t.data.len()]).collect(),
            v: params.tensors().map(|(_, t)| vec![0.0; t.data.len()]).collect(),
            t: 0,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (meta, tensor)) in params.tensors_mut().enumerate() {
            let decay = if meta.decay { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, theta) in tensor.data.iter_mut().enumerate() {
                let g = grads[i][j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *theta -= lr * (m_hat / (v_hat.sqrt() + self.eps) + decay * *theta);
            }
        }
    }
}

/// Cosine decay from `lr0` at t = 0 to exactly zero at t = total.
pub fn cosine_lr(lr0: f64, t: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos())
}

/// One forward/backward/update. Returns the losses measured before the update.
pub fn train_step(
    params: &mut ModelParams,
    opt: &mut AdamW,
    batch: &[&EmbeddingRecord],
    vs: &VisibleSet,
    loss_cfg: &LossConfig,
    train_cfg: &TrainConfig,
    lr: f64,
    eps_rng: &mut ChaCha8Rng,
) -> Result<StepLosses> {
    if batch.len() < 2 {
        return Err(Error::InvalidArgument(
            "train batch needs at least 2 records".into(),
        ));
    }
    let mut lg = build_loss_graph(params, batch, vs, loss_cfg, &mut EpsSource::Rng(eps_rng))?;
    let losses = read_losses(&lg)?;
    if !losses.total.is_finite() {
        return Err(Error::NonFinite {
            context: format!("training loss (visible = {})", vs.describe()),
        });
    }
    lg.graph.backward(lg.total)?;
    let mut grads: Vec<Vec<f64>> = lg
        .binding
        .ids
        .iter()
        .map(|&id| lg.graph.grad(id).to_vec())
        .collect();
    if !loss_cfg.alpha_beta_learnable {
        grads[params.alpha_index()].iter_mut().for_each(|g| *g = 0.0);
        grads[params.beta_index()].iter_mut().for_each(|g| *g = 0.0);
    }
    if train_cfg.grad_clip > 0.0 {
        let norm: f64 = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        if norm > train_cfg.grad_clip {
            let s = train_cfg.grad_clip / norm;
            for g in grads.iter_mut().flat_map(|g| g.iter_mut()) {
                *g *= s;
            }
        }
    }
    opt.step(params, &grads, lr);
    params.clamp_alpha();
    Ok(losses)
}

fn read_losses(lg: &LossGraph) -> Result<StepLosses> {
    let total = lg.graph.scalar_value(lg.total)?;
    let recon_mean = lg
        .recon_losses
        .iter()
        .map(|&id| lg.graph.scalar_value(id))
        .sum::<Result<f64>>()?
        / lg.recon_losses.len() as f64;
    let vib = lg.graph.scalar_value(lg.vib)?;
    Ok(StepLosses {
        total,
        recon_mean,
        vib,
    })
}

/// Record-weighted mean validation loss under the fixed cyclic masking
/// schedule: batch i sees the singleton visible set {i mod M}, eps = 0.
/// Never mutates the parameters.
pub fn validation_loss(params: &ModelParams, val: &Dataset, cfg: &RunConfig) -> Result<f64> {
    let m = params.config.modality_count;
    let b = cfg.train.batch_size.max(2);
    let mut weighted = 0.0;
    let mut count = 0usize;
    for (i, chunk) in val.records.chunks(b).enumerate() {
        if chunk.len() < 2 {
            continue;
        }
        let vs = if cfg.train.masked_only_targets {
            VisibleSet::with_masked_targets(vec![i % m], m)?
        } else {
            VisibleSet::with_all_targets(vec![i % m], m)?
        };
        let refs: Vec<&EmbeddingRecord> = chunk.iter().collect();
        let lg = build_loss_graph(params, &refs, &vs, &cfg.loss, &mut EpsSource::Zero)?;
        weighted += lg.graph.scalar_value(lg.total)? * chunk.len() as f64;
        count += chunk.len();
    }
    if count == 0 {
        return Err(Error::InvalidArgument("validation set too small".into()));
    }
    Ok(weighted / count as f64)
}

#[derive(Clone, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_total: f64,
    pub train_recon: f64,
    pub train_vib: f64,
    pub val_total: f64,
    pub lr: f64,
}

#[derive(Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub checkpoint_path: PathBuf,
    pub best_epoch: usize,
    pub best_val: f64,
    pub wall_seconds: f64,
    pub seed: u64,
}

/// Full training run. Deterministic under the config seed: the shuffle,
/// masking and latent-noise streams are all derived from it by name.
pub fn fit(
    train: &Dataset,
    val: &Dataset,
    cfg: &RunConfig,
    checkpoint_path: &Path,
) -> Result<TrainReport> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument("empty train or val split".into()));
    }
    let start = Instant::now();
    let mut params = ModelParams::init(
        &cfg.model,
        cfg.loss.alpha_init,
        cfg.loss.beta_init,
        cfg.seed,
    )?;
    let mut opt = AdamW::new(&params, &cfg.train);
    let mut shuffle_rng = stream_rng(cfg.seed, "shuffle");
    let mut mask_rng = stream_rng(cfg.seed, "mask");
    let mut eps_rng = stream_rng(cfg.seed, "epsilon");

    let n = train.len();
    let b = cfg.train.batch_size;
    let full = n / b;
    let steps_per_epoch = full + usize::from(n % b >= 2);
    let total_steps = cfg.train.max_epochs * steps_per_epoch;

    let mut indices: Vec<usize> = (0..n).collect();
    let mut epochs = Vec::with_capacity(cfg.train.max_epochs);
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut step = 0usize;

    for epoch in 0..cfg.train.max_epochs {
        for i in (1..indices.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            indices.swap(i, j);
        }
        let mut sum = StepLosses {
            total: 0.0,
            recon_mean: 0.0,
            vib: 0.0,
        };
        let mut seen = 0usize;
        for chunk in indices.chunks(b) {
            if chunk.len() < 2 {
                continue;
            }
            let vs = sample_visible_set(
                &mut mask_rng,
                cfg.model.modality_count,
                cfg.train.masked_only_targets,
            )?;
            let batch: Vec<&EmbeddingRecord> = chunk.iter().map(|&i| &train.records[i]).collect();
            let lr = cosine_lr(cfg.train.learning_rate, step, total_steps);
            let losses = train_step(
                &mut params,
                &mut opt,
                &batch,
                &vs,
                &cfg.loss,
                &cfg.train,
                lr,
                &mut eps_rng,
            )
            .map_err(|e| match e {
                Error::NonFinite { context } => Error::NonFinite {
                    context: format!("step {step}: {context}"),
                },
                other => other,
            })?;
            sum.total += losses.total * chunk.len() as f64;
            sum.recon_mean += losses.recon_mean * chunk.len() as f64;
            sum.vib += losses.vib * chunk.len() as f64;
            seen += chunk.len();
            step += 1;
        }
        let val_total = validation_loss(&params, val, cfg)?;
        if val_total < best_val {
            best_val = val_total;
            best_epoch = epoch;
            checkpoint::save(&params, cfg, checkpoint_path)?;
        }
        epochs.push(EpochStats {
            epoch,
            train_total: sum.total / seen as f64,
            train_recon: sum.recon_mean / seen as f64,
            train_vib: sum.vib / seen as f64,
            val_total,
            lr: cosine_lr(cfg.train.learning_rate, step.saturating_sub(1), total_steps),
        });
    }

    Ok(TrainReport {
        epochs,
        checkpoint_path: checkpoint_path.to_path_buf(),
        best_epoch,
        best_val,
        wall_seconds: start.elapsed().as_secs_f64(),
        seed: cfg.seed,
    })
}
