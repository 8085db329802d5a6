//! The masked multimodal embedding autoencoder.
//!
//! Visible modality embeddings are projected to encoder width, tagged with a
//! learned modality identifier, and concatenated with the learned `[mu]`,
//! `[sigma]` and register tokens. A stack of pre-norm self-attention blocks
//! encodes them; the outputs at the `[mu]` / `[sigma]` positions parameterize
//! a joint Gaussian over the latent. Samples drawn via the reparameterization
//! trick feed per-modality two-layer decoders that reconstruct the original
//! embeddings. Masked modalities are dropped before encoding and contribute
//! nothing to any output.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{Activation, ModelConfig};
use crate::data::EmbeddingRecord;
use crate::error::{Error, Result};
use crate::graph::{Graph, TensorId};
use crate::streams::stream_rng;

/// Conventional names of the first six modalities.
pub const MODALITY_NAMES: [&str; 6] = ["image", "satellite", "location", "audio", "text", "env"];

/// Index into the ordered modality set.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Hash)]
pub struct ModalityId(pub usize);

pub fn modality_name(m: usize) -> String {
    MODALITY_NAMES
        .get(m)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("m{m}"))
}

pub fn parse_modality(s: &str, modality_count: usize) -> Result<usize> {
    if let Some(i) = MODALITY_NAMES.iter().position(|n| *n == s) {
        if i < modality_count {
            return Ok(i);
        }
    }
    if let Some(rest) = s.strip_prefix('m') {
        if let Ok(i) = rest.parse::<usize>() {
            if i < modality_count {
                return Ok(i);
            }
        }
    }
    Err(Error::InvalidArgument(format!(
        "unknown modality {s:?} (have {modality_count} modalities)"
    )))
}

/// The modalities fed to the encoder plus the modalities to reconstruct.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VisibleSet {
    pub visible: Vec<usize>,
    pub targets: Vec<usize>,
}

impl VisibleSet {
    pub fn new(mut visible: Vec<usize>, mut targets: Vec<usize>) -> Result<Self> {
        visible.sort_unstable();
        visible.dedup();
        targets.sort_unstable();
        targets.dedup();
        if visible.is_empty() {
            return Err(Error::InvalidArgument("visible set is empty".into()));
        }
        if targets.is_empty() {
            return Err(Error::InvalidArgument("target set is empty".into()));
        }
        Ok(VisibleSet { visible, targets })
    }

    /// Reconstruct every modality, visible or not.
    pub fn with_all_targets(visible: Vec<usize>, modality_count: usize) -> Result<Self> {
        Self::new(visible, (0..modality_count).collect())
    }

    /// Reconstruct only the masked modalities.
    pub fn with_masked_targets(visible: Vec<usize>, modality_count: usize) -> Result<Self> {
        let targets: Vec<usize> = (0..modality_count)
            .filter(|m| !visible.contains(m))
            .collect();
        Self::new(visible, targets)
    }

    pub fn describe(&self) -> String {
        self.visible
            .iter()
            .map(|&m| modality_name(m))
            .collect::<Vec<_>>()
            .join("+")
    }
}

/// Per-record encoder output: the predicted Gaussian plus all hidden tokens.
#[derive(Clone, Debug)]
pub struct LatentGaussian {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl LatentGaussian {
    pub fn sigma(&self) -> Vec<f64> {
        self.log_var.iter().map(|lv| (0.5 * lv).exp()).collect()
    }
}

/// One learnable tensor with persistent storage outside any graph.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ParamMeta {
    pub name: String,
    /// Whether decoupled weight decay applies (weight matrices only; learned
    /// tokens, gains, biases and the loss scalars are exempt).
    pub decay: bool,
}

#[derive(Clone, Debug)]
struct TwoLayerIdx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
struct BlockIdx {
    ln1_gain: usize,
    ln1_bias: usize,
    wq: Vec<usize>,
    bq: Vec<usize>,
    wk: Vec<usize>,
    bk: Vec<usize>,
    wv: Vec<usize>,
    bv: Vec<usize>,
    wo: Vec<usize>,
    bo: usize,
    ln2_gain: usize,
    ln2_bias: usize,
    ff: TwoLayerIdx,
}

#[derive(Clone, Debug)]
struct Layout {
    projectors: Vec<TwoLayerIdx>,
    id_embeds: Vec<usize>,
    mu_token: usize,
    sigma_token: usize,
    registers: Vec<usize>,
    blocks: Vec<BlockIdx>,
    decoders: Vec<TwoLayerIdx>,
    alpha: usize,
    beta: usize,
}

/// All learnable tensors of the model, in one flat store with a fixed,
/// documented order: projectors, modality identifiers, `[mu]`/`[sigma]`
/// tokens, registers, encoder blocks, decoders, then the loss scalars
/// alpha and beta.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    store: Vec<ParamTensor>,
    metas: Vec<ParamMeta>,
    layout: Layout,
}

/// Number of attention heads: `encoder_dim / 64` rounded down (min 1),
/// reduced until it divides the encoder dim.
pub fn head_count(encoder_dim: usize) -> usize {
    let mut h = (encoder_dim / 64).max(1);
    while encoder_dim % h != 0 {
        h -= 1;
    }
    h
}

/// Feedforward hidden width of the encoder blocks.
pub fn ffn_dim(encoder_dim: usize) -> usize {
    encoder_dim * 2
}

enum Init {
    /// Gaussian with std 1/sqrt(fan_in).
    Weight(usize),
    /// Gaussian with std 0.02 (learned tokens, identifiers).
    Token,
    Zero,
    One,
    Const(f64),
}

struct Builder<'a> {
    store: Vec<ParamTensor>,
    metas: Vec<ParamMeta>,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn param(&mut self, name: String, rows: usize, cols: usize, init: Init, decay: bool) -> usize {
        let data: Vec<f64> = match init {
            Init::Weight(fan_in) => {
                let std = 1.0 / (fan_in as f64).sqrt();
                (0..rows * cols)
                    .map(|_| self.rng.sample::<f64, _>(StandardNormal) * std)
                    .collect()
            }
            Init::Token => (0..rows * cols)
                .map(|_| self.rng.sample::<f64, _>(StandardNormal) * 0.02)
                .collect(),
            Init::Zero => vec![0.0; rows * cols],
            Init::One => vec![1.0; rows * cols],
            Init::Const(c) => vec![c; rows * cols],
        };
        self.store.push(ParamTensor { rows, cols, data });
        self.metas.push(ParamMeta { name, decay });
        self.store.len() - 1
    }

    fn two_layer(&mut self, name: &str, d_in: usize, d_hidden: usize, d_out: usize) -> TwoLayerIdx {
        TwoLayerIdx {
            w1: self.param(format!("{name}.w1"), d_in, d_hidden, Init::Weight(d_in), true),
            b1: self.param(format!("{name}.b1"), 1, d_hidden, Init::Zero, false),
            w2: self.param(
                format!("{name}.w2"),
                d_hidden,
                d_out,
                Init::Weight(d_hidden),
                true,
            ),
            b2: self.param(format!("{name}.b2"), 1, d_out, Init::Zero, false),
        }
    }
}

impl ModelParams {
    /// Fresh parameters. `alpha_init` must be negative so that smaller
    /// distances mean larger similarity logits.
    pub fn init(config: &ModelConfig, alpha_init: f64, beta_init: f64, seed: u64) -> Result<Self> {
        if config.modality_count < 2 {
            return Err(Error::InvalidArgument("modality_count must be >= 2".into()));
        }
        if config.depth < 1 {
            return Err(Error::InvalidArgument("depth must be >= 1".into()));
        }
        if alpha_init >= 0.0 {
            return Err(Error::InvalidArgument("alpha must be negative".into()));
        }
        let e = config.encoder_dim;
        let heads = head_count(e);
        let dh = e / heads;
        let mut rng = stream_rng(seed, "model-init");
        let mut b = Builder {
            store: Vec::new(),
            metas: Vec::new(),
            rng: &mut rng,
        };

        let projectors = (0..config.modality_count)
            .map(|m| b.two_layer(&format!("proj{m}"), config.d_in, e, e))
            .collect();
        let id_embeds = (0..config.modality_count)
            .map(|m| b.param(format!("id{m}"), 1, e, Init::Token, false))
            .collect();
        let mu_token = b.param("mu_token".into(), 1, e, Init::Token, false);
        let sigma_token = b.param("sigma_token".into(), 1, e, Init::Token, false);
        let registers = (0..config.registers)
            .map(|r| b.param(format!("register{r}"), 1, e, Init::Token, false))
            .collect();
        let blocks = (0..config.depth)
            .map(|l| {
                let p = |b: &mut Builder, part: &str, rows, cols, init, decay| {
                    b.param(format!("block{l}.{part}"), rows, cols, init, decay)
                };
                BlockIdx {
                    ln1_gain: p(&mut b, "ln1.gain", 1, e, Init::One, false),
                    ln1_bias: p(&mut b, "ln1.bias", 1, e, Init::Zero, false),
                    wq: (0..heads)
                        .map(|h| p(&mut b, &format!("wq{h}"), e, dh, Init::Weight(e), true))
                        .collect(),
                    bq: (0..heads)
                        .map(|h| p(&mut b, &format!("bq{h}"), 1, dh, Init::Zero, false))
                        .collect(),
                    wk: (0..heads)
                        .map(|h| p(&mut b, &format!("wk{h}"), e, dh, Init::Weight(e), true))
                        .collect(),
                    bk: (0..heads)
                        .map(|h| p(&mut b, &format!("bk{h}"), 1, dh, Init::Zero, false))
                        .collect(),
                    wv: (0..heads)
                        .map(|h| p(&mut b, &format!("wv{h}"), e, dh, Init::Weight(e), true))
                        .collect(),
                    bv: (0..heads)
                        .map(|h| p(&mut b, &format!("bv{h}"), 1, dh, Init::Zero, false))
                        .collect(),
                    wo: (0..heads)
                        .map(|h| p(&mut b, &format!("wo{h}"), dh, e, Init::Weight(dh), true))
                        .collect(),
                    bo: p(&mut b, "bo", 1, e, Init::Zero, false),
                    ln2_gain: p(&mut b, "ln2.gain", 1, e, Init::One, false),
                    ln2_bias: p(&mut b, "ln2.bias", 1, e, Init::Zero, false),
                    ff: b.two_layer(&format!("block{l}.ff"), e, ffn_dim(e), e),
                }
            })
            .collect();
        let decoders = (0..config.modality_count)
            .map(|m| b.two_layer(&format!("dec{m}"), e, e, config.d_in))
            .collect();
        let alpha = b.param("alpha".into(), 1, 1, Init::Const(alpha_init), false);
        let beta = b.param("beta".into(), 1, 1, Init::Const(beta_init), false);

        Ok(ModelParams {
            config: config.clone(),
            store: b.store,
            metas: b.metas,
            layout: Layout {
                projectors,
                id_embeds,
                mu_token,
                sigma_token,
                registers,
                blocks,
                decoders,
                alpha,
                beta,
            },
        })
    }

    pub fn tensor_count(&self) -> usize {
        self.store.len()
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&ParamMeta, &ParamTensor)> {
        self.metas.iter().zip(self.store.iter())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&ParamMeta, &mut ParamTensor)> {
        self.metas.iter().zip(self.store.iter_mut())
    }

    pub fn tensor(&self, i: usize) -> &ParamTensor {
        &self.store[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut ParamTensor {
        &mut self.store[i]
    }

    pub fn meta(&self, i: usize) -> &ParamMeta {
        &self.metas[i]
    }

    pub fn scalar_count(&self) -> usize {
        self.store.iter().map(|t| t.data.len()).sum()
    }

    pub fn alpha(&self) -> f64 {
        self.store[self.layout.alpha].data[0]
    }

    pub fn beta(&self) -> f64 {
        self.store[self.layout.beta].data[0]
    }

    /// Clamp alpha strictly below zero. Applied after every optimizer step.
    pub fn clamp_alpha(&mut self) {
        let a = &mut self.store[self.layout.alpha].data[0];
        if *a > -1e-3 {
            *a = -1e-3;
        }
    }

    pub fn alpha_index(&self) -> usize {
        self.layout.alpha
    }

    pub fn beta_index(&self) -> usize {
        self.layout.beta
    }

    /// FNV-1a over every parameter bit; cheap identity check for
    /// determinism and no-mutation assertions.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.store {
            for v in &t.data {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Inserts every parameter into the graph as a leaf, in store order.
    pub fn bind(&self, g: &mut Graph) -> Result<Binding> {
        let mut ids = Vec::with_capacity(self.store.len());
        for t in &self.store {
            ids.push(g.leaf(t.rows, t.cols, t.data.clone())?);
        }
        Ok(Binding { ids })
    }
}

/// Graph handles for one bound copy of the parameters.
pub struct Binding {
    pub ids: Vec<TensorId>,
}

impl Binding {
    pub fn alpha(&self, params: &ModelParams) -> TensorId {
        self.ids[params.layout.alpha]
    }

    pub fn beta(&self, params: &ModelParams) -> TensorId {
        self.ids[params.layout.beta]
    }
}

/// Latent-noise source for the reparameterized sampling step.
pub enum EpsSource<'a> {
    /// Deterministic mean reconstruction.
    Zero,
    Rng(&'a mut ChaCha8Rng),
    /// One pre-drawn B x E matrix (flattened) per target modality, so the
    /// same noise can be replayed across repeated evaluations.
    Fixed(&'a [Vec<f64>]),
}

/// Encoder output tensors for one batch.
pub struct GraphEncodeOutput {
    /// B x E mean of the joint Gaussian, read from the `[mu]` position.
    pub mu: TensorId,
    /// B x E log-variance, read from the `[sigma]` position.
    pub log_var: TensorId,
    /// (B * T) x E, all output tokens of all records.
    pub hidden: TensorId,
    pub tokens_per_record: usize,
    pub batch: usize,
}

pub struct ForwardOutput {
    pub encode: GraphEncodeOutput,
    /// Reconstructions per target modality, each B x D_in, in target order.
    pub recons: Vec<(usize, TensorId)>,
}

fn two_layer_apply(
    g: &mut Graph,
    bind: &Binding,
    idx: &TwoLayerIdx,
    x: TensorId,
    activation: Activation,
) -> Result<TensorId> {
    let h = g.matmul(x, bind.ids[idx.w1])?;
    let h = g.add_row(h, bind.ids[idx.b1])?;
    let h = match activation {
        Activation::Gelu => g.gelu(h),
        Activation::Identity => h,
    };
    let out = g.matmul(h, bind.ids[idx.w2])?;
    g.add_row(out, bind.ids[idx.b2])
}

impl ModelParams {
    /// Stacks the given modality embeddings of every record into B x D leaves.
    pub fn input_leaves(
        &self,
        g: &mut Graph,
        batch: &[&EmbeddingRecord],
        modalities: &[usize],
    ) -> Result<Vec<(usize, TensorId)>> {
        let d = self.config.d_in;
        let mut out = Vec::with_capacity(modalities.len());
        for &m in modalities {
            if m >= self.config.modality_count {
                return Err(Error::InvalidArgument(format!(
                    "modality {m} out of range (count {})",
                    self.config.modality_count
                )));
            }
            let mut data = Vec::with_capacity(batch.len() * d);
            for r in batch {
                let e = r.embeddings.get(m).ok_or_else(|| {
                    Error::Data(format!(
                        "record lacks an embedding for modality {}",
                        modality_name(m)
                    ))
                })?;
                if e.len() != d {
                    return Err(Error::Data(format!(
                        "modality {} embedding has dim {}, model expects {d}",
                        modality_name(m),
                        e.len()
                    )));
                }
                data.extend_from_slice(e);
            }
            out.push((m, g.leaf(batch.len(), d, data)?));
        }
        Ok(out)
    }

    /// Builds the token sequence for every record: `[mu]`, `[sigma]`, the
    /// registers, then one projected-plus-identifier token per visible
    /// modality in modality order. Masked modalities contribute nothing.
    ///
    /// Returns the stacked (B * T) x E matrix and T.
    pub fn assemble_tokens(
        &self,
        g: &mut Graph,
        bind: &Binding,
        inputs: &[(usize, TensorId)],
        visible: &[usize],
        batch: usize,
    ) -> Result<(TensorId, usize)> {
        let lay = &self.layout;
        let mut modality_tokens = Vec::with_capacity(visible.len());
        for &m in visible {
            let (_, x) = inputs
                .iter()
                .find(|(mm, _)| *mm == m)
                .ok_or_else(|| Error::Data(format!("no input for visible modality {m}")))?;
            let proj = two_layer_apply(g, bind, &lay.projectors[m], *x, self.config.activation)?;
            modality_tokens.push(g.add_row(proj, bind.ids[lay.id_embeds[m]])?);
        }
        let t = 2 + lay.registers.len() + visible.len();
        let mut parts = Vec::with_capacity(batch * t);
        for r in 0..batch {
            parts.push(bind.ids[lay.mu_token]);
            parts.push(bind.ids[lay.sigma_token]);
            for &reg in &lay.registers {
                parts.push(bind.ids[reg]);
            }
            for &tok in &modality_tokens {
                parts.push(g.slice_rows(tok, r, 1)?);
            }
        }
        Ok((g.concat_rows(&parts)?, t))
    }

    /// Runs the encoder stack and reads the Gaussian off the `[mu]` and
    /// `[sigma]` output positions.
    pub fn encode(
        &self,
        g: &mut Graph,
        bind: &Binding,
        tokens: TensorId,
        tokens_per_record: usize,
        batch: usize,
    ) -> Result<GraphEncodeOutput> {
        let e = self.config.encoder_dim;
        let heads = head_count(e);
        let dh = e / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x = tokens;
        for (l, blk) in self.layout.blocks.iter().enumerate() {
            let ln1 = g.layer_norm(x, bind.ids[blk.ln1_gain], bind.ids[blk.ln1_bias])?;
            let mut q = Vec::with_capacity(heads);
            let mut k = Vec::with_capacity(heads);
            let mut v = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = g.matmul(ln1, bind.ids[blk.wq[h]])?;
                q.push(g.add_row(qh, bind.ids[blk.bq[h]])?);
                let kh = g.matmul(ln1, bind.ids[blk.wk[h]])?;
                k.push(g.add_row(kh, bind.ids[blk.bk[h]])?);
                let vh = g.matmul(ln1, bind.ids[blk.wv[h]])?;
                v.push(g.add_row(vh, bind.ids[blk.bv[h]])?);
            }
            // Attention is strictly per record: tokens of one record never
            // attend to another record's tokens.
            let mut per_record = Vec::with_capacity(batch);
            for r in 0..batch {
                let start = r * tokens_per_record;
                let mut acc: Option<TensorId> = None;
                for h in 0..heads {
                    let qr = g.slice_rows(q[h], start, tokens_per_record)?;
                    let kr = g.slice_rows(k[h], start, tokens_per_record)?;
                    let vr = g.slice_rows(v[h], start, tokens_per_record)?;
                    let kt = g.transpose(kr);
                    let scores = g.matmul(qr, kt)?;
                    let scores = g.scale(scores, scale);
                    let attn = g.row_softmax(scores);
                    let ctx = g.matmul(attn, vr)?;
                    let proj = g.matmul(ctx, bind.ids[blk.wo[h]])?;
                    acc = Some(match acc {
                        None => proj,
                        Some(a) => g.add(a, proj)?,
                    });
                }
                per_record.push(acc.expect("at least one head"));
            }
            let attn_out = g.concat_rows(&per_record)?;
            let attn_out = g.add_row(attn_out, bind.ids[blk.bo])?;
            let x2 = g.add(x, attn_out)?;
            let ln2 = g.layer_norm(x2, bind.ids[blk.ln2_gain], bind.ids[blk.ln2_bias])?;
            let ff = two_layer_apply(g, bind, &blk.ff, ln2, self.config.activation)?;
            x = g.add(x2, ff)?;
            if !g.value(x).iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("encoder block {l}"),
                });
            }
        }
        let mu_rows: Vec<usize> = (0..batch).map(|r| r * tokens_per_record).collect();
        let sig_rows: Vec<usize> = (0..batch).map(|r| r * tokens_per_record + 1).collect();
        Ok(GraphEncodeOutput {
            mu: g.gather_rows(x, &mu_rows)?,
            log_var: g.gather_rows(x, &sig_rows)?,
            hidden: x,
            tokens_per_record,
            batch,
        })
    }

    /// `z = mu + exp(0.5 * log_var) . eps`, elementwise.
    pub fn reparameterize(
        &self,
        g: &mut Graph,
        mu: TensorId,
        log_var: TensorId,
        eps: TensorId,
    ) -> Result<TensorId> {
        let half = g.scale(log_var, 0.5);
        let sigma = g.exp(half);
        let noise = g.mul(sigma, eps)?;
        g.add(mu, noise)
    }

    /// Raw (unnormalized) two-layer decoder output for one modality.
    pub fn decode(
        &self,
        g: &mut Graph,
        bind: &Binding,
        z: TensorId,
        modality: usize,
    ) -> Result<TensorId> {
        if modality >= self.config.modality_count {
            return Err(Error::InvalidArgument(format!(
                "modality {modality} out of range"
            )));
        }
        two_layer_apply(
            g,
            bind,
            &self.layout.decoders[modality],
            z,
            self.config.activation,
        )
    }

    /// Full pipeline: assemble, encode, sample one latent per target
    /// modality per record, decode each target.
    pub fn forward(
        &self,
        g: &mut Graph,
        bind: &Binding,
        batch: &[&EmbeddingRecord],
        vs: &VisibleSet,
        eps: &mut EpsSource,
    ) -> Result<ForwardOutput> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let inputs = self.input_leaves(g, batch, &vs.visible)?;
        let (tokens, t) = self.assemble_tokens(g, bind, &inputs, &vs.visible, batch.len())?;
        let enc = self.encode(g, bind, tokens, t, batch.len())?;
        let e = self.config.encoder_dim;

        let mut shared_eps: Option<TensorId> = None;
        let mut recons = Vec::with_capacity(vs.targets.len());
        for (ti, &m) in vs.targets.iter().enumerate() {
            let eps_id = match (&mut *eps, self.config.shared_epsilon, shared_eps) {
                (_, true, Some(id)) => id,
                (EpsSource::Zero, _, _) => g.leaf_zeros(batch.len(), e)?,
                (EpsSource::Rng(rng), _, _) => {
                    let data: Vec<f64> = (0..batch.len() * e)
                        .map(|_| rng.sample(StandardNormal))
                        .collect();
                    g.leaf(batch.len(), e, data)?
                }
                (EpsSource::Fixed(mats), _, _) => {
                    let data = mats
                        .get(ti)
                        .ok_or_else(|| {
                            Error::InvalidArgument(format!(
                                "fixed eps provides {} matrices, target index {ti} requested",
                                mats.len()
                            ))
                        })?
                        .clone();
                    g.leaf(batch.len(), e, data)?
                }
            };
            if self.config.shared_epsilon {
                shared_eps = Some(eps_id);
            }
            let z = self.reparameterize(g, enc.mu, enc.log_var, eps_id)?;
            recons.push((m, self.decode(g, bind, z, m)?));
        }
        Ok(ForwardOutput {
            encode: enc,
            recons,
        })
    }
}

/// Deterministic (eps = 0) per-record inference output.
pub struct InferenceOutput {
    pub gaussians: Vec<LatentGaussian>,
    /// Per record: tokens_per_record x encoder_dim hidden tokens, row-major,
    /// ordered `[mu]`, `[sigma]`, registers, visible modalities.
    pub hidden: Vec<Vec<f64>>,
    pub tokens_per_record: usize,
    /// Reconstructions: aligned with `visible_set.targets`; each inner
    /// vec is per record.
    pub recons: Vec<Vec<Vec<f64>>>,
}

impl ModelParams {
    /// Projected-plus-identifier token of one modality per record, before
    /// any encoder block.
    pub fn project_modality(
        &self,
        records: &[EmbeddingRecord],
        modality: usize,
    ) -> Result<Vec<Vec<f64>>> {
        let e = self.config.encoder_dim;
        let mut out = Vec::with_capacity(records.len());
        for chunk in records.chunks(512) {
            let refs: Vec<&EmbeddingRecord> = chunk.iter().collect();
            let mut g = Graph::new();
            let bind = self.bind(&mut g)?;
            let inputs = self.input_leaves(&mut g, &refs, &[modality])?;
            let proj = two_layer_apply(
                &mut g,
                &bind,
                &self.layout.projectors[modality],
                inputs[0].1,
                self.config.activation,
            )?;
            let tok = g.add_row(proj, bind.ids[self.layout.id_embeds[modality]])?;
            let v = g.value(tok);
            for r in 0..refs.len() {
                out.push(v[r * e..(r + 1) * e].to_vec());
            }
        }
        Ok(out)
    }

    /// Runs the model over a record list with eps = 0, in bounded chunks.
    pub fn infer(&self, records: &[EmbeddingRecord], vs: &VisibleSet) -> Result<InferenceOutput> {
        const CHUNK: usize = 256;
        let e = self.config.encoder_dim;
        let mut gaussians = Vec::with_capacity(records.len());
        let mut hidden = Vec::with_capacity(records.len());
        let mut recons: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(records.len()); vs.targets.len()];
        let mut tokens_per_record = 0;
        for chunk in records.chunks(CHUNK) {
            let refs: Vec<&EmbeddingRecord> = chunk.iter().collect();
            let mut g = Graph::new();
            let bind = self.bind(&mut g)?;
            let out = self.forward(&mut g, &bind, &refs, vs, &mut EpsSource::Zero)?;
            tokens_per_record = out.encode.tokens_per_record;
            let mu = g.value(out.encode.mu);
            let lv = g.value(out.encode.log_var);
            for r in 0..refs.len() {
                gaussians.push(LatentGaussian {
                    mu: mu[r * e..(r + 1) * e].to_vec(),
                    log_var: lv[r * e..(r + 1) * e].to_vec(),
                });
            }
            let hid = g.value(out.encode.hidden);
            let t = out.encode.tokens_per_record;
            for r in 0..refs.len() {
                hidden.push(hid[r * t * e..(r + 1) * t * e].to_vec());
            }
            for (ti, (_, rid)) in out.recons.iter().enumerate() {
                let rv = g.value(*rid);
                let d = self.config.d_in;
                for r in 0..refs.len() {
                    recons[ti].push(rv[r * d..(r + 1) * d].to_vec());
                }
            }
        }
        Ok(InferenceOutput {
            gaussians,
            hidden,
            tokens_per_record,
            recons,
        })
    }
}
