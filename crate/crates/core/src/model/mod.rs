//! The three-tower model: an item encoder without self-attention, a
//! self-attention user-history encoder, and a causal user decoder that
//! cross-attends to the encoded history. Training optimizes a symmetric
//! cross-entropy over cosine similarities between decoder predictions and
//! item-tower embeddings of the true items at each of the four forecast
//! steps, with in-batch negatives.

mod forward;
mod train;

pub use train::{train, EpochLog, TrainConfig, Trainer};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{
    fl, load_checkpoint, save_checkpoint, AdamState, CheckpointError, NnError, Real, Tensor,
};
use crate::preprocess::{vocab_from_json, vocab_to_json, SbrExample, TokenizedItem, Vocab};

pub(crate) use forward::Forward;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("token id {0} out of range (vocab size {1})")]
    TokenOutOfRange(u32, usize),
    #[error("history is empty")]
    EmptyHistory,
    #[error("history of {0} events exceeds the {1}-event maximum")]
    HistoryTooLong(usize, usize),
    #[error("rows are not unit-norm (worst deviation {0:.2e})")]
    NonUnitRows(f64),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("batch too small: {0} examples")]
    BatchTooSmall(usize),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint does not match config: {0}")]
    ConfigMismatch(String),
}

/// Model hyperparameters. Defaults follow the production setup (d=64,
/// d_ff=1024, 8 heads, 2 blocks per tower, 22-event history, 4 forecast
/// steps) with a desk-scale batch of 256.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub blocks: usize,
    pub max_history: usize,
    pub forecast_steps: usize,
    pub max_tokens: usize,
    pub vocab_size: usize,
    pub batch_size: usize,
    pub temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            d_ff: 1024,
            heads: 8,
            blocks: 2,
            max_history: 22,
            forecast_steps: 4,
            max_tokens: 32,
            vocab_size: 32_768,
            batch_size: 256,
            temperature: 0.07,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d={} must be divisible by heads={}",
                self.d, self.heads
            )));
        }
        if self.forecast_steps < 1 {
            return Err(ModelError::InvalidConfig("forecast_steps must be >= 1".into()));
        }
        if self.temperature <= 0.0 {
            return Err(ModelError::InvalidConfig("temperature must be > 0".into()));
        }
        if self.vocab_size > 32_768 {
            return Err(ModelError::InvalidConfig(format!(
                "vocab_size {} exceeds the 32768 limit",
                self.vocab_size
            )));
        }
        if self.vocab_size < 3 {
            return Err(ModelError::InvalidConfig("vocab_size must cover reserved ids".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ParamId(usize);

/// Named parameter tensors in a fixed registration order; the order defines
/// the checkpoint layout and the optimizer slot mapping.
pub(crate) struct ParamStore<F: Real> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Real> ParamStore<F> {
    fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    fn register(&mut self, name: String, tensor: Tensor<F>) -> ParamId {
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub(crate) fn len(&self) -> usize {
        self.tensors.len()
    }

    pub(crate) fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub(crate) fn index(&self, id: ParamId) -> usize {
        id.0
    }

    pub(crate) fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub(crate) fn names(&self) -> &[String] {
        &self.names
    }
}

pub(crate) struct LnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub(crate) struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

pub(crate) struct AttnParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

pub(crate) struct ItemBlock {
    pub ffn: FfnParams,
    pub ln: LnParams,
}

pub(crate) struct EncoderBlock {
    pub attn: AttnParams,
    pub ln1: LnParams,
    pub ffn: FfnParams,
    pub ln2: LnParams,
}

pub(crate) struct DecoderBlock {
    pub self_attn: AttnParams,
    pub ln1: LnParams,
    pub cross_attn: AttnParams,
    pub ln2: LnParams,
    pub ffn: FfnParams,
    pub ln3: LnParams,
}

pub struct MercatranModel<F: Real> {
    pub config: ModelConfig,
    pub(crate) params: ParamStore<F>,
    pub(crate) token_embedding: ParamId,
    pub(crate) bos: ParamId,
    pub(crate) item_blocks: Vec<ItemBlock>,
    pub(crate) encoder_blocks: Vec<EncoderBlock>,
    pub(crate) decoder_blocks: Vec<DecoderBlock>,
    /// Fixed sinusoidal position table, `[max(max_history, forecast_steps), d]`.
    pub(crate) pos_encoding: Tensor<F>,
}

fn ones<F: Real>(n: usize) -> Tensor<F> {
    Tensor::new(vec![n], vec![F::one(); n]).expect("shape")
}

fn sinusoidal_encoding<F: Real>(positions: usize, d: usize) -> Tensor<F> {
    let mut data = Vec::with_capacity(positions * d);
    for pos in 0..positions {
        for j in 0..d {
            let pair = (j / 2 * 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(pair / d as f64);
            data.push(fl(if j % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::matrix(positions, d, data).expect("shape")
}

impl<F: Real> MercatranModel<F> {
    /// Fresh model with Xavier-uniform projections, N(0, d^-1/2) embeddings,
    /// unit layer-norm gains and zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<MercatranModel<F>, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.d;
        let d_ff = config.d_ff;
        let emb_std = (d as f64).powf(-0.5);

        let token_embedding = params.register(
            "token_embedding".into(),
            Tensor::randn(vec![config.vocab_size, d], emb_std, &mut rng),
        );
        let bos = params.register("bos".into(), Tensor::randn(vec![1, d], emb_std, &mut rng));

        let ffn = |params: &mut ParamStore<F>, rng: &mut ChaCha8Rng, prefix: &str| FfnParams {
            w1: params.register(format!("{prefix}.ffn.w1"), Tensor::xavier_uniform(d, d_ff, rng)),
            b1: params.register(format!("{prefix}.ffn.b1"), Tensor::zeros(vec![d_ff])),
            w2: params.register(format!("{prefix}.ffn.w2"), Tensor::xavier_uniform(d_ff, d, rng)),
            b2: params.register(format!("{prefix}.ffn.b2"), Tensor::zeros(vec![d])),
        };
        let ln = |params: &mut ParamStore<F>, prefix: &str, tag: &str| LnParams {
            gamma: params.register(format!("{prefix}.{tag}.gamma"), ones(d)),
            beta: params.register(format!("{prefix}.{tag}.beta"), Tensor::zeros(vec![d])),
        };
        let attn = |params: &mut ParamStore<F>, rng: &mut ChaCha8Rng, prefix: &str, tag: &str| {
            AttnParams {
                wq: params.register(format!("{prefix}.{tag}.wq"), Tensor::xavier_uniform(d, d, rng)),
                bq: params.register(format!("{prefix}.{tag}.bq"), Tensor::zeros(vec![d])),
                wk: params.register(format!("{prefix}.{tag}.wk"), Tensor::xavier_uniform(d, d, rng)),
                bk: params.register(format!("{prefix}.{tag}.bk"), Tensor::zeros(vec![d])),
                wv: params.register(format!("{prefix}.{tag}.wv"), Tensor::xavier_uniform(d, d, rng)),
                bv: params.register(format!("{prefix}.{tag}.bv"), Tensor::zeros(vec![d])),
                wo: params.register(format!("{prefix}.{tag}.wo"), Tensor::xavier_uniform(d, d, rng)),
                bo: params.register(format!("{prefix}.{tag}.bo"), Tensor::zeros(vec![d])),
            }
        };

        let mut item_blocks = Vec::with_capacity(config.blocks);
        for n in 0..config.blocks {
            let prefix = format!("item.block{n}");
            item_blocks.push(ItemBlock {
                ffn: ffn(&mut params, &mut rng, &prefix),
                ln: ln(&mut params, &prefix, "ln"),
            });
        }
        let mut encoder_blocks = Vec::with_capacity(config.blocks);
        for n in 0..config.blocks {
            let prefix = format!("enc.block{n}");
            encoder_blocks.push(EncoderBlock {
                attn: attn(&mut params, &mut rng, &prefix, "attn"),
                ln1: ln(&mut params, &prefix, "ln1"),
                ffn: ffn(&mut params, &mut rng, &prefix),
                ln2: ln(&mut params, &prefix, "ln2"),
            });
        }
        let mut decoder_blocks = Vec::with_capacity(config.blocks);
        for n in 0..config.blocks {
            let prefix = format!("dec.block{n}");
            decoder_blocks.push(DecoderBlock {
                self_attn: attn(&mut params, &mut rng, &prefix, "self_attn"),
                ln1: ln(&mut params, &prefix, "ln1"),
                cross_attn: attn(&mut params, &mut rng, &prefix, "cross_attn"),
                ln2: ln(&mut params, &prefix, "ln2"),
                ffn: ffn(&mut params, &mut rng, &prefix),
                ln3: ln(&mut params, &prefix, "ln3"),
            });
        }

        let pos_encoding = sinusoidal_encoding(config.max_history.max(config.forecast_steps), d);
        Ok(MercatranModel {
            config,
            params,
            token_embedding,
            bos,
            item_blocks,
            encoder_blocks,
            decoder_blocks,
            pos_encoding,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.tensors().iter().map(|t| t.len()).sum()
    }

    fn check_tokens(&self, item: &TokenizedItem) -> Result<(), ModelError> {
        match item.token_ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            Some(&bad) => Err(ModelError::TokenOutOfRange(bad, self.config.vocab_size)),
            None => Ok(()),
        }
    }

    fn check_history(&self, history: &[TokenizedItem]) -> Result<(), ModelError> {
        if history.is_empty() {
            return Err(ModelError::EmptyHistory);
        }
        if history.len() > self.config.max_history {
            return Err(ModelError::HistoryTooLong(history.len(), self.config.max_history));
        }
        for item in history {
            self.check_tokens(item)?;
        }
        Ok(())
    }

    /// Item-tower embedding: token mean-pool, N feed-forward blocks with
    /// residual + layer norm, then L2 normalization.
    pub fn encode_item(&self, item: &TokenizedItem) -> Result<Vec<F>, ModelError> {
        Ok(self.encode_items(std::slice::from_ref(item))?.pop().expect("one row"))
    }

    /// Batched [`encode_item`]; one matrix pass over all items.
    pub fn encode_items(&self, items: &[TokenizedItem]) -> Result<Vec<Vec<F>>, ModelError> {
        for item in items {
            self.check_tokens(item)?;
        }
        if items.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = crate::nn::Tape::new();
        let mut fwd = Forward::on(&mut tape, self);
        let rows = fwd.item_tower(items)?;
        let out = tape.value(rows);
        Ok((0..items.len()).map(|i| out.row(i).to_vec()).collect())
    }

    /// Encoded history memory, `[len, d]`, for cross-attention.
    pub fn encode_history(&self, history: &[TokenizedItem]) -> Result<Tensor<F>, ModelError> {
        self.check_history(history)?;
        let mut tape = crate::nn::Tape::new();
        let mut fwd = Forward::on(&mut tape, self);
        let memory = fwd.encoder_memory(history)?;
        Ok(tape.value(memory).clone())
    }

    /// Teacher-forced decoding: the decoder consumes `[BOS, t1, .., t_{S-1}]`
    /// (targets shifted right) under a causal mask and cross-attends to
    /// `memory`; outputs are unit-norm, one per forecast step.
    pub fn decode_teacher_forced(
        &self,
        memory: &Tensor<F>,
        target_embeddings: &[Vec<F>],
    ) -> Result<Vec<Vec<F>>, ModelError> {
        let steps = self.config.forecast_steps;
        if target_embeddings.len() != steps {
            return Err(ModelError::Nn(NnError::ShapeMismatch(format!(
                "{} target embeddings for {steps} forecast steps",
                target_embeddings.len()
            ))));
        }
        if target_embeddings.iter().any(|t| t.len() != self.config.d) {
            return Err(ModelError::Nn(NnError::ShapeMismatch(
                "target embedding dimension mismatch".into(),
            )));
        }
        let mut tape = crate::nn::Tape::new();
        let memory = tape.leaf(memory.clone());
        // Shift right: drop the last target, prepend BOS.
        let mut rows = Vec::with_capacity(steps.saturating_sub(1) * self.config.d);
        for t in &target_embeddings[..steps - 1] {
            rows.extend_from_slice(t);
        }
        let prefix = if steps > 1 {
            Some(tape.leaf(Tensor::matrix(steps - 1, self.config.d, rows)?))
        } else {
            None
        };
        let mut fwd = Forward::on(&mut tape, self);
        let out = fwd.decoder_states(prefix, steps, memory)?;
        let out = tape.value(out);
        Ok((0..steps).map(|s| out.row(s).to_vec()).collect())
    }

    /// Autoregressive inference: step 1 decodes from `[BOS]`; each later step
    /// feeds back the model's own previous output vector.
    pub fn generate_query_vectors(
        &self,
        history: &[TokenizedItem],
    ) -> Result<Vec<Vec<F>>, ModelError> {
        self.check_history(history)?;
        let steps = self.config.forecast_steps;
        let d = self.config.d;
        let mut tape = crate::nn::Tape::new();
        let mut fwd = Forward::on(&mut tape, self);
        let memory = fwd.encoder_memory(history)?;

        let mut generated: Vec<Vec<F>> = Vec::with_capacity(steps);
        for s in 0..steps {
            let prefix = if s == 0 {
                None
            } else {
                let mut rows = Vec::with_capacity(s * d);
                for g in &generated {
                    rows.extend_from_slice(g);
                }
                Some(fwd.tape.leaf(Tensor::matrix(s, d, rows)?))
            };
            let out = fwd.decoder_states(prefix, s + 1, memory)?;
            let row = fwd.tape.value(out).row(s).to_vec();
            generated.push(row);
        }
        Ok(generated)
    }

    /// Mean over forecast steps of the per-step contrastive loss between
    /// decoder predictions and item-tower embeddings of the true items,
    /// without dropout. Training uses the same graph builder.
    pub fn training_loss(&self, batch: &[SbrExample]) -> Result<F, ModelError> {
        let mut tape = crate::nn::Tape::new();
        let mut fwd = Forward::on(&mut tape, self);
        let loss = fwd.training_loss(batch)?;
        Ok(tape.value(loss).scalar())
    }
}

/// Symmetric cross-entropy over scaled cosine similarities: rows of `p`
/// match rows of `t` one-to-one; off-diagonal pairs are in-batch negatives.
/// Both sides must be unit-norm within 1e-3.
pub fn contrastive_step_loss<F: Real>(
    p: &Tensor<F>,
    t: &Tensor<F>,
    temperature: F,
) -> Result<F, ModelError> {
    if !p.same_shape(t) {
        return Err(ModelError::Nn(NnError::ShapeMismatch(format!(
            "predictions {:?} vs targets {:?}",
            p.shape(),
            t.shape()
        ))));
    }
    check_unit_rows(p)?;
    check_unit_rows(t)?;
    let mut tape = crate::nn::Tape::new();
    let pv = tape.leaf(p.clone());
    let tv = tape.leaf(t.clone());
    let loss = contrastive_loss_on_tape(&mut tape, pv, tv, temperature)?;
    Ok(tape.value(loss).scalar())
}

pub(crate) fn contrastive_loss_on_tape<F: Real>(
    tape: &mut crate::nn::Tape<F>,
    p: crate::nn::Var,
    t: crate::nn::Var,
    temperature: F,
) -> Result<crate::nn::Var, ModelError> {
    let n = tape.value(p).rows();
    let sims = tape.matmul(p, t, false, true)?;
    let logits = tape.scale(sims, F::one() / temperature);
    let diag: Vec<usize> = (0..n).collect();
    let row_ce = tape.softmax_cross_entropy(logits, &diag)?;
    let logits_t = tape.transpose(logits);
    let col_ce = tape.softmax_cross_entropy(logits_t, &diag)?;
    let sum = tape.add(row_ce, col_ce)?;
    Ok(tape.scale(sum, fl(0.5)))
}

pub(crate) fn check_unit_rows<F: Real>(t: &Tensor<F>) -> Result<(), ModelError> {
    let cols = t.cols();
    let mut worst = 0.0f64;
    for i in 0..t.len() / cols {
        let row = &t.data()[i * cols..(i + 1) * cols];
        let norm = row.iter().map(|&v| v * v).sum::<F>().sqrt().to_f64().unwrap_or(f64::NAN);
        let dev = (norm - 1.0).abs();
        if !dev.is_finite() || dev > worst {
            worst = dev;
        }
    }
    if worst > 1e-3 {
        return Err(ModelError::NonUnitRows(worst));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoint I/O
// ---------------------------------------------------------------------------

/// Optimizer and progress companion state stored alongside the weights.
pub struct TrainState {
    pub opt: AdamState<f32>,
    pub next_epoch: u32,
    pub global_step: u64,
}

impl MercatranModel<f32> {
    /// Saves weights (and optionally the vocab and optimizer state) in the
    /// checkpoint format.
    pub fn save(
        &self,
        path: &std::path::Path,
        vocab: Option<&Vocab>,
        train_state: Option<&TrainState>,
    ) -> Result<(), ModelError> {
        let mut tensors: Vec<(String, &Tensor<f32>)> = self
            .params
            .names()
            .iter()
            .zip(self.params.tensors())
            .map(|(n, t)| (n.clone(), t))
            .collect();
        let mut extra = serde_json::Map::new();
        if let Some(vocab) = vocab {
            extra.insert("vocab".into(), vocab_to_json(vocab));
        }
        if let Some(state) = train_state {
            extra.insert("next_epoch".into(), state.next_epoch.into());
            extra.insert("global_step".into(), state.global_step.into());
            extra.insert("adam_step".into(), state.opt.step.into());
            for (name, m) in self.params.names().iter().zip(&state.opt.m) {
                tensors.push((format!("opt.m.{name}"), m));
            }
            for (name, v) in self.params.names().iter().zip(&state.opt.v) {
                tensors.push((format!("opt.v.{name}"), v));
            }
        }
        let config = serde_json::to_value(&self.config).expect("config serializes");
        save_checkpoint(path, &tensors, config, serde_json::Value::Object(extra))?;
        Ok(())
    }

    /// Loads a checkpoint, validating every tensor shape against the config
    /// echo. Returns the model plus any embedded vocab and train state.
    pub fn load(
        path: &std::path::Path,
    ) -> Result<(MercatranModel<f32>, Option<Vocab>, Option<TrainState>), ModelError> {
        let (manifest, tensors) = load_checkpoint(path)?;
        let config: ModelConfig = serde_json::from_value(manifest.config.clone())
            .map_err(|e| ModelError::ConfigMismatch(format!("config echo: {e}")))?;
        let mut model = MercatranModel::<f32>::init(config, 0)?;

        let mut by_name: std::collections::HashMap<&str, &Tensor<f32>> = manifest
            .tensors
            .iter()
            .map(|m| m.name.as_str())
            .zip(tensors.iter())
            .collect();

        for (name, slot) in model
            .params
            .names
            .iter()
            .zip(model.params.tensors.iter_mut())
        {
            let loaded = by_name
                .remove(name.as_str())
                .ok_or_else(|| ModelError::ConfigMismatch(format!("missing tensor {name}")))?;
            if loaded.shape() != slot.shape() {
                return Err(ModelError::ConfigMismatch(format!(
                    "tensor {name} has shape {:?}, config wants {:?}",
                    loaded.shape(),
                    slot.shape()
                )));
            }
            *slot = loaded.clone();
        }

        let vocab = match manifest.extra.get("vocab") {
            Some(v) => Some(
                vocab_from_json(v)
                    .map_err(|e| ModelError::ConfigMismatch(format!("embedded vocab: {e}")))?,
            ),
            None => None,
        };

        let train_state = match manifest.extra.get("next_epoch") {
            Some(_) => {
                let mut opt = AdamState::new(model.params.tensors());
                opt.step = manifest.extra["adam_step"].as_u64().unwrap_or(0);
                for (i, name) in model.params.names.iter().enumerate() {
                    let m = by_name.remove(format!("opt.m.{name}").as_str()).ok_or_else(|| {
                        ModelError::ConfigMismatch(format!("missing optimizer moment for {name}"))
                    })?;
                    let v = by_name.remove(format!("opt.v.{name}").as_str()).ok_or_else(|| {
                        ModelError::ConfigMismatch(format!("missing optimizer moment for {name}"))
                    })?;
                    opt.m[i] = m.clone();
                    opt.v[i] = v.clone();
                }
                Some(TrainState {
                    opt,
                    next_epoch: manifest.extra["next_epoch"].as_u64().unwrap_or(0) as u32,
                    global_step: manifest.extra["global_step"].as_u64().unwrap_or(0),
                })
            }
            None => None,
        };

        Ok((model, vocab, train_state))
    }
}
