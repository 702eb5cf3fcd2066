//! Graph builders for the three towers. Batched passes pack every example's
//! rows into one matrix for the projections and feed-forward layers, and
//! slice per-example row ranges only where attention needs them; all ops are
//! row-local apart from attention, so packed and per-example execution
//! produce identical rows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nn::{fl, Real, Tape, Tensor, Var};
use crate::preprocess::{TokenizedItem, PAD_ID, UNK_ID};

use super::{
    contrastive_loss_on_tape, AttnParams, DecoderBlock, EncoderBlock, FfnParams, LnParams,
    MercatranModel, ModelError, ParamId,
};

const LN_EPS: f64 = 1e-5;
const L2_EPS: f64 = 1e-12;

struct DropoutCtx {
    rate: f64,
    rng: ChaCha8Rng,
}

pub(crate) struct Forward<'t, 'm, F: Real> {
    pub tape: &'t mut Tape<F>,
    model: &'m MercatranModel<F>,
    bound: Vec<Option<Var>>,
    dropout: Option<DropoutCtx>,
}

impl<'t, 'm, F: Real> Forward<'t, 'm, F> {
    pub fn on(tape: &'t mut Tape<F>, model: &'m MercatranModel<F>) -> Forward<'t, 'm, F> {
        Forward {
            tape,
            model,
            bound: vec![None; model.params.len()],
            dropout: None,
        }
    }

    /// Training-mode forward: dropout masks come from a stream keyed by the
    /// caller (deterministic given seed and step).
    pub fn training(
        tape: &'t mut Tape<F>,
        model: &'m MercatranModel<F>,
        dropout_rate: f64,
        mask_seed: u64,
    ) -> Forward<'t, 'm, F> {
        let dropout = (dropout_rate > 0.0).then(|| DropoutCtx {
            rate: dropout_rate,
            rng: ChaCha8Rng::seed_from_u64(mask_seed),
        });
        Forward {
            tape,
            model,
            bound: vec![None; model.params.len()],
            dropout,
        }
    }

    /// Pre-binds a parameter slot to an existing tape node so a gradient
    /// check can substitute a probe tensor for that parameter.
    #[cfg(test)]
    pub fn inject_param_slot(&mut self, slot: usize, var: Var) {
        self.bound[slot] = Some(var);
    }

    fn param(&mut self, id: ParamId) -> Var {
        let slot = self.model.params.index(id);
        if let Some(var) = self.bound[slot] {
            return var;
        }
        let var = self.tape.leaf(self.model.params.get(id).clone());
        self.bound[slot] = Some(var);
        var
    }

    /// Gradients per parameter slot after backprop from a scalar loss.
    pub fn grads(self, loss: Var) -> Vec<Option<Tensor<F>>> {
        let mut node_grads = self.tape.backward(loss);
        self.bound
            .iter()
            .map(|bound| bound.and_then(|var| node_grads[var.index()].take()))
            .collect()
    }

    fn apply_dropout(&mut self, x: Var) -> Result<Var, ModelError> {
        let len = self.tape.value(x).len();
        let Some(ctx) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let keep = 1.0 - ctx.rate;
        let scale = fl::<F>(1.0 / keep);
        let mask: Vec<F> = (0..len)
            .map(|_| if ctx.rng.gen_bool(keep) { scale } else { F::zero() })
            .collect();
        Ok(self.tape.mul_const(x, mask)?)
    }

    fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Result<Var, ModelError> {
        let w = self.param(w);
        let b = self.param(b);
        let xw = self.tape.matmul(x, w, false, false)?;
        Ok(self.tape.add_bias(xw, b)?)
    }

    fn ffn(&mut self, x: Var, ffn: &FfnParams) -> Result<Var, ModelError> {
        let h = self.linear(x, ffn.w1, ffn.b1)?;
        let h = self.tape.relu(h);
        self.linear(h, ffn.w2, ffn.b2)
    }

    /// Post-norm residual: `LN(x + dropout(sublayer))`.
    fn residual_ln(&mut self, x: Var, sublayer: Var, ln: &LnParams) -> Result<Var, ModelError> {
        let sublayer = self.apply_dropout(sublayer)?;
        let sum = self.tape.add(x, sublayer)?;
        let gamma = self.param(ln.gamma);
        let beta = self.param(ln.beta);
        Ok(self.tape.layer_norm(sum, gamma, beta, fl(LN_EPS))?)
    }

    /// Mean-pooled token embeddings scaled by sqrt(d), one row per item.
    /// PAD tokens are excluded from the pool; an all-PAD item falls back to
    /// a single UNK.
    fn pooled_content(&mut self, items: &[TokenizedItem]) -> Result<Var, ModelError> {
        let ids: Vec<Vec<u32>> = items
            .iter()
            .map(|item| {
                let real: Vec<u32> = item
                    .token_ids
                    .iter()
                    .copied()
                    .filter(|&id| id != PAD_ID)
                    .collect();
                if real.is_empty() {
                    vec![UNK_ID]
                } else {
                    real
                }
            })
            .collect();
        let table = self.param(self.model.token_embedding);
        let pooled = self.tape.embedding_mean(table, ids)?;
        Ok(self.tape.scale(pooled, fl((self.model.config.d as f64).sqrt())))
    }

    /// Item tower: pooled content through N feed-forward blocks with
    /// residual + layer norm, L2-normalized rows. `[n_items, d]`.
    pub fn item_tower(&mut self, items: &[TokenizedItem]) -> Result<Var, ModelError> {
        let mut x = self.pooled_content(items)?;
        for block in &self.model.item_blocks {
            let sub = self.ffn(x, &block.ffn)?;
            x = self.residual_ln(x, sub, &block.ln)?;
        }
        Ok(self.tape.l2_normalize_rows(x, fl(L2_EPS)))
    }

    fn attention_sublayer(
        &mut self,
        x: Var,
        kv: Var,
        attn: &AttnParams,
        causal: bool,
        q_ranges: &[(usize, usize)],
        kv_ranges: &[(usize, usize)],
    ) -> Result<Var, ModelError> {
        debug_assert_eq!(q_ranges.len(), kv_ranges.len());
        let q_all = self.linear(x, attn.wq, attn.bq)?;
        let k_all = self.linear(kv, attn.wk, attn.bk)?;
        let v_all = self.linear(kv, attn.wv, attn.bv)?;
        let heads = self.model.config.heads;
        let mut parts = Vec::with_capacity(q_ranges.len());
        for (&(q_start, q_len), &(kv_start, kv_len)) in q_ranges.iter().zip(kv_ranges) {
            let q = self.tape.slice_rows(q_all, q_start, q_len)?;
            let k = self.tape.slice_rows(k_all, kv_start, kv_len)?;
            let v = self.tape.slice_rows(v_all, kv_start, kv_len)?;
            parts.push(self.tape.multi_head_attention(q, k, v, heads, causal)?);
        }
        let merged = self.tape.concat_rows(&parts)?;
        self.linear(merged, attn.wo, attn.bo)
    }

    fn encoder_block(
        &mut self,
        x: Var,
        ranges: &[(usize, usize)],
        block: &EncoderBlock,
    ) -> Result<Var, ModelError> {
        let sub = self.attention_sublayer(x, x, &block.attn, false, ranges, ranges)?;
        let x = self.residual_ln(x, sub, &block.ln1)?;
        let sub = self.ffn(x, &block.ffn)?;
        self.residual_ln(x, sub, &block.ln2)
    }

    fn decoder_block(
        &mut self,
        x: Var,
        dec_ranges: &[(usize, usize)],
        memory: Var,
        mem_ranges: &[(usize, usize)],
        block: &DecoderBlock,
    ) -> Result<Var, ModelError> {
        let sub = self.attention_sublayer(x, x, &block.self_attn, true, dec_ranges, dec_ranges)?;
        let x = self.residual_ln(x, sub, &block.ln1)?;
        let sub =
            self.attention_sublayer(x, memory, &block.cross_attn, false, dec_ranges, mem_ranges)?;
        let x = self.residual_ln(x, sub, &block.ln2)?;
        let sub = self.ffn(x, &block.ffn)?;
        self.residual_ln(x, sub, &block.ln3)
    }

    /// Positional-encoding constant tiled over per-example lengths.
    fn tiled_positions(&self, lens: &[usize]) -> Tensor<F> {
        let d = self.model.config.d;
        let pe = &self.model.pos_encoding;
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(total * d);
        for &len in lens {
            data.extend_from_slice(&pe.data()[..len * d]);
        }
        Tensor::matrix(total, d, data).expect("position table covers requested length")
    }

    /// Packed encoder over several histories; returns the memory matrix and
    /// per-example row ranges.
    pub fn encoder_memory_packed(
        &mut self,
        histories: &[&[TokenizedItem]],
    ) -> Result<(Var, Vec<(usize, usize)>), ModelError> {
        let all_events: Vec<TokenizedItem> = histories
            .iter()
            .flat_map(|h| h.iter().cloned())
            .collect();
        let lens: Vec<usize> = histories.iter().map(|h| h.len()).collect();
        let mut ranges = Vec::with_capacity(lens.len());
        let mut offset = 0;
        for &len in &lens {
            ranges.push((offset, len));
            offset += len;
        }
        let content = self.pooled_content(&all_events)?;
        let pe = self.tiled_positions(&lens);
        let mut x = self.tape.add_const(content, &pe)?;
        for block in &self.model.encoder_blocks {
            x = self.encoder_block(x, &ranges, block)?;
        }
        Ok((x, ranges))
    }

    pub fn encoder_memory(&mut self, history: &[TokenizedItem]) -> Result<Var, ModelError> {
        Ok(self.encoder_memory_packed(&[history])?.0)
    }

    /// Single-example decoder pass over a prefix of `len` rows: BOS plus
    /// `len - 1` content rows. Returns `[len, d]`, L2-normalized.
    pub fn decoder_states(
        &mut self,
        prefix: Option<Var>,
        len: usize,
        memory: Var,
    ) -> Result<Var, ModelError> {
        let bos = self.param(self.model.bos);
        let content = match prefix {
            Some(prefix) => {
                debug_assert_eq!(self.tape.value(prefix).rows(), len - 1);
                self.tape.concat_rows(&[bos, prefix])?
            }
            None => {
                debug_assert_eq!(len, 1);
                bos
            }
        };
        let mem_len = self.tape.value(memory).rows();
        self.decoder_packed(content, &[(0, len)], memory, &[(0, mem_len)])
    }

    fn decoder_packed(
        &mut self,
        content: Var,
        dec_ranges: &[(usize, usize)],
        memory: Var,
        mem_ranges: &[(usize, usize)],
    ) -> Result<Var, ModelError> {
        let scaled = self.tape.scale(content, fl((self.model.config.d as f64).sqrt()));
        let lens: Vec<usize> = dec_ranges.iter().map(|&(_, len)| len).collect();
        let pe = self.tiled_positions(&lens);
        let mut x = self.tape.add_const(scaled, &pe)?;
        for block in &self.model.decoder_blocks {
            x = self.decoder_block(x, dec_ranges, memory, mem_ranges, block)?;
        }
        Ok(self.tape.l2_normalize_rows(x, fl(L2_EPS)))
    }

    /// Full training graph: mean over forecast steps of the symmetric
    /// contrastive loss across the batch.
    pub fn training_loss(
        &mut self,
        batch: &[crate::preprocess::SbrExample],
    ) -> Result<Var, ModelError> {
        let steps = self.model.config.forecast_steps;
        let b = batch.len();
        if b == 0 {
            return Err(ModelError::BatchTooSmall(0));
        }
        for example in batch {
            self.model.check_history(&example.history)?;
            if example.targets.len() != steps {
                return Err(ModelError::Nn(crate::nn::NnError::ShapeMismatch(format!(
                    "example has {} targets, model forecasts {steps}",
                    example.targets.len()
                ))));
            }
            for target in &example.targets {
                self.model.check_tokens(&target.tokens)?;
            }
        }

        // Item tower over all targets, step-major: row s*B + e.
        let target_tokens: Vec<TokenizedItem> = (0..steps)
            .flat_map(|s| batch.iter().map(move |ex| ex.targets[s].tokens.clone()))
            .collect();
        let item_rows = self.item_tower(&target_tokens)?;

        let histories: Vec<&[TokenizedItem]> =
            batch.iter().map(|ex| ex.history.as_slice()).collect();
        let (memory, mem_ranges) = self.encoder_memory_packed(&histories)?;

        // Decoder input: per example, BOS then targets 0..steps-1 shifted right.
        let bos = self.param(self.model.bos);
        let mut parts = Vec::with_capacity(2 * b);
        for e in 0..b {
            parts.push(bos);
            if steps > 1 {
                let rows: Vec<usize> = (0..steps - 1).map(|s| s * b + e).collect();
                parts.push(self.tape.gather_rows(item_rows, rows)?);
            }
        }
        let content = self.tape.concat_rows(&parts)?;
        let dec_ranges: Vec<(usize, usize)> = (0..b).map(|e| (e * steps, steps)).collect();
        let predictions = self.decoder_packed(content, &dec_ranges, memory, &mem_ranges)?;

        let tau = fl::<F>(self.model.config.temperature);
        let mut total: Option<Var> = None;
        for s in 0..steps {
            let p_rows: Vec<usize> = (0..b).map(|e| e * steps + s).collect();
            let p = self.tape.gather_rows(predictions, p_rows)?;
            let t = self.tape.slice_rows(item_rows, s * b, b)?;
            let step_loss = contrastive_loss_on_tape(self.tape, p, t, tau)?;
            total = Some(match total {
                Some(acc) => self.tape.add(acc, step_loss)?,
                None => step_loss,
            });
        }
        Ok(self
            .tape
            .scale(total.expect("at least one step"), fl(1.0 / steps as f64)))
    }
}
