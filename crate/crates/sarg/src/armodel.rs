//! Decoder-only causal transformer over the multimodal vocabulary: stage-1
//! pretraining, stage-2 LoRA style finetuning, log-likelihood scoring, and
//! autoregressive sampling. Style tokens replace the placeholder embeddings
//! at the input layer; the loss is computed on image-token positions only.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use std::sync::Arc;

use crate::autograd::{log_softmax_at, Grads, ParamId, ParamSet, Tape, Var};
use crate::encoder::{Encoder, FeatureMap};
use crate::error::{Error, Result};
use crate::nn::{attention, causal_mask, Adam, AdamConfig, LayerNorm, Linear};
use crate::resampler::{style_noise, Provenance, Resampler, ResamplerConfig, StyleTokens};
use crate::rng::{normal_draws, rng_from, subseed};
use crate::tokenizer::{MultimodalTokenizer, TokenGrid, TokenSequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Style,
    Dpo,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ARConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub mlp_mult: usize,
    pub vocab_size: usize,
    pub image_id_base: u32,
    pub image_vocab: usize,
    pub max_seq_len: usize,
    pub dropout: f32,
    pub lora_rank: usize,
    pub style_tokens: usize,
    pub seed: u64,
}

impl ARConfig {
    /// Default desk-scale shape for a given tokenizer.
    pub fn for_tokenizer(tok: &MultimodalTokenizer, seed: u64) -> Self {
        ARConfig {
            layers: 4,
            heads: 4,
            width: 128,
            mlp_mult: 4,
            vocab_size: tok.vocab_size(),
            image_id_base: tok.image_id_base(),
            image_vocab: tok.codebook.k,
            max_seq_len: 96,
            dropout: 0.0,
            lora_rank: 4,
            style_tokens: tok.style_tokens,
            seed,
        }
    }
}

/// Optimizer settings. Defaults follow the reference training configuration
/// (batch 64, lr 2e-5, 50-step linear warmup, clip 1.0).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainParams {
    pub lr: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_steps: usize,
    pub grad_clip: f32,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            lr: 2e-5,
            batch_size: 64,
            epochs: 1,
            warmup_steps: 50,
            grad_clip: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SamplerParams {
    /// 0 means greedy argmax
    pub temperature: f32,
    pub top_k: usize,
    pub seed: u64,
}

impl SamplerParams {
    pub fn greedy() -> Self {
        SamplerParams {
            temperature: 0.0,
            top_k: 1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.temperature < 0.0 {
            return Err(Error::InvalidArgument("temperature must be >= 0".into()));
        }
        if self.top_k < 1 {
            return Err(Error::InvalidArgument("top_k must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone)]
struct LoraPair {
    a: ParamId,
    b: ParamId,
}

#[derive(Clone)]
struct Layer {
    ln1: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    // LoRA adapters for Q, K, V, O in that order
    lora: Vec<LoraPair>,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

/// The AR checkpoint: base transformer + LoRA adapters + resampler weights
/// in one ParamSet, plus stage tag, seeds, and tokenizer hash. Stage
/// transitions only move forward.
pub struct ArModel {
    pub cfg: ARConfig,
    pub params: ParamSet,
    pub stage: Stage,
    pub tokenizer_hash: String,
    pub parent_hash: Option<String>,
    tok_embed: ParamId,
    pos_embed: ParamId,
    layers: Vec<Layer>,
    ln_f: LayerNorm,
    head: Linear,
    pub resampler: Resampler,
}

/// How the style slot is filled during a forward pass.
pub enum StyleInput<'a> {
    /// Fixed style-token values (inference, DPO scoring).
    Const(&'a StyleTokens),
    /// An in-graph `[M, C]` variable (training paths).
    Graph(Var),
}

impl ArModel {
    pub fn new(cfg: ARConfig, tokenizer_hash: String) -> Self {
        let mut params = ParamSet::new();
        let init_seed = subseed(cfg.seed, "armodel-init");
        let c = cfg.width;
        assert!(c % cfg.heads == 0, "width must divide heads");

        let embed_scale = 0.02f32;
        let tok_data: Vec<f32> = normal_draws(
            &mut rng_from(subseed(init_seed, "tok_embed")),
            cfg.vocab_size * c,
        )
        .into_iter()
        .map(|x| x * embed_scale)
        .collect();
        let tok_embed = params.add("embed.tok", cfg.vocab_size, c, tok_data);
        let pos_data: Vec<f32> = normal_draws(
            &mut rng_from(subseed(init_seed, "pos_embed")),
            cfg.max_seq_len * c,
        )
        .into_iter()
        .map(|x| x * embed_scale)
        .collect();
        let pos_embed = params.add("embed.pos", cfg.max_seq_len, c, pos_data);

        let mut layers = Vec::new();
        for l in 0..cfg.layers {
            let pre = format!("l{l}");
            let mut lora = Vec::new();
            for proj in ["q", "k", "v", "o"] {
                let a_data: Vec<f32> = normal_draws(
                    &mut rng_from(subseed(init_seed, &format!("{pre}.lora.{proj}.a"))),
                    c * cfg.lora_rank,
                )
                .into_iter()
                .map(|x| x * (1.0 / (c as f32).sqrt()))
                .collect();
                let a = params.add(&format!("lora.{pre}.{proj}.a"), c, cfg.lora_rank, a_data);
                // B starts at zero: the adapted layer equals the base layer
                let b = params.add(
                    &format!("lora.{pre}.{proj}.b"),
                    cfg.lora_rank,
                    c,
                    vec![0.0; cfg.lora_rank * c],
                );
                lora.push(LoraPair { a, b });
            }
            layers.push(Layer {
                ln1: LayerNorm::new(&mut params, &format!("{pre}.ln1"), c),
                wq: Linear::new(&mut params, &format!("{pre}.wq"), c, c, false, subseed(init_seed, &format!("{pre}.wq"))),
                wk: Linear::new(&mut params, &format!("{pre}.wk"), c, c, false, subseed(init_seed, &format!("{pre}.wk"))),
                wv: Linear::new(&mut params, &format!("{pre}.wv"), c, c, false, subseed(init_seed, &format!("{pre}.wv"))),
                wo: Linear::new(&mut params, &format!("{pre}.wo"), c, c, false, subseed(init_seed, &format!("{pre}.wo"))),
                lora,
                ln2: LayerNorm::new(&mut params, &format!("{pre}.ln2"), c),
                ff1: Linear::new(&mut params, &format!("{pre}.ff1"), c, cfg.mlp_mult * c, true, subseed(init_seed, &format!("{pre}.ff1"))),
                ff2: Linear::new(&mut params, &format!("{pre}.ff2"), cfg.mlp_mult * c, c, true, subseed(init_seed, &format!("{pre}.ff2"))),
            });
        }
        let ln_f = LayerNorm::new(&mut params, "ln_f", c);
        // small head init keeps step-0 cross-entropy near ln(vocab)
        let head_data: Vec<f32> = normal_draws(
            &mut rng_from(subseed(init_seed, "head")),
            c * cfg.vocab_size,
        )
        .into_iter()
        .map(|x| x * 0.02)
        .collect();
        let head_w = params.add("head.w", c, cfg.vocab_size, head_data);
        let head = Linear {
            w: head_w,
            b: None,
        };

        let rcfg = ResamplerConfig {
            m: cfg.style_tokens,
            ..ResamplerConfig::new(c)
        };
        let resampler = Resampler::new(&mut params, rcfg, cfg.seed);

        ArModel {
            cfg,
            params,
            stage: Stage::Pretrain,
            tokenizer_hash,
            parent_hash: None,
            tok_embed,
            pos_embed,
            layers,
            ln_f,
            head,
            resampler,
        }
    }

    fn proj_with_lora(&self, t: &mut Tape, x: Var, lin: &Linear, lora: &LoraPair) -> Var {
        let base = lin.forward(t, x);
        let a = t.p(lora.a);
        let u = t.matmul(x, a);
        let b = t.p(lora.b);
        let add = t.matmul(u, b);
        let add = t.scale(add, 1.0 / self.cfg.lora_rank as f32);
        t.add(base, add)
    }

    /// In-graph forward: token ids + style slot fill to `[T, vocab]` logits.
    pub fn logits_graph(
        &self,
        t: &mut Tape,
        ids: &[u32],
        style_slot: (usize, usize),
        style: StyleInput,
    ) -> Result<Var> {
        let seq_len = ids.len();
        if seq_len > self.cfg.max_seq_len {
            return Err(Error::ShapeMismatch(format!(
                "sequence length {seq_len} exceeds max {}",
                self.cfg.max_seq_len
            )));
        }
        let c = self.cfg.width;
        // token embedding lookup
        let table = t.p(self.tok_embed);
        let mut idx = Vec::with_capacity(seq_len * c);
        for &id in ids {
            let base = id as usize * c;
            idx.extend(base..base + c);
        }
        let emb = t.gather(table, Arc::new(idx), seq_len, c);
        // learned positions
        let pos_table = t.p(self.pos_embed);
        let pos_idx: Vec<usize> = (0..seq_len * c).collect();
        let pos = t.gather(pos_table, Arc::new(pos_idx), seq_len, c);
        let mut x = t.add(emb, pos);
        // style tokens replace the placeholder embeddings entirely
        let style_var = match style {
            StyleInput::Const(s) => {
                debug_assert_eq!((s.m, s.c), (style_slot.1, c));
                t.constant(s.m, s.c, s.values.clone())
            }
            StyleInput::Graph(v) => v,
        };
        if style_slot.1 > 0 {
            x = t.overwrite_rows(x, style_var, style_slot.0);
        }

        let mask = causal_mask(seq_len);
        for layer in &self.layers {
            let h = layer.ln1.forward(t, x);
            let q = self.proj_with_lora(t, h, &layer.wq, &layer.lora[0]);
            let k = self.proj_with_lora(t, h, &layer.wk, &layer.lora[1]);
            let v = self.proj_with_lora(t, h, &layer.wv, &layer.lora[2]);
            let attn = attention(t, q, k, v, self.cfg.heads, Some(mask.clone()));
            let attn = self.proj_with_lora(t, attn, &layer.wo, &layer.lora[3]);
            x = t.add(x, attn);
            let h = layer.ln2.forward(t, x);
            let h = layer.ff1.forward(t, h);
            let h = t.gelu(h);
            let h = layer.ff2.forward(t, h);
            x = t.add(x, h);
        }
        let x = self.ln_f.forward(t, x);
        Ok(self.head.forward(t, x))
    }

    /// Value-only forward pass: per-position logits over the vocabulary.
    pub fn forward_logits(&self, seq: &TokenSequence, style: &StyleTokens) -> Result<Vec<f32>> {
        let mut t = Tape::new(&self.params);
        let logits = self.logits_graph(&mut t, &seq.ids, seq.style_slot, StyleInput::Const(style))?;
        Ok(t.value(logits).to_vec())
    }

    /// Teacher-forcing targets/weights: row t predicts token t+1; weight 1
    /// only where the target is inside the image span.
    pub fn image_targets(seq: &TokenSequence) -> (Arc<Vec<usize>>, Arc<Vec<f32>>, usize) {
        let n = seq.ids.len();
        let (img_off, img_len) = seq.image_span;
        let mut targets = vec![0usize; n];
        let mut weights = vec![0.0f32; n];
        let mut count = 0usize;
        for t in 0..n.saturating_sub(1) {
            let tgt_pos = t + 1;
            targets[t] = seq.ids[tgt_pos] as usize;
            if tgt_pos >= img_off && tgt_pos < img_off + img_len {
                weights[t] = 1.0;
                count += 1;
            }
        }
        (Arc::new(targets), Arc::new(weights), count)
    }

    /// Sum of log p over the image-token positions, conditioned on the
    /// style tokens. Probabilities are renormalized over the image-id range,
    /// matching the restriction applied during generation, so enumerating
    /// all completions sums to 1. Errors when the sequence has no image span.
    pub fn sequence_logprob(&self, seq: &TokenSequence, style: &StyleTokens) -> Result<f32> {
        if seq.image_span.1 == 0 {
            return Err(Error::InvalidArgument(
                "sequence_logprob needs a full image span".into(),
            ));
        }
        let logits = self.forward_logits(seq, style)?;
        let v = self.cfg.vocab_size;
        let base = self.cfg.image_id_base as usize;
        let k = self.cfg.image_vocab;
        let (img_off, img_len) = seq.image_span;
        let mut total = 0.0f64;
        for tgt_pos in img_off..img_off + img_len {
            let row = &logits[(tgt_pos - 1) * v..tgt_pos * v];
            let target = seq.ids[tgt_pos] as usize;
            if target < base || target >= base + k {
                return Err(Error::InvalidArgument(format!(
                    "image span holds non-image id {target} at position {tgt_pos}"
                )));
            }
            total += log_softmax_at(&row[base..base + k], target - base) as f64;
        }
        Ok(total as f32)
    }

    /// In-graph image-span log-likelihood for preference training: slices
    /// the image-id columns and renormalizes, like `sequence_logprob`.
    pub fn logprob_graph(
        &self,
        t: &mut Tape,
        seq: &TokenSequence,
        style: StyleInput,
    ) -> Result<Var> {
        if seq.image_span.1 == 0 {
            return Err(Error::InvalidArgument(
                "logprob_graph needs a full image span".into(),
            ));
        }
        let logits = self.logits_graph(t, &seq.ids, seq.style_slot, style)?;
        let base = self.cfg.image_id_base as usize;
        let image_logits = t.slice_cols(logits, base, base + self.cfg.image_vocab);
        let (targets, weights, _count) = ArModel::image_targets(seq);
        let shifted: Vec<usize> = targets
            .iter()
            .zip(weights.iter())
            .map(|(&tg, &w)| if w > 0.0 { tg - base } else { 0 })
            .collect();
        let nll = t.nll_sum(image_logits, Arc::new(shifted), weights);
        Ok(t.scale(nll, -1.0))
    }

    /// Mean image-position cross-entropy over a set of sequences with a
    /// fixed style-token provider (validation-loss utility).
    pub fn mean_image_ce(
        &self,
        seqs: &[(TokenSequence, StyleTokens)],
    ) -> Result<f32> {
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (seq, style) in seqs {
            total += -self.sequence_logprob(seq, style)? as f64;
            count += seq.image_span.1;
        }
        Ok((total / count.max(1) as f64) as f32)
    }

    /// Autoregressive sampling of exactly h*w image tokens after BOI.
    /// Sampling is restricted to the image-token id range by construction.
    pub fn generate(
        &self,
        prompt: &str,
        style: &StyleTokens,
        sampler: &SamplerParams,
        tok: &MultimodalTokenizer,
    ) -> Result<TokenGrid> {
        sampler.validate()?;
        if self.stage < Stage::Style && style.provenance != Provenance::Null {
            return Err(Error::StageContract(
                "pretrain-stage checkpoints can only generate with null style tokens".into(),
            ));
        }
        let prefix = tok.assemble(prompt, None)?;
        let grid_side = crate::procgen::IMG_SIZE / tok.codebook.p;
        let n_tokens = grid_side * grid_side;
        let base = self.cfg.image_id_base as usize;
        let k = self.cfg.image_vocab;
        let v = self.cfg.vocab_size;

        let mut ids = prefix.ids.clone();
        let mut rng = rng_from(subseed(sampler.seed, "generate"));
        let mut indices = Vec::with_capacity(n_tokens);
        for _ in 0..n_tokens {
            let mut t = Tape::new(&self.params);
            let logits =
                self.logits_graph(&mut t, &ids, prefix.style_slot, StyleInput::Const(style))?;
            let all = t.value(logits);
            let last = &all[(ids.len() - 1) * v..ids.len() * v];
            // probability mass outside the image-token range is exactly zero
            let image_logits = &last[base..base + k];
            let choice = sample_index(image_logits, sampler, &mut rng);
            indices.push(choice as u32);
            ids.push((base + choice) as u32);
        }
        Ok(TokenGrid {
            h: grid_side,
            w: grid_side,
            indices,
        })
    }

    /// Trainable-parameter mask per stage.
    pub fn trainable_mask(&self, stage: Stage) -> Vec<bool> {
        self.params
            .entries
            .iter()
            .map(|e| match stage {
                // base weights + null embedding
                Stage::Pretrain => {
                    !e.name.starts_with("lora.") && !e.name.starts_with("resampler.")
                }
                // LoRA + resampler only
                Stage::Style | Stage::Dpo => {
                    e.name.starts_with("lora.") || e.name.starts_with("resampler.")
                }
            })
            .collect()
    }

    pub fn trainable_scalar_count(&self, stage: Stage) -> usize {
        self.trainable_mask(stage)
            .iter()
            .zip(self.params.entries.iter())
            .filter(|(m, _)| **m)
            .map(|(_, e)| e.data.len())
            .sum()
    }

    pub fn weights_hash(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.params.entries {
            h.update(e.name.as_bytes());
            for v in &e.data {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Hash of base (non-LoRA, non-resampler) weights only; used to verify
    /// the freezing contract across stage-2 and DPO.
    pub fn base_weights_hash(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.params.entries {
            if e.name.starts_with("lora.") || e.name.starts_with("resampler.") {
                continue;
            }
            h.update(e.name.as_bytes());
            for v in &e.data {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn deep_clone(&self) -> ArModel {
        let mut clone = ArModel::new(self.cfg.clone(), self.tokenizer_hash.clone());
        for (dst, src) in clone.params.entries.iter_mut().zip(self.params.entries.iter()) {
            debug_assert_eq!(dst.name, src.name);
            dst.data = src.data.clone();
        }
        clone.stage = self.stage;
        clone.parent_hash = self.parent_hash.clone();
        clone
    }

    /// Persist as one flat little-endian f32 file per named parameter plus a
    /// JSON manifest with stage, config, seeds, and hashes.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for e in &self.params.entries {
            let mut bytes = Vec::with_capacity(e.data.len() * 4);
            for v in &e.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            std::fs::write(dir.join(format!("{}.f32", e.name)), bytes)?;
        }
        let manifest = serde_json::json!({
            "stage": self.stage,
            "config": self.cfg,
            "seed": self.cfg.seed,
            "tokenizer_hash": self.tokenizer_hash,
            "parent_hash": self.parent_hash,
            "weights_hash": self.weights_hash(),
            "params": self.params.entries.iter().map(|e| {
                serde_json::json!({"name": e.name, "rows": e.rows, "cols": e.cols})
            }).collect::<Vec<_>>(),
        });
        std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<ArModel> {
        let manifest: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
        let cfg: ARConfig = serde_json::from_value(manifest["config"].clone())?;
        let stage: Stage = serde_json::from_value(manifest["stage"].clone())?;
        let tokenizer_hash = manifest["tokenizer_hash"].as_str().unwrap_or_default().to_string();
        let mut model = ArModel::new(cfg, tokenizer_hash);
        model.stage = stage;
        model.parent_hash = manifest["parent_hash"].as_str().map(str::to_string);
        for e in model.params.entries.iter_mut() {
            let bytes = std::fs::read(dir.join(format!("{}.f32", e.name)))?;
            if bytes.len() != e.data.len() * 4 {
                return Err(Error::ShapeMismatch(format!(
                    "param {} file size {} vs expected {}",
                    e.name,
                    bytes.len(),
                    e.data.len() * 4
                )));
            }
            e.data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
        }
        let expected = manifest["weights_hash"].as_str().unwrap_or_default();
        let got = model.weights_hash();
        if expected != got {
            return Err(Error::InvalidSpec(format!(
                "checkpoint weight hash mismatch: manifest {expected}, files {got}"
            )));
        }
        Ok(model)
    }

    /// Tokenizer-compatibility check, run before any scoring or training.
    pub fn verify_tokenizer(&self, tok: &MultimodalTokenizer) -> Result<()> {
        let got = tok.hash();
        if got != self.tokenizer_hash {
            return Err(Error::TokenizerHashMismatch {
                expected: self.tokenizer_hash.clone(),
                got,
            });
        }
        Ok(())
    }
}

fn sample_index(logits: &[f32], sampler: &SamplerParams, rng: &mut rand_chacha::ChaCha8Rng) -> usize {
    use rand::Rng;
    if sampler.temperature == 0.0 || sampler.top_k == 1 {
        return crate::encoder::argmax(logits);
    }
    // top-k restriction then temperature softmax
    let k = sampler.top_k.min(logits.len());
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap());
    let kept = &order[..k];
    let mx = logits[kept[0]];
    let weights: Vec<f64> = kept
        .iter()
        .map(|&i| (((logits[i] - mx) / sampler.temperature) as f64).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut target = rng.random::<f64>() * total;
    for (j, w) in weights.iter().enumerate() {
        target -= w;
        if target <= 0.0 {
            return kept[j];
        }
    }
    kept[k - 1]
}

/// Stage-1 pretraining: next-token cross-entropy on image positions with the
/// style slot filled by the learned null embedding. Trains base weights
/// only. Returns the per-step loss curve.
pub fn pretrain(
    model: &mut ArModel,
    seqs: &[TokenSequence],
    train: &TrainParams,
    seed: u64,
) -> Result<Vec<f32>> {
    if seqs.is_empty() {
        return Err(Error::EmptyDataset("pretraining".into()));
    }
    let mask = model.trainable_mask(Stage::Pretrain);
    let mut opt = Adam::new(
        &model.params,
        AdamConfig {
            warmup_steps: train.warmup_steps,
            grad_clip: train.grad_clip,
            ..AdamConfig::with_lr(train.lr)
        },
        mask,
    );
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut rng = rng_from(subseed(seed, "pretrain-shuffle"));
    let mut curve = Vec::new();
    for _epoch in 0..train.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        for chunk in order.chunks(train.batch_size) {
            // snapshot borrow: build graphs against the current params
            let model_ref = &*model;
            let loss = {
                let build = |i: usize| -> (f32, Grads) {
                    let seq = &seqs[i];
                    let mut t = Tape::new(&model_ref.params);
                    let style = model_ref.resampler.null_tokens_graph(&mut t);
                    let logits = model_ref
                        .logits_graph(&mut t, &seq.ids, seq.style_slot, StyleInput::Graph(style))
                        .expect("sequence fits");
                    let (targets, weights, count) = ArModel::image_targets(seq);
                    let nll = t.nll_sum(logits, targets, weights);
                    let loss = t.scale(nll, 1.0 / count.max(1) as f32);
                    (t.scalar(loss), t.backward(loss))
                };
                let results: Vec<(f32, Grads)> = chunk.par_iter().map(|&i| build(i)).collect();
                let mut total = Grads::zeros(model_ref.params.len());
                let mut loss_sum = 0.0f32;
                for (l, g) in &results {
                    total.accumulate(g);
                    loss_sum += *l;
                }
                total.scale(1.0 / chunk.len() as f32);
                (loss_sum / chunk.len() as f32, total)
            };
            opt.step(&mut model.params, &loss.1);
            curve.push(loss.0);
        }
    }
    Ok(curve)
}

/// Stage-2 style finetuning: per sample the style tokens are the noised
/// resampler output of the target image's own features (self-supervised).
/// Trains LoRA + resampler only; the base transformer and the encoder stay
/// frozen. Feature maps are precomputed with the frozen encoder.
pub fn finetune_style(
    model: &mut ArModel,
    pairs: &[(TokenSequence, FeatureMap)],
    encoder: &Encoder,
    gamma_train: f32,
    train: &TrainParams,
    seed: u64,
) -> Result<Vec<f32>> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("style finetuning".into()));
    }
    if !encoder.frozen {
        return Err(Error::StageContract(
            "style finetuning requires a frozen encoder".into(),
        ));
    }
    if model.stage != Stage::Pretrain {
        return Err(Error::StageContract(format!(
            "style finetuning expects a pretrain-stage checkpoint, got {:?}",
            model.stage
        )));
    }
    let parent = model.weights_hash();
    let parent_base = model.base_weights_hash();
    let mask = model.trainable_mask(Stage::Style);
    let mut opt = Adam::new(
        &model.params,
        AdamConfig {
            warmup_steps: train.warmup_steps,
            grad_clip: train.grad_clip,
            ..AdamConfig::with_lr(train.lr)
        },
        mask,
    );
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = rng_from(subseed(seed, "finetune-shuffle"));
    let mut curve = Vec::new();
    let m = model.cfg.style_tokens;
    let c = model.cfg.width;
    let mut step = 0u64;
    for _epoch in 0..train.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        for chunk in order.chunks(train.batch_size) {
            let noise_seed = subseed(seed, &format!("noise-step-{step}"));
            let (loss, grads) = {
                let model_ref = &*model;
                let build = |i: usize| -> (f32, Grads) {
                    let (seq, fmap) = &pairs[i];
                    let mut t = Tape::new(&model_ref.params);
                    let style = model_ref.resampler.forward(&mut t, fmap);
                    let style = if gamma_train > 0.0 {
                        let noise: Vec<f32> =
                            style_noise(m, c, subseed(noise_seed, &format!("s{i}")))
                                .into_iter()
                                .map(|x| x * gamma_train)
                                .collect();
                        t.add_const(style, Arc::new(noise))
                    } else {
                        style
                    };
                    let logits = model_ref
                        .logits_graph(&mut t, &seq.ids, seq.style_slot, StyleInput::Graph(style))
                        .expect("sequence fits");
                    let (targets, weights, count) = ArModel::image_targets(seq);
                    let nll = t.nll_sum(logits, targets, weights);
                    let loss = t.scale(nll, 1.0 / count.max(1) as f32);
                    (t.scalar(loss), t.backward(loss))
                };
                let results: Vec<(f32, Grads)> = chunk.par_iter().map(|&i| build(i)).collect();
                let mut total = Grads::zeros(model_ref.params.len());
                let mut loss_sum = 0.0f32;
                for (l, g) in &results {
                    total.accumulate(g);
                    loss_sum += *l;
                }
                total.scale(1.0 / chunk.len() as f32);
                (loss_sum / chunk.len() as f32, total)
            };
            opt.step(&mut model.params, &grads);
            step += 1;
            curve.push(loss);
        }
    }
    debug_assert_eq!(model.base_weights_hash(), parent_base);
    model.stage = Stage::Style;
    model.parent_hash = Some(parent);
    Ok(curve)
}
