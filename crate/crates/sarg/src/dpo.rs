//! Preference post-training: the style-stage checkpoint is optimized
//! against a frozen copy of itself with the standard DPO objective
//! -log sigmoid(beta * ((log pi(x_w) - log pi_ref(x_w)) - (log pi(x_l) - log pi_ref(x_l))))
//! where the log-likelihoods run over image tokens only, conditioned on the
//! style tokens stored in each triplet. Only LoRA and resampler weights move.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::armodel::{ArModel, Stage, StyleInput};
use crate::autograd::{Grads, Tape};
use crate::curation::PreferenceTriplet;
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig};
use crate::rng::{rng_from, subseed};
use crate::tokenizer::{MultimodalTokenizer, TokenSequence};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DpoConfig {
    pub beta: f32,
    pub lr: f32,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        DpoConfig {
            beta: 0.1,
            lr: 1e-5,
            steps: 100,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "beta {} must be > 0",
                self.beta
            )));
        }
        Ok(())
    }
}

fn triplet_sequences(
    tok: &MultimodalTokenizer,
    t: &PreferenceTriplet,
) -> Result<(TokenSequence, TokenSequence)> {
    Ok((
        tok.assemble(&t.prompt, Some(&t.chosen))?,
        tok.assemble(&t.prompt, Some(&t.rejected))?,
    ))
}

fn softplus(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else if x < -20.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn check_compatible(policy: &ArModel, reference: &ArModel) -> Result<()> {
    if policy.tokenizer_hash != reference.tokenizer_hash {
        return Err(Error::TokenizerHashMismatch {
            expected: reference.tokenizer_hash.clone(),
            got: policy.tokenizer_hash.clone(),
        });
    }
    Ok(())
}

/// Mean DPO loss over a batch (value only, no gradients).
pub fn dpo_loss(
    policy: &ArModel,
    reference: &ArModel,
    tok: &MultimodalTokenizer,
    batch: &[PreferenceTriplet],
    beta: f32,
) -> Result<f32> {
    check_compatible(policy, reference)?;
    policy.verify_tokenizer(tok)?;
    if batch.is_empty() {
        return Err(Error::EmptyDataset("dpo loss batch".into()));
    }
    let mut total = 0.0f64;
    for t in batch {
        let (sw, sl) = triplet_sequences(tok, t)?;
        let lp_w = policy.sequence_logprob(&sw, &t.style_tokens)?;
        let lp_l = policy.sequence_logprob(&sl, &t.style_tokens)?;
        let lr_w = reference.sequence_logprob(&sw, &t.style_tokens)?;
        let lr_l = reference.sequence_logprob(&sl, &t.style_tokens)?;
        let inner = beta * ((lp_w - lr_w) - (lp_l - lr_l));
        total += softplus(-inner) as f64;
    }
    Ok((total / batch.len() as f64) as f32)
}

/// Mean implicit reward margin beta * Delta(log-ratios); positive means the
/// policy prefers chosen over rejected more strongly than the reference.
pub fn implicit_reward_margin(
    policy: &ArModel,
    reference: &ArModel,
    tok: &MultimodalTokenizer,
    triplets: &[PreferenceTriplet],
    beta: f32,
) -> Result<f32> {
    check_compatible(policy, reference)?;
    if triplets.is_empty() {
        return Err(Error::EmptyDataset("reward margin set".into()));
    }
    let mut total = 0.0f64;
    for t in triplets {
        let (sw, sl) = triplet_sequences(tok, t)?;
        let lp_w = policy.sequence_logprob(&sw, &t.style_tokens)?;
        let lp_l = policy.sequence_logprob(&sl, &t.style_tokens)?;
        let lr_w = reference.sequence_logprob(&sw, &t.style_tokens)?;
        let lr_l = reference.sequence_logprob(&sl, &t.style_tokens)?;
        total += (beta * ((lp_w - lr_w) - (lp_l - lr_l))) as f64;
    }
    Ok((total / triplets.len() as f64) as f32)
}

/// One triplet's loss graph against precomputed reference log-probs.
/// Returns (loss value, gradients).
fn triplet_grad(
    policy: &ArModel,
    sw: &TokenSequence,
    sl: &TokenSequence,
    style: &crate::resampler::StyleTokens,
    ref_shift: f32,
    beta: f32,
) -> (f32, Grads) {
    let mut t = Tape::new(&policy.params);
    let lp_w = policy
        .logprob_graph(&mut t, sw, StyleInput::Const(style))
        .expect("triplet sequence fits");
    let lp_l = policy
        .logprob_graph(&mut t, sl, StyleInput::Const(style))
        .expect("triplet sequence fits");
    let diff = t.sub(lp_w, lp_l);
    let shifted = t.add_const(diff, Arc::new(vec![-ref_shift]));
    let inner = t.scale(shifted, beta);
    let neg = t.scale(inner, -1.0);
    let loss = t.softplus(neg);
    let loss = t.sum_all(loss);
    (t.scalar(loss), t.backward(loss))
}

/// DPO post-training. The reference is a frozen deep copy of the input
/// checkpoint; the returned policy carries stage `dpo` and the input's
/// weight hash as parent. Returns (policy, per-step loss curve).
pub fn dpo_train(
    ckpt: &ArModel,
    tok: &MultimodalTokenizer,
    triplets: &[PreferenceTriplet],
    cfg: &DpoConfig,
) -> Result<(ArModel, Vec<f32>)> {
    cfg.validate()?;
    if ckpt.stage != Stage::Style {
        return Err(Error::StageContract(format!(
            "dpo expects a style-stage checkpoint, got {:?}",
            ckpt.stage
        )));
    }
    if triplets.is_empty() {
        return Err(Error::EmptyDataset("dpo triplets".into()));
    }
    ckpt.verify_tokenizer(tok)?;

    let reference = ckpt.deep_clone();
    let ref_hash = reference.weights_hash();
    let mut policy = ckpt.deep_clone();
    policy.parent_hash = Some(ckpt.weights_hash());
    let base_before = policy.base_weights_hash();

    // the reference never moves, so its log-ratio shifts are constants
    let prepared: Vec<(TokenSequence, TokenSequence, f32)> = triplets
        .par_iter()
        .map(|t| {
            let (sw, sl) = triplet_sequences(tok, t)?;
            let lr_w = reference.sequence_logprob(&sw, &t.style_tokens)?;
            let lr_l = reference.sequence_logprob(&sl, &t.style_tokens)?;
            Ok::<_, Error>((sw, sl, lr_w - lr_l))
        })
        .collect::<Result<_>>()?;

    let mask = policy.trainable_mask(Stage::Dpo);
    let mut opt = Adam::new(
        &policy.params,
        AdamConfig {
            warmup_steps: 0,
            grad_clip: 1.0,
            ..AdamConfig::with_lr(cfg.lr)
        },
        mask,
    );
    let mut rng = rng_from(subseed(cfg.seed, "dpo-batches"));
    let mut curve = Vec::with_capacity(cfg.steps);
    for _step in 0..cfg.steps {
        use rand::seq::IndexedRandom;
        let idx: Vec<usize> = (0..triplets.len())
            .collect::<Vec<_>>()
            .choose_multiple(&mut rng, cfg.batch_size.min(triplets.len()))
            .copied()
            .collect();
        let (loss, grads) = {
            let policy_ref = &policy;
            let results: Vec<(f32, Grads)> = idx
                .par_iter()
                .map(|&i| {
                    let (sw, sl, shift) = &prepared[i];
                    triplet_grad(
                        policy_ref,
                        sw,
                        sl,
                        &triplets[i].style_tokens,
                        *shift,
                        cfg.beta,
                    )
                })
                .collect();
            let mut total = Grads::zeros(policy_ref.params.len());
            let mut loss_sum = 0.0f32;
            for (l, g) in &results {
                total.accumulate(g);
                loss_sum += *l;
            }
            total.scale(1.0 / idx.len() as f32);
            (loss_sum / idx.len() as f32, total)
        };
        opt.step(&mut policy.params, &grads);
        curve.push(loss);
    }

    // freezing contracts: reference untouched, base weights untouched
    if reference.weights_hash() != ref_hash {
        return Err(Error::StageContract(
            "reference checkpoint changed during dpo".into(),
        ));
    }
    if policy.base_weights_hash() != base_before {
        return Err(Error::StageContract(
            "base weights changed during dpo".into(),
        ));
    }
    policy.stage = Stage::Dpo;
    Ok((policy, curve))
}
