//! Dataset curation: binary (prompt, image) pairs with the style reference
//! dropped, stylized/raw epoch mixing, and preference-triplet construction
//! for post-training. The schema carries no reference-image field — styles
//! enter training only through the rendered target image itself.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::armodel::{ArModel, SamplerParams, Stage};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::procgen::{make_raw, render_unchecked, sample_content, RenderedSample, StyleSpec};
use crate::resampler::StyleTokens;
use crate::rng::{rng_from, subseed};
use crate::tokenizer::{MultimodalTokenizer, TokenGrid, TokenSequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Stylized,
    Raw,
}

/// A training example: prompt text plus the target image, nothing else.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BinaryPair {
    pub prompt: String,
    pub image: RenderedSample,
    pub origin: Origin,
}

/// Per-epoch composition. `ratio` is stylized:raw; the raw count is the
/// exact floor of `stylized_count * ratio.1 / ratio.0`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MixPlan {
    pub stylized_count: usize,
    pub raw_count: usize,
    pub ratio: (u32, u32),
    pub epoch_seed: u64,
}

impl MixPlan {
    pub fn new(stylized_count: usize, ratio: (u32, u32), epoch_seed: u64) -> Result<Self> {
        if ratio.0 == 0 {
            return Err(Error::InvalidArgument(
                "mix ratio must have a nonzero stylized part".into(),
            ));
        }
        let raw_count = stylized_count * ratio.1 as usize / ratio.0 as usize;
        Ok(MixPlan {
            stylized_count,
            raw_count,
            ratio,
            epoch_seed,
        })
    }

    pub fn epoch_len(&self) -> usize {
        self.stylized_count + self.raw_count
    }
}

/// Render `n_per_style` pairs per style over sampled contents. The style
/// specs themselves are consumed here and never stored in the output.
pub fn build_stylized(
    styles: &[StyleSpec],
    n_per_style: usize,
    seed: u64,
) -> Result<Vec<BinaryPair>> {
    if styles.is_empty() {
        return Err(Error::EmptyDataset("no training styles".into()));
    }
    if n_per_style == 0 {
        return Err(Error::InvalidArgument("n_per_style must be > 0".into()));
    }
    let pairs: Vec<BinaryPair> = styles
        .par_iter()
        .flat_map_iter(|style| {
            let style_seed = subseed(seed, &format!("style-{}", style.style_id));
            (0..n_per_style).map(move |i| {
                let s = subseed(style_seed, &format!("render-{i}"));
                let content = sample_content(&mut rng_from(subseed(s, "content")));
                let sample = render_unchecked(style, &content, s);
                BinaryPair {
                    prompt: sample.prompt.clone(),
                    image: sample,
                    origin: Origin::Stylized,
                }
            })
        })
        .collect();
    Ok(pairs)
}

/// A pool of style-free images for mixing.
pub fn build_raw_pool(n: usize, seed: u64) -> Vec<BinaryPair> {
    (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let sample = make_raw(subseed(seed, &format!("raw-{i}")));
            BinaryPair {
                prompt: sample.prompt.clone(),
                image: sample,
                origin: Origin::Raw,
            }
        })
        .collect()
}

/// One epoch: the full stylized set plus a freshly sampled raw subset,
/// shuffled. The stylized part is identical across epochs; only the raw
/// subset depends on `epoch_seed`.
pub fn mixed_epoch(
    stylized: &[BinaryPair],
    raw_pool: &[BinaryPair],
    plan: &MixPlan,
) -> Result<Vec<BinaryPair>> {
    if plan.stylized_count != stylized.len() {
        return Err(Error::InvalidArgument(format!(
            "plan expects {} stylized pairs, got {}",
            plan.stylized_count,
            stylized.len()
        )));
    }
    if raw_pool.len() < plan.raw_count {
        return Err(Error::EmptyDataset(format!(
            "raw pool has {} pairs, epoch needs {}",
            raw_pool.len(),
            plan.raw_count
        )));
    }
    use rand::seq::{IndexedRandom, SliceRandom};
    let mut rng = rng_from(subseed(plan.epoch_seed, "epoch-raw"));
    let raw_idx: Vec<usize> = (0..raw_pool.len())
        .collect::<Vec<_>>()
        .choose_multiple(&mut rng, plan.raw_count)
        .copied()
        .collect();
    let mut epoch: Vec<BinaryPair> = stylized.to_vec();
    epoch.extend(raw_idx.into_iter().map(|i| raw_pool[i].clone()));
    epoch.shuffle(&mut rng);
    debug_assert_eq!(epoch.len(), plan.epoch_len());
    Ok(epoch)
}

/// Tokenize a pair for teacher-forced training.
pub fn pair_to_sequence(tok: &MultimodalTokenizer, pair: &BinaryPair) -> Result<TokenSequence> {
    let grid = tok.codebook.encode_image(&pair.image.image)?;
    tok.assemble(&pair.prompt, Some(&grid))
}

/// Minimal judge interface for preference selection: probability that an
/// image depicts a given content. Real multimodal judges can be plugged in
/// behind this trait.
pub trait ContentJudge: Sync {
    fn content_prob(&self, img: &crate::procgen::Image, content_id: u32) -> f32;
    fn is_frozen(&self) -> bool;
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PreferenceTriplet {
    pub prompt: String,
    pub chosen: TokenGrid,
    pub rejected: TokenGrid,
    /// style id of the reference image the style tokens were built from
    pub style_image_id: u32,
    /// the exact style tokens used for both generations and later scoring
    pub style_tokens: StyleTokens,
    pub judge_chosen: f32,
    pub judge_rejected: f32,
}

/// Two generations per (style, prompt) with distinct seeds; the judge picks
/// the better content match. Scores closer than `tie_threshold` are dropped.
/// Returns the triplets and the dropped-tie count.
#[allow(clippy::too_many_arguments)]
pub fn build_dpo_pairs(
    model: &ArModel,
    tok: &MultimodalTokenizer,
    encoder: &Encoder,
    judge: &dyn ContentJudge,
    style_refs: &[RenderedSample],
    prompts: &[String],
    alpha: f32,
    gamma: f32,
    sampler: &SamplerParams,
    seed: u64,
    tie_threshold: f32,
) -> Result<(Vec<PreferenceTriplet>, usize)> {
    if model.stage != Stage::Style {
        return Err(Error::StageContract(format!(
            "preference data needs a style-stage checkpoint, got {:?}",
            model.stage
        )));
    }
    if !judge.is_frozen() {
        return Err(Error::StageContract("judge must be frozen".into()));
    }
    model.verify_tokenizer(tok)?;

    let mut triplets = Vec::new();
    let mut dropped = 0usize;
    for r in style_refs {
        let style_id = r.style_id.ok_or_else(|| {
            Error::InvalidArgument("style reference sample lacks a style id".into())
        })?;
        let style = crate::resampler::style_enhanced_from_image(
            &model.resampler,
            &model.params,
            encoder,
            &r.image,
            alpha,
            gamma,
            subseed(seed, &format!("se-{style_id}")),
        )?;
        let per_prompt: Vec<_> = prompts
            .par_iter()
            .map(|prompt| {
                let s0 = SamplerParams {
                    seed: subseed(seed, &format!("gen-{style_id}-{prompt}-0")),
                    ..*sampler
                };
                let s1 = SamplerParams {
                    seed: subseed(seed, &format!("gen-{style_id}-{prompt}-1")),
                    ..*sampler
                };
                let a = model.generate(prompt, &style, &s0, tok)?;
                let b = model.generate(prompt, &style, &s1, tok)?;
                Ok::<_, Error>((prompt.clone(), a, b))
            })
            .collect();
        for item in per_prompt {
            let (prompt, a, b) = item?;
            let content_id = content_of_prompt(&prompt)?;
            let img_a = tok.codebook.decode_image(&a)?;
            let img_b = tok.codebook.decode_image(&b)?;
            let sa = judge.content_prob(&img_a, content_id);
            let sb = judge.content_prob(&img_b, content_id);
            if (sa - sb).abs() < tie_threshold {
                dropped += 1;
                continue;
            }
            let (chosen, rejected, jc, jr) = if sa >= sb {
                (a, b, sa, sb)
            } else {
                (b, a, sb, sa)
            };
            triplets.push(PreferenceTriplet {
                prompt,
                chosen,
                rejected,
                style_image_id: style_id,
                style_tokens: style.clone(),
                judge_chosen: jc,
                judge_rejected: jr,
            });
        }
    }
    Ok((triplets, dropped))
}

/// Map a prompt back to its content id ("a circle" -> circle's index).
pub fn content_of_prompt(prompt: &str) -> Result<u32> {
    for idx in 0..crate::procgen::NUM_SHAPES {
        let shape = crate::procgen::Shape::from_index(idx);
        if format!("a {}", shape.name()) == prompt {
            return Ok(idx as u32);
        }
    }
    Err(Error::UnknownWord(prompt.to_string()))
}

/// Persist pairs as JSONL, one record per line.
pub fn save_jsonl<T: Serialize>(items: &[T], path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut f, item)?;
        writeln!(f)?;
    }
    Ok(())
}

pub fn load_jsonl<T: for<'de> Deserialize<'de>>(path: &std::path::Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
