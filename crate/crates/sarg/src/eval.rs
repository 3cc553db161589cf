//! Evaluation: an independently trained judge classifier, the metric suite
//! (prompt adherence, style consistency, content leakage), and the held-out
//! generation protocol. The judge is deliberately a different architecture
//! and seed from the conditioning encoder so the evaluation never scores a
//! model against its own conditioning features.

use rayon::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::armodel::{ArModel, SamplerParams, Stage};
use crate::curation::{content_of_prompt, ContentJudge};
use crate::encoder::{
    argmax, center_object, pretrain_encoder, segment_image, Encoder, EncoderConfig,
    SEGMENT_TAU_DEFAULT,
};
use crate::error::{Error, Result};
use crate::procgen::{
    render_unchecked, sample_content_for_shape, Image, RenderedSample, Shape, StyleSpec,
    IMG_SIZE, NUM_SHAPES,
};
use crate::resampler::style_enhanced_from_image;
use crate::rng::{rng_from, subseed};
use crate::tokenizer::MultimodalTokenizer;

/// Frozen scoring classifier. Narrower conv trunk than the conditioning
/// encoder, trained with its own seed; content head scores prompt adherence
/// and leakage, pooled trunk features serve as the style embedding.
pub struct Judge {
    pub enc: Encoder,
}

impl Judge {
    /// Train a fresh judge on labeled renders. Uses a different trunk shape
    /// than the default conditioning encoder on purpose.
    pub fn train(
        dataset: &[RenderedSample],
        n_styles: usize,
        epochs: usize,
        batch: usize,
        lr: f32,
        seed: u64,
    ) -> Result<Judge> {
        let cfg = EncoderConfig {
            channels: [12, 24, 48],
            n_styles,
            seed: subseed(seed, "judge-arch"),
        };
        let enc = Encoder::new(cfg);
        // center the object in every training image: the content head reads
        // the full feature grid, and centering removes position as a nuisance
        // variable (held-out accuracy collapses without it)
        let centered: Vec<RenderedSample> = dataset
            .iter()
            .map(|s| {
                let mut c = s.clone();
                c.image = center_object(&s.image);
                c
            })
            .collect();
        let enc = pretrain_encoder(enc, &centered, epochs, batch, lr, subseed(seed, "judge-train"))?;
        Ok(Judge { enc })
    }

    pub fn content_pred(&self, img: &Image) -> u32 {
        let (_, content_logits) = self.enc.classify(&center_object(img));
        argmax(&content_logits) as u32
    }

    pub fn style_embedding(&self, img: &Image) -> Vec<f32> {
        self.enc.encode_unfrozen(&center_object(img)).pooled()
    }

    pub fn weights_hash(&self) -> String {
        self.enc.weights_hash()
    }
}

impl ContentJudge for Judge {
    fn content_prob(&self, img: &Image, content_id: u32) -> f32 {
        let (_, logits) = self.enc.classify(&center_object(img));
        let mx = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f32> = logits.iter().map(|l| (l - mx).exp()).collect();
        let z: f32 = exps.iter().sum();
        exps[content_id as usize] / z
    }

    fn is_frozen(&self) -> bool {
        self.enc.frozen
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConditionRow {
    pub condition: String,
    /// prompt-adherence accuracy
    pub pa: f32,
    /// mean cosine similarity of judge style embeddings
    pub sc_emb: f32,
    /// analytic style similarity (colors + texture spectrum)
    pub sc_tex: f32,
    /// content-leakage rate
    pub cl: f32,
    pub n_images: usize,
    pub seeds: Vec<u64>,
}

impl ConditionRow {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |x: f32| (0.0..=1.0).contains(&x);
        if !in_unit(self.pa) || !in_unit(self.sc_tex) || !in_unit(self.cl) {
            return Err(Error::InvalidSpec(format!(
                "metric out of range in condition {}",
                self.condition
            )));
        }
        if !(-1.0..=1.0).contains(&self.sc_emb) {
            return Err(Error::InvalidSpec(format!(
                "sc_emb out of range in condition {}",
                self.condition
            )));
        }
        if self.n_images == 0 {
            return Err(Error::InvalidSpec(format!(
                "condition {} has no images",
                self.condition
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<ConditionRow>,
    /// free-form context (e.g. reference values from the full-scale
    /// experiment whose structure this reproduces)
    pub metadata: serde_json::Value,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        for row in &self.rows {
            row.validate()?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("condition,pa,sc_emb,sc_tex,cl,n_images\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.4},{:.4},{:.4},{:.4},{}\n",
                r.condition, r.pa, r.sc_emb, r.sc_tex, r.cl, r.n_images
            ));
        }
        out
    }
}

/// Fraction of images whose judged content matches the prompt's content.
pub fn prompt_adherence(images: &[Image], prompts: &[String], judge: &Judge) -> Result<f32> {
    if !judge.is_frozen() {
        return Err(Error::StageContract("judge must be frozen".into()));
    }
    if images.len() != prompts.len() || images.is_empty() {
        return Err(Error::InvalidArgument(
            "prompt_adherence needs equal-length nonempty lists".into(),
        ));
    }
    let mut hits = 0usize;
    for (img, prompt) in images.iter().zip(prompts.iter()) {
        let target = content_of_prompt(prompt)?;
        if judge.content_pred(img) == target {
            hits += 1;
        }
    }
    Ok(hits as f32 / images.len() as f32)
}

fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let dot: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f32 = a.iter().map(|x| x * x).sum::<f32>().sqrt();
    let nb: f32 = b.iter().map(|x| x * x).sum::<f32>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Dominant background colors by seeded k-means (k=3) over pixels outside
/// the object mask.
fn dominant_colors(img: &Image, object_mask: &[bool]) -> Vec<f32> {
    let pixels: Vec<Vec<f32>> = (0..img.h * img.w)
        .filter(|&i| !object_mask[i])
        .map(|i| img.data[i * 3..i * 3 + 3].to_vec())
        .collect();
    if pixels.is_empty() {
        return vec![0.5; 9];
    }
    let k = 3.min(pixels.len());
    let mut c = crate::tokenizer::kmeans(&pixels, k, 3, 10, &mut rng_from(0));
    c.resize(9, *c.last().unwrap_or(&0.5));
    c
}

/// Symmetric chamfer distance between two color sets (rows of 3).
fn chamfer(a: &[f32], b: &[f32]) -> f32 {
    let rows = |s: &[f32]| -> Vec<[f32; 3]> {
        s.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
    };
    let (ra, rb) = (rows(a), rows(b));
    let side = |from: &[[f32; 3]], to: &[[f32; 3]]| -> f32 {
        from.iter()
            .map(|p| {
                to.iter()
                    .map(|q| {
                        ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2))
                            .sqrt()
                    })
                    .fold(f32::INFINITY, f32::min)
            })
            .sum::<f32>()
            / from.len() as f32
    };
    0.5 * (side(&ra, &rb) + side(&rb, &ra))
}

const RADIAL_BINS: usize = 16;

/// Normalized radial energy profile of the background's 2D spectrum. Object
/// pixels are replaced by the background mean so they don't alias in.
fn radial_profile(img: &Image, object_mask: &[bool]) -> Vec<f32> {
    let n = img.h;
    let mut gray = vec![0.0f32; n * n];
    let mut bg_sum = 0.0f32;
    let mut bg_count = 0usize;
    for i in 0..n * n {
        let g = (img.data[i * 3] + img.data[i * 3 + 1] + img.data[i * 3 + 2]) / 3.0;
        gray[i] = g;
        if !object_mask[i] {
            bg_sum += g;
            bg_count += 1;
        }
    }
    let bg_mean = if bg_count > 0 {
        bg_sum / bg_count as f32
    } else {
        0.5
    };
    for i in 0..n * n {
        if object_mask[i] {
            gray[i] = bg_mean;
        }
    }

    // row-column 2D FFT
    let mut planner = FftPlanner::<f32>::new();
    let fft = planner.plan_fft_forward(n);
    let mut grid: Vec<Complex<f32>> = gray.iter().map(|&g| Complex::new(g, 0.0)).collect();
    for row in grid.chunks_exact_mut(n) {
        fft.process(row);
    }
    let mut col = vec![Complex::new(0.0f32, 0.0); n];
    for x in 0..n {
        for y in 0..n {
            col[y] = grid[y * n + x];
        }
        fft.process(&mut col);
        for y in 0..n {
            grid[y * n + x] = col[y];
        }
    }

    let mut bins = vec![0.0f32; RADIAL_BINS];
    for y in 0..n {
        for x in 0..n {
            // signed frequencies; skip DC
            let fy = if y <= n / 2 { y as f32 } else { y as f32 - n as f32 };
            let fx = if x <= n / 2 { x as f32 } else { x as f32 - n as f32 };
            let r = (fx * fx + fy * fy).sqrt();
            if r < 0.5 {
                continue;
            }
            let bin = ((r / (n as f32 / 2.0)) * RADIAL_BINS as f32) as usize;
            let bin = bin.min(RADIAL_BINS - 1);
            bins[bin] += grid[y * n + x].norm_sqr();
        }
    }
    let total: f32 = bins.iter().sum();
    if total > 0.0 {
        for b in bins.iter_mut() {
            *b /= total;
        }
    }
    bins
}

/// Analytic style similarity of two images in [0, 1]: half dominant-color
/// chamfer agreement, half texture-spectrum agreement, both over the
/// background (objects segmented out). Symmetric by construction.
pub fn sc_tex_pair(a: &Image, b: &Image) -> f32 {
    let ma = segment_image(a, SEGMENT_TAU_DEFAULT).mask;
    let mb = segment_image(b, SEGMENT_TAU_DEFAULT).mask;
    let d_color = (chamfer(&dominant_colors(a, &ma), &dominant_colors(b, &mb)) / 0.6).min(1.0);
    let pa = radial_profile(a, &ma);
    let pb = radial_profile(b, &mb);
    let d_tex: f32 = pa.iter().zip(pb.iter()).map(|(x, y)| (x - y).abs()).sum::<f32>() / 2.0;
    1.0 - 0.5 * d_color - 0.5 * d_tex
}

/// (SC_emb, SC_tex) averaged over corresponding (generated, reference)
/// pairs. The lists must have equal length.
pub fn style_consistency(
    generated: &[Image],
    references: &[Image],
    judge: &Judge,
) -> Result<(f32, f32)> {
    if generated.len() != references.len() || generated.is_empty() {
        return Err(Error::InvalidArgument(
            "style_consistency needs equal-length nonempty lists".into(),
        ));
    }
    let pairs: Vec<(f32, f32)> = generated
        .par_iter()
        .zip(references.par_iter())
        .map(|(g, r)| {
            let emb = cosine(&judge.style_embedding(g), &judge.style_embedding(r));
            (emb, sc_tex_pair(g, r))
        })
        .collect();
    let n = pairs.len() as f32;
    Ok((
        pairs.iter().map(|p| p.0).sum::<f32>() / n,
        pairs.iter().map(|p| p.1).sum::<f32>() / n,
    ))
}

/// Fraction of generations that depict the reference image's content
/// instead of the prompt's. The protocol must use distractor references:
/// a reference whose content equals its prompt's content is an error.
pub fn content_leakage(
    generated: &[Image],
    references: &[RenderedSample],
    prompts: &[String],
    judge: &Judge,
) -> Result<f32> {
    if generated.len() != references.len()
        || generated.len() != prompts.len()
        || generated.is_empty()
    {
        return Err(Error::InvalidArgument(
            "content_leakage needs equal-length nonempty lists".into(),
        ));
    }
    let mut leaks = 0usize;
    for ((img, r), prompt) in generated.iter().zip(references).zip(prompts) {
        let prompt_content = content_of_prompt(prompt)?;
        if r.content_id == prompt_content {
            return Err(Error::InvalidSpec(format!(
                "reference content {} equals prompt content; leakage unmeasurable",
                r.content_id
            )));
        }
        let pred = judge.content_pred(img);
        if pred == r.content_id && pred != prompt_content {
            leaks += 1;
        }
    }
    Ok(leaks as f32 / generated.len() as f32)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub images_per_cell: usize,
    pub alpha: f32,
    pub gamma: f32,
    pub sampler: SamplerParams,
    pub seed: u64,
    /// when false, plain (non-enhanced) noised style tokens are used —
    /// the enhancement-ablation arm
    pub style_enhanced: bool,
}

#[derive(Clone)]
pub struct CellImage {
    pub style_idx: usize,
    pub prompt: String,
    pub image: Image,
    pub seed: u64,
}

pub struct ProtocolOutput {
    pub row: ConditionRow,
    pub images: Vec<CellImage>,
    pub references: Vec<RenderedSample>,
}

/// Held-out evaluation: for every (style, content) cell, render a reference
/// image of that style with a distractor content, build style tokens from
/// it, generate `images_per_cell` images, and score all metrics.
#[allow(clippy::too_many_arguments)]
pub fn run_protocol(
    model: &ArModel,
    tok: &MultimodalTokenizer,
    encoder: &Encoder,
    judge: &Judge,
    styles: &[StyleSpec],
    contents: &[Shape],
    cfg: &ProtocolConfig,
    condition: &str,
) -> Result<ProtocolOutput> {
    if styles.is_empty() || contents.is_empty() || cfg.images_per_cell == 0 {
        return Err(Error::InvalidArgument(
            "protocol needs styles, contents, and images_per_cell > 0".into(),
        ));
    }
    if model.stage < Stage::Style {
        return Err(Error::StageContract(
            "protocol evaluation needs a style-stage (or later) checkpoint".into(),
        ));
    }
    model.verify_tokenizer(tok)?;

    struct Cell {
        style_idx: usize,
        prompt: String,
        reference: RenderedSample,
    }
    let mut cells = Vec::new();
    for (si, style) in styles.iter().enumerate() {
        for shape in contents {
            // distractor: the next shape around, never the prompt's own
            let distractor = Shape::from_index((shape.index() + 1) % NUM_SHAPES);
            let ref_seed = subseed(cfg.seed, &format!("ref-{si}-{}", shape.index()));
            let content = sample_content_for_shape(distractor, &mut rng_from(ref_seed));
            let reference = render_unchecked(style, &content, ref_seed);
            cells.push(Cell {
                style_idx: si,
                prompt: format!("a {}", shape.name()),
                reference,
            });
        }
    }

    let per_cell: Vec<Result<Vec<(CellImage, RenderedSample)>>> = cells
        .par_iter()
        .map(|cell| {
            let se_seed = subseed(cfg.seed, &format!("se-{}-{}", cell.style_idx, cell.prompt));
            let style_tokens = if cfg.style_enhanced {
                style_enhanced_from_image(
                    &model.resampler,
                    &model.params,
                    encoder,
                    &cell.reference.image,
                    cfg.alpha,
                    cfg.gamma,
                    se_seed,
                )?
            } else {
                let f = encoder.encode(&cell.reference.image)?;
                let plain = model.resampler.resample(&model.params, &f)?;
                crate::resampler::inject_noise(&plain, cfg.gamma, se_seed)?
            };
            let mut out = Vec::with_capacity(cfg.images_per_cell);
            for i in 0..cfg.images_per_cell {
                let gen_seed = subseed(
                    cfg.seed,
                    &format!("gen-{}-{}-{i}", cell.style_idx, cell.prompt),
                );
                let sampler = SamplerParams {
                    seed: gen_seed,
                    ..cfg.sampler
                };
                let grid = model.generate(&cell.prompt, &style_tokens, &sampler, tok)?;
                let image = tok.codebook.decode_image(&grid)?;
                out.push((
                    CellImage {
                        style_idx: cell.style_idx,
                        prompt: cell.prompt.clone(),
                        image,
                        seed: gen_seed,
                    },
                    cell.reference.clone(),
                ));
            }
            Ok(out)
        })
        .collect();

    let mut images = Vec::new();
    let mut references = Vec::new();
    for r in per_cell {
        for (img, reference) in r? {
            images.push(img);
            references.push(reference);
        }
    }

    let gen_images: Vec<Image> = images.iter().map(|c| c.image.clone()).collect();
    let prompts: Vec<String> = images.iter().map(|c| c.prompt.clone()).collect();
    let ref_images: Vec<Image> = references.iter().map(|r| r.image.clone()).collect();

    let pa = prompt_adherence(&gen_images, &prompts, judge)?;
    let (sc_emb, sc_tex) = style_consistency(&gen_images, &ref_images, judge)?;
    let cl = content_leakage(&gen_images, &references, &prompts, judge)?;

    let row = ConditionRow {
        condition: condition.to_string(),
        pa,
        sc_emb,
        sc_tex,
        cl,
        n_images: gen_images.len(),
        seeds: vec![cfg.seed],
    };
    row.validate()?;
    debug_assert_eq!(
        row.n_images,
        styles.len() * contents.len() * cfg.images_per_cell
    );
    Ok(ProtocolOutput {
        row,
        images,
        references,
    })
}

/// Uniform-noise image helper (chance-level baselines in tests and docs).
pub fn noise_image(seed: u64) -> Image {
    use rand::Rng;
    let mut rng = rng_from(seed);
    let mut img = Image::new(IMG_SIZE, IMG_SIZE);
    for v in img.data.iter_mut() {
        *v = rng.random();
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::procgen::{make_raw, make_style_set, sample_content, ALL_SHAPES};

    fn labeled_dataset(styles: &[StyleSpec], per_style: usize, seed: u64) -> Vec<RenderedSample> {
        let mut out = Vec::new();
        for (i, s) in styles.iter().enumerate() {
            for j in 0..per_style {
                let ss = subseed(seed, &format!("{i}-{j}"));
                // cycle shapes so every content appears for every style
                let shape = ALL_SHAPES[j % NUM_SHAPES];
                let content = sample_content_for_shape(shape, &mut rng_from(ss));
                out.push(render_unchecked(s, &content, ss));
            }
        }
        out
    }

    fn trained_judge() -> (&'static Vec<StyleSpec>, &'static Judge) {
        use std::sync::OnceLock;
        static CACHE: OnceLock<(Vec<StyleSpec>, Judge)> = OnceLock::new();
        let (styles, judge) = CACHE.get_or_init(|| {
            let (train, _) = make_style_set(6, 11, 1).unwrap();
            let mut data = labeled_dataset(&train, 160, 5);
            data.extend((0..320).map(|i| make_raw(9000 + i)));
            let judge = Judge::train(&data, train.len(), 30, 16, 1e-3, 21).unwrap();
            (train, judge)
        });
        (styles, judge)
    }

    #[test]
    fn judge_differs_from_conditioning_encoder() {
        let (_, judge) = trained_judge();
        let enc = Encoder::new(EncoderConfig::new(5, 1));
        assert_ne!(judge.weights_hash(), enc.weights_hash());
        assert_ne!(judge.enc.cfg.channels, enc.cfg.channels);
        assert!(judge.is_frozen());
    }

    #[test]
    fn adherence_oracle_derangement_and_chance() {
        let (train, judge) = trained_judge();
        // oracle: images rendered from the prompts' own contents
        let mut images = Vec::new();
        let mut prompts = Vec::new();
        for (i, shape) in ALL_SHAPES.iter().enumerate() {
            for j in 0..4 {
                let s = subseed(33, &format!("{i}-{j}"));
                let content = sample_content_for_shape(*shape, &mut rng_from(s));
                images.push(render_unchecked(&train[i % train.len()], &content, s).image);
                prompts.push(format!("a {}", shape.name()));
            }
        }
        let pa = prompt_adherence(&images, &prompts, &judge).unwrap();
        assert!(pa >= 0.85, "oracle PA {pa}");

        // derangement: every prompt names a different shape than rendered
        let shifted: Vec<String> = prompts
            .iter()
            .map(|p| {
                let c = content_of_prompt(p).unwrap();
                let s = Shape::from_index(((c + 1) as usize) % NUM_SHAPES);
                format!("a {}", s.name())
            })
            .collect();
        let pa_shift = prompt_adherence(&images, &shifted, &judge).unwrap();
        assert!(pa_shift <= 1.0 - pa + 0.15, "derangement PA {pa_shift}");

        // uniform-noise images against uniformly random prompts: chance 1/8
        use rand::Rng;
        let mut rng = rng_from(55);
        let noise: Vec<Image> = (0..400).map(|i| noise_image(700 + i)).collect();
        let rand_prompts: Vec<String> = (0..400)
            .map(|_| format!("a {}", ALL_SHAPES[rng.random_range(0..NUM_SHAPES)].name()))
            .collect();
        let pa_noise = prompt_adherence(&noise, &rand_prompts, &judge).unwrap();
        assert!(
            (pa_noise - 1.0 / 8.0).abs() <= 0.05,
            "chance-level PA {pa_noise}"
        );
    }

    #[test]
    fn sc_tex_self_same_style_and_disjoint_styles() {
        let (train, _) = make_style_set(8, 77, 1).unwrap();
        // self: exactly 1
        let s = subseed(1, "self");
        let img = render_unchecked(&train[0], &sample_content(&mut rng_from(s)), s).image;
        assert_eq!(sc_tex_pair(&img, &img), 1.0);

        // same style, different contents
        let mut same = Vec::new();
        for style in train.iter().take(5) {
            let s1 = subseed(2, &format!("a{}", style.style_id));
            let s2 = subseed(2, &format!("b{}", style.style_id));
            let a = render_unchecked(style, &sample_content_for_shape(Shape::Circle, &mut rng_from(s1)), s1);
            let b = render_unchecked(style, &sample_content_for_shape(Shape::Cross, &mut rng_from(s2)), s2);
            same.push(sc_tex_pair(&a.image, &b.image));
        }
        let mean_same: f32 = same.iter().sum::<f32>() / same.len() as f32;
        assert!(mean_same >= 0.9, "same-style SC_tex {mean_same} ({same:?})");

        // maximally different styles: disjoint palettes, different textures
        let dark = StyleSpec {
            style_id: 100,
            palette: vec![[0.0, 0.0, 0.05], [0.1, 0.0, 0.0], [0.05, 0.08, 0.0]],
            texture: crate::procgen::Texture::Plain,
            texture_freq: 1.0,
            texture_angle: 0.0,
        };
        let bright = StyleSpec {
            style_id: 101,
            palette: vec![[1.0, 1.0, 0.95], [0.9, 1.0, 1.0], [1.0, 0.9, 1.0]],
            texture: crate::procgen::Texture::Stripes,
            texture_freq: 7.0,
            texture_angle: 0.7,
        };
        let s1 = subseed(3, "dark");
        let s2 = subseed(3, "bright");
        let a = render_unchecked(&dark, &sample_content(&mut rng_from(s1)), s1);
        let b = render_unchecked(&bright, &sample_content(&mut rng_from(s2)), s2);
        let far = sc_tex_pair(&a.image, &b.image);
        assert!(far <= 0.5, "disjoint-style SC_tex {far}");
    }

    #[test]
    fn sc_tex_is_symmetric() {
        let (train, _) = make_style_set(4, 13, 1).unwrap();
        for i in 0..train.len() {
            for j in (i + 1)..train.len() {
                let si = subseed(4, &format!("i{i}"));
                let sj = subseed(4, &format!("j{j}"));
                let a = render_unchecked(&train[i], &sample_content(&mut rng_from(si)), si);
                let b = render_unchecked(&train[j], &sample_content(&mut rng_from(sj)), sj);
                let ab = sc_tex_pair(&a.image, &b.image);
                let ba = sc_tex_pair(&b.image, &a.image);
                assert!((ab - ba).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sc_emb_self_is_one() {
        let (train, judge) = trained_judge();
        let s = subseed(6, "x");
        let img = render_unchecked(&train[0], &sample_content(&mut rng_from(s)), s).image;
        let (emb, tex) = style_consistency(
            std::slice::from_ref(&img),
            std::slice::from_ref(&img),
            &judge,
        )
        .unwrap();
        assert!((emb - 1.0).abs() < 1e-5);
        assert_eq!(tex, 1.0);
    }

    #[test]
    fn leakage_zero_for_prompt_renders_and_one_for_copies() {
        let (train, judge) = trained_judge();
        let mut generated = Vec::new();
        let mut references = Vec::new();
        let mut prompts = Vec::new();
        for (i, shape) in ALL_SHAPES.iter().enumerate() {
            let style = &train[i % train.len()];
            let sp = subseed(7, &format!("p{i}"));
            let sr = subseed(7, &format!("r{i}"));
            let prompt_render =
                render_unchecked(style, &sample_content_for_shape(*shape, &mut rng_from(sp)), sp);
            let distractor = Shape::from_index((shape.index() + 3) % NUM_SHAPES);
            let reference = render_unchecked(
                style,
                &sample_content_for_shape(distractor, &mut rng_from(sr)),
                sr,
            );
            generated.push(prompt_render.image);
            references.push(reference);
            prompts.push(format!("a {}", shape.name()));
        }
        let cl = content_leakage(&generated, &references, &prompts, &judge).unwrap();
        assert!(cl <= 0.15, "prompt-render CL {cl}");

        // copies of the references leak fully (up to judge accuracy)
        let copies: Vec<Image> = references.iter().map(|r| r.image.clone()).collect();
        let cl_copy = content_leakage(&copies, &references, &prompts, &judge).unwrap();
        assert!(cl_copy >= 0.85, "copy CL {cl_copy}");

        // protocol violation: reference content equals prompt content
        let bad_prompts: Vec<String> = references
            .iter()
            .map(|r| {
                format!(
                    "a {}",
                    Shape::from_index(r.content_id as usize).name()
                )
            })
            .collect();
        assert!(content_leakage(&copies, &references, &bad_prompts, &judge).is_err());
    }

    #[test]
    fn report_validation_catches_out_of_range() {
        let mut row = ConditionRow {
            condition: "x".into(),
            pa: 0.5,
            sc_emb: 0.2,
            sc_tex: 0.9,
            cl: 0.0,
            n_images: 4,
            seeds: vec![1],
        };
        row.validate().unwrap();
        row.pa = 1.5;
        assert!(row.validate().is_err());
        row.pa = 0.5;
        row.n_images = 0;
        assert!(row.validate().is_err());
    }

    #[test]
    fn protocol_shape_and_determinism() {
        use crate::armodel::ARConfig;
        use crate::tokenizer::{fit_codebook, TextVocab};
        let imgs: Vec<Image> = (0..12).map(|i| make_raw(600 + i).image).collect();
        let refs: Vec<&Image> = imgs.iter().collect();
        let codebook = fit_codebook(&refs, 16, 4, 3).unwrap();
        let tok = MultimodalTokenizer::new(TextVocab::default_vocab(), codebook, 4);
        let cfg = ARConfig {
            layers: 2,
            heads: 2,
            width: 32,
            mlp_mult: 2,
            lora_rank: 2,
            ..ARConfig::for_tokenizer(&tok, 23)
        };
        let mut model = ArModel::new(cfg, tok.hash());
        model.stage = Stage::Style;
        let mut encoder = Encoder::new(EncoderConfig::new(4, 2));
        encoder.frozen = true;
        let (_, judge) = trained_judge();
        let (_, held) = make_style_set(4, 3, 2).unwrap();
        let pcfg = ProtocolConfig {
            images_per_cell: 2,
            alpha: 0.5,
            gamma: 0.05,
            sampler: SamplerParams::greedy(),
            seed: 9,
            style_enhanced: true,
        };
        let contents = [Shape::Circle, Shape::Square];
        let out = run_protocol(&model, &tok, &encoder, &judge, &held, &contents, &pcfg, "t")
            .unwrap();
        assert_eq!(out.images.len(), 2 * 2 * 2);
        assert_eq!(out.row.n_images, 8);
        out.row.validate().unwrap();
        // deterministic under the same seed
        let out2 = run_protocol(&model, &tok, &encoder, &judge, &held, &contents, &pcfg, "t")
            .unwrap();
        assert_eq!(out.row.pa, out2.row.pa);
        assert_eq!(out.row.sc_tex, out2.row.sc_tex);
        // zero cells errors
        assert!(run_protocol(&model, &tok, &encoder, &judge, &held, &[], &pcfg, "t").is_err());
    }
}

#[cfg(test)]
mod calibrate {
    use super::*;
    use crate::procgen::{make_raw, make_style_set, sample_content_for_shape, ALL_SHAPES};
    use crate::encoder::head_accuracy;

    #[test]
    #[ignore]
    fn judge_calibration() {
        for (per_style, epochs, lr) in [(48usize, 60, 1e-3), (160, 30, 1e-3), (320, 20, 1e-3)] {
            let (train, _) = make_style_set(6, 11, 1).unwrap();
            let mut data = Vec::new();
            let mut held = Vec::new();
            for (i, s) in train.iter().enumerate() {
                for j in 0..per_style {
                    let ss = subseed(5, &format!("{i}-{j}"));
                    let shape = ALL_SHAPES[j % NUM_SHAPES];
                    let content = sample_content_for_shape(shape, &mut rng_from(ss));
                    data.push(render_unchecked(s, &content, ss));
                }
                for j in 0..40 {
                    let ss = subseed(6, &format!("{i}-{j}"));
                    let shape = ALL_SHAPES[j % NUM_SHAPES];
                    let content = sample_content_for_shape(shape, &mut rng_from(ss));
                    held.push(render_unchecked(s, &content, ss));
                }
            }
            data.extend((0..per_style * 2).map(|i| make_raw(9000 + i as u64)));
            let judge = Judge::train(&data, train.len(), epochs, 16, lr, 21).unwrap();
            let cacc = head_accuracy(&judge.enc, &held, false);
            let sacc = head_accuracy(&judge.enc, &held, true);
            println!("per_style={per_style} epochs={epochs} lr={lr}: held-out content acc {cacc:.3} style acc {sacc:.3}");
        }
    }
}

#[cfg(test)]
mod sc_probe {
    use super::*;
    use crate::procgen::make_style_set;

    #[test]
    #[ignore]
    fn sc_tex_components() {
        let (train, _) = make_style_set(8, 77, 1).unwrap();
        for style in train.iter().take(5) {
            let s1 = subseed(2, &format!("a{}", style.style_id));
            let s2 = subseed(2, &format!("b{}", style.style_id));
            let a = render_unchecked(style, &sample_content_for_shape(Shape::Circle, &mut rng_from(s1)), s1);
            let b = render_unchecked(style, &sample_content_for_shape(Shape::Cross, &mut rng_from(s2)), s2);
            let ma = segment_image(&a.image, SEGMENT_TAU_DEFAULT);
            let mb = segment_image(&b.image, SEGMENT_TAU_DEFAULT);
            let iou_a = crate::encoder::mask_iou(&ma.mask, &a.mask);
            let iou_b = crate::encoder::mask_iou(&mb.mask, &b.mask);
            let d_color = chamfer(&dominant_colors(&a.image, &ma.mask), &dominant_colors(&b.image, &mb.mask));
            let pa = radial_profile(&a.image, &ma.mask);
            let pb = radial_profile(&b.image, &mb.mask);
            let d_tex: f32 = pa.iter().zip(pb.iter()).map(|(x, y)| (x - y).abs()).sum::<f32>() / 2.0;
            println!("style {} texture {:?} freq {:.2}: iou {:.2}/{:.2} d_color {:.3} d_tex {:.3} sc {:.3}",
                style.style_id, style.texture, style.texture_freq, iou_a, iou_b, d_color, d_tex,
                sc_tex_pair(&a.image, &b.image));
        }
    }
}
