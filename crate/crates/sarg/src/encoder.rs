//! Frozen image feature encoder (conv trunk with style/content classifier
//! heads) and the segmentation provider. Produces the feature maps `F` and
//! `F_S` that the resampler turns into style tokens.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::sync::Arc;

use crate::autograd::{ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{avgpool2_plan, im2col_indices, Adam, AdamConfig, Linear};
use crate::procgen::{Image, RenderedSample, IMG_SIZE, NUM_SHAPES};
use crate::rng::subseed;

/// N_f x D_f feature grid (16 spatial cells x 64 dims by default).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub n_cells: usize,
    pub dim: usize,
    pub grid: Vec<f32>,
}

impl FeatureMap {
    pub fn pooled(&self) -> Vec<f32> {
        let mut out = vec![0.0f32; self.dim];
        for cell in 0..self.n_cells {
            for d in 0..self.dim {
                out[d] += self.grid[cell * self.dim + d];
            }
        }
        for v in out.iter_mut() {
            *v /= self.n_cells as f32;
        }
        out
    }

    pub fn sub(&self, other: &FeatureMap) -> FeatureMap {
        assert_eq!(self.grid.len(), other.grid.len());
        FeatureMap {
            n_cells: self.n_cells,
            dim: self.dim,
            grid: self
                .grid
                .iter()
                .zip(other.grid.iter())
                .map(|(a, b)| a - b)
                .collect(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    pub channels: [usize; 3],
    pub n_styles: usize,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn new(n_styles: usize, seed: u64) -> Self {
        EncoderConfig {
            channels: [16, 32, 64],
            n_styles,
            seed,
        }
    }

    /// Feature dim D_f equals the last conv width.
    pub fn feature_dim(&self) -> usize {
        self.channels[2]
    }
}

struct ConvBlock {
    w: crate::autograd::ParamId,
    b: crate::autograd::ParamId,
    im2col: Arc<Vec<usize>>,
    pool_idx: Arc<Vec<usize>>,
    pool_avg: Vec<f32>,
    h: usize,
    w_px: usize,
    cin: usize,
    cout: usize,
}

/// Conv trunk (3 blocks of conv3x3 + relu + avgpool2) plus two linear heads.
/// Frozen after pretraining; the heads stay available to the eval judge
/// interface.
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub params: ParamSet,
    pub frozen: bool,
    blocks: Vec<ConvBlock>,
    style_head: Linear,
    content_fc1: Linear,
    content_fc2: Linear,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig) -> Self {
        let mut params = ParamSet::new();
        let seed = subseed(cfg.seed, "encoder-init");
        let mut blocks = Vec::new();
        let mut h = IMG_SIZE;
        // input: RGB plus per-channel absolute deviation from the image's
        // median color, which makes foreground objects explicit
        let mut cin = 6usize;
        for (i, &cout) in cfg.channels.iter().enumerate() {
            let name = format!("conv{i}");
            let lin = Linear::new(&mut params, &name, 9 * cin, cout, true, subseed(seed, &name));
            let (pool_idx, pool_avg) = avgpool2_plan(h, h, cout);
            blocks.push(ConvBlock {
                w: lin.w,
                b: lin.b.unwrap(),
                im2col: im2col_indices(h, h, cin, 3, 3),
                pool_idx,
                pool_avg,
                h,
                w_px: h,
                cin,
                cout,
            });
            h /= 2;
            cin = cout;
        }
        let style_head = Linear::new(
            &mut params,
            "style_head",
            cfg.feature_dim(),
            cfg.n_styles,
            true,
            subseed(seed, "style_head"),
        );
        // the content head reads the whole mid-resolution grid at once:
        // shape identity is a global silhouette property, and the 8x8 grid
        // is the last stage where outlines survive pooling
        let mid_cells = (IMG_SIZE / 4) * (IMG_SIZE / 4);
        let content_fc1 = Linear::new(
            &mut params,
            "content_fc1",
            mid_cells * cfg.channels[1],
            64,
            true,
            subseed(seed, "content_fc1"),
        );
        let content_fc2 = Linear::new(
            &mut params,
            "content_fc2",
            64,
            NUM_SHAPES,
            true,
            subseed(seed, "content_fc2"),
        );
        Encoder {
            cfg,
            params,
            frozen: false,
            blocks,
            style_head,
            content_fc1,
            content_fc2,
        }
    }

    /// Forward through the conv trunk on a tape; returns the final
    /// `[N_f, D_f]` feature grid and the mid-resolution (8x8) grid the
    /// content head reads (shape outlines vanish at 4x4).
    fn trunk<'t>(&self, t: &mut Tape<'t>, img: &Image) -> (Var, Var) {
        assert_eq!((img.h, img.w), (IMG_SIZE, IMG_SIZE), "encoder expects 32x32");
        let med = median_color(img);
        let n_px = img.h * img.w;
        let mut input = Vec::with_capacity(n_px * 6);
        for i in 0..n_px {
            let px = &img.data[i * 3..i * 3 + 3];
            input.extend_from_slice(px);
            for c in 0..3 {
                input.push((px[c] - med[c]).abs());
            }
        }
        let mut x = t.constant(n_px, 6, input);
        let mut mid = None;
        for (bi, blk) in self.blocks.iter().enumerate() {
            let npix = blk.h * blk.w_px;
            let cols = t.gather(x, blk.im2col.clone(), npix, 9 * blk.cin);
            let w = t.p(blk.w);
            let y = t.matmul(cols, w);
            let b = t.p(blk.b);
            let y = t.add_row(y, b);
            let y = t.relu(y);
            let pooled = t.gather(y, blk.pool_idx.clone(), npix / 4, 4 * blk.cout);
            let avg = t.constant(4 * blk.cout, blk.cout, blk.pool_avg.clone());
            x = t.matmul(pooled, avg);
            if bi == 1 {
                mid = Some(x);
            }
        }
        (x, mid.expect("trunk has 3 blocks"))
    }

    fn heads<'t>(&self, t: &mut Tape<'t>, feat: Var, mid: Var) -> (Var, Var) {
        let n = feat.rows;
        let ones = t.constant(1, n, vec![1.0 / n as f32; n]);
        let pooled = t.matmul(ones, feat);
        let style = self.style_head.forward(t, pooled);
        let flat_idx: Vec<usize> = (0..mid.rows * mid.cols).collect();
        let flat = t.gather(mid, Arc::new(flat_idx), 1, mid.rows * mid.cols);
        let h = self.content_fc1.forward(t, flat);
        let h = t.relu(h);
        let content = self.content_fc2.forward(t, h);
        (style, content)
    }

    /// Deterministic forward pass to a FeatureMap (requires frozen encoder).
    pub fn encode(&self, img: &Image) -> Result<FeatureMap> {
        if !self.frozen {
            return Err(Error::StageContract(
                "encoder must be frozen before encode() is used downstream".into(),
            ));
        }
        Ok(self.encode_unfrozen(img))
    }

    /// Forward pass without the frozen check (pretraining internals, tests).
    pub fn encode_unfrozen(&self, img: &Image) -> FeatureMap {
        let mut t = Tape::new(&self.params);
        let (feat, _) = self.trunk(&mut t, img);
        FeatureMap {
            n_cells: feat.rows,
            dim: feat.cols,
            grid: t.value(feat).to_vec(),
        }
    }

    /// Style / content logits for an image (judge interface).
    pub fn classify(&self, img: &Image) -> (Vec<f32>, Vec<f32>) {
        let mut t = Tape::new(&self.params);
        let (feat, mid) = self.trunk(&mut t, img);
        let (s, c) = self.heads(&mut t, feat, mid);
        (t.value(s).to_vec(), t.value(c).to_vec())
    }

    /// Style logits computed from a pooled feature vector instead of an
    /// image (used by the feature-subtraction sanity checks).
    pub fn style_logits_pooled(&self, pooled: &[f32]) -> Vec<f32> {
        let mut t = Tape::new(&self.params);
        let x = t.constant(1, pooled.len(), pooled.to_vec());
        let s = self.style_head.forward(&mut t, x);
        t.value(s).to_vec()
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

    /// Persist as one flat little-endian f32 file per named parameter plus a
    /// JSON manifest (config, frozen flag, weight hash).
    pub fn save(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for e in &self.params.entries {
            let mut bytes = Vec::with_capacity(e.data.len() * 4);
            for v in &e.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            std::fs::write(dir.join(format!("{}.f32", e.name)), bytes)?;
        }
        let manifest = serde_json::json!({
            "config": self.cfg,
            "frozen": self.frozen,
            "weights_hash": self.weights_hash(),
        });
        std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &std::path::Path) -> Result<Encoder> {
        let manifest: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
        let cfg: EncoderConfig = serde_json::from_value(manifest["config"].clone())?;
        let mut enc = Encoder::new(cfg);
        for e in enc.params.entries.iter_mut() {
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
        enc.frozen = manifest["frozen"].as_bool().unwrap_or(false);
        let expected = manifest["weights_hash"].as_str().unwrap_or_default();
        if expected != enc.weights_hash() {
            return Err(Error::InvalidSpec(
                "encoder checkpoint weight hash mismatch".into(),
            ));
        }
        Ok(enc)
    }
}

/// Joint cross-entropy pretraining of both heads. Raw samples (style_id
/// None) contribute only to the content loss. The encoder is frozen on
/// return.
pub fn pretrain_encoder(
    mut enc: Encoder,
    dataset: &[RenderedSample],
    epochs: usize,
    batch_size: usize,
    lr: f32,
    seed: u64,
) -> Result<Encoder> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("encoder pretraining".into()));
    }
    let styles: std::collections::BTreeSet<_> =
        dataset.iter().filter_map(|s| s.style_id).collect();
    let contents: std::collections::BTreeSet<_> = dataset.iter().map(|s| s.content_id).collect();
    if styles.len() < 2 || contents.len() < 2 {
        return Err(Error::EmptyDataset(
            "encoder pretraining needs >= 2 style and content classes".into(),
        ));
    }

    let mut opt = Adam::all_trainable(&enc.params, AdamConfig::with_lr(lr));
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = crate::rng::rng_from(subseed(seed, "encoder-pretrain"));
    for _epoch in 0..epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            let grads_list: Vec<crate::autograd::Grads> = chunk
                .par_iter()
                .map(|&i| {
                    let sample = &dataset[i];
                    let mut t = Tape::new(&enc.params);
                    let (feat, mid) = enc.trunk(&mut t, &sample.image);
                    let (style_logits, content_logits) = enc.heads(&mut t, feat, mid);
                    let content_loss = t.nll_sum(
                        content_logits,
                        Arc::new(vec![sample.content_id as usize]),
                        Arc::new(vec![1.0]),
                    );
                    let loss = match sample.style_id {
                        Some(sid) => {
                            let style_loss = t.nll_sum(
                                style_logits,
                                Arc::new(vec![sid as usize]),
                                Arc::new(vec![1.0]),
                            );
                            t.add(content_loss, style_loss)
                        }
                        None => content_loss,
                    };
                    t.backward(loss)
                })
                .collect();
            let mut total = crate::autograd::Grads::zeros(enc.params.len());
            for g in &grads_list {
                total.accumulate(g);
            }
            total.scale(1.0 / chunk.len() as f32);
            opt.step(&mut enc.params, &total);
        }
    }
    enc.frozen = true;
    Ok(enc)
}

/// Top-1 accuracy of a head over a labeled set. `style=true` selects the
/// style head, otherwise the content head.
pub fn head_accuracy(enc: &Encoder, samples: &[RenderedSample], style: bool) -> f32 {
    let mut correct = 0usize;
    let mut total = 0usize;
    for s in samples {
        let (sl, cl) = enc.classify(&s.image);
        let (logits, label) = if style {
            match s.style_id {
                Some(sid) => (&sl, sid as usize),
                None => continue,
            }
        } else {
            (&cl, s.content_id as usize)
        };
        let pred = argmax(logits);
        if pred == label {
            correct += 1;
        }
        total += 1;
    }
    correct as f32 / total.max(1) as f32
}

pub fn argmax(xs: &[f32]) -> usize {
    xs.iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap()
}

/// Segmentation result. `warning` flags the degenerate empty-mask case.
#[derive(Clone, Debug)]
pub struct Segmentation {
    pub mask: Vec<bool>,
    pub warning: bool,
}

/// Segmentation provider: ground-truth pass-through for rendered samples.
pub fn segment_sample(sample: &RenderedSample) -> Segmentation {
    Segmentation {
        mask: sample.mask.clone(),
        warning: false,
    }
}

/// Per-channel median color; the background dominates, so this is a robust
/// background estimate.
pub fn median_color(img: &Image) -> [f32; 3] {
    let n = img.h * img.w;
    let mut med = [0.0f32; 3];
    for (k, m) in med.iter_mut().enumerate() {
        let mut ch: Vec<f32> = (0..n).map(|i| img.data[i * 3 + k]).collect();
        ch.sort_by(|a, b| a.partial_cmp(b).unwrap());
        *m = ch[n / 2];
    }
    med
}

/// Heuristic segmentation for images without a stored mask: pixels far from
/// the median background color, largest connected component.
/// Box blur with radius `r` (clamped borders), used to suppress periodic
/// texture before thresholding.
fn box_blur(img: &Image, r: usize) -> Image {
    let (h, w) = (img.h, img.w);
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0f32; 3];
            let mut cnt = 0f32;
            for dy in -(r as isize)..=(r as isize) {
                for dx in -(r as isize)..=(r as isize) {
                    let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    for k in 0..3 {
                        acc[k] += img.data[(yy * w + xx) * 3 + k];
                    }
                    cnt += 1.0;
                }
            }
            for k in 0..3 {
                out.data[(y * w + x) * 3 + k] = acc[k] / cnt;
            }
        }
    }
    out
}

/// Translate the image (toroidally) so the segmented object's centroid lands
/// at the image center. Classifier heads that read a spatial feature grid are
/// not translation invariant; removing position jitter up front lets them
/// generalize across placements. Returns a plain copy when segmentation
/// finds no object.
pub fn center_object(img: &Image) -> Image {
    let seg = segment_image(img, SEGMENT_TAU_DEFAULT);
    let total: usize = seg.mask.iter().filter(|&&m| m).count();
    if total == 0 {
        return img.clone();
    }
    let (mut cy, mut cx) = (0f32, 0f32);
    for (i, &m) in seg.mask.iter().enumerate() {
        if m {
            cy += (i / img.w) as f32;
            cx += (i % img.w) as f32;
        }
    }
    cy /= total as f32;
    cx /= total as f32;
    let dy = (img.h as isize / 2) - cy.round() as isize;
    let dx = (img.w as isize / 2) - cx.round() as isize;
    let mut out = img.clone();
    for y in 0..img.h {
        for x in 0..img.w {
            let sy = (y as isize - dy).rem_euclid(img.h as isize) as usize;
            let sx = (x as isize - dx).rem_euclid(img.w as isize) as usize;
            for k in 0..3 {
                out.data[(y * img.w + x) * 3 + k] = img.data[(sy * img.w + sx) * 3 + k];
            }
        }
    }
    out
}

/// Largest 4-connected component of a candidate mask. Returns the component
/// mask and its pixel count (0 when the candidate set is empty).
fn largest_component(candidate: &[bool], h: usize, w: usize) -> (Vec<bool>, usize) {
    let n = h * w;
    let mut comp = vec![usize::MAX; n];
    let mut best_label = usize::MAX;
    let mut best_size = 0usize;
    let mut next = 0usize;
    for start in 0..n {
        if !candidate[start] || comp[start] != usize::MAX {
            continue;
        }
        let label = next;
        next += 1;
        let mut stack = vec![start];
        let mut size = 0usize;
        comp[start] = label;
        while let Some(pix) = stack.pop() {
            size += 1;
            let (y, x) = (pix / w, pix % w);
            let mut push = |p: usize| {
                if candidate[p] && comp[p] == usize::MAX {
                    comp[p] = label;
                    stack.push(p);
                }
            };
            if x > 0 {
                push(pix - 1);
            }
            if x + 1 < w {
                push(pix + 1);
            }
            if y > 0 {
                push(pix - w);
            }
            if y + 1 < h {
                push(pix + w);
            }
        }
        if size > best_size {
            best_size = size;
            best_label = label;
        }
    }
    (comp.iter().map(|&c| c == best_label && best_size > 0).collect(), best_size)
}

/// Per-pixel color distance to the least-squares linear plane fit of each
/// channel over (x, y). Smooth gradients are (nearly) linear, so their
/// residual vanishes while a foreground blob sticks out.
fn plane_residual(img: &Image) -> Vec<f32> {
    let (h, w) = (img.h, img.w);
    let n = h * w;
    // centered coordinates make the normal equations diagonal
    let cx = (w as f32 - 1.0) / 2.0;
    let cy = (h as f32 - 1.0) / 2.0;
    let mut sxx = 0.0f32;
    let mut syy = 0.0f32;
    let mut mean = [0.0f32; 3];
    let mut sxv = [0.0f32; 3];
    let mut syv = [0.0f32; 3];
    for i in 0..n {
        let x = (i % w) as f32 - cx;
        let y = (i / w) as f32 - cy;
        sxx += x * x;
        syy += y * y;
        for k in 0..3 {
            let v = img.data[i * 3 + k];
            mean[k] += v;
            sxv[k] += x * v;
            syv[k] += y * v;
        }
    }
    for k in 0..3 {
        mean[k] /= n as f32;
    }
    (0..n)
        .map(|i| {
            let x = (i % w) as f32 - cx;
            let y = (i / w) as f32 - cy;
            (0..3)
                .map(|k| {
                    let fit = mean[k] + sxv[k] / sxx * x + syv[k] / syy * y;
                    let d = img.data[i * 3 + k] - fit;
                    d * d
                })
                .sum::<f32>()
                .sqrt()
        })
        .collect()
}

/// How object-like a component is: pixel fraction must be plausible for a
/// single foreground blob, and among plausible candidates a higher
/// bounding-box fill (compactness) wins. Returns None for implausible masks.
fn blob_score(mask: &[bool], size: usize, h: usize, w: usize) -> Option<f32> {
    let frac = size as f32 / (h * w) as f32;
    if !(0.01..=0.40).contains(&frac) {
        return None;
    }
    let (mut x0, mut x1, mut y0, mut y1) = (w, 0usize, h, 0usize);
    for (i, &m) in mask.iter().enumerate() {
        if m {
            let (y, x) = (i / w, i % w);
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
    }
    let bbox = ((x1 + 1 - x0) * (y1 + 1 - y0)) as f32;
    Some(size as f32 / bbox)
}

pub fn segment_image(img: &Image, tau: f32) -> Segmentation {
    let n = img.h * img.w;
    // Box-blur first so periodic texture (checker, stripes) averages toward
    // the local background color; only a compact foreground blob survives the
    // blur distinct from the background model.
    let blurred = box_blur(img, 2);

    // Two background models, each yielding a candidate foreground: distance
    // from the median color (flat and textured backgrounds) and residual of a
    // linear plane fit (gradient backgrounds, where the median fails because
    // both gradient extremes lie far from it).
    let med = median_color(&blurred);
    let med_candidate: Vec<bool> = (0..n)
        .map(|i| {
            let d: f32 = (0..3)
                .map(|k| {
                    let x = blurred.data[i * 3 + k] - med[k];
                    x * x
                })
                .sum::<f32>()
                .sqrt();
            d > tau
        })
        .collect();
    let res = plane_residual(&blurred);
    let plane_candidate: Vec<bool> = res.iter().map(|&d| d > tau).collect();

    let picks = [
        largest_component(&med_candidate, img.h, img.w),
        largest_component(&plane_candidate, img.h, img.w),
    ];
    let best = picks
        .iter()
        .filter_map(|(m, s)| blob_score(m, *s, img.h, img.w).map(|sc| (sc, m)))
        .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let core = match best {
        Some((_, m)) => m.clone(),
        None => {
            return Segmentation {
                mask: vec![false; n],
                warning: true,
            }
        }
    };

    // Dilate to cover the anti-aliased rim the blur smeared below threshold.
    let mut mask = core.clone();
    {
        let prev = mask.clone();
        for y in 0..img.h {
            for x in 0..img.w {
                let i = y * img.w + x;
                if prev[i]
                    || (x > 0 && prev[i - 1])
                    || (x + 1 < img.w && prev[i + 1])
                    || (y > 0 && prev[i - img.w])
                    || (y + 1 < img.h && prev[i + img.w])
                {
                    mask[i] = true;
                }
            }
        }
    }
    Segmentation {
        mask,
        warning: false,
    }
}

pub const SEGMENT_TAU_DEFAULT: f32 = 0.15;

/// Keep masked (object) pixels, replace the rest with mid-gray. With
/// `invert`, the complementary convention (used by the ablation harness).
pub fn apply_mask(img: &Image, mask: &[bool], invert: bool) -> Result<Image> {
    if mask.len() != img.h * img.w {
        return Err(Error::ShapeMismatch(format!(
            "mask len {} vs image {}x{}",
            mask.len(),
            img.h,
            img.w
        )));
    }
    let mut out = img.clone();
    for (i, &m) in mask.iter().enumerate() {
        let keep = if invert { !m } else { m };
        if !keep {
            out.data[i * 3..i * 3 + 3].copy_from_slice(&[0.5, 0.5, 0.5]);
        }
    }
    Ok(out)
}

pub fn mask_iou(a: &[bool], b: &[bool]) -> f32 {
    let mut inter = 0usize;
    let mut uni = 0usize;
    for (&x, &y) in a.iter().zip(b.iter()) {
        if x && y {
            inter += 1;
        }
        if x || y {
            uni += 1;
        }
    }
    if uni == 0 {
        1.0
    } else {
        inter as f32 / uni as f32
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::procgen::{make_raw, make_style_set, render, sample_content};
    use crate::rng::rng_from;

    fn toy_dataset(n_styles: usize, per_style: usize, raws: usize) -> Vec<RenderedSample> {
        let (train, _) = make_style_set(n_styles + 1, 3, 1).unwrap();
        let mut rng = rng_from(40);
        let mut data = Vec::new();
        for s in &train {
            for j in 0..per_style {
                let c = sample_content(&mut rng);
                data.push(render(s, &c, (s.style_id as u64) * 1000 + j as u64).unwrap());
            }
        }
        for seed in 0..raws as u64 {
            data.push(make_raw(seed));
        }
        data
    }

    #[test]
    fn untrained_encoder_is_near_chance() {
        let data = toy_dataset(4, 10, 0);
        let enc = Encoder::new(EncoderConfig::new(4, 1));
        let acc = head_accuracy(&enc, &data, false);
        // chance is 1/8 for contents; untrained should be well below 0.6
        assert!(acc < 0.6, "untrained content acc {acc}");
    }

    #[test]
    fn encode_requires_frozen_and_is_deterministic() {
        let data = toy_dataset(3, 4, 2);
        let enc = Encoder::new(EncoderConfig::new(3, 1));
        assert!(enc.encode(&data[0].image).is_err());
        let enc = pretrain_encoder(enc, &data, 1, 8, 1e-3, 5).unwrap();
        let a = enc.encode(&data[0].image).unwrap();
        let b = enc.encode(&data[0].image).unwrap();
        assert_eq!(a.grid, b.grid);
        assert_eq!((a.n_cells, a.dim), (16, 64));
    }

    #[test]
    fn single_class_dataset_rejected() {
        let (train, _) = make_style_set(2, 3, 1).unwrap();
        let mut rng = rng_from(1);
        let c = sample_content(&mut rng);
        let data = vec![render(&train[0], &c, 0).unwrap()];
        let enc = Encoder::new(EncoderConfig::new(1, 0));
        assert!(pretrain_encoder(enc, &data, 1, 4, 1e-3, 0).is_err());
    }

    #[test]
    fn segment_oracle_path_returns_stored_mask() {
        let data = toy_dataset(2, 2, 0);
        let seg = segment_sample(&data[0]);
        assert_eq!(seg.mask, data[0].mask);
        assert!(!seg.warning);
    }

    #[test]
    fn segment_solid_image_warns_empty() {
        let mut img = Image::new(IMG_SIZE, IMG_SIZE);
        for i in 0..IMG_SIZE * IMG_SIZE {
            img.data[i * 3..i * 3 + 3].copy_from_slice(&[0.3, 0.3, 0.3]);
        }
        let seg = segment_image(&img, SEGMENT_TAU_DEFAULT);
        assert!(seg.warning);
        assert!(seg.mask.iter().all(|&m| !m));
    }

    #[test]
    fn apply_mask_conventions() {
        let data = toy_dataset(2, 2, 0);
        let img = &data[0].image;
        let full = vec![true; IMG_SIZE * IMG_SIZE];
        assert_eq!(apply_mask(img, &full, false).unwrap().data, img.data);
        let none = vec![false; IMG_SIZE * IMG_SIZE];
        let gray = apply_mask(img, &none, false).unwrap();
        assert!(gray.data.iter().all(|&v| v == 0.5));

        // complement partition: non-gray pixels of the two variants are disjoint
        let m = &data[0].mask;
        let a = apply_mask(img, m, false).unwrap();
        let b = apply_mask(img, m, true).unwrap();
        for i in 0..IMG_SIZE * IMG_SIZE {
            let ga = a.data[i * 3..i * 3 + 3] == [0.5, 0.5, 0.5];
            let gb = b.data[i * 3..i * 3 + 3] == [0.5, 0.5, 0.5];
            assert!(ga || gb);
        }
        assert!(apply_mask(img, &vec![true; 3], false).is_err());
    }
}
