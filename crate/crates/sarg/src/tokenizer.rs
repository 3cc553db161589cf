//! Text tokenizer and patch-level vector-quantized image tokenizer.
//!
//! Images are split into p x p patches, each quantized to its nearest
//! codebook centroid (k-means over training patches). The multimodal
//! sequence layout is `[BOS][STY x M][text...][BOI][image row-major][EOI]`
//! (style slot position configurable), with image-token ids offset past the
//! text vocabulary so the two id spaces stay disjoint.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use crate::error::{Error, Result};
use crate::procgen::{Image, ALL_SHAPES};
use crate::rng::{rng_from, subseed};

pub const BOS: u32 = 0;
pub const BOI: u32 = 1;
pub const EOI: u32 = 2;
pub const STY: u32 = 3;
pub const PAD: u32 = 4;
const NUM_SPECIALS: u32 = 5;

/// Word-level text vocabulary over the prompt template plus specials.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TextVocab {
    words: Vec<String>,
}

impl TextVocab {
    /// Vocabulary covering all procgen prompts ("a <shape>").
    pub fn default_vocab() -> Self {
        let mut words = vec!["a".to_string()];
        words.extend(ALL_SHAPES.iter().map(|s| s.name().to_string()));
        TextVocab { words }
    }

    pub fn id_of(&self, word: &str) -> Result<u32> {
        self.words
            .iter()
            .position(|w| w == word)
            .map(|i| NUM_SPECIALS + i as u32)
            .ok_or_else(|| Error::UnknownWord(word.to_string()))
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace().map(|w| self.id_of(w)).collect()
    }

    /// Total id count: specials + words. Image ids start here.
    pub fn size(&self) -> u32 {
        NUM_SPECIALS + self.words.len() as u32
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for w in &self.words {
            h.update(w.as_bytes());
            h.update([0u8]);
        }
        hex(&h.finalize())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleSlotPosition {
    BeforeText,
    AfterText,
}

/// K centroids over p x p x 3 patches, values in [0,1].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImageCodebook {
    pub k: usize,
    pub p: usize,
    pub seed: u64,
    /// K x (p*p*3), row-major
    pub entries: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrid {
    pub h: usize,
    pub w: usize,
    /// row-major, values in [0, K)
    pub indices: Vec<u32>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// (offset, length M) of the style placeholder positions
    pub style_slot: (usize, usize),
    /// (offset, length h*w) of the image token span; length 0 when the
    /// sequence ends at BOI (generation prefix)
    pub image_span: (usize, usize),
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn extract_patches(img: &Image, p: usize) -> Result<Vec<Vec<f32>>> {
    if img.h % p != 0 || img.w % p != 0 {
        return Err(Error::ShapeMismatch(format!(
            "image {}x{} not divisible by patch {p}",
            img.h, img.w
        )));
    }
    let (gh, gw) = (img.h / p, img.w / p);
    let mut patches = Vec::with_capacity(gh * gw);
    for gy in 0..gh {
        for gx in 0..gw {
            let mut v = Vec::with_capacity(p * p * 3);
            for dy in 0..p {
                for dx in 0..p {
                    let px = img.pixel(gy * p + dy, gx * p + dx);
                    v.extend_from_slice(&px);
                }
            }
            patches.push(v);
        }
    }
    Ok(patches)
}

fn dist2(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// Seeded k-means (k-means++ init, fixed iteration budget) over all patches.
pub fn fit_codebook(
    images: &[&Image],
    k: usize,
    p: usize,
    seed: u64,
) -> Result<ImageCodebook> {
    if k < 2 {
        return Err(Error::InvalidArgument("codebook size K must be >= 2".into()));
    }
    let mut patches: Vec<Vec<f32>> = Vec::new();
    for img in images {
        patches.extend(extract_patches(img, p)?);
    }
    let dim = p * p * 3;
    // distinct patches, quantized to f32 bit patterns
    let mut distinct: Vec<&Vec<f32>> = Vec::new();
    'outer: for pt in &patches {
        for d in &distinct {
            if pt.iter().zip(d.iter()).all(|(a, b)| a == b) {
                continue 'outer;
            }
        }
        distinct.push(pt);
        if distinct.len() > k {
            break;
        }
    }
    if distinct.len() < k {
        return Err(Error::InvalidArgument(format!(
            "only {} distinct patches in corpus, need K={k}",
            distinct.len()
        )));
    }

    let mut rng = rng_from(subseed(seed, "kmeans"));
    let centroids = kmeans(&patches, k, dim, 25, &mut rng);
    Ok(ImageCodebook {
        k,
        p,
        seed,
        entries: centroids,
    })
}

/// Plain seeded k-means used both by `fit_codebook` and (with separate
/// callers) by the analytic style metrics.
pub fn kmeans(
    points: &[Vec<f32>],
    k: usize,
    dim: usize,
    iters: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<f32> {
    use rand::Rng;
    assert!(!points.is_empty());
    // k-means++ init
    let mut centroids: Vec<f32> = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..points.len());
    centroids.extend_from_slice(&points[first]);
    let mut d2: Vec<f32> = points
        .iter()
        .map(|pt| dist2(pt, &points[first]))
        .collect();
    while centroids.len() < k * dim {
        let total: f64 = d2.iter().map(|&x| x as f64).sum();
        let choice = if total <= 0.0 {
            rng.random_range(0..points.len())
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut idx = 0;
            for (i, &x) in d2.iter().enumerate() {
                target -= x as f64;
                if target <= 0.0 {
                    idx = i;
                    break;
                }
            }
            idx
        };
        centroids.extend_from_slice(&points[choice]);
        for (i, pt) in points.iter().enumerate() {
            let nd = dist2(pt, &points[choice]);
            if nd < d2[i] {
                d2[i] = nd;
            }
        }
    }

    let mut assign = vec![0usize; points.len()];
    for _ in 0..iters {
        // assignment
        for (i, pt) in points.iter().enumerate() {
            let mut best = 0;
            let mut bd = f32::INFINITY;
            for c in 0..k {
                let d = dist2(pt, &centroids[c * dim..(c + 1) * dim]);
                if d < bd {
                    bd = d;
                    best = c;
                }
            }
            assign[i] = best;
        }
        // update
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (i, pt) in points.iter().enumerate() {
            let c = assign[i];
            counts[c] += 1;
            for (j, &x) in pt.iter().enumerate() {
                sums[c * dim + j] += x as f64;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                continue; // keep empty-cluster centroid in place
            }
            for j in 0..dim {
                centroids[c * dim + j] = (sums[c * dim + j] / counts[c] as f64) as f32;
            }
        }
    }
    centroids
}

impl ImageCodebook {
    pub fn dim(&self) -> usize {
        self.p * self.p * 3
    }

    pub fn centroid(&self, idx: usize) -> &[f32] {
        &self.entries[idx * self.dim()..(idx + 1) * self.dim()]
    }

    /// Nearest-centroid quantization of every patch, row-major grid.
    pub fn encode_image(&self, img: &Image) -> Result<TokenGrid> {
        let patches = extract_patches(img, self.p)?;
        let (gh, gw) = (img.h / self.p, img.w / self.p);
        let indices = patches
            .iter()
            .map(|pt| {
                let mut best = 0u32;
                let mut bd = f32::INFINITY;
                for c in 0..self.k {
                    let d = dist2(pt, self.centroid(c));
                    if d < bd {
                        bd = d;
                        best = c as u32;
                    }
                }
                best
            })
            .collect();
        Ok(TokenGrid {
            h: gh,
            w: gw,
            indices,
        })
    }

    /// Paste centroids back into pixel space, row-major.
    pub fn decode_image(&self, grid: &TokenGrid) -> Result<Image> {
        let p = self.p;
        let mut img = Image::new(grid.h * p, grid.w * p);
        for gy in 0..grid.h {
            for gx in 0..grid.w {
                let idx = grid.indices[gy * grid.w + gx] as usize;
                if idx >= self.k {
                    return Err(Error::InvalidArgument(format!(
                        "token index {idx} >= K={}",
                        self.k
                    )));
                }
                let cen = self.centroid(idx);
                for dy in 0..p {
                    for dx in 0..p {
                        let o = (dy * p + dx) * 3;
                        img.set_pixel(gy * p + dy, gx * p + dx, [cen[o], cen[o + 1], cen[o + 2]]);
                    }
                }
            }
        }
        Ok(img)
    }

    /// Mean squared quantization error over a set of images.
    pub fn quantization_mse(&self, images: &[&Image]) -> f32 {
        let mut total = 0.0f64;
        let mut n = 0usize;
        for img in images {
            let patches = extract_patches(img, self.p).unwrap();
            for pt in &patches {
                let mut bd = f32::INFINITY;
                for c in 0..self.k {
                    bd = bd.min(dist2(pt, self.centroid(c)));
                }
                total += bd as f64;
                n += pt.len();
            }
        }
        (total / n as f64) as f32
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.k as u64).to_le_bytes());
        h.update((self.p as u64).to_le_bytes());
        for v in &self.entries {
            h.update(v.to_le_bytes());
        }
        hex(&h.finalize())
    }

    /// Persist as a flat little-endian f32 array plus a JSON manifest.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut bytes = Vec::with_capacity(self.entries.len() * 4);
        for v in &self.entries {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(dir.join("codebook.f32"), &bytes)?;
        let manifest = serde_json::json!({
            "K": self.k,
            "p": self.p,
            "seed": self.seed,
            "checksum": self.hash(),
        });
        std::fs::write(dir.join("codebook.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.join("codebook.json"))?)?;
        let k = manifest["K"].as_u64().unwrap() as usize;
        let p = manifest["p"].as_u64().unwrap() as usize;
        let seed = manifest["seed"].as_u64().unwrap();
        let bytes = std::fs::read(dir.join("codebook.f32"))?;
        let entries: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let cb = ImageCodebook { k, p, seed, entries };
        let expected = manifest["checksum"].as_str().unwrap_or_default();
        let got = cb.hash();
        if expected != got {
            return Err(Error::TokenizerHashMismatch {
                expected: expected.to_string(),
                got,
            });
        }
        Ok(cb)
    }
}

/// Multimodal tokenizer: text vocab + image codebook + layout config.
#[derive(Clone, Debug)]
pub struct MultimodalTokenizer {
    pub vocab: TextVocab,
    pub codebook: ImageCodebook,
    pub style_tokens: usize,
    pub style_slot_position: StyleSlotPosition,
}

impl MultimodalTokenizer {
    pub fn new(vocab: TextVocab, codebook: ImageCodebook, style_tokens: usize) -> Self {
        MultimodalTokenizer {
            vocab,
            codebook,
            style_tokens,
            style_slot_position: StyleSlotPosition::BeforeText,
        }
    }

    /// First image-token id; text and image id spaces are disjoint.
    pub fn image_id_base(&self) -> u32 {
        self.vocab.size()
    }

    pub fn vocab_size(&self) -> usize {
        (self.vocab.size() as usize) + self.codebook.k
    }

    pub fn grid_to_ids(&self, grid: &TokenGrid) -> Vec<u32> {
        let base = self.image_id_base();
        grid.indices.iter().map(|&i| base + i).collect()
    }

    /// Assemble the full multimodal sequence. With `image_grid = None` the
    /// sequence ends at BOI (generation prefix) and image_span has length 0.
    pub fn assemble(&self, prompt: &str, image_grid: Option<&TokenGrid>) -> Result<TokenSequence> {
        let text = self.vocab.encode(prompt)?;
        let m = self.style_tokens;
        let mut ids = vec![BOS];
        let style_offset;
        match self.style_slot_position {
            StyleSlotPosition::BeforeText => {
                style_offset = ids.len();
                ids.extend(std::iter::repeat(STY).take(m));
                ids.extend_from_slice(&text);
            }
            StyleSlotPosition::AfterText => {
                ids.extend_from_slice(&text);
                style_offset = ids.len();
                ids.extend(std::iter::repeat(STY).take(m));
            }
        }
        ids.push(BOI);
        let image_offset = ids.len();
        let image_len = match image_grid {
            Some(grid) => {
                ids.extend(self.grid_to_ids(grid));
                ids.push(EOI);
                grid.indices.len()
            }
            None => 0,
        };
        Ok(TokenSequence {
            ids,
            style_slot: (style_offset, m),
            image_span: (image_offset, image_len),
        })
    }

    /// Combined hash over vocab and codebook, pinned into checkpoints.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.vocab.hash().as_bytes());
        h.update(self.codebook.hash().as_bytes());
        h.update((self.style_tokens as u64).to_le_bytes());
        hex(&h.finalize())
    }
}
