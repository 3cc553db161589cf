//! Perceiver resampler: M learned latent queries cross-attend to the
//! encoder's feature cells and emit M style tokens in the AR model's token
//! space. Includes Gaussian noise injection and the style-enhanced blend
//! `alpha * R(F) + (1 - alpha) * R(F - F_S) + gamma * n`.

use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::autograd::{ParamId, ParamSet, Tape, Var};
use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::nn::{attention, LayerNorm, Linear};
use crate::rng::{normal_draws, rng_from, subseed};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ResamplerConfig {
    /// number of style tokens M
    pub m: usize,
    /// unified token space width C (equals AR model width)
    pub c: usize,
    /// feature dim D_f
    pub d_f: usize,
    /// feature cells N_f
    pub n_f: usize,
    pub blocks: usize,
    pub heads: usize,
}

impl ResamplerConfig {
    pub fn new(c: usize) -> Self {
        ResamplerConfig {
            m: 16,
            c,
            d_f: 64,
            n_f: 16,
            blocks: 2,
            heads: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Plain,
    Noised,
    Enhanced,
    Null,
}

/// M x C style-token matrix plus how it was produced.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StyleTokens {
    pub m: usize,
    pub c: usize,
    pub values: Vec<f32>,
    pub provenance: Provenance,
}

struct CrossBlock {
    ln_q: LayerNorm,
    ln_kv: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln_ff: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

/// Parameter handles into a shared ParamSet (the AR checkpoint owns the set,
/// so stage-2 training updates resampler and LoRA through one optimizer).
pub struct Resampler {
    pub cfg: ResamplerConfig,
    pub latents: ParamId,
    pub null_embed: ParamId,
    proj: Linear,
    pos: ParamId,
    blocks: Vec<CrossBlock>,
    ln_out: LayerNorm,
}

impl Resampler {
    /// Registers all parameters under the `resampler.` prefix except the
    /// null embedding, which stage-1 pretraining owns.
    pub fn new(ps: &mut ParamSet, cfg: ResamplerConfig, seed: u64) -> Self {
        let seed = subseed(seed, "resampler-init");
        let latents_data: Vec<f32> = normal_draws(&mut rng_from(subseed(seed, "latents")), cfg.m * cfg.c)
            .into_iter()
            .map(|x| x * 0.2)
            .collect();
        let latents = ps.add("resampler.latents", cfg.m, cfg.c, latents_data);
        let null_data: Vec<f32> = normal_draws(&mut rng_from(subseed(seed, "null")), cfg.c)
            .into_iter()
            .map(|x| x * 0.2)
            .collect();
        let null_embed = ps.add("null_embed", 1, cfg.c, null_data);
        let proj = Linear::new(ps, "resampler.proj", cfg.d_f, cfg.c, true, subseed(seed, "proj"));
        let pos_data: Vec<f32> = normal_draws(&mut rng_from(subseed(seed, "pos")), cfg.n_f * cfg.c)
            .into_iter()
            .map(|x| x * 0.1)
            .collect();
        let pos = ps.add("resampler.pos", cfg.n_f, cfg.c, pos_data);
        let mut blocks = Vec::new();
        for b in 0..cfg.blocks {
            let pre = format!("resampler.b{b}");
            blocks.push(CrossBlock {
                ln_q: LayerNorm::new(ps, &format!("{pre}.ln_q"), cfg.c),
                ln_kv: LayerNorm::new(ps, &format!("{pre}.ln_kv"), cfg.c),
                wq: Linear::new(ps, &format!("{pre}.wq"), cfg.c, cfg.c, false, subseed(seed, &format!("{pre}.wq"))),
                wk: Linear::new(ps, &format!("{pre}.wk"), cfg.c, cfg.c, false, subseed(seed, &format!("{pre}.wk"))),
                wv: Linear::new(ps, &format!("{pre}.wv"), cfg.c, cfg.c, false, subseed(seed, &format!("{pre}.wv"))),
                wo: Linear::new(ps, &format!("{pre}.wo"), cfg.c, cfg.c, false, subseed(seed, &format!("{pre}.wo"))),
                ln_ff: LayerNorm::new(ps, &format!("{pre}.ln_ff"), cfg.c),
                ff1: Linear::new(ps, &format!("{pre}.ff1"), cfg.c, 2 * cfg.c, true, subseed(seed, &format!("{pre}.ff1"))),
                ff2: Linear::new(ps, &format!("{pre}.ff2"), 2 * cfg.c, cfg.c, true, subseed(seed, &format!("{pre}.ff2"))),
            });
        }
        let ln_out = LayerNorm::new(ps, "resampler.ln_out", cfg.c);
        Resampler {
            cfg,
            latents,
            null_embed,
            proj,
            pos,
            blocks,
            ln_out,
        }
    }

    /// In-graph forward: `[N_f, D_f]` features to `[M, C]` style tokens.
    pub fn forward(&self, t: &mut Tape, fmap: &FeatureMap) -> Var {
        assert_eq!(fmap.n_cells, self.cfg.n_f, "feature cell count");
        assert_eq!(fmap.dim, self.cfg.d_f, "feature dim");
        let f = t.constant(fmap.n_cells, fmap.dim, fmap.grid.clone());
        let kv = self.proj.forward(t, f);
        let pos = t.p(self.pos);
        let kv = t.add(kv, pos);
        let mut x = t.p(self.latents);
        for blk in &self.blocks {
            let q_in = blk.ln_q.forward(t, x);
            let kv_in = blk.ln_kv.forward(t, kv);
            let q = blk.wq.forward(t, q_in);
            let k = blk.wk.forward(t, kv_in);
            let v = blk.wv.forward(t, kv_in);
            let attn = attention(t, q, k, v, self.cfg.heads, None);
            let attn = blk.wo.forward(t, attn);
            x = t.add(x, attn);
            let ff_in = blk.ln_ff.forward(t, x);
            let h = blk.ff1.forward(t, ff_in);
            let h = t.gelu(h);
            let h = blk.ff2.forward(t, h);
            x = t.add(x, h);
        }
        self.ln_out.forward(t, x)
    }

    /// Deterministic forward pass to plain style tokens.
    pub fn resample(&self, ps: &ParamSet, fmap: &FeatureMap) -> Result<StyleTokens> {
        if fmap.n_cells != self.cfg.n_f || fmap.dim != self.cfg.d_f {
            return Err(Error::ShapeMismatch(format!(
                "feature map {}x{} vs resampler {}x{}",
                fmap.n_cells, fmap.dim, self.cfg.n_f, self.cfg.d_f
            )));
        }
        let mut t = Tape::new(ps);
        let out = self.forward(&mut t, fmap);
        Ok(StyleTokens {
            m: self.cfg.m,
            c: self.cfg.c,
            values: t.value(out).to_vec(),
            provenance: Provenance::Plain,
        })
    }

    /// The learned null embedding broadcast to M x C.
    pub fn null_tokens(&self, ps: &ParamSet) -> StyleTokens {
        let row = &ps.get(self.null_embed).data;
        let mut values = Vec::with_capacity(self.cfg.m * self.cfg.c);
        for _ in 0..self.cfg.m {
            values.extend_from_slice(row);
        }
        StyleTokens {
            m: self.cfg.m,
            c: self.cfg.c,
            values,
            provenance: Provenance::Null,
        }
    }

    /// In-graph null tokens (stage-1 training path; grads reach the embedding).
    pub fn null_tokens_graph(&self, t: &mut Tape) -> Var {
        let row = t.p(self.null_embed);
        let idx: Vec<usize> = (0..self.cfg.m * self.cfg.c).map(|i| i % self.cfg.c).collect();
        t.gather(row, Arc::new(idx), self.cfg.m, self.cfg.c)
    }

    /// Style-enhanced tokens: `alpha * R(F) + (1-alpha) * R(F - F_S) + gamma * n`.
    pub fn style_enhanced(
        &self,
        ps: &ParamSet,
        f: &FeatureMap,
        f_s: &FeatureMap,
        alpha: f32,
        gamma: f32,
        seed: u64,
    ) -> Result<StyleTokens> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidArgument(format!(
                "residual ratio alpha {alpha} outside [0,1]"
            )));
        }
        let full = self.resample(ps, f)?;
        let residual = self.resample(ps, &f.sub(f_s))?;
        let mut values: Vec<f32> = full
            .values
            .iter()
            .zip(residual.values.iter())
            .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
            .collect();
        if gamma > 0.0 {
            let noise = style_noise(self.cfg.m, self.cfg.c, seed);
            for (v, n) in values.iter_mut().zip(noise.iter()) {
                *v += gamma * n;
            }
        } else if gamma < 0.0 {
            return Err(Error::InvalidArgument("gamma must be >= 0".into()));
        }
        Ok(StyleTokens {
            m: self.cfg.m,
            c: self.cfg.c,
            values,
            provenance: Provenance::Enhanced,
        })
    }
}

/// The seeded noise draw shared by all injection paths.
pub fn style_noise(m: usize, c: usize, seed: u64) -> Vec<f32> {
    normal_draws(&mut rng_from(subseed(seed, "style-noise")), m * c)
}

/// `s_hat = s + gamma * n`, n standard normal i.i.d., seeded.
pub fn inject_noise(s: &StyleTokens, gamma: f32, seed: u64) -> Result<StyleTokens> {
    if gamma < 0.0 {
        return Err(Error::InvalidArgument(format!("gamma {gamma} must be >= 0")));
    }
    let mut out = s.clone();
    if gamma > 0.0 {
        let noise = style_noise(s.m, s.c, seed);
        for (v, n) in out.values.iter_mut().zip(noise.iter()) {
            *v += gamma * n;
        }
    }
    out.provenance = Provenance::Noised;
    Ok(out)
}

/// Style-enhanced tokens straight from a reference image: F is the full
/// image's features, F_S the features of its segmented content region
/// (background grayed out), so F - F_S suppresses the depicted object.
pub fn style_enhanced_from_image(
    rs: &Resampler,
    ps: &ParamSet,
    encoder: &crate::encoder::Encoder,
    img: &crate::procgen::Image,
    alpha: f32,
    gamma: f32,
    seed: u64,
) -> Result<StyleTokens> {
    let f = encoder.encode(img)?;
    let seg = crate::encoder::segment_image(img, crate::encoder::SEGMENT_TAU_DEFAULT);
    let object = crate::encoder::apply_mask(img, &seg.mask, false)?;
    let f_s = encoder.encode(&object)?;
    rs.style_enhanced(ps, &f, &f_s, alpha, gamma, seed)
}
