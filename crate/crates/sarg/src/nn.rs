//! Small neural-net building blocks on top of the tape: linear layers,
//! layernorm, multi-head attention, im2col convolution indices, and Adam.

use std::sync::Arc;

use crate::autograd::{Grads, ParamId, ParamSet, Tape, Var};
use crate::rng::{normal_draws, rng_from, subseed};

/// Linear layer parameters, `w: [in, out]`, optional bias `[1, out]`.
#[derive(Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, name: &str, d_in: usize, d_out: usize, bias: bool, seed: u64) -> Self {
        let scale = 1.0 / (d_in as f32).sqrt();
        let w_data: Vec<f32> = normal_draws(&mut rng_from(subseed(seed, name)), d_in * d_out)
            .into_iter()
            .map(|x| x * scale)
            .collect();
        let w = ps.add(&format!("{name}.w"), d_in, d_out, w_data);
        let b = bias.then(|| ps.add(&format!("{name}.b"), 1, d_out, vec![0.0; d_out]));
        Linear { w, b }
    }

    pub fn zero_init(ps: &mut ParamSet, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = ps.add(&format!("{name}.w"), d_in, d_out, vec![0.0; d_in * d_out]);
        Linear { w, b: None }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let w = t.p(self.w);
        let y = t.matmul(x, w);
        match self.b {
            Some(b) => {
                let bv = t.p(b);
                t.add_row(y, bv)
            }
            None => y,
        }
    }
}

/// Learned layernorm: row-normalize then scale/shift.
#[derive(Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f32,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: ps.add(&format!("{name}.g"), 1, dim, vec![1.0; dim]),
            bias: ps.add(&format!("{name}.b"), 1, dim, vec![0.0; dim]),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let n = t.row_norm(x, self.eps);
        let g = t.p(self.gain);
        let n = t.mul_row(n, g);
        let b = t.p(self.bias);
        t.add_row(n, b)
    }
}

/// Scaled dot-product multi-head attention over already-projected q/k/v of
/// width `c` (divisible by `n_heads`). `mask`, when given, is added to the
/// `[Tq, Tk]` score matrix of every head.
pub fn attention(
    t: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    n_heads: usize,
    mask: Option<Arc<Vec<f32>>>,
) -> Var {
    assert_eq!(q.cols, k.cols);
    assert_eq!(k.rows, v.rows);
    let c = q.cols;
    assert_eq!(c % n_heads, 0);
    let dh = c / n_heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut out: Option<Var> = None;
    for h in 0..n_heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = t.slice_cols(q, lo, hi);
        let kh = t.slice_cols(k, lo, hi);
        let vh = t.slice_cols(v, lo, hi);
        let kt = t.transpose(kh);
        let s = t.matmul(qh, kt);
        let s = t.scale(s, scale);
        let s = match &mask {
            Some(m) => t.add_const(s, m.clone()),
            None => s,
        };
        let p = t.row_softmax(s);
        let oh = t.matmul(p, vh);
        out = Some(match out {
            Some(acc) => t.concat_cols(acc, oh),
            None => oh,
        });
    }
    out.unwrap()
}

/// Additive causal mask for a `[t_len, t_len]` score matrix.
pub fn causal_mask(t_len: usize) -> Arc<Vec<f32>> {
    let mut m = vec![0.0f32; t_len * t_len];
    for i in 0..t_len {
        for j in (i + 1)..t_len {
            m[i * t_len + j] = -1e9;
        }
    }
    Arc::new(m)
}

/// Gather indices for a same-padded stride-1 `kh x kw` convolution over a
/// `[h*w, cch]` pixel-major feature matrix. Output is `[h*w, kh*kw*cch]`,
/// ready for matmul against a `[kh*kw*cch, cout]` weight.
pub fn im2col_indices(h: usize, w: usize, cch: usize, kh: usize, kw: usize) -> Arc<Vec<usize>> {
    let (ph, pw) = (kh as isize / 2, kw as isize / 2);
    let mut idx = Vec::with_capacity(h * w * kh * kw * cch);
    for y in 0..h as isize {
        for x in 0..w as isize {
            for dy in -ph..=(kh as isize - 1 - ph) {
                for dx in -pw..=(kw as isize - 1 - pw) {
                    let (yy, xx) = (y + dy, x + dx);
                    for c in 0..cch {
                        if yy < 0 || yy >= h as isize || xx < 0 || xx >= w as isize {
                            idx.push(usize::MAX);
                        } else {
                            idx.push((yy as usize * w + xx as usize) * cch + c);
                        }
                    }
                }
            }
        }
    }
    Arc::new(idx)
}

/// 2x2 average pooling as a gather + constant matmul. Returns the gather
/// indices (`[ho*wo, 4*cch]` layout) and the averaging matrix `[4*cch, cch]`.
pub fn avgpool2_plan(h: usize, w: usize, cch: usize) -> (Arc<Vec<usize>>, Vec<f32>) {
    assert!(h % 2 == 0 && w % 2 == 0);
    let (ho, wo) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(ho * wo * 4 * cch);
    for y in 0..ho {
        for x in 0..wo {
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let py = 2 * y + dy;
                let px = 2 * x + dx;
                for c in 0..cch {
                    idx.push((py * w + px) * cch + c);
                }
            }
        }
    }
    let mut avg = vec![0.0f32; 4 * cch * cch];
    for tap in 0..4 {
        for c in 0..cch {
            avg[(tap * cch + c) * cch + c] = 0.25;
        }
    }
    (Arc::new(idx), avg)
}

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub warmup_steps: usize,
    pub grad_clip: f32,
}

impl AdamConfig {
    pub fn with_lr(lr: f32) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 0,
            grad_clip: 1.0,
        }
    }
}

/// Adam with linear warmup and global-norm gradient clipping. Only the
/// parameters in `trainable` are updated; everything else stays frozen.
pub struct Adam {
    pub cfg: AdamConfig,
    step: usize,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    trainable: Vec<bool>,
}

impl Adam {
    pub fn new(ps: &ParamSet, cfg: AdamConfig, trainable: Vec<bool>) -> Self {
        assert_eq!(trainable.len(), ps.len());
        let m = ps.entries.iter().map(|e| vec![0.0; e.data.len()]).collect();
        let v = ps.entries.iter().map(|e| vec![0.0; e.data.len()]).collect();
        Adam {
            cfg,
            step: 0,
            m,
            v,
            trainable,
        }
    }

    pub fn all_trainable(ps: &ParamSet, cfg: AdamConfig) -> Self {
        let mask = vec![true; ps.len()];
        Self::new(ps, cfg, mask)
    }

    pub fn step(&mut self, ps: &mut ParamSet, grads: &Grads) {
        self.step += 1;
        let warm = if self.cfg.warmup_steps > 0 {
            (self.step as f32 / self.cfg.warmup_steps as f32).min(1.0)
        } else {
            1.0
        };
        let lr = self.cfg.lr * warm;

        // global norm over trainable grads
        let mut sq = 0.0f64;
        for (pid, g) in grads.by_param.iter().enumerate() {
            if !self.trainable.get(pid).copied().unwrap_or(false) {
                continue;
            }
            if let Some(g) = g {
                sq += g.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>();
            }
        }
        let norm = sq.sqrt() as f32;
        let clip = if norm > self.cfg.grad_clip && norm > 0.0 {
            self.cfg.grad_clip / norm
        } else {
            1.0
        };

        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (pid, g) in grads.by_param.iter().enumerate() {
            if !self.trainable.get(pid).copied().unwrap_or(false) {
                continue;
            }
            let Some(g) = g else { continue };
            let data = &mut ps.entries[pid].data;
            let m = &mut self.m[pid];
            let v = &mut self.v[pid];
            for i in 0..data.len() {
                let gi = g[i] * clip;
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }
}
