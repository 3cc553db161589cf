//! Minimal reverse-mode autodiff over 2-D f32 tensors.
//!
//! A `Tape` records ops as they execute; `backward` walks the tape in reverse
//! and accumulates gradients. All tensors are row-major `[rows, cols]`
//! matrices; scalars are `[1, 1]`. Parameters live outside the tape in a
//! [`ParamSet`] and are pulled in as memoized leaves, so one tape per sample
//! can be built in parallel against a shared `&ParamSet`.
//!
//! The op set is deliberately small: matmul, broadcasts, gather/scatter (used
//! for im2col convolutions and pooling), row softmax / layernorm cores, and a
//! fused token-level negative-log-likelihood. Everything larger (attention,
//! conv blocks, resampler) is composed from these.

use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

/// Named, flat parameter storage. Order of insertion is the canonical order
/// used by optimizers and checkpoint serialization.
#[derive(Default)]
pub struct ParamSet {
    pub entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, rows: usize, cols: usize, data: Vec<f32>) -> ParamId {
        assert_eq!(data.len(), rows * cols, "param {name} shape/data mismatch");
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate param name {name}"
        );
        self.entries.push(ParamEntry {
            name: name.to_string(),
            rows,
            cols,
            data,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Var {
    pub id: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Var {
    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }
}

enum Op {
    /// Constant or parameter leaf. `Some(id)` marks a parameter whose
    /// gradient must be exported after backward.
    Leaf(Option<ParamId>),
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// `[r,c] + [1,c]` broadcast over rows (bias add).
    AddRow(usize, usize),
    /// `[r,c] * [1,c]` broadcast over rows (layernorm gain).
    MulRow(usize, usize),
    Scale(usize, f32),
    Relu(usize),
    Gelu(usize),
    Softplus(usize),
    Transpose(usize),
    RowSoftmax(usize),
    /// Per-row `(x - mean) / sqrt(var + eps)`.
    RowNorm(usize, f32),
    /// Add a constant matrix (attention mask); no gradient to the constant.
    AddConst(usize, Arc<Vec<f32>>),
    /// `out.flat[i] = in.flat[idx[i]]`, `usize::MAX` reads as zero padding.
    Gather(usize, Arc<Vec<usize>>),
    ConcatCols(usize, usize),
    SliceCols(usize, usize, usize),
    /// Copy `src` over `base` rows starting at the given row offset.
    OverwriteRows(usize, usize, usize),
    SumAll(usize),
    MeanAll(usize),
    /// Per-column max over rows; the payload stores each column's argmax row.
    ColMax(usize, Arc<Vec<usize>>),
    /// Per-column log-sum-exp over rows (smooth max pooling).
    ColLse(usize),
    /// Fused `sum_t w_t * -log softmax(logits_t)[target_t]` over rows.
    NllSum(usize, Arc<Vec<usize>>, Arc<Vec<f32>>),
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f32>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    /// Memoized leaf per param id so gradients accumulate in one place.
    param_vars: Vec<Option<usize>>,
}

/// Per-parameter gradients exported by `backward`, aligned with the
/// `ParamSet` entry order. `None` for parameters not touched by the graph.
pub struct Grads {
    pub by_param: Vec<Option<Vec<f32>>>,
}

impl Grads {
    pub fn zeros(n_params: usize) -> Self {
        Grads {
            by_param: vec![None; n_params],
        }
    }

    pub fn accumulate(&mut self, other: &Grads) {
        if self.by_param.len() < other.by_param.len() {
            self.by_param.resize(other.by_param.len(), None);
        }
        for (slot, g) in self.by_param.iter_mut().zip(other.by_param.iter()) {
            if let Some(g) = g {
                match slot {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(g.iter()) {
                            *a += *b;
                        }
                    }
                    None => *slot = Some(g.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, k: f32) {
        for slot in self.by_param.iter_mut().flatten() {
            for v in slot.iter_mut() {
                *v *= k;
            }
        }
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f32>, op: Op) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        Var {
            id: self.nodes.len() - 1,
            rows,
            cols,
        }
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.id].value
    }

    pub fn scalar(&self, v: Var) -> f32 {
        debug_assert_eq!(v.numel(), 1);
        self.nodes[v.id].value[0]
    }

    /// Parameter leaf (memoized per ParamId).
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(nid) = self.param_vars[id.0] {
            let n = &self.nodes[nid];
            return Var {
                id: nid,
                rows: n.rows,
                cols: n.cols,
            };
        }
        let e = self.params.get(id);
        let v = self.push(e.rows, e.cols, e.data.clone(), Op::Leaf(Some(id)));
        self.param_vars[id.0] = Some(v.id);
        v
    }

    /// Constant leaf (no gradient exported).
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f32>) -> Var {
        self.push(rows, cols, data, Op::Leaf(None))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(a.cols, b.rows, "matmul inner dims");
        let (m, k, n) = (a.rows, a.cols, b.cols);
        let mut out = vec![0.0f32; m * n];
        {
            let av = &self.nodes[a.id].value;
            let bv = &self.nodes[b.id].value;
            matmul_into(av, bv, &mut out, m, k, n);
        }
        self.push(m, n, out, Op::MatMul(a.id, b.id))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!((a.rows, a.cols), (b.rows, b.cols), "add shapes");
        let out = zip2(&self.nodes[a.id].value, &self.nodes[b.id].value, |x, y| x + y);
        self.push(a.rows, a.cols, out, Op::Add(a.id, b.id))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!((a.rows, a.cols), (b.rows, b.cols), "sub shapes");
        let out = zip2(&self.nodes[a.id].value, &self.nodes[b.id].value, |x, y| x - y);
        self.push(a.rows, a.cols, out, Op::Sub(a.id, b.id))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!((a.rows, a.cols), (b.rows, b.cols), "mul shapes");
        let out = zip2(&self.nodes[a.id].value, &self.nodes[b.id].value, |x, y| x * y);
        self.push(a.rows, a.cols, out, Op::Mul(a.id, b.id))
    }

    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(b.rows, 1);
        assert_eq!(a.cols, b.cols);
        let bv = self.nodes[b.id].value.clone();
        let out: Vec<f32> = self.nodes[a.id]
            .value
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % a.cols])
            .collect();
        self.push(a.rows, a.cols, out, Op::AddRow(a.id, b.id))
    }

    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(b.rows, 1);
        assert_eq!(a.cols, b.cols);
        let bv = self.nodes[b.id].value.clone();
        let out: Vec<f32> = self.nodes[a.id]
            .value
            .iter()
            .enumerate()
            .map(|(i, x)| x * bv[i % a.cols])
            .collect();
        self.push(a.rows, a.cols, out, Op::MulRow(a.id, b.id))
    }

    pub fn scale(&mut self, a: Var, k: f32) -> Var {
        let out: Vec<f32> = self.nodes[a.id].value.iter().map(|x| x * k).collect();
        self.push(a.rows, a.cols, out, Op::Scale(a.id, k))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out: Vec<f32> = self.nodes[a.id].value.iter().map(|x| x.max(0.0)).collect();
        self.push(a.rows, a.cols, out, Op::Relu(a.id))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out: Vec<f32> = self.nodes[a.id].value.iter().map(|&x| gelu(x)).collect();
        self.push(a.rows, a.cols, out, Op::Gelu(a.id))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out: Vec<f32> = self.nodes[a.id].value.iter().map(|&x| softplus(x)).collect();
        self.push(a.rows, a.cols, out, Op::Softplus(a.id))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = (a.rows, a.cols);
        let av = &self.nodes[a.id].value;
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        self.push(c, r, out, Op::Transpose(a.id))
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let (r, c) = (a.rows, a.cols);
        let av = &self.nodes[a.id].value;
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            let row = &av[i * c..(i + 1) * c];
            softmax_into(row, &mut out[i * c..(i + 1) * c]);
        }
        self.push(r, c, out, Op::RowSoftmax(a.id))
    }

    pub fn row_norm(&mut self, a: Var, eps: f32) -> Var {
        let (r, c) = (a.rows, a.cols);
        let av = &self.nodes[a.id].value;
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            let row = &av[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f32>() / c as f32;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f32>() / c as f32;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * inv;
            }
        }
        self.push(r, c, out, Op::RowNorm(a.id, eps))
    }

    pub fn add_const(&mut self, a: Var, m: Arc<Vec<f32>>) -> Var {
        assert_eq!(m.len(), a.numel());
        let out = zip2(&self.nodes[a.id].value, &m, |x, y| x + y);
        self.push(a.rows, a.cols, out, Op::AddConst(a.id, m))
    }

    pub fn gather(&mut self, a: Var, idx: Arc<Vec<usize>>, rows: usize, cols: usize) -> Var {
        assert_eq!(idx.len(), rows * cols);
        let av = &self.nodes[a.id].value;
        let out: Vec<f32> = idx
            .iter()
            .map(|&i| if i == usize::MAX { 0.0 } else { av[i] })
            .collect();
        self.push(rows, cols, out, Op::Gather(a.id, idx))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(a.rows, b.rows);
        let (r, ca, cb) = (a.rows, a.cols, b.cols);
        let av = &self.nodes[a.id].value;
        let bv = &self.nodes[b.id].value;
        let mut out = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            out.extend_from_slice(&av[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
        }
        self.push(r, ca + cb, out, Op::ConcatCols(a.id, b.id))
    }

    pub fn slice_cols(&mut self, a: Var, from: usize, to: usize) -> Var {
        assert!(from < to && to <= a.cols);
        let (r, c) = (a.rows, a.cols);
        let av = &self.nodes[a.id].value;
        let mut out = Vec::with_capacity(r * (to - from));
        for i in 0..r {
            out.extend_from_slice(&av[i * c + from..i * c + to]);
        }
        self.push(r, to - from, out, Op::SliceCols(a.id, from, to))
    }

    pub fn overwrite_rows(&mut self, base: Var, src: Var, row_offset: usize) -> Var {
        assert_eq!(base.cols, src.cols);
        assert!(row_offset + src.rows <= base.rows);
        let c = base.cols;
        let mut out = self.nodes[base.id].value.clone();
        let sv = self.nodes[src.id].value.clone();
        out[row_offset * c..(row_offset + src.rows) * c].copy_from_slice(&sv);
        self.push(base.rows, c, out, Op::OverwriteRows(base.id, src.id, row_offset))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f32 = self.nodes[a.id].value.iter().sum();
        self.push(1, 1, vec![s], Op::SumAll(a.id))
    }

    /// `[r,c] -> [1,c]` max over rows; gradient flows to the argmax row of
    /// each column (ties resolve to the first row).
    pub fn col_max(&mut self, a: Var) -> Var {
        let (r, c) = (a.rows, a.cols);
        let v = &self.nodes[a.id].value;
        let mut out = v[..c].to_vec();
        let mut arg = vec![0usize; c];
        for i in 1..r {
            for j in 0..c {
                let x = v[i * c + j];
                if x > out[j] {
                    out[j] = x;
                    arg[j] = i;
                }
            }
        }
        self.push(1, c, out, Op::ColMax(a.id, Arc::new(arg)))
    }

    /// `[r,c] -> [1,c]` log-sum-exp over rows: a smooth max whose gradient
    /// spreads over all rows by their softmax weight.
    pub fn col_lse(&mut self, a: Var) -> Var {
        let (r, c) = (a.rows, a.cols);
        let v = &self.nodes[a.id].value;
        let mut out = vec![0.0f32; c];
        for j in 0..c {
            let mx = (0..r).map(|i| v[i * c + j]).fold(f32::NEG_INFINITY, f32::max);
            let s: f32 = (0..r).map(|i| (v[i * c + j] - mx).exp()).sum();
            out[j] = mx + s.ln();
        }
        self.push(1, c, out, Op::ColLse(a.id))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let s: f32 = self.nodes[a.id].value.iter().sum();
        let n = a.numel() as f32;
        self.push(1, 1, vec![s / n], Op::MeanAll(a.id))
    }

    /// `sum_t weights[t] * -log softmax(logits[t])[targets[t]]`.
    /// Rows with weight 0 contribute nothing (and get no gradient).
    pub fn nll_sum(&mut self, logits: Var, targets: Arc<Vec<usize>>, weights: Arc<Vec<f32>>) -> Var {
        assert_eq!(targets.len(), logits.rows);
        assert_eq!(weights.len(), logits.rows);
        let (r, c) = (logits.rows, logits.cols);
        let lv = &self.nodes[logits.id].value;
        let mut total = 0.0f64;
        for t in 0..r {
            if weights[t] == 0.0 {
                continue;
            }
            let row = &lv[t * c..(t + 1) * c];
            total += weights[t] as f64 * -log_softmax_at(row, targets[t]) as f64;
        }
        self.push(1, 1, vec![total as f32], Op::NllSum(logits.id, targets, weights))
    }

    /// Reverse sweep from `loss` (must be scalar). Returns per-param grads.
    pub fn backward(&mut self, loss: Var) -> Grads {
        assert_eq!(loss.numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            // split borrow: read node, write grads of inputs
            macro_rules! gslot {
                ($i:expr, $n:expr) => {
                    grads[$i].get_or_insert_with(|| vec![0.0; $n])
                };
            }
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf(_) => {
                    grads[id] = Some(g); // keep for export
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (m, k) = (self.nodes[a].rows, self.nodes[a].cols);
                    let n = self.nodes[b].cols;
                    // dA = dC * B^T
                    let bv = &self.nodes[b].value;
                    let mut da = vec![0.0f32; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let brow = &bv[..];
                            for t in 0..k {
                                da[i * k + t] += gij * brow[t * n + j];
                            }
                        }
                    }
                    // dB = A^T * dC
                    let av = &self.nodes[a].value;
                    let mut db = vec![0.0f32; k * n];
                    for i in 0..m {
                        for t in 0..k {
                            let ait = av[i * k + t];
                            if ait == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[t * n + j] += ait * g[i * n + j];
                            }
                        }
                    }
                    add_into(gslot!(a, m * k), &da);
                    add_into(gslot!(b, k * n), &db);
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    let n = g.len();
                    add_into(gslot!(a, n), &g);
                    add_into(gslot!(b, n), &g);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    let n = g.len();
                    add_into(gslot!(a, n), &g);
                    let slot = gslot!(b, n);
                    for (s, x) in slot.iter_mut().zip(g.iter()) {
                        *s -= *x;
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let av = self.nodes[a].value.clone();
                    let bv = self.nodes[b].value.clone();
                    let da = zip2(&g, &bv, |x, y| x * y);
                    let db = zip2(&g, &av, |x, y| x * y);
                    add_into(gslot!(a, g.len()), &da);
                    add_into(gslot!(b, g.len()), &db);
                }
                Op::AddRow(a, b) => {
                    let (a, b) = (*a, *b);
                    let c = self.nodes[a].cols;
                    let n = self.nodes[a].value.len();
                    add_into(gslot!(a, n), &g);
                    let slot = gslot!(b, c);
                    for (i, x) in g.iter().enumerate() {
                        slot[i % c] += *x;
                    }
                }
                Op::MulRow(a, b) => {
                    let (a, b) = (*a, *b);
                    let c = self.nodes[a].cols;
                    let av = self.nodes[a].value.clone();
                    let bv = self.nodes[b].value.clone();
                    {
                        let slot = gslot!(a, av.len());
                        for (i, x) in g.iter().enumerate() {
                            slot[i] += *x * bv[i % c];
                        }
                    }
                    let slot = gslot!(b, c);
                    for (i, x) in g.iter().enumerate() {
                        slot[i % c] += *x * av[i];
                    }
                }
                Op::Scale(a, k) => {
                    let (a, k) = (*a, *k);
                    let da: Vec<f32> = g.iter().map(|x| x * k).collect();
                    add_into(gslot!(a, da.len()), &da);
                }
                Op::Relu(a) => {
                    let a = *a;
                    let av = self.nodes[a].value.clone();
                    let da = zip2(&g, &av, |x, v| if v > 0.0 { x } else { 0.0 });
                    add_into(gslot!(a, da.len()), &da);
                }
                Op::Gelu(a) => {
                    let a = *a;
                    let av = self.nodes[a].value.clone();
                    let da = zip2(&g, &av, |x, v| x * gelu_grad(v));
                    add_into(gslot!(a, da.len()), &da);
                }
                Op::Softplus(a) => {
                    let a = *a;
                    let av = self.nodes[a].value.clone();
                    let da = zip2(&g, &av, |x, v| x * sigmoid(v));
                    add_into(gslot!(a, da.len()), &da);
                }
                Op::Transpose(a) => {
                    let a = *a;
                    let (r, c) = (self.nodes[a].rows, self.nodes[a].cols);
                    let mut da = vec![0.0f32; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] = g[j * r + i];
                        }
                    }
                    add_into(gslot!(a, r * c), &da);
                }
                Op::RowSoftmax(a) => {
                    let a = *a;
                    let (r, c) = (node.rows, node.cols);
                    let y = node.value.clone();
                    let mut da = vec![0.0f32; r * c];
                    for i in 0..r {
                        let yi = &y[i * c..(i + 1) * c];
                        let gi = &g[i * c..(i + 1) * c];
                        let dot: f32 = yi.iter().zip(gi.iter()).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            da[i * c + j] = yi[j] * (gi[j] - dot);
                        }
                    }
                    add_into(gslot!(a, r * c), &da);
                }
                Op::RowNorm(a, eps) => {
                    let (a, eps) = (*a, *eps);
                    let (r, c) = (node.rows, node.cols);
                    let y = node.value.clone();
                    let xv = self.nodes[a].value.clone();
                    let mut da = vec![0.0f32; r * c];
                    for i in 0..r {
                        let xi = &xv[i * c..(i + 1) * c];
                        let yi = &y[i * c..(i + 1) * c];
                        let gi = &g[i * c..(i + 1) * c];
                        let mean = xi.iter().sum::<f32>() / c as f32;
                        let var = xi.iter().map(|x| (x - mean) * (x - mean)).sum::<f32>() / c as f32;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gmean = gi.iter().sum::<f32>() / c as f32;
                        let gydot = gi.iter().zip(yi.iter()).map(|(a, b)| a * b).sum::<f32>() / c as f32;
                        for j in 0..c {
                            da[i * c + j] = inv * (gi[j] - gmean - yi[j] * gydot);
                        }
                    }
                    add_into(gslot!(a, r * c), &da);
                }
                Op::AddConst(a, _) => {
                    let a = *a;
                    add_into(gslot!(a, g.len()), &g);
                }
                Op::Gather(a, idx) => {
                    let a = *a;
                    let idx = idx.clone();
                    let n = self.nodes[a].value.len();
                    let slot = gslot!(a, n);
                    for (o, &i) in idx.iter().enumerate() {
                        if i != usize::MAX {
                            slot[i] += g[o];
                        }
                    }
                }
                Op::ConcatCols(a, b) => {
                    let (a, b) = (*a, *b);
                    let (r, ca) = (self.nodes[a].rows, self.nodes[a].cols);
                    let cb = self.nodes[b].cols;
                    let mut da = vec![0.0f32; r * ca];
                    let mut db = vec![0.0f32; r * cb];
                    for i in 0..r {
                        da[i * ca..(i + 1) * ca]
                            .copy_from_slice(&g[i * (ca + cb)..i * (ca + cb) + ca]);
                        db[i * cb..(i + 1) * cb]
                            .copy_from_slice(&g[i * (ca + cb) + ca..(i + 1) * (ca + cb)]);
                    }
                    add_into(gslot!(a, r * ca), &da);
                    add_into(gslot!(b, r * cb), &db);
                }
                Op::SliceCols(a, from, _to) => {
                    let (a, from) = (*a, *from);
                    let (r, c) = (self.nodes[a].rows, self.nodes[a].cols);
                    let w = node.cols;
                    let slot = gslot!(a, r * c);
                    for i in 0..r {
                        for j in 0..w {
                            slot[i * c + from + j] += g[i * w + j];
                        }
                    }
                }
                Op::OverwriteRows(base, src, off) => {
                    let (base, src, off) = (*base, *src, *off);
                    let c = node.cols;
                    let sr = self.nodes[src].rows;
                    {
                        let n = self.nodes[base].value.len();
                        let slot = gslot!(base, n);
                        for (i, x) in g.iter().enumerate() {
                            let row = i / c;
                            if row < off || row >= off + sr {
                                slot[i] += *x;
                            }
                        }
                    }
                    let slot = gslot!(src, sr * c);
                    for i in 0..sr * c {
                        slot[i] += g[(off * c) + i];
                    }
                }
                Op::SumAll(a) => {
                    let a = *a;
                    let n = self.nodes[a].value.len();
                    let slot = gslot!(a, n);
                    for s in slot.iter_mut() {
                        *s += g[0];
                    }
                }
                Op::MeanAll(a) => {
                    let a = *a;
                    let n = self.nodes[a].value.len();
                    let k = g[0] / n as f32;
                    let slot = gslot!(a, n);
                    for s in slot.iter_mut() {
                        *s += k;
                    }
                }
                Op::ColMax(a, arg) => {
                    let a = *a;
                    let arg = arg.clone();
                    let c = self.nodes[a].cols;
                    let n = self.nodes[a].value.len();
                    let slot = gslot!(a, n);
                    for (j, &row) in arg.iter().enumerate() {
                        slot[row * c + j] += g[j];
                    }
                }
                Op::ColLse(a) => {
                    let a = *a;
                    let (r, c) = (self.nodes[a].rows, self.nodes[a].cols);
                    let v = self.nodes[a].value.clone();
                    let out = self.nodes[id].value.clone();
                    let slot = gslot!(a, r * c);
                    for j in 0..c {
                        for i in 0..r {
                            slot[i * c + j] += g[j] * (v[i * c + j] - out[j]).exp();
                        }
                    }
                }
                Op::NllSum(a, targets, weights) => {
                    let a = *a;
                    let targets = targets.clone();
                    let weights = weights.clone();
                    let (r, c) = (self.nodes[a].rows, self.nodes[a].cols);
                    let lv = self.nodes[a].value.clone();
                    let mut da = vec![0.0f32; r * c];
                    let mut sm = vec![0.0f32; c];
                    for t in 0..r {
                        let w = weights[t];
                        if w == 0.0 {
                            continue;
                        }
                        softmax_into(&lv[t * c..(t + 1) * c], &mut sm);
                        for j in 0..c {
                            da[t * c + j] = g[0] * w * sm[j];
                        }
                        da[t * c + targets[t]] -= g[0] * w;
                    }
                    add_into(gslot!(a, r * c), &da);
                }
            }
        }

        let mut out = Grads::zeros(self.params.len());
        for (pid, nid) in self.param_vars.iter().enumerate() {
            if let Some(nid) = nid {
                if let Some(g) = grads[*nid].take() {
                    out.by_param[pid] = Some(g);
                }
            }
        }
        out
    }
}

fn zip2(a: &[f32], b: &[f32], f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
    a.iter().zip(b.iter()).map(|(x, y)| f(*x, *y)).collect()
}

fn add_into(acc: &mut [f32], g: &[f32]) {
    for (a, b) in acc.iter_mut().zip(g.iter()) {
        *a += *b;
    }
}

pub fn matmul_into(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    // ikj order keeps the inner loop contiguous on b and out.
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (t, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

fn softmax_into(row: &[f32], out: &mut [f32]) {
    let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut z = 0.0f32;
    for (o, &x) in out.iter_mut().zip(row.iter()) {
        let e = (x - mx).exp();
        *o = e;
        z += e;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

pub fn log_softmax_at(row: &[f32], idx: usize) -> f32 {
    let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let z: f64 = row.iter().map(|&x| ((x - mx) as f64).exp()).sum();
    (row[idx] - mx) as f64 as f32 - (z.ln() as f32)
}

fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_56; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    const C: f32 = 0.797_884_56;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softplus(x: f32) -> f32 {
    // numerically stable: max(x,0) + ln(1+exp(-|x|))
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Validate that every value in a slice is finite.
pub fn check_finite(name: &str, xs: &[f32]) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name} contains non-finite values")))
    }
}
