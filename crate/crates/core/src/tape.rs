//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! referenced from a [`ParamStore`] without copying, so building a tape per
//! sample is cheap. Calling [`Tape::backward`] on a scalar node produces a
//! [`Gradients`] buffer aligned with the store.
//!
//! Vectors are `1 × n` matrices. Block layouts (`K` categories of width `w`)
//! are stored as `rows × (K·w)` with category `k` in columns `k·w..(k+1)·w`.

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    /// Block-diagonal product: column block `k` of `x` times `ws[k]`.
    BlockMatMul {
        x: Var,
        ws: Vec<Var>,
        in_offsets: Vec<usize>,
        out_offsets: Vec<usize>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    Elu(Var),
    Sigmoid(Var),
    Tanh(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    /// Per-category concatenation of `r × (K·w_i)` inputs.
    ConcatBlocks {
        parts: Vec<Var>,
        widths: Vec<usize>,
        k: usize,
    },
    Reshape(Var),
    SoftmaxCols(Var),
    /// `out[0, k·d + j] = Σ_r w[r, k] · x[r, k·d + j]`.
    BlockWeightedSum {
        w: Var,
        x: Var,
        d: usize,
    },
    MixtureLoss(Box<MixtureLossSaved>),
}

#[derive(Debug, Clone)]
struct MixtureLossSaved {
    logits: Var,
    gauss: Var,
    target: f64,
    q: Vec<f64>,
    probs: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    value: Option<Array2<f64>>,
    op: Op,
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub tensors: Vec<Array2<f64>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            tensors: store
                .values()
                .iter()
                .map(|v| Array2::zeros(v.raw_dim()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.tensors[id.index()]
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            t.mapv_inplace(|x| x * factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    if scores.is_empty() {
        return Vec::new();
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub(crate) const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Floor added to every softplus-parameterized standard deviation.
pub const SD_FLOOR: f64 = 1e-4;

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(512),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> ArrayView2<'_, f64> {
        match &self.nodes[v.0].op {
            Op::Param(id) => self.params.value(*id).view(),
            _ => self.nodes[v.0]
                .value
                .as_ref()
                .expect("node value present")
                .view(),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let d = self.value(v).dim();
        (d.0, d.1)
    }

    /// A constant input; receives no gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// Block-diagonal product. `in_widths` gives the column width of each
    /// input block; the `ws[k]` must be `in_widths[k] × out_k`.
    pub fn block_matmul(&mut self, x: Var, ws: &[Var], in_widths: &[usize]) -> Var {
        assert_eq!(ws.len(), in_widths.len());
        let xv = self.value(x);
        let rows = xv.nrows();
        let mut in_offsets = Vec::with_capacity(ws.len() + 1);
        let mut out_offsets = Vec::with_capacity(ws.len() + 1);
        in_offsets.push(0);
        out_offsets.push(0);
        for (k, w) in ws.iter().enumerate() {
            let wv = self.value(*w);
            assert_eq!(wv.nrows(), in_widths[k], "block {k} input width");
            in_offsets.push(in_offsets[k] + in_widths[k]);
            out_offsets.push(out_offsets[k] + wv.ncols());
        }
        assert_eq!(*in_offsets.last().unwrap(), xv.ncols(), "block input width");
        let mut out = Array2::zeros((rows, *out_offsets.last().unwrap()));
        for (k, w) in ws.iter().enumerate() {
            let xb = xv.slice(s![.., in_offsets[k]..in_offsets[k + 1]]);
            let prod = xb.dot(&self.value(*w));
            out.slice_mut(s![.., out_offsets[k]..out_offsets[k + 1]])
                .assign(&prod);
        }
        self.push(
            out,
            Op::BlockMatMul {
                x,
                ws: ws.to_vec(),
                in_offsets,
                out_offsets,
            },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = &self.value(a) + &self.value(b);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = &self.value(a) - &self.value(b);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = &self.value(a) * &self.value(b);
        self.push(out, Op::Mul(a, b))
    }

    /// Adds a `1 × c` bias to every row of an `r × c` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Var {
        let bv = self.value(bias);
        assert_eq!(bv.nrows(), 1);
        let out = &self.value(x) + &bv;
        self.push(out, Op::AddRowBias(x, bias))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).mapv(|v| v * factor);
        self.push(out, Op::Scale(x, factor))
    }

    pub fn elu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(elu);
        self.push(out, Op::Elu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(f64::tanh);
        self.push(out, Op::Tanh(x))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice(s![start..start + len, ..]).to_owned();
        self.push(out, Op::SliceRows(x, start))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(out, Op::SliceCols(x, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p)).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p)).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("column counts agree");
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    /// Concatenates inputs category by category: for `k` blocks, output block
    /// `k` is `[part_0 block k, part_1 block k, …]`.
    pub fn concat_blocks(&mut self, parts: &[Var], k: usize) -> Var {
        let rows = self.value(parts[0]).nrows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let (r, c) = self.shape(*p);
                assert_eq!(r, rows);
                assert_eq!(c % k, 0, "block width must divide columns");
                c / k
            })
            .collect();
        let block: usize = widths.iter().sum();
        let mut out = Array2::zeros((rows, block * k));
        for kk in 0..k {
            let mut col = kk * block;
            for (p, w) in parts.iter().zip(&widths) {
                let src = self.value(*p);
                out.slice_mut(s![.., col..col + w])
                    .assign(&src.slice(s![.., kk * w..(kk + 1) * w]));
                col += w;
            }
        }
        self.push(
            out,
            Op::ConcatBlocks {
                parts: parts.to_vec(),
                widths,
                k,
            },
        )
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let flat: Vec<f64> = self.value(x).iter().cloned().collect();
        let out = Array2::from_shape_vec((rows, cols), flat).expect("element count preserved");
        self.push(out, Op::Reshape(x))
    }

    /// Softmax down each column (normalizes over rows).
    pub fn softmax_cols(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = Array2::zeros(xv.raw_dim());
        for (j, col) in xv.axis_iter(Axis(1)).enumerate() {
            let sm = softmax(&col.to_vec());
            for (i, p) in sm.into_iter().enumerate() {
                out[[i, j]] = p;
            }
        }
        self.push(out, Op::SoftmaxCols(x))
    }

    /// Weighted sum over rows, per category: `w` is `r × K`, `x` is `r × (K·d)`.
    pub fn block_weighted_sum(&mut self, w: Var, x: Var) -> Var {
        let wv = self.value(w);
        let xv = self.value(x);
        let (r, k) = wv.dim();
        assert_eq!(xv.nrows(), r);
        assert_eq!(xv.ncols() % k, 0);
        let d = xv.ncols() / k;
        let mut out = Array2::zeros((1, k * d));
        for row in 0..r {
            for kk in 0..k {
                let weight = wv[[row, kk]];
                for j in 0..d {
                    out[[0, kk * d + j]] += weight * xv[[row, kk * d + j]];
                }
            }
        }
        self.push(out, Op::BlockWeightedSum { w, x, d })
    }

    /// Expectation-maximization objective for one sample, in the standardized
    /// target space. `logits` is `K × 1` (action scores), `gauss` is `1 × 2K`
    /// laid out as `[μ_1, raw_1, μ_2, raw_2, …]` with
    /// `sd_k = softplus(raw_k) + SD_FLOOR`. The posterior `q` and the global
    /// importance `log_global` are constants.
    pub fn mixture_em_loss(
        &mut self,
        logits: Var,
        gauss: Var,
        target: f64,
        q: &[f64],
        log_global: &[f64],
    ) -> Var {
        let lv = self.value(logits);
        let gv = self.value(gauss);
        let k = lv.nrows();
        assert_eq!(lv.ncols(), 1);
        assert_eq!(gv.ncols(), 2 * k);
        assert_eq!(q.len(), k);
        let scores: Vec<f64> = lv.column(0).to_vec();
        let probs = softmax(&scores);
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        let mut loss = 0.0;
        for kk in 0..k {
            let mu = gv[[0, 2 * kk]];
            let sd = softplus(gv[[0, 2 * kk + 1]]) + SD_FLOOR;
            let z = (target - mu) / sd;
            let nll = 0.5 * z * z + sd.ln() + LN_SQRT_2PI;
            let log_p = scores[kk] - lse;
            loss += q[kk] * (nll - log_p - log_global[kk]);
        }
        let saved = MixtureLossSaved {
            logits,
            gauss,
            target,
            q: q.to_vec(),
            probs,
        };
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::MixtureLoss(Box::new(saved)),
        )
    }

    /// Backpropagates from a `1 × 1` node and returns parameter gradients.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut out = Gradients::zeros_like(self.params);
        self.backward_into(root, &mut out);
        out
    }

    /// Like [`Tape::backward`], accumulating into an existing buffer.
    pub fn backward_into(&self, root: Var, out: &mut Gradients) {
        assert_eq!(self.shape(root), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.tensors[id.index()] += &g,
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::BlockMatMul {
                    x,
                    ws,
                    in_offsets,
                    out_offsets,
                } => {
                    let xv = self.value(*x);
                    let mut gx = Array2::zeros(xv.raw_dim());
                    for (k, w) in ws.iter().enumerate() {
                        let gy = g.slice(s![.., out_offsets[k]..out_offsets[k + 1]]);
                        let xb = xv.slice(s![.., in_offsets[k]..in_offsets[k + 1]]);
                        let wv = self.value(*w);
                        gx.slice_mut(s![.., in_offsets[k]..in_offsets[k + 1]])
                            .assign(&gy.dot(&wv.t()));
                        acc(&mut grads, *w, xb.t().dot(&gy));
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, -g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * &self.value(*b);
                    let gb = &g * &self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRowBias(x, b) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *b, gb);
                    acc(&mut grads, *x, g);
                }
                Op::Scale(x, f) => acc(&mut grads, *x, g.mapv(|v| v * f)),
                Op::Elu(x) => {
                    let xv = self.value(*x);
                    let mut gx = g;
                    ndarray::Zip::from(&mut gx).and(&xv).for_each(|gi, &xi| {
                        if xi <= 0.0 {
                            *gi *= xi.exp();
                        }
                    });
                    acc(&mut grads, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let y = node.value.as_ref().unwrap();
                    let mut gx = g;
                    ndarray::Zip::from(&mut gx)
                        .and(y)
                        .for_each(|gi, &yi| *gi *= yi * (1.0 - yi));
                    acc(&mut grads, *x, gx);
                }
                Op::Tanh(x) => {
                    let y = node.value.as_ref().unwrap();
                    let mut gx = g;
                    ndarray::Zip::from(&mut gx)
                        .and(y)
                        .for_each(|gi, &yi| *gi *= 1.0 - yi * yi);
                    acc(&mut grads, *x, gx);
                }
                Op::SliceRows(x, start) => {
                    let mut gx = Array2::zeros(self.value(*x).raw_dim());
                    gx.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut grads, *x, gx);
                }
                Op::SliceCols(x, start) => {
                    let mut gx = Array2::zeros(self.value(*x).raw_dim());
                    gx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        acc(&mut grads, *p, g.slice(s![.., col..col + w]).to_owned());
                        col += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut row = 0;
                    for p in parts {
                        let h = self.shape(*p).0;
                        acc(&mut grads, *p, g.slice(s![row..row + h, ..]).to_owned());
                        row += h;
                    }
                }
                Op::ConcatBlocks { parts, widths, k } => {
                    let block: usize = widths.iter().sum();
                    let rows = g.nrows();
                    let mut part_grads: Vec<Array2<f64>> = widths
                        .iter()
                        .map(|w| Array2::zeros((rows, w * k)))
                        .collect();
                    for kk in 0..*k {
                        let mut col = kk * block;
                        for (pg, w) in part_grads.iter_mut().zip(widths) {
                            pg.slice_mut(s![.., kk * w..(kk + 1) * w])
                                .assign(&g.slice(s![.., col..col + w]));
                            col += w;
                        }
                    }
                    for (p, pg) in parts.iter().zip(part_grads) {
                        acc(&mut grads, *p, pg);
                    }
                }
                Op::Reshape(x) => {
                    let (r, c) = self.shape(*x);
                    let flat: Vec<f64> = g.iter().cloned().collect();
                    acc(
                        &mut grads,
                        *x,
                        Array2::from_shape_vec((r, c), flat).unwrap(),
                    );
                }
                Op::SoftmaxCols(x) => {
                    let y = node.value.as_ref().unwrap();
                    let mut gx = Array2::zeros(y.raw_dim());
                    for j in 0..y.ncols() {
                        let dot: f64 = (0..y.nrows()).map(|i| g[[i, j]] * y[[i, j]]).sum();
                        for i in 0..y.nrows() {
                            gx[[i, j]] = y[[i, j]] * (g[[i, j]] - dot);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::BlockWeightedSum { w, x, d } => {
                    let wv = self.value(*w);
                    let xv = self.value(*x);
                    let (r, k) = wv.dim();
                    let mut gw = Array2::zeros((r, k));
                    let mut gx = Array2::zeros(xv.raw_dim());
                    for row in 0..r {
                        for kk in 0..k {
                            let mut s = 0.0;
                            for j in 0..*d {
                                let go = g[[0, kk * d + j]];
                                s += go * xv[[row, kk * d + j]];
                                gx[[row, kk * d + j]] = go * wv[[row, kk]];
                            }
                            gw[[row, kk]] = s;
                        }
                    }
                    acc(&mut grads, *w, gw);
                    acc(&mut grads, *x, gx);
                }
                Op::MixtureLoss(saved) => {
                    let scale = g[[0, 0]];
                    let gv = self.value(saved.gauss);
                    let k = saved.q.len();
                    let q_total: f64 = saved.q.iter().sum();
                    let mut g_logits = Array2::zeros((k, 1));
                    let mut g_gauss = Array2::zeros((1, 2 * k));
                    for kk in 0..k {
                        let mu = gv[[0, 2 * kk]];
                        let raw = gv[[0, 2 * kk + 1]];
                        let sd = softplus(raw) + SD_FLOOR;
                        let diff = saved.target - mu;
                        let qk = saved.q[kk];
                        g_gauss[[0, 2 * kk]] = scale * qk * (-diff / (sd * sd));
                        let d_sd = qk * (1.0 / sd - diff * diff / (sd * sd * sd));
                        g_gauss[[0, 2 * kk + 1]] = scale * d_sd * sigmoid(raw);
                        g_logits[[kk, 0]] = scale * (saved.probs[kk] * q_total - qk);
                    }
                    acc(&mut grads, saved.logits, g_logits);
                    acc(&mut grads, saved.gauss, g_gauss);
                }
            }
        }
    }
}
