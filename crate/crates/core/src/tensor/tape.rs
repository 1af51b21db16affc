use std::collections::HashMap;

use rand::Rng;

use super::kernels;
use super::param::{ParamId, ParamStore};
use super::{Mode, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Running mean/variance of a batchnorm layer, used in eval mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Real> RunningStats<T> {
    /// Zero mean, unit variance, eps 1e-5, momentum 0.1.
    pub fn new(features: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); features],
            var: vec![T::one(); features],
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    /// Exponential moving average toward a batch's statistics.
    pub fn update(&mut self, batch: &BatchStats<T>) {
        let m = T::c(self.momentum);
        let keep = T::one() - m;
        for (r, &b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.var.iter_mut().zip(&batch.unbiased_var) {
            *r = keep * *r + m * b;
        }
    }
}

/// Statistics of one training batch: mean and unbiased variance per feature.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub unbiased_var: Vec<T>,
}

enum Op<T> {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Reshape(Var),
    Transpose(Var),
    SwapLeading(Var),
    Relu(Var),
    Conv3x3 {
        input: Var,
        filters: Var,
        bias: Var,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Softmax {
        input: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        targets: Vec<usize>,
        sample_weights: Vec<T>,
        norm: T,
    },
    HeadScores {
        h: Var,
        u: Var,
        heads: usize,
        scale: T,
    },
    HeadContexts {
        h: Var,
        w: Var,
        heads: usize,
    },
    MaskRenorm {
        w: Var,
        mask: Vec<T>,
        total: T,
    },
    StatPool {
        h: Var,
        std: Vec<T>,
        clamped: Vec<bool>,
    },
    ConcatRows(Vec<Var>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Records a forward pass for reverse-mode differentiation.
///
/// A tape is built and consumed by one thread. Parameters are pulled in at
/// most once per tape through [`Tape::param`], so every use of a weight
/// contributes to the same gradient.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_rank<T: Real>(op: &'static str, t: &Tensor<T>, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::Usage(format!(
            "{op} expects a rank-{rank} tensor, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn add_into<T: Real>(acc: &mut [T], g: &[T]) {
    acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        value.grad = None;
        value.requires_grad = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn raw(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let value = Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        };
        self.push(value, op, inputs)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Gradient collected on a non-parameter leaf by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    /// Records an external value. Its `requires_grad` flag is kept, so a leaf
    /// created with [`Tensor::with_grad`] collects a gradient on backward.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let requires_grad = t.requires_grad;
        let mut value = t;
        value.grad = None;
        self.nodes.push(Node { value, op: Op::Input });
        let v = Var(self.nodes.len() - 1);
        self.nodes[v.0].value.requires_grad = requires_grad;
        v
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let mut value = store.get(id).tensor.clone();
        value.grad = None;
        value.requires_grad = true;
        self.nodes.push(Node {
            value,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.data(a), self.data(b), m, k, n);
        Ok(self.raw(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    /// `x[B×in] @ w[in×out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
            return Err(Error::dim("linear", sx, sw));
        }
        if sb != [sw[1]] {
            return Err(Error::dim("linear bias", sb, &[sw[1]]));
        }
        let (m, k, n) = (sx[0], sx[1], sw[1]);
        let mut out = kernels::matmul(self.data(x), self.data(w), m, k, n);
        let bias = self.data(b);
        for row in out.chunks_mut(n) {
            add_into(row, bias);
        }
        Ok(self.raw(vec![m, n], out, Op::Linear { x, w, b }, &[x, w, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("add", self.shape(a), self.shape(b)));
        }
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        Ok(self.raw(self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("mul", self.shape(a), self.shape(b)));
        }
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        Ok(self.raw(self.shape(a).to_vec(), out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let out = self.data(a).iter().map(|&x| x * k).collect();
        self.raw(self.shape(a).to_vec(), out, Op::Scale(a, k), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().copied().sum();
        self.raw(vec![1], vec![s], Op::Sum(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() || shape.iter().any(|&d| d == 0) {
            return Err(Error::dim("reshape", self.shape(a), shape));
        }
        let data = self.data(a).to_vec();
        Ok(self.raw(shape.to_vec(), data, Op::Reshape(a), &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        check_rank("transpose", self.value(a), 2)?;
        let (r, c) = (self.shape(a)[0], self.shape(a)[1]);
        let src = self.data(a);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.raw(vec![c, r], out, Op::Transpose(a), &[a]))
    }

    /// `[a, b, c] -> [b, a, c]`.
    pub fn swap_leading(&mut self, x: Var) -> Result<Var> {
        check_rank("swap_leading", self.value(x), 3)?;
        let s = self.shape(x).to_vec();
        let (a, b, c) = (s[0], s[1], s[2]);
        let src = self.data(x);
        let mut out = vec![T::zero(); a * b * c];
        for i in 0..a {
            for j in 0..b {
                out[(j * a + i) * c..][..c].copy_from_slice(&src[(i * b + j) * c..][..c]);
            }
        }
        Ok(self.raw(vec![b, a, c], out, Op::SwapLeading(x), &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|&v| v.max(T::zero())).collect();
        self.raw(self.shape(x).to_vec(), out, Op::Relu(x), &[x])
    }

    /// Same-padded 3×3 stride-1 convolution of `input[C_in×H×W]` with
    /// `filters[C_out×C_in×3×3]` and `bias[C_out]`.
    pub fn conv2d_same3x3(&mut self, input: Var, filters: Var, bias: Var) -> Result<Var> {
        let (si, sf, sb) = (self.shape(input), self.shape(filters), self.shape(bias));
        if si.len() != 3 {
            return Err(Error::dim("conv2d_same3x3 input", si, &[0, 0, 0]));
        }
        if sf.len() != 4 || sf[1] != si[0] || sf[2] != 3 || sf[3] != 3 {
            return Err(Error::dim("conv2d_same3x3", si, sf));
        }
        if sb != [sf[0]] {
            return Err(Error::dim("conv2d_same3x3 bias", sb, &[sf[0]]));
        }
        let (c_in, h, w, c_out) = (si[0], si[1], si[2], sf[0]);
        let out = kernels::conv3x3_forward(
            self.data(input),
            c_in,
            h,
            w,
            self.data(filters),
            self.data(bias),
            c_out,
        );
        Ok(self.raw(
            vec![c_out, h, w],
            out,
            Op::Conv3x3 {
                input,
                filters,
                bias,
            },
            &[input, filters, bias],
        ))
    }

    pub fn maxpool2x2(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        if s.len() != 3 || s[1] < 2 || s[2] < 2 {
            return Err(Error::dim("maxpool2x2", s, &[2, 2]));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (out, argmax) = kernels::maxpool2x2_forward(self.data(input), c, h, w);
        Ok(self.raw(vec![c, h / 2, w / 2], out, Op::MaxPool { input, argmax }, &[input]))
    }

    /// Batch normalization over the rows of `x[B×F]`. Train mode normalizes
    /// with the batch statistics and folds them into `stats`; eval mode
    /// normalizes with `stats`.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: Mode,
    ) -> Result<Var> {
        match mode {
            Mode::Train => {
                let (y, batch) = self.batchnorm_batch(x, gamma, beta, stats.eps)?;
                stats.update(&batch);
                Ok(y)
            }
            Mode::Eval => self.batchnorm_running(x, gamma, beta, &stats.mean, &stats.var, stats.eps),
        }
    }

    /// Train-mode batchnorm; returns the batch statistics for the caller to
    /// fold into its running estimates.
    pub fn batchnorm_batch(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats<T>)> {
        self.check_batchnorm(x, gamma, beta)?;
        let (b, f) = (self.shape(x)[0], self.shape(x)[1]);
        if b < 2 {
            return Err(Error::Usage("batchnorm in train mode needs a batch of at least 2".into()));
        }
        let n = T::c(b as f64);
        let xs = self.data(x);
        let mut mean = vec![T::zero(); f];
        for row in xs.chunks(f) {
            add_into(&mut mean, row);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![T::zero(); f];
        for row in xs.chunks(f) {
            for ((v, &xv), &m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (xv - m) * (xv - m);
            }
        }
        let unbiased_var = var.iter().map(|&v| v / (n - T::one())).collect();
        var.iter_mut().for_each(|v| *v /= n);
        let y = self.normalize(x, gamma, beta, &mean, &var, eps, true);
        Ok((y, BatchStats { mean, unbiased_var }))
    }

    pub fn batchnorm_running(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: f64) -> Result<Var> {
        self.check_batchnorm(x, gamma, beta)?;
        let f = self.shape(x)[1];
        if mean.len() != f || var.len() != f {
            return Err(Error::dim("batchnorm running stats", &[f], &[mean.len()]));
        }
        Ok(self.normalize(x, gamma, beta, mean, var, eps, false))
    }

    fn check_batchnorm(&self, x: Var, gamma: Var, beta: Var) -> Result<()> {
        check_rank("batchnorm", self.value(x), 2)?;
        let f = self.shape(x)[1];
        if self.shape(gamma) != [f] || self.shape(beta) != [f] {
            return Err(Error::dim("batchnorm", self.shape(x), self.shape(gamma)));
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: f64, train: bool) -> Var {
        let (b, f) = (self.shape(x)[0], self.shape(x)[1]);
        let eps = T::c(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = Vec::with_capacity(b * f);
        for row in self.data(x).chunks(f) {
            for (j, &xv) in row.iter().enumerate() {
                xhat.push((xv - mean[j]) * inv_std[j]);
            }
        }
        let (g, bt) = (self.data(gamma), self.data(beta));
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, &xh)| g[i % f] * xh + bt[i % f])
            .collect();
        self.raw(
            vec![b, f],
            out,
            Op::BatchNorm {
                input: x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[x, gamma, beta],
        )
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Usage(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let mut max = T::neg_infinity();
                for k in 0..len {
                    max = max.max(src[at(k)]);
                }
                let mut total = T::zero();
                for k in 0..len {
                    let e = (src[at(k)] - max).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[at(k)] /= total;
                }
            }
        }
        Ok(self.raw(
            shape,
            out,
            Op::Softmax {
                input: x,
                outer,
                len,
                inner,
            },
            &[x],
        ))
    }

    /// Inverted dropout. Eval mode returns `x` itself.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R, mode: Mode) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!("dropout probability {p} not in [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = T::c(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out = self.data(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        Ok(self.raw(self.shape(x).to_vec(), out, Op::Dropout { input: x, mask }, &[x]))
    }

    /// Mean over the batch of (optionally class-weighted) negative log-softmax
    /// at the target index. With weights the mean is normalized by the sum of
    /// the selected weights.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], class_weights: Option<&[T]>) -> Result<Var> {
        check_rank("cross_entropy", self.value(logits), 2)?;
        let (b, c) = (self.shape(logits)[0], self.shape(logits)[1]);
        if targets.len() != b {
            return Err(Error::dim("cross_entropy targets", &[b, c], &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index { index: bad, len: c });
        }
        if let Some(w) = class_weights {
            if w.len() != c {
                return Err(Error::dim("cross_entropy weights", &[c], &[w.len()]));
            }
            if w.iter().any(|&v| v <= T::zero() || !v.is_finite()) {
                return Err(Error::Parameter("class weights must be strictly positive".into()));
            }
        }
        let src = self.data(logits);
        let mut probs = vec![T::zero(); b * c];
        let mut sample_weights = Vec::with_capacity(b);
        let mut loss = T::zero();
        for (i, row) in src.chunks(c).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let total: T = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = max + total.ln();
            for (p, &v) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                *p = (v - log_z).exp();
            }
            let sw = class_weights.map_or(T::one(), |w| w[targets[i]]);
            sample_weights.push(sw);
            loss += sw * (log_z - row[targets[i]]);
        }
        let norm: T = sample_weights.iter().copied().sum();
        Ok(self.raw(
            vec![1],
            vec![loss / norm],
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
                sample_weights,
                norm,
            },
            &[logits],
        ))
    }

    /// Per-head dot products: `h[T×D]` split into `heads` contiguous slices of
    /// width `d_h = D/heads`, `u[heads×d_h]`; output `[T×heads]` holds
    /// `scale · h_tj·u_j`.
    pub fn head_scores(&mut self, h: Var, u: Var, heads: usize, scale: T) -> Result<Var> {
        check_rank("head_scores", self.value(h), 2)?;
        let (t, d) = (self.shape(h)[0], self.shape(h)[1]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide hidden size {d}")));
        }
        let dh = d / heads;
        if self.shape(u) != [heads, dh] {
            return Err(Error::dim("head_scores", self.shape(u), &[heads, dh]));
        }
        let (hs, us) = (self.data(h), self.data(u));
        let mut out = Vec::with_capacity(t * heads);
        for row in hs.chunks(d) {
            for (slice, uj) in row.chunks(dh).zip(us.chunks(dh)) {
                let dot: T = slice.iter().zip(uj).map(|(&a, &b)| a * b).sum();
                out.push(dot * scale);
            }
        }
        Ok(self.raw(vec![t, heads], out, Op::HeadScores { h, u, heads, scale }, &[h, u]))
    }

    /// Per-head weighted sums over time: `c[j] = Σ_t w[t,j] · h_tj`, output
    /// `[heads×d_h]`.
    pub fn head_contexts(&mut self, h: Var, w: Var, heads: usize) -> Result<Var> {
        check_rank("head_contexts", self.value(h), 2)?;
        let (t, d) = (self.shape(h)[0], self.shape(h)[1]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide hidden size {d}")));
        }
        if self.shape(w) != [t, heads] {
            return Err(Error::dim("head_contexts", self.shape(w), &[t, heads]));
        }
        let dh = d / heads;
        let (hs, ws) = (self.data(h), self.data(w));
        let mut out = vec![T::zero(); d];
        for (row, wt) in hs.chunks(d).zip(ws.chunks(heads)) {
            for (j, (slice, cj)) in row.chunks(dh).zip(out.chunks_mut(dh)).enumerate() {
                let wtj = wt[j];
                cj.iter_mut().zip(slice).for_each(|(c, &v)| *c += wtj * v);
            }
        }
        Ok(self.raw(vec![heads, dh], out, Op::HeadContexts { h, w, heads }, &[h, w]))
    }

    /// `w ⊙ mask / Σ(w ⊙ mask)`; the masked weights must not all vanish.
    pub fn mask_renorm(&mut self, w: Var, mask: &[bool]) -> Result<Var> {
        let n = self.value(w).numel();
        if mask.len() != n {
            return Err(Error::dim("mask_renorm", self.shape(w), &[mask.len()]));
        }
        let mask: Vec<T> = mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect();
        let masked: Vec<T> = self.data(w).iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let total: T = masked.iter().copied().sum();
        if total <= T::zero() {
            return Err(Error::Degenerate("all weights masked".into()));
        }
        let out = masked.iter().map(|&v| v / total).collect();
        Ok(self.raw(self.shape(w).to_vec(), out, Op::MaskRenorm { w, mask, total }, &[w]))
    }

    /// Per-dimension mean and population standard deviation over the rows of
    /// `h[T×D]`, concatenated into `[1×2D]`. Variance is floored at `floor`
    /// before the square root.
    pub fn stat_pool(&mut self, h: Var, floor: T) -> Result<Var> {
        check_rank("stat_pool", self.value(h), 2)?;
        let (t, d) = (self.shape(h)[0], self.shape(h)[1]);
        let n = T::c(t as f64);
        let hs = self.data(h);
        let mut mean = vec![T::zero(); d];
        for row in hs.chunks(d) {
            add_into(&mut mean, row);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![T::zero(); d];
        for row in hs.chunks(d) {
            for ((v, &x), &m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let clamped: Vec<bool> = var.iter().map(|&v| v / n < floor).collect();
        let std: Vec<T> = var.iter().map(|&v| (v / n).max(floor).sqrt()).collect();
        let mut out = mean;
        out.extend_from_slice(&std);
        Ok(self.raw(vec![1, 2 * d], out, Op::StatPool { h, std, clamped }, &[h]))
    }

    /// Stacks `[r_i×P]` matrices vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat_rows needs at least one input".into()))?;
        check_rank("concat_rows", self.value(*first), 2)?;
        let p = self.shape(*first)[1];
        let mut rows = 0;
        let mut out = Vec::new();
        for &v in parts {
            let s = self.shape(v);
            if s.len() != 2 || s[1] != p {
                return Err(Error::dim("concat_rows", self.shape(*first), s));
            }
            rows += s[0];
            out.extend_from_slice(self.data(v));
        }
        Ok(self.raw(vec![rows, p], out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Reverse pass from a scalar `loss`. Parameter gradients accumulate into
    /// `store`; gradients of leaves created with `requires_grad` accumulate on
    /// the tape. Repeated calls add up until grads are zeroed.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage("loss is not on this tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            match self.nodes[i].op {
                Op::Param(id) => store.get_mut(id).tensor.accumulate_grad(&g),
                Op::Input => self.nodes[i].value.accumulate_grad(&g),
                _ => {}
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].value.requires_grad;
        // Returns the zero-initialized gradient buffer of `v`.
        fn slot<'a, T: Real>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> &'a mut Vec<T> {
            grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()])
        }
        let node = &nodes[i];
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if needs(*a) {
                    kernels::matmul_grad_lhs(g, nodes[b.0].value.data(), m, k, n, slot(grads, nodes, *a));
                }
                if needs(*b) {
                    kernels::matmul_grad_rhs(nodes[a.0].value.data(), g, m, k, n, slot(grads, nodes, *b));
                }
            }
            Op::Linear { x, w, b } => {
                let (sx, sw) = (nodes[x.0].value.shape(), nodes[w.0].value.shape());
                let (m, k, n) = (sx[0], sx[1], sw[1]);
                if needs(*x) {
                    kernels::matmul_grad_lhs(g, nodes[w.0].value.data(), m, k, n, slot(grads, nodes, *x));
                }
                if needs(*w) {
                    kernels::matmul_grad_rhs(nodes[x.0].value.data(), g, m, k, n, slot(grads, nodes, *w));
                }
                if needs(*b) {
                    let db = slot(grads, nodes, *b);
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        add_into(slot(grads, nodes, v), g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let other = nodes[b.0].value.data();
                    let ga = slot(grads, nodes, *a);
                    for ((acc, &gi), &o) in ga.iter_mut().zip(g).zip(other) {
                        *acc += gi * o;
                    }
                }
                if needs(*b) {
                    let other = nodes[a.0].value.data();
                    let gb = slot(grads, nodes, *b);
                    for ((acc, &gi), &o) in gb.iter_mut().zip(g).zip(other) {
                        *acc += gi * o;
                    }
                }
            }
            Op::Scale(a, k) => {
                if needs(*a) {
                    let ga = slot(grads, nodes, *a);
                    ga.iter_mut().zip(g).for_each(|(acc, &gi)| *acc += gi * *k);
                }
            }
            Op::Sum(a) => {
                if needs(*a) {
                    slot(grads, nodes, *a).iter_mut().for_each(|acc| *acc += g[0]);
                }
            }
            Op::Reshape(a) => {
                if needs(*a) {
                    add_into(slot(grads, nodes, *a), g);
                }
            }
            Op::Transpose(a) => {
                if needs(*a) {
                    let s = nodes[a.0].value.shape();
                    let (r, c) = (s[0], s[1]);
                    let ga = slot(grads, nodes, *a);
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::SwapLeading(x) => {
                if needs(*x) {
                    let s = nodes[x.0].value.shape();
                    let (a, b, c) = (s[0], s[1], s[2]);
                    let gx = slot(grads, nodes, *x);
                    for i in 0..a {
                        for j in 0..b {
                            add_into(&mut gx[(i * b + j) * c..][..c], &g[(j * a + i) * c..][..c]);
                        }
                    }
                }
            }
            Op::Relu(x) => {
                if needs(*x) {
                    let out = node.value.data();
                    let gx = slot(grads, nodes, *x);
                    for ((acc, &gi), &y) in gx.iter_mut().zip(g).zip(out) {
                        if y > T::zero() {
                            *acc += gi;
                        }
                    }
                }
            }
            Op::Conv3x3 { input, filters, bias } => {
                let s = nodes[input.0].value.shape();
                let (c_in, h, w) = (s[0], s[1], s[2]);
                let c_out = nodes[filters.0].value.shape()[0];
                let mut d_input = needs(*input).then(|| vec![T::zero(); c_in * h * w]);
                let mut d_filters = needs(*filters).then(|| vec![T::zero(); c_out * c_in * 9]);
                let mut d_bias = needs(*bias).then(|| vec![T::zero(); c_out]);
                kernels::conv3x3_backward(
                    nodes[input.0].value.data(),
                    c_in,
                    h,
                    w,
                    nodes[filters.0].value.data(),
                    c_out,
                    g,
                    d_input.as_deref_mut(),
                    d_filters.as_deref_mut(),
                    d_bias.as_deref_mut(),
                );
                for (v, d) in [(*input, d_input), (*filters, d_filters), (*bias, d_bias)] {
                    if let Some(d) = d {
                        add_into(slot(grads, nodes, v), &d);
                    }
                }
            }
            Op::MaxPool { input, argmax } => {
                if needs(*input) {
                    let gi = slot(grads, nodes, *input);
                    for (&idx, &gv) in argmax.iter().zip(g) {
                        gi[idx] += gv;
                    }
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let f = inv_std.len();
                let b = g.len() / f;
                if needs(*beta) {
                    let gb = slot(grads, nodes, *beta);
                    for row in g.chunks(f) {
                        add_into(gb, row);
                    }
                }
                if needs(*gamma) {
                    let gg = slot(grads, nodes, *gamma);
                    for (grow, xrow) in g.chunks(f).zip(xhat.chunks(f)) {
                        for ((acc, &gv), &xv) in gg.iter_mut().zip(grow).zip(xrow) {
                            *acc += gv * xv;
                        }
                    }
                }
                if needs(*input) {
                    let gamma_v = nodes[gamma.0].value.data();
                    let gx = slot(grads, nodes, *input);
                    if *train {
                        let n = T::c(b as f64);
                        let mut sum_d = vec![T::zero(); f];
                        let mut sum_dx = vec![T::zero(); f];
                        for (grow, xrow) in g.chunks(f).zip(xhat.chunks(f)) {
                            for j in 0..f {
                                let d = grow[j] * gamma_v[j];
                                sum_d[j] += d;
                                sum_dx[j] += d * xrow[j];
                            }
                        }
                        for (r, (grow, xrow)) in g.chunks(f).zip(xhat.chunks(f)).enumerate() {
                            for j in 0..f {
                                let d = grow[j] * gamma_v[j];
                                gx[r * f + j] += inv_std[j] / n * (n * d - sum_d[j] - xrow[j] * sum_dx[j]);
                            }
                        }
                    } else {
                        for (r, grow) in g.chunks(f).enumerate() {
                            for j in 0..f {
                                gx[r * f + j] += grow[j] * gamma_v[j] * inv_std[j];
                            }
                        }
                    }
                }
            }
            Op::Softmax {
                input,
                outer,
                len,
                inner,
            } => {
                if needs(*input) {
                    let y = node.value.data();
                    let gx = slot(grads, nodes, *input);
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |k: usize| (o * len + k) * inner + i;
                            let dot: T = (0..*len).map(|k| g[at(k)] * y[at(k)]).sum();
                            for k in 0..*len {
                                gx[at(k)] += y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Dropout { input, mask } => {
                if needs(*input) {
                    let gx = slot(grads, nodes, *input);
                    for ((acc, &gv), &m) in gx.iter_mut().zip(g).zip(mask) {
                        *acc += gv * m;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                sample_weights,
                norm,
            } => {
                if needs(*logits) {
                    let c = probs.len() / targets.len();
                    let gl = slot(grads, nodes, *logits);
                    for (r, &t) in targets.iter().enumerate() {
                        let k = g[0] * sample_weights[r] / *norm;
                        for j in 0..c {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            gl[r * c + j] += k * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            Op::HeadScores { h, u, heads, scale } => {
                let d = nodes[h.0].value.shape()[1];
                let dh = d / heads;
                if needs(*h) {
                    let us = nodes[u.0].value.data();
                    let gh = slot(grads, nodes, *h);
                    for (row, grow) in gh.chunks_mut(d).zip(g.chunks(*heads)) {
                        for (j, (slice, uj)) in row.chunks_mut(dh).zip(us.chunks(dh)).enumerate() {
                            let k = grow[j] * *scale;
                            slice.iter_mut().zip(uj).for_each(|(acc, &uv)| *acc += k * uv);
                        }
                    }
                }
                if needs(*u) {
                    let hs = nodes[h.0].value.data();
                    let gu = slot(grads, nodes, *u);
                    for (row, grow) in hs.chunks(d).zip(g.chunks(*heads)) {
                        for (j, (slice, uj)) in row.chunks(dh).zip(gu.chunks_mut(dh)).enumerate() {
                            let k = grow[j] * *scale;
                            uj.iter_mut().zip(slice).for_each(|(acc, &hv)| *acc += k * hv);
                        }
                    }
                }
            }
            Op::HeadContexts { h, w, heads } => {
                let d = nodes[h.0].value.shape()[1];
                let dh = d / heads;
                if needs(*h) {
                    let ws = nodes[w.0].value.data();
                    let gh = slot(grads, nodes, *h);
                    for (row, wt) in gh.chunks_mut(d).zip(ws.chunks(*heads)) {
                        for (j, (slice, gj)) in row.chunks_mut(dh).zip(g.chunks(dh)).enumerate() {
                            let wtj = wt[j];
                            slice.iter_mut().zip(gj).for_each(|(acc, &gv)| *acc += wtj * gv);
                        }
                    }
                }
                if needs(*w) {
                    let hs = nodes[h.0].value.data();
                    let gw = slot(grads, nodes, *w);
                    for (row, gwt) in hs.chunks(d).zip(gw.chunks_mut(*heads)) {
                        for (j, (slice, gj)) in row.chunks(dh).zip(g.chunks(dh)).enumerate() {
                            gwt[j] += slice.iter().zip(gj).map(|(&a, &b)| a * b).sum::<T>();
                        }
                    }
                }
            }
            Op::MaskRenorm { w, mask, total } => {
                if needs(*w) {
                    let out = node.value.data();
                    let dot: T = g.iter().zip(out).map(|(&a, &b)| a * b).sum();
                    let gw = slot(grads, nodes, *w);
                    for ((acc, &gv), &m) in gw.iter_mut().zip(g).zip(mask) {
                        *acc += m / *total * (gv - dot);
                    }
                }
            }
            Op::StatPool { h, std, clamped } => {
                if needs(*h) {
                    let s = nodes[h.0].value.shape();
                    let (t, d) = (s[0], s[1]);
                    let n = T::c(t as f64);
                    let mean = &node.value.data()[..d];
                    let (g_mean, g_std) = g.split_at(d);
                    let hs = nodes[h.0].value.data();
                    let gh = slot(grads, nodes, *h);
                    for (grow, row) in gh.chunks_mut(d).zip(hs.chunks(d)) {
                        for j in 0..d {
                            grow[j] += g_mean[j] / n;
                            if !clamped[j] {
                                grow[j] += g_std[j] * (row[j] - mean[j]) / (n * std[j]);
                            }
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &v in parts {
                    let len = nodes[v.0].value.numel();
                    if needs(v) {
                        add_into(slot(grads, nodes, v), &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
        }
    }
}
