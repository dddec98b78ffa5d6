//! Reverse-mode tape: records differentiable ops in execution order and
//! replays them backward exactly once, in reverse topological order.
//!
//! A tape is created explicitly per evaluation context and owns copies of
//! every value it touches. Independent tapes can run on different threads;
//! nothing is shared. Values are addressed by opaque [`Val`] handles.
//!
//! Forward math is f32 with f64 accumulation inside reductions (dot
//! products, pooling sums, row reductions) so that oracle comparisons stay
//! stable. Every op checks its output for NaN/Inf and fails instead of
//! propagating silent overflow.

use super::{check_finite, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`]. Only meaningful for the tape
/// that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Val(usize);

enum Op {
    Leaf,
    Add(Val, Val),
    Sub(Val, Val),
    Mul(Val, Val),
    /// Bias broadcast over the channel axis: `[N,C]+[C]` or `[N,C,H,W]+[C]`.
    AddBias { x: Val, b: Val },
    Scale { x: Val, k: f32 },
    AddScalar { x: Val },
    Relu(Val),
    Tanh(Val),
    Clamp { x: Val, lo: f32, hi: f32 },
    Conv2d { x: Val, k: Val, stride: usize, padding: usize },
    Linear { x: Val, w: Val, b: Option<Val> },
    MaxPool2d { x: Val, argmax: Vec<u32> },
    GlobalAvgPool(Val),
    Softmax(Val),
    LogSoftmax(Val),
    CrossEntropy { logits: Val, labels: Vec<usize> },
    Sum(Val),
    SelectClass { x: Val, classes: Vec<usize> },
    RowMaxExcluding { x: Val, argmax: Vec<u32> },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f32>,
    needs_grad: bool,
    grad: Option<Vec<f32>>,
    op: Op,
}

/// Ordered record of executed differentiable operations.
pub struct Tape {
    nodes: Vec<Node>,
    spent: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), spent: false }
    }

    // ── Leaves ───────────────────────────────────────────────────────

    /// Record a tensor as a leaf, honoring its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Val {
        self.push_leaf(t, t.requires_grad())
    }

    /// Record a leaf that never receives gradients.
    pub fn constant(&mut self, t: &Tensor) -> Val {
        self.push_leaf(t, false)
    }

    /// Record a leaf that always receives gradients.
    pub fn variable(&mut self, t: &Tensor) -> Val {
        self.push_leaf(t, true)
    }

    fn push_leaf(&mut self, t: &Tensor, needs_grad: bool) -> Val {
        self.push(t.shape().to_vec(), t.data().to_vec(), needs_grad, Op::Leaf)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, needs_grad: bool, op: Op) -> Val {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { shape, data, needs_grad, grad: None, op });
        Val(self.nodes.len() - 1)
    }

    fn needs(&self, v: Val) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ── Value access ─────────────────────────────────────────────────

    pub fn shape(&self, v: Val) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Val) -> &[f32] {
        &self.nodes[v.0].data
    }

    /// Copy a recorded value out as a standalone tensor.
    pub fn tensor(&self, v: Val) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone())
            .expect("node invariant")
    }

    /// Gradient buffer of `v`, populated by [`Tape::backward`].
    pub fn grad(&self, v: Val) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Val) -> Option<Tensor> {
        self.nodes[v.0]
            .grad
            .as_ref()
            .map(|g| Tensor::new(self.nodes[v.0].shape.clone(), g.clone()).expect("node invariant"))
    }

    // ── Element-wise ops ─────────────────────────────────────────────

    pub fn add(&mut self, a: Val, b: Val) -> Result<Val, TensorError> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Val, b: Val) -> Result<Val, TensorError> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Val, b: Val) -> Result<Val, TensorError> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: Val,
        b: Val,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<Val, TensorError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let data: Vec<f32> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        check_finite(name, &data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, needs, op))
    }

    /// Add a `[C]` bias over the channel axis of a `[N,C]` or `[N,C,H,W]`
    /// value. The only broadcast the tape supports.
    pub fn add_bias(&mut self, x: Val, b: Val) -> Result<Val, TensorError> {
        let xs = self.nodes[x.0].shape.clone();
        let bs = self.nodes[b.0].shape.clone();
        let ok = bs.len() == 1 && (xs.len() == 2 || xs.len() == 4) && xs[1] == bs[0];
        if !ok {
            return Err(TensorError::ShapeMismatch { op: "add_bias", lhs: xs, rhs: bs });
        }
        let c = bs[0];
        let spatial: usize = xs[2..].iter().product();
        let mut data = self.nodes[x.0].data.clone();
        let bias = &self.nodes[b.0].data;
        for n in 0..xs[0] {
            for ch in 0..c {
                let base = (n * c + ch) * spatial;
                let bv = bias[ch];
                for v in &mut data[base..base + spatial] {
                    *v += bv;
                }
            }
        }
        check_finite("add_bias", &data)?;
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(xs, data, needs, Op::AddBias { x, b }))
    }

    pub fn scale(&mut self, x: Val, k: f32) -> Result<Val, TensorError> {
        let data: Vec<f32> = self.nodes[x.0].data.iter().map(|&v| v * k).collect();
        check_finite("scale", &data)?;
        let needs = self.needs(x);
        Ok(self.push(self.nodes[x.0].shape.clone(), data, needs, Op::Scale { x, k }))
    }

    pub fn add_scalar(&mut self, x: Val, k: f32) -> Result<Val, TensorError> {
        let data: Vec<f32> = self.nodes[x.0].data.iter().map(|&v| v + k).collect();
        check_finite("add_scalar", &data)?;
        let needs = self.needs(x);
        Ok(self.push(self.nodes[x.0].shape.clone(), data, needs, Op::AddScalar { x }))
    }

    pub fn relu(&mut self, x: Val) -> Result<Val, TensorError> {
        let data: Vec<f32> = self.nodes[x.0].data.iter().map(|&v| v.max(0.0)).collect();
        check_finite("relu", &data)?;
        let needs = self.needs(x);
        Ok(self.push(self.nodes[x.0].shape.clone(), data, needs, Op::Relu(x)))
    }

    pub fn tanh(&mut self, x: Val) -> Result<Val, TensorError> {
        let data: Vec<f32> = self.nodes[x.0].data.iter().map(|&v| v.tanh()).collect();
        check_finite("tanh", &data)?;
        let needs = self.needs(x);
        Ok(self.push(self.nodes[x.0].shape.clone(), data, needs, Op::Tanh(x)))
    }

    /// Clamp into `[lo, hi]`. `hi` may be `f32::INFINITY` for a pure floor.
    /// Gradient passes inside the inclusive interval and is zero outside.
    pub fn clamp(&mut self, x: Val, lo: f32, hi: f32) -> Result<Val, TensorError> {
        if !(lo <= hi) {
            return Err(TensorError::InvalidShape {
                op: "clamp",
                detail: format!("lo {lo} must be <= hi {hi}"),
            });
        }
        let data: Vec<f32> = self.nodes[x.0].data.iter().map(|&v| v.clamp(lo, hi)).collect();
        check_finite("clamp", &data)?;
        let needs = self.needs(x);
        Ok(self.push(self.nodes[x.0].shape.clone(), data, needs, Op::Clamp { x, lo, hi }))
    }

    // ── Structured ops ───────────────────────────────────────────────

    /// 2-D convolution: `[N,C,H,W] * [F,C,kh,kw] -> [N,F,H',W']` with
    /// `H' = (H + 2·padding − kh)/stride + 1` (floor), analogously `W'`.
    pub fn conv2d(
        &mut self,
        x: Val,
        kernel: Val,
        stride: usize,
        padding: usize,
    ) -> Result<Val, TensorError> {
        let xs = self.nodes[x.0].shape.clone();
        let ks = self.nodes[kernel.0].shape.clone();
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: xs, rhs: ks });
        }
        if stride == 0 {
            return Err(TensorError::InvalidShape {
                op: "conv2d",
                detail: "stride must be positive".to_string(),
            });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, _, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: xs, rhs: ks });
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;

        let xd = &self.nodes[x.0].data;
        let kd = &self.nodes[kernel.0].data;
        let mut out = vec![0.0f32; n * f * oh * ow];
        let mut acc = vec![0.0f64; oh * ow];
        for bn in 0..n {
            for of in 0..f {
                acc.fill(0.0);
                for ic in 0..c {
                    let xplane = &xd[(bn * c + ic) * h * w..][..h * w];
                    let kplane = &kd[(of * c + ic) * kh * kw..][..kh * kw];
                    for oy in 0..oh {
                        let acc_row = &mut acc[oy * ow..][..ow];
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = &xplane[iy as usize * w..][..w];
                            let krow = &kplane[ky * kw..][..kw];
                            for (ox, slot) in acc_row.iter_mut().enumerate() {
                                let off = (ox * stride) as isize - padding as isize;
                                let kx_lo = (-off).max(0) as usize;
                                let kx_hi =
                                    ((w as isize - off).min(kw as isize)).max(0) as usize;
                                if kx_lo >= kx_hi {
                                    continue;
                                }
                                let xs = &xrow[(off + kx_lo as isize) as usize..]
                                    [..kx_hi - kx_lo];
                                let ks = &krow[kx_lo..kx_hi];
                                let mut s = 0.0f64;
                                for (&xv, &kv) in xs.iter().zip(ks) {
                                    s += xv as f64 * kv as f64;
                                }
                                *slot += s;
                            }
                        }
                    }
                }
                let out_plane = &mut out[(bn * f + of) * oh * ow..][..oh * ow];
                for (o, &a) in out_plane.iter_mut().zip(acc.iter()) {
                    *o = a as f32;
                }
            }
        }
        check_finite("conv2d", &out)?;
        let needs = self.needs(x) || self.needs(kernel);
        Ok(self.push(
            vec![n, f, oh, ow],
            out,
            needs,
            Op::Conv2d { x, k: kernel, stride, padding },
        ))
    }

    /// Fully connected layer: `[N,D] · [M,D]ᵀ (+ [M]) -> [N,M]`.
    pub fn linear(&mut self, x: Val, w: Val, b: Option<Val>) -> Result<Val, TensorError> {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(TensorError::ShapeMismatch { op: "linear", lhs: xs, rhs: ws });
        }
        let (n, d, m) = (xs[0], xs[1], ws[0]);
        if let Some(bias) = b {
            let bs = &self.nodes[bias.0].shape;
            if bs.len() != 1 || bs[0] != m {
                return Err(TensorError::ShapeMismatch {
                    op: "linear",
                    lhs: ws,
                    rhs: bs.clone(),
                });
            }
        }
        let xd = &self.nodes[x.0].data;
        let wd = &self.nodes[w.0].data;
        let mut out = vec![0.0f32; n * m];
        for row in 0..n {
            for col in 0..m {
                let mut acc = 0.0f64;
                for i in 0..d {
                    acc += xd[row * d + i] as f64 * wd[col * d + i] as f64;
                }
                out[row * m + col] = acc as f32;
            }
        }
        if let Some(bias) = b {
            let bd = &self.nodes[bias.0].data;
            for row in 0..n {
                for col in 0..m {
                    out[row * m + col] += bd[col];
                }
            }
        }
        check_finite("linear", &out)?;
        let needs =
            self.needs(x) || self.needs(w) || b.map(|bias| self.needs(bias)).unwrap_or(false);
        Ok(self.push(vec![n, m], out, needs, Op::Linear { x, w, b }))
    }

    /// Max pooling with square window `k` and stride `k` over `[N,C,H,W]`.
    /// Trailing rows/columns that do not fill a window are dropped.
    pub fn maxpool2d(&mut self, x: Val, k: usize) -> Result<Val, TensorError> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 4 || k == 0 || xs[2] < k || xs[3] < k {
            return Err(TensorError::InvalidShape {
                op: "maxpool2d",
                detail: format!("window {k} on shape {xs:?}"),
            });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / k, w / k);
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0f32; n * c * oh * ow];
        let mut argmax = vec![0u32; n * c * oh * ow];
        for plane in 0..n * c {
            let src = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0u32;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = (oy * k + dy) * w + (ox * k + dx);
                            let v = xd[src + idx];
                            if v > best {
                                best = v;
                                best_idx = idx as u32;
                            }
                        }
                    }
                    let o = plane * oh * ow + oy * ow + ox;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        check_finite("maxpool2d", &out)?;
        let needs = self.needs(x);
        Ok(self.push(vec![n, c, oh, ow], out, needs, Op::MaxPool2d { x, argmax }))
    }

    /// Spatial mean per channel: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: Val) -> Result<Val, TensorError> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 4 {
            return Err(TensorError::InvalidShape {
                op: "global_avg_pool",
                detail: format!("expected rank 4, got {xs:?}"),
            });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let area = h * w;
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0f32; n * c];
        for plane in 0..n * c {
            let mut acc = 0.0f64;
            for i in 0..area {
                acc += xd[plane * area + i] as f64;
            }
            out[plane] = (acc / area as f64) as f32;
        }
        check_finite("global_avg_pool", &out)?;
        let needs = self.needs(x);
        Ok(self.push(vec![n, c], out, needs, Op::GlobalAvgPool(x)))
    }

    /// Row-wise softmax of `[N,C]` logits, computed with max-subtraction.
    pub fn softmax(&mut self, logits: Val) -> Result<Val, TensorError> {
        let (n, c) = self.rows_cols("softmax", logits)?;
        let data = softmax_rows(&self.nodes[logits.0].data, n, c);
        check_finite("softmax", &data)?;
        let needs = self.needs(logits);
        Ok(self.push(vec![n, c], data, needs, Op::Softmax(logits)))
    }

    /// Row-wise log-softmax of `[N,C]` logits (stable log-sum-exp).
    pub fn log_softmax(&mut self, logits: Val) -> Result<Val, TensorError> {
        let (n, c) = self.rows_cols("log_softmax", logits)?;
        let xd = &self.nodes[logits.0].data;
        let mut data = vec![0.0f32; n * c];
        for row in 0..n {
            let slice = &xd[row * c..(row + 1) * c];
            let m = slice.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse: f64 = slice.iter().map(|&v| ((v as f64) - m).exp()).sum::<f64>().ln() + m;
            for j in 0..c {
                data[row * c + j] = (slice[j] as f64 - lse) as f32;
            }
        }
        check_finite("log_softmax", &data)?;
        let needs = self.needs(logits);
        Ok(self.push(vec![n, c], data, needs, Op::LogSoftmax(logits)))
    }

    /// Mean negative log-likelihood of `labels` under row-softmax of
    /// `[N,C]` logits. Returns a rank-0 scalar.
    pub fn cross_entropy_loss(
        &mut self,
        logits: Val,
        labels: &[usize],
    ) -> Result<Val, TensorError> {
        let (n, c) = self.rows_cols("cross_entropy_loss", logits)?;
        if labels.len() != n {
            return Err(TensorError::InvalidShape {
                op: "cross_entropy_loss",
                detail: format!("{} labels for batch of {n}", labels.len()),
            });
        }
        for &y in labels {
            if y >= c {
                return Err(TensorError::ClassOutOfRange { class: y, num_classes: c });
            }
        }
        let xd = &self.nodes[logits.0].data;
        let mut acc = 0.0f64;
        for (row, &y) in labels.iter().enumerate() {
            let slice = &xd[row * c..(row + 1) * c];
            let m = slice.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse: f64 = slice.iter().map(|&v| ((v as f64) - m).exp()).sum::<f64>().ln() + m;
            acc += lse - slice[y] as f64;
        }
        let loss = (acc / n as f64) as f32;
        check_finite("cross_entropy_loss", &[loss])?;
        let needs = self.needs(logits);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            needs,
            Op::CrossEntropy { logits, labels: labels.to_vec() },
        ))
    }

    /// Sum of all elements. Returns a rank-0 scalar.
    pub fn sum(&mut self, x: Val) -> Result<Val, TensorError> {
        let acc: f64 = self.nodes[x.0].data.iter().map(|&v| v as f64).sum();
        let s = acc as f32;
        check_finite("sum", &[s])?;
        let needs = self.needs(x);
        Ok(self.push(Vec::new(), vec![s], needs, Op::Sum(x)))
    }

    /// Pick one column per row of `[N,C]`: `out[n] = x[n, classes[n]]`.
    pub fn select_class(&mut self, x: Val, classes: &[usize]) -> Result<Val, TensorError> {
        let (n, c) = self.rows_cols("select_class", x)?;
        if classes.len() != n {
            return Err(TensorError::InvalidShape {
                op: "select_class",
                detail: format!("{} indices for batch of {n}", classes.len()),
            });
        }
        let mut data = vec![0.0f32; n];
        for (row, &cls) in classes.iter().enumerate() {
            if cls >= c {
                return Err(TensorError::ClassOutOfRange { class: cls, num_classes: c });
            }
            data[row] = self.nodes[x.0].data[row * c + cls];
        }
        let needs = self.needs(x);
        Ok(self.push(vec![n], data, needs, Op::SelectClass { x, classes: classes.to_vec() }))
    }

    /// Per-row maximum of `[N,C]`, optionally skipping one column per row:
    /// `out[n] = max_{j != exclude[n]} x[n,j]`. Ties keep the lowest index.
    pub fn row_max_excluding(
        &mut self,
        x: Val,
        exclude: Option<&[usize]>,
    ) -> Result<Val, TensorError> {
        let (n, c) = self.rows_cols("row_max_excluding", x)?;
        if let Some(ex) = exclude {
            if ex.len() != n {
                return Err(TensorError::InvalidShape {
                    op: "row_max_excluding",
                    detail: format!("{} indices for batch of {n}", ex.len()),
                });
            }
            if c < 2 {
                return Err(TensorError::InvalidShape {
                    op: "row_max_excluding",
                    detail: "cannot exclude the only column".to_string(),
                });
            }
        }
        let xd = &self.nodes[x.0].data;
        let mut data = vec![0.0f32; n];
        let mut argmax = vec![0u32; n];
        for row in 0..n {
            let skip = exclude.map(|ex| ex[row]);
            let mut best = f32::NEG_INFINITY;
            let mut best_j = 0u32;
            for j in 0..c {
                if Some(j) == skip {
                    continue;
                }
                let v = xd[row * c + j];
                if v > best {
                    best = v;
                    best_j = j as u32;
                }
            }
            data[row] = best;
            argmax[row] = best_j;
        }
        check_finite("row_max_excluding", &data)?;
        let needs = self.needs(x);
        Ok(self.push(vec![n], data, needs, Op::RowMaxExcluding { x, argmax }))
    }

    fn rows_cols(&self, op: &'static str, v: Val) -> Result<(usize, usize), TensorError> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 2 || s[1] == 0 {
            return Err(TensorError::InvalidShape {
                op,
                detail: format!("expected [N,C], got {s:?}"),
            });
        }
        Ok((s[0], s[1]))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Populate gradient buffers of everything `scalar` depends on.
    ///
    /// Fails if `scalar` has more than one element or if the tape was
    /// already consumed by a previous call. After it returns, every leaf
    /// registered with gradient participation holds a gradient buffer
    /// (zeros where no gradient flowed).
    pub fn backward(&mut self, scalar: Val) -> Result<(), TensorError> {
        if self.spent {
            return Err(TensorError::BackwardConsumed);
        }
        if self.nodes[scalar.0].data.len() != 1 {
            return Err(TensorError::NotScalar { shape: self.nodes[scalar.0].shape.clone() });
        }
        self.spent = true;
        self.nodes[scalar.0].grad = Some(vec![1.0]);

        for i in (0..=scalar.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backward_op(i, &op);
        }

        for node in &mut self.nodes {
            if node.needs_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.data.len()]);
            }
        }
        Ok(())
    }

    fn acc_grad(&mut self, v: Val, contrib: &[f32]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let n = self.nodes[v.0].data.len();
        debug_assert_eq!(contrib.len(), n);
        match &mut self.nodes[v.0].grad {
            Some(g) => {
                for (gi, &ci) in g.iter_mut().zip(contrib) {
                    *gi += ci;
                }
            }
            None => self.nodes[v.0].grad = Some(contrib.to_vec()),
        }
    }

    fn backward_op(&mut self, out: usize, op: &Op) {
        let g = self.nodes[out].grad.clone().expect("caller checked");
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_grad(*a, &g);
                self.acc_grad(*b, &g);
            }
            Op::Sub(a, b) => {
                self.acc_grad(*a, &g);
                let neg: Vec<f32> = g.iter().map(|v| -v).collect();
                self.acc_grad(*b, &neg);
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let da: Vec<f32> =
                        g.iter().zip(&self.nodes[b.0].data).map(|(gi, bi)| gi * bi).collect();
                    self.acc_grad(*a, &da);
                }
                if self.needs(*b) {
                    let db: Vec<f32> =
                        g.iter().zip(&self.nodes[a.0].data).map(|(gi, ai)| gi * ai).collect();
                    self.acc_grad(*b, &db);
                }
            }
            Op::AddBias { x, b } => {
                self.acc_grad(*x, &g);
                if self.needs(*b) {
                    let xs = &self.nodes[x.0].shape;
                    let (n, c) = (xs[0], xs[1]);
                    let spatial: usize = xs[2..].iter().product();
                    let mut db64 = vec![0.0f64; c];
                    for bn in 0..n {
                        for ch in 0..c {
                            let base = (bn * c + ch) * spatial;
                            for i in 0..spatial {
                                db64[ch] += g[base + i] as f64;
                            }
                        }
                    }
                    let db: Vec<f32> = db64.iter().map(|&v| v as f32).collect();
                    self.acc_grad(*b, &db);
                }
            }
            Op::Scale { x, k } => {
                let dx: Vec<f32> = g.iter().map(|gi| gi * k).collect();
                self.acc_grad(*x, &dx);
            }
            Op::AddScalar { x } => self.acc_grad(*x, &g),
            Op::Relu(x) => {
                let dx: Vec<f32> = g
                    .iter()
                    .zip(&self.nodes[x.0].data)
                    .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                    .collect();
                self.acc_grad(*x, &dx);
            }
            Op::Tanh(x) => {
                let dx: Vec<f32> = g
                    .iter()
                    .zip(&self.nodes[out].data)
                    .map(|(gi, &yi)| gi * (1.0 - yi * yi))
                    .collect();
                self.acc_grad(*x, &dx);
            }
            Op::Clamp { x, lo, hi } => {
                let dx: Vec<f32> = g
                    .iter()
                    .zip(&self.nodes[x.0].data)
                    .map(|(gi, &xi)| if xi >= *lo && xi <= *hi { *gi } else { 0.0 })
                    .collect();
                self.acc_grad(*x, &dx);
            }
            Op::Conv2d { x, k, stride, padding } => {
                self.backward_conv2d(out, *x, *k, *stride, *padding, &g)
            }
            Op::Linear { x, w, b } => self.backward_linear(*x, *w, *b, &g),
            Op::MaxPool2d { x, argmax } => {
                let xs = &self.nodes[x.0].shape;
                let (h, w) = (xs[2], xs[3]);
                let planes = xs[0] * xs[1];
                let area_out = self.nodes[out].data.len() / planes;
                let mut dx = vec![0.0f32; self.nodes[x.0].data.len()];
                for plane in 0..planes {
                    for o in 0..area_out {
                        let oi = plane * area_out + o;
                        dx[plane * h * w + argmax[oi] as usize] += g[oi];
                    }
                }
                self.acc_grad(*x, &dx);
            }
            Op::GlobalAvgPool(x) => {
                let xs = &self.nodes[x.0].shape;
                let area = xs[2] * xs[3];
                let inv = 1.0 / area as f32;
                let mut dx = vec![0.0f32; self.nodes[x.0].data.len()];
                for plane in 0..xs[0] * xs[1] {
                    let gv = g[plane] * inv;
                    for i in 0..area {
                        dx[plane * area + i] = gv;
                    }
                }
                self.acc_grad(*x, &dx);
            }
            Op::Softmax(x) => {
                let y = &self.nodes[out].data;
                let c = self.nodes[out].shape[1];
                let n = self.nodes[out].shape[0];
                let mut dx = vec![0.0f32; n * c];
                for row in 0..n {
                    let base = row * c;
                    let mut dot = 0.0f64;
                    for j in 0..c {
                        dot += g[base + j] as f64 * y[base + j] as f64;
                    }
                    for j in 0..c {
                        dx[base + j] = (y[base + j] as f64 * (g[base + j] as f64 - dot)) as f32;
                    }
                }
                self.acc_grad(*x, &dx);
            }
            Op::LogSoftmax(x) => {
                let y = &self.nodes[out].data;
                let c = self.nodes[out].shape[1];
                let n = self.nodes[out].shape[0];
                let mut dx = vec![0.0f32; n * c];
                for row in 0..n {
                    let base = row * c;
                    let gsum: f64 = (0..c).map(|j| g[base + j] as f64).sum();
                    for j in 0..c {
                        let p = (y[base + j] as f64).exp();
                        dx[base + j] = (g[base + j] as f64 - p * gsum) as f32;
                    }
                }
                self.acc_grad(*x, &dx);
            }
            Op::CrossEntropy { logits, labels } => {
                // Probabilities recomputed in f64 at backward time: storing
                // them as f32 would round saturated rows to exactly 1 and
                // silently zero the gradient.
                let n = labels.len();
                let xd = &self.nodes[logits.0].data;
                let c = xd.len() / n;
                let gv = g[0] as f64 / n as f64;
                let mut dx = vec![0.0f32; xd.len()];
                for (row, &y) in labels.iter().enumerate() {
                    let slice = &xd[row * c..(row + 1) * c];
                    let m = slice.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
                    let denom: f64 = slice.iter().map(|&v| ((v as f64) - m).exp()).sum();
                    for j in 0..c {
                        let p = ((slice[j] as f64) - m).exp() / denom;
                        let ind = if j == y { 1.0 } else { 0.0 };
                        dx[row * c + j] = (gv * (p - ind)) as f32;
                    }
                }
                self.acc_grad(*logits, &dx);
            }
            Op::Sum(x) => {
                let dx = vec![g[0]; self.nodes[x.0].data.len()];
                self.acc_grad(*x, &dx);
            }
            Op::SelectClass { x, classes } => {
                let c = self.nodes[x.0].shape[1];
                let mut dx = vec![0.0f32; self.nodes[x.0].data.len()];
                for (row, &cls) in classes.iter().enumerate() {
                    dx[row * c + cls] = g[row];
                }
                self.acc_grad(*x, &dx);
            }
            Op::RowMaxExcluding { x, argmax } => {
                let c = self.nodes[x.0].shape[1];
                let mut dx = vec![0.0f32; self.nodes[x.0].data.len()];
                for (row, &j) in argmax.iter().enumerate() {
                    dx[row * c + j as usize] = g[row];
                }
                self.acc_grad(*x, &dx);
            }
        }
    }

    fn backward_conv2d(
        &mut self,
        out: usize,
        x: Val,
        k: Val,
        stride: usize,
        padding: usize,
        g: &[f32],
    ) {
        let xs = self.nodes[x.0].shape.clone();
        let ks = self.nodes[k.0].shape.clone();
        let os = self.nodes[out].shape.clone();
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, kh, kw) = (ks[0], ks[2], ks[3]);
        let (oh, ow) = (os[2], os[3]);

        let need_x = self.needs(x);
        let need_k = self.needs(k);
        let mut dx64 = if need_x { vec![0.0f64; n * c * h * w] } else { Vec::new() };
        let mut dk64 = if need_k { vec![0.0f64; f * c * kh * kw] } else { Vec::new() };

        {
            let xd = &self.nodes[x.0].data;
            let kd = &self.nodes[k.0].data;
            for bn in 0..n {
                for of in 0..f {
                    let g_plane = &g[(bn * f + of) * oh * ow..][..oh * ow];
                    for ic in 0..c {
                        let xplane = &xd[(bn * c + ic) * h * w..][..h * w];
                        let kplane = &kd[(of * c + ic) * kh * kw..][..kh * kw];
                        let (dxplane, dkplane) = (
                            (bn * c + ic) * h * w,
                            (of * c + ic) * kh * kw,
                        );
                        for oy in 0..oh {
                            let g_row = &g_plane[oy * ow..][..ow];
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let xrow = &xplane[iy as usize * w..][..w];
                                let krow = &kplane[ky * kw..][..kw];
                                for (ox, &gf) in g_row.iter().enumerate() {
                                    let gv = gf as f64;
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    let off = (ox * stride) as isize - padding as isize;
                                    let kx_lo = (-off).max(0) as usize;
                                    let kx_hi =
                                        ((w as isize - off).min(kw as isize)).max(0) as usize;
                                    if kx_lo >= kx_hi {
                                        continue;
                                    }
                                    let ix0 = (off + kx_lo as isize) as usize;
                                    let len = kx_hi - kx_lo;
                                    if need_x {
                                        let dxs = &mut dx64
                                            [dxplane + iy as usize * w + ix0..][..len];
                                        for (d, &kv) in
                                            dxs.iter_mut().zip(&krow[kx_lo..kx_hi])
                                        {
                                            *d += gv * kv as f64;
                                        }
                                    }
                                    if need_k {
                                        let dks =
                                            &mut dk64[dkplane + ky * kw + kx_lo..][..len];
                                        for (d, &xv) in
                                            dks.iter_mut().zip(&xrow[ix0..ix0 + len])
                                        {
                                            *d += gv * xv as f64;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if need_x {
            let dx: Vec<f32> = dx64.iter().map(|&v| v as f32).collect();
            self.acc_grad(x, &dx);
        }
        if need_k {
            let dk: Vec<f32> = dk64.iter().map(|&v| v as f32).collect();
            self.acc_grad(k, &dk);
        }
    }

    fn backward_linear(&mut self, x: Val, w: Val, b: Option<Val>, g: &[f32]) {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        let (n, d, m) = (xs[0], xs[1], ws[0]);
        if self.needs(x) {
            let wd = &self.nodes[w.0].data;
            let mut dx = vec![0.0f32; n * d];
            for row in 0..n {
                for i in 0..d {
                    let mut acc = 0.0f64;
                    for col in 0..m {
                        acc += g[row * m + col] as f64 * wd[col * d + i] as f64;
                    }
                    dx[row * d + i] = acc as f32;
                }
            }
            self.acc_grad(x, &dx);
        }
        if self.needs(w) {
            let xd = &self.nodes[x.0].data;
            let mut dw = vec![0.0f32; m * d];
            for col in 0..m {
                for i in 0..d {
                    let mut acc = 0.0f64;
                    for row in 0..n {
                        acc += g[row * m + col] as f64 * xd[row * d + i] as f64;
                    }
                    dw[col * d + i] = acc as f32;
                }
            }
            self.acc_grad(w, &dw);
        }
        if let Some(bias) = b {
            if self.needs(bias) {
                let mut db = vec![0.0f32; m];
                for col in 0..m {
                    let mut acc = 0.0f64;
                    for row in 0..n {
                        acc += g[row * m + col] as f64;
                    }
                    db[col] = acc as f32;
                }
                self.acc_grad(bias, &db);
            }
        }
    }
}

/// Row-wise stable softmax used by both the tape op and plain scoring.
pub(crate) fn softmax_rows(data: &[f32], n: usize, c: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; n * c];
    for row in 0..n {
        let slice = &data[row * c..(row + 1) * c];
        let m = slice.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let mut denom = 0.0f64;
        let mut exps = vec![0.0f64; c];
        for j in 0..c {
            let e = ((slice[j] as f64) - m).exp();
            exps[j] = e;
            denom += e;
        }
        for j in 0..c {
            out[row * c + j] = (exps[j] / denom) as f32;
        }
    }
    out
}

impl Tensor {
    /// Row-wise softmax of `[N,C]` logits without tape participation.
    pub fn softmax_rows(&self) -> Result<Tensor, TensorError> {
        if self.rank() != 2 {
            return Err(TensorError::InvalidShape {
                op: "softmax_rows",
                detail: format!("expected [N,C], got {:?}", self.shape()),
            });
        }
        let (n, c) = (self.shape()[0], self.shape()[1]);
        let data = softmax_rows(self.data(), n, c);
        check_finite("softmax_rows", &data)?;
        Ok(Tensor::new(vec![n, c], data).expect("length preserved"))
    }
}
