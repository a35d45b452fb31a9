use super::tensor::Tensor;
use crate::error::{bail, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `x + b` with `b` broadcast over the leading axes of `x`.
    AddBroadcast(Var, Var),
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, shared_b: bool },
    Transpose { x: Var, rows: usize, cols: usize },
    Reshape(Var),
    Concat { parts: Vec<(Var, usize)> },
    Slice { x: Var, start: usize, width: usize },
    Softmax { x: Var, scale: f64 },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    /// Keeps `Φ(x)` for the backward pass when `x` requires a gradient.
    Gelu { x: Var, cdf: Vec<f64> },
    Conv2d { x: Var, k: Var, b: Var, cols: Vec<f64>, geom: ConvGeom },
    Sum(Var),
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Tape of tensor operations supporting reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// `C = alpha·A·B + beta·C` on strided row-major views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn erf(x: f64) -> f64 {
    libm::erf(x)
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Gradient of the last [`Graph::backward`] loss with respect to the leaf
    /// `v`; `None` for nodes that do not require gradients, were unreachable
    /// or are not leaves.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads[v.0].as_ref()?;
        Some(Tensor::new(self.shape(v), g.clone()).expect("gradient shape"))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            bail!(Shape, "{}: shapes {:?} and {:?} differ", what, self.shape(a), self.shape(b));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let va = self.value(a);
        let value = Tensor::new(va.shape(), va.data().iter().map(|x| x * s).collect()).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(value, rg, Op::Scale(a, s))
    }

    /// `x + b` where `b`'s shape equals the trailing axes of `x`'s shape.
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sb.len() > sx.len() || sx[sx.len() - sb.len()..] != *sb {
            bail!(Shape, "cannot broadcast {:?} onto {:?}", sb, sx);
        }
        let vb = self.value(b).data();
        let n = vb.len();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(n) {
            add_into(row, vb);
        }
        let value = Tensor::new(self.shape(x), data)?;
        let rg = self.rg(&[x, b]);
        Ok(self.push(value, rg, Op::AddBroadcast(x, b)))
    }

    /// Matrix product over the last two axes.
    ///
    /// `a` is `[..., m, k]`; `b` is either a shared `[k, n]` matrix or
    /// `[..., k, n]` with the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            bail!(Shape, "matmul needs rank >= 2 operands, got {:?} and {:?}", sa, sb);
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let shared_b = sb.len() == 2;
        if k != kb || (!shared_b && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            bail!(Shape, "matmul shape mismatch: {:?} x {:?}", sa, sb);
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out_shape = sa.clone();
        *out_shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; batch * m * n];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        if shared_b {
            gemm(batch * m, k, n, 1.0, va, (k, 1), vb, (n, 1), 0.0, &mut out);
        } else {
            for i in 0..batch {
                gemm(m, k, n, 1.0, &va[i * m * k..], (k, 1), &vb[i * k * n..], (n, 1), 0.0, &mut out[i * m * n..]);
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&out_shape, out)?, rg, Op::MatMul { a, b, batch, m, k, n, shared_b }))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            bail!(Shape, "transpose needs rank >= 2, got {:?}", s);
        }
        let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
        let out = transpose_blocks(self.value(x).data(), rows, cols);
        let mut shape = s.clone();
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&shape, out)?, rg, Op::Transpose { x, rows, cols }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::Reshape(x)))
    }

    /// Concatenation along the last axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            bail!(Shape, "concat of zero tensors");
        };
        let lead = &self.shape(first)[..self.shape(first).len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..s.len() - 1] != *lead {
                bail!(Shape, "concat shape mismatch: {:?} vs {:?}", self.shape(first), s);
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(&shape, out)?, rg, Op::Concat { parts: parts.iter().copied().zip(widths).collect() }))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let width = *s.last().unwrap();
        if len == 0 || start + len > width {
            bail!(Shape, "slice {}..{} out of range for last axis {}", start, start + len, width);
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(src.len() / width * len);
        for row in src.chunks_exact(width) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&shape, out)?, rg, Op::Slice { x, start, width }))
    }

    /// Row-wise softmax of `x / scale` over the last axis.
    ///
    /// With `causal`, the last two axes must be square and entry `(i, j)` with
    /// `j > i` gets weight exactly zero.
    pub fn softmax_rows(&mut self, x: Var, scale: f64, causal: bool) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            bail!(Shape, "softmax needs rank >= 2, got {:?}", s);
        }
        if !(scale > 0.0) {
            bail!(InvalidArgument, "softmax scale must be positive, got {}", scale);
        }
        let cols = s[s.len() - 1];
        let rows_per_block = s[s.len() - 2];
        if causal && rows_per_block != cols {
            bail!(Shape, "causal softmax needs square trailing axes, got {:?}", s);
        }
        let mut out = self.value(x).data().to_vec();
        for (r, row) in out.chunks_exact_mut(cols).enumerate() {
            let valid = if causal { r % rows_per_block + 1 } else { cols };
            let max = row[..valid].iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut sum = 0.0;
            for v in row[..valid].iter_mut() {
                *v = ((*v - max) / scale).exp();
                sum += *v;
            }
            for v in row[..valid].iter_mut() {
                *v /= sum;
            }
            for v in row[valid..].iter_mut() {
                *v = 0.0;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&s, out)?, rg, Op::Softmax { x, scale }))
    }

    /// Standardises the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            bail!(Shape, "layer norm over {} features got gamma {:?}, beta {:?}", d, self.shape(gamma), self.shape(beta));
        }
        if !(eps > 0.0) {
            bail!(InvalidArgument, "layer norm eps must be positive");
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let xs = self.value(x).data();
        let rows = xs.len() / d;
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let (xhat, rstd) = if rg { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(Tensor::new(&s, out)?, rg, Op::LayerNorm { x, gamma, beta, xhat, rstd }))
    }

    /// Exact GELU `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let cdf: Vec<f64> = v.data().iter().map(|&t| 0.5 * (1.0 + erf(t * INV_SQRT_2))).collect();
        let out = v.data().iter().zip(&cdf).map(|(t, c)| t * c).collect();
        let value = Tensor::new(v.shape(), out).expect("same shape");
        let rg = self.rg(&[x]);
        let cdf = if rg { cdf } else { Vec::new() };
        self.push(value, rg, Op::Gelu { x, cdf })
    }

    /// 3×3 same-padded cross-correlation.
    ///
    /// `x` is `[H, W, C_in]` or `[B, H, W, C_in]`, `k` is `[3, 3, C_in, C_out]`
    /// and `b` is `[C_out]`.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (batch, h, w, cin) = match s[..] {
            [h, w, c] => (1, h, w, c),
            [n, h, w, c] => (n, h, w, c),
            _ => bail!(Shape, "conv2d input must be [H,W,C] or [B,H,W,C], got {:?}", s),
        };
        let ks = self.shape(k).to_vec();
        if ks.len() != 4 || ks[0] != 3 || ks[1] != 3 || ks[2] != cin {
            bail!(Shape, "conv2d kernel {:?} does not match 3x3 with {} input channels", ks, cin);
        }
        let cout = ks[3];
        if self.shape(b) != [cout] {
            bail!(Shape, "conv2d bias {:?} does not match {} output channels", self.shape(b), cout);
        }
        let geom = ConvGeom { batch, h, w, cin, cout };
        let cols = im2col(self.value(x).data(), geom);
        let pixels = batch * h * w;
        let mut out = vec![0.0; pixels * cout];
        let bias = self.value(b).data();
        for row in out.chunks_exact_mut(cout) {
            row.copy_from_slice(bias);
        }
        gemm(pixels, 9 * cin, cout, 1.0, &cols, (9 * cin, 1), self.value(k).data(), (cout, 1), 1.0, &mut out);
        let mut shape = s;
        *shape.last_mut().unwrap() = cout;
        let keep_cols = self.requires_grad(k);
        let rg = self.rg(&[x, k, b]);
        let cols = if keep_cols { cols } else { Vec::new() };
        Ok(self.push(Tensor::new(&shape, out)?, rg, Op::Conv2d { x, k, b, cols, geom }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(total), rg, Op::Sum(x))
    }

    /// Populates gradients of the scalar `loss` on every reachable node that
    /// requires them. Previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            bail!(InvalidArgument, "backward needs a scalar loss, got shape {:?}", self.shape(loss));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            // Only leaf gradients are kept; intermediate buffers are released
            // as soon as they have been pushed to their inputs.
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(g);
            }
        }
        Ok(())
    }

    fn acc(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    /// Adds `src` into the gradient of `v`, copying on first contribution.
    fn acc_add(&mut self, v: Var, src: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => add_into(acc, src),
            slot => *slot = Some(src.to_vec()),
        }
    }

    fn acc_owned(&mut self, v: Var, src: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => add_into(acc, &src),
            slot => *slot = Some(src),
        }
    }

    fn acc_with(&mut self, v: Var, f: impl FnOnce(&mut [f64], &[Node])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let g = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(g, &self.nodes);
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Temporarily move the op out so inputs can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_add(*a, g);
                self.acc_add(*b, g);
            }
            Op::Sub(a, b) => {
                self.acc_add(*a, g);
                if let Some(acc) = self.acc(*b) {
                    acc.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                self.acc_with(a, |acc, nodes| {
                    let vb = nodes[b.0].value.data();
                    acc.iter_mut().zip(g.iter().zip(vb)).for_each(|(x, (gi, bi))| *x += gi * bi);
                });
                self.acc_with(b, |acc, nodes| {
                    let va = nodes[a.0].value.data();
                    acc.iter_mut().zip(g.iter().zip(va)).for_each(|(x, (gi, ai))| *x += gi * ai);
                });
            }
            Op::Scale(a, s) => {
                let s = *s;
                if let Some(acc) = self.acc(*a) {
                    acc.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                }
            }
            Op::AddBroadcast(x, b) => {
                self.acc_add(*x, g);
                if let Some(acc) = self.acc(*b) {
                    let n = acc.len();
                    for row in g.chunks_exact(n) {
                        add_into(acc, row);
                    }
                }
            }
            Op::MatMul { a, b, batch, m, k, n, shared_b } => {
                let (a, b, batch, m, k, n, shared_b) = (*a, *b, *batch, *m, *k, *n, *shared_b);
                // dA = G·Bᵀ
                self.acc_with(a, |acc, nodes| {
                    let vb = nodes[b.0].value.data();
                    if shared_b {
                        gemm(batch * m, n, k, 1.0, g, (n, 1), vb, (1, n), 1.0, acc);
                    } else {
                        for i in 0..batch {
                            gemm(m, n, k, 1.0, &g[i * m * n..], (n, 1), &vb[i * k * n..], (1, n), 1.0, &mut acc[i * m * k..]);
                        }
                    }
                });
                // dB = Aᵀ·G
                self.acc_with(b, |acc, nodes| {
                    let va = nodes[a.0].value.data();
                    if shared_b {
                        gemm(k, batch * m, n, 1.0, va, (1, k), g, (n, 1), 1.0, acc);
                    } else {
                        for i in 0..batch {
                            gemm(k, m, n, 1.0, &va[i * m * k..], (1, k), &g[i * m * n..], (n, 1), 1.0, &mut acc[i * k * n..]);
                        }
                    }
                });
            }
            Op::Transpose { x, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                if self.requires_grad(*x) {
                    // g has trailing axes [cols, rows]
                    self.acc_owned(*x, transpose_blocks(g, cols, rows));
                }
            }
            Op::Reshape(x) => self.acc_add(*x, g),
            Op::Concat { parts } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for &(p, w) in parts {
                    if let Some(acc) = self.acc(p) {
                        for r in 0..rows {
                            add_into(&mut acc[r * w..(r + 1) * w], &g[r * total + offset..r * total + offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::Slice { x, start, width } => {
                let (start, width) = (*start, *width);
                if let Some(acc) = self.acc(*x) {
                    let len = g.len() / (acc.len() / width);
                    for (r, gr) in g.chunks_exact(len).enumerate() {
                        add_into(&mut acc[r * width + start..r * width + start + len], gr);
                    }
                }
            }
            Op::Softmax { x, scale } => {
                let inv = 1.0 / *scale;
                self.acc_with(*x, |acc, nodes| {
                    let y = &nodes[i].value;
                    let cols = y.last_dim();
                    for ((ar, yr), gr) in acc.chunks_exact_mut(cols).zip(y.data().chunks_exact(cols)).zip(g.chunks_exact(cols)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            ar[j] += yr[j] * (gr[j] - dot) * inv;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = xhat.len() / rstd.len();
                if let Some(acc) = self.acc(*beta) {
                    for row in g.chunks_exact(d) {
                        add_into(acc, row);
                    }
                }
                if let Some(acc) = self.acc(*gamma) {
                    for (gr, xr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        acc.iter_mut().zip(gr.iter().zip(xr)).for_each(|(a, (gi, xi))| *a += gi * xi);
                    }
                }
                let x = *x;
                let gam = *gamma;
                self.acc_with(x, |acc, nodes| {
                    let gv = nodes[gam.0].value.data();
                    let mut dxhat = vec![0.0; d];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let ar = &mut acc[r * d..(r + 1) * d];
                        for j in 0..d {
                            ar[j] += rs * (dxhat[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                });
            }
            Op::Gelu { x, cdf } => {
                let x = *x;
                self.acc_with(x, |acc, nodes| {
                    let xv = nodes[x.0].value.data();
                    for (((a, &t), gi), c) in acc.iter_mut().zip(xv).zip(g).zip(cdf) {
                        let pdf = INV_SQRT_2PI * (-0.5 * t * t).exp();
                        *a += gi * (c + t * pdf);
                    }
                });
            }
            Op::Conv2d { x, k, b, cols, geom } => {
                let geom = *geom;
                let pixels = geom.batch * geom.h * geom.w;
                let kk = 9 * geom.cin;
                if let Some(acc) = self.acc(*b) {
                    for row in g.chunks_exact(geom.cout) {
                        add_into(acc, row);
                    }
                }
                if let Some(acc) = self.acc(*k) {
                    gemm(kk, pixels, geom.cout, 1.0, cols, (1, kk), g, (geom.cout, 1), 1.0, acc);
                }
                let kv = *k;
                self.acc_with(*x, |acc, nodes| {
                    let kd = nodes[kv.0].value.data();
                    let mut dcols = vec![0.0; pixels * kk];
                    gemm(pixels, geom.cout, kk, 1.0, g, (geom.cout, 1), kd, (1, geom.cout), 0.0, &mut dcols);
                    col2im_add(&dcols, geom, acc);
                });
            }
            Op::Sum(x) => {
                let gi = g[0];
                if let Some(acc) = self.acc(*x) {
                    acc.iter_mut().for_each(|a| *a += gi);
                }
            }
        }
        self.nodes[i].op = op;
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
}

/// Transposes each trailing `rows × cols` block.
fn transpose_blocks(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let block = rows * cols;
    let mut out = vec![0.0; src.len()];
    for (s, d) in src.chunks_exact(block).zip(out.chunks_exact_mut(block)) {
        for r in 0..rows {
            for c in 0..cols {
                d[c * rows + r] = s[r * cols + c];
            }
        }
    }
    out
}

/// Rows are output pixels `(b, y, x)`, columns `(ky, kx, ci)`.
fn im2col(x: &[f64], g: ConvGeom) -> Vec<f64> {
    let kk = 9 * g.cin;
    let mut cols = vec![0.0; g.batch * g.h * g.w * kk];
    for b in 0..g.batch {
        for y in 0..g.h {
            for xx in 0..g.w {
                let row = ((b * g.h + y) * g.w + xx) * kk;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= g.w as isize {
                            continue;
                        }
                        let src = ((b * g.h + sy as usize) * g.w + sx as usize) * g.cin;
                        let dst = row + (ky * 3 + kx) * g.cin;
                        cols[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f64], g: ConvGeom, dx: &mut [f64]) {
    let kk = 9 * g.cin;
    for b in 0..g.batch {
        for y in 0..g.h {
            for xx in 0..g.w {
                let row = ((b * g.h + y) * g.w + xx) * kk;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= g.w as isize {
                            continue;
                        }
                        let dst = ((b * g.h + sy as usize) * g.w + sx as usize) * g.cin;
                        let src = row + (ky * 3 + kx) * g.cin;
                        add_into(&mut dx[dst..dst + g.cin], &cols[src..src + g.cin]);
                    }
                }
            }
        }
    }
}
