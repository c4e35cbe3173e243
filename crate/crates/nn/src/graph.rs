use crate::{NnError, Result, Tensor};

/// Handle to a value recorded on a [`Graph`].
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
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    TransposeLast(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        rstd: Vec<f64>,
    },
    MeanAxis1(Var),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Mse {
        pred: Var,
        target: Vec<f64>,
    },
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
}

/// Recorded computation tape.
///
/// Every operation appends a node; [`Graph::backward`] walks the tape in
/// reverse and accumulates gradients for every node that feeds the loss.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn is_suffix(big: &[usize], small: &[usize]) -> bool {
    big.len() >= small.len() && big[big.len() - small.len()..] == *small
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::from_vec(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Gradient of the last `backward` loss with respect to `v`, if `v`
    /// contributed to it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NnError::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let x = va[i * k + p];
                if x == 0.0 {
                    continue;
                }
                for (o, &y) in row.iter_mut().zip(&vb[p * m..(p + 1) * m]) {
                    *o += x * y;
                }
            }
        }
        Ok(self.push(vec![n, m], out, Op::MatMul(a, b)))
    }

    /// Batched product `[B, n, k] x [B, k, m] -> [B, n, m]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(NnError::shape("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (bs, n, k, m) = (sa[0], sa[1], sa[2], sb[2]);
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = vec![0.0; bs * n * m];
        for t in 0..bs {
            let (ao, bo, oo) = (t * n * k, t * k * m, t * n * m);
            for i in 0..n {
                for p in 0..k {
                    let x = va[ao + i * k + p];
                    for j in 0..m {
                        out[oo + i * m + j] += x * vb[bo + p * m + j];
                    }
                }
            }
        }
        Ok(self.push(vec![bs, n, m], out, Op::BatchMatMul(a, b)))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 value.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || s.len() > 3 {
            return Err(NnError::shape("transpose", format!("{s:?}")));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batches = if s.len() == 3 { s[0] } else { 1 };
        let v = self.value(x);
        let mut out = vec![0.0; v.len()];
        for b in 0..batches {
            let o = b * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[o + j * r + i] = v[o + i * c + j];
                }
            }
        }
        let mut shape = s;
        let l = shape.len();
        shape.swap(l - 2, l - 1);
        Ok(self.push(shape, out, Op::TransposeLast(x)))
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !is_suffix(sa, sb) {
            return Err(NnError::shape(op, format!("{sa:?} with {sb:?}")));
        }
        Ok(())
    }

    /// Elementwise `a + b`; `b` may be broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("add", a, b)?;
        let vb = self.value(b);
        let nb = vb.len();
        let out = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + vb[i % nb])
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("sub", a, b)?;
        let vb = self.value(b);
        let nb = vb.len();
        let out = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x - vb[i % nb])
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product with suffix broadcasting of `b`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("mul", a, b)?;
        let vb = self.value(b);
        let nb = vb.len();
        let out = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x * vb[i % nb])
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).iter().map(|&v| v * s).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Sigmoid(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let last = *shape.last().unwrap_or(&1);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(last.max(1)) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.push(shape, out, Op::Softmax(x))
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let shape = self.shape(x).to_vec();
        let last = *shape.last().unwrap_or(&1);
        let mut out = self.value(x).to_vec();
        let mut rstd = Vec::with_capacity(out.len() / last.max(1));
        for row in out.chunks_mut(last.max(1)) {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let r = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        self.push(shape, out, Op::LayerNorm { x, rstd })
    }

    /// Mean over axis 1 of a `[B, T, D]` value.
    pub fn mean_axis1(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] == 0 {
            return Err(NnError::shape("mean_axis1", format!("{s:?}")));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let v = self.value(x);
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            for ti in 0..t {
                let src = &v[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                for (o, &x) in out[bi * d..(bi + 1) * d].iter_mut().zip(src) {
                    *o += x;
                }
            }
        }
        let inv = 1.0 / t as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        Ok(self.push(vec![b, d], out, Op::MeanAxis1(x)))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| NnError::shape("concat", "no inputs"))?;
        let lead = self.shape(*first);
        let lead = lead[..lead.len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(NnError::shape("concat", format!("{s:?} vs lead {lead:?}")));
            }
            widths.push(s[s.len() - 1]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        Ok(self.push(shape, out, Op::Concat(parts.to_vec())))
    }

    /// `len` columns of the last axis starting at `start`.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let w = *s.last().unwrap_or(&0);
        if start + len > w || len == 0 {
            return Err(NnError::shape(
                "slice",
                format!("[{start}, {}) of width {w}", start + len),
            ));
        }
        let rows = self.value(x).len() / w;
        let v = self.value(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&v[r * w + start..r * w + start + len]);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        Ok(self.push(shape, out, Op::Slice { x, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(NnError::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let out = self.value(x).to_vec();
        Ok(self.push(shape, out, Op::Reshape(x)))
    }

    /// 2-D convolution `[B, C, H, W] * [O, C, k, k] (+ b[O])` with zero padding
    /// of `k / 2` on every side.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] || stride == 0 {
            return Err(NnError::shape("conv2d", format!("{sx:?} * {sw:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(NnError::shape(
                    "conv2d bias",
                    format!("{:?}", self.shape(b)),
                ));
            }
        }
        let (bs, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, k) = (sw[0], sw[2]);
        let pad = k / 2;
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(NnError::shape("conv2d", "kernel larger than padded input"));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let (vx, vw) = (self.value(x), self.value(w));
        let mut out = vec![0.0; bs * o * ho * wo];
        for bi in 0..bs {
            for oc in 0..o {
                let obase = (bi * o + oc) * ho * wo;
                if let Some(b) = b {
                    let bias = self.value(b)[oc];
                    out[obase..obase + ho * wo]
                        .iter_mut()
                        .for_each(|v| *v = bias);
                }
                for ic in 0..c {
                    let xbase = (bi * c + ic) * h * wd;
                    for ky in 0..k {
                        let rows = tap_range(ky, stride, pad, h, ho);
                        for kx in 0..k {
                            let wv = vw[((oc * c + ic) * k + ky) * k + kx];
                            let cols = tap_range(kx, stride, pad, wd, wo);
                            for oy in rows.clone() {
                                let xrow = xbase + (oy * stride + ky - pad) * wd;
                                let orow = obase + oy * wo;
                                if stride == 1 {
                                    let ix0 = xrow + cols.start + kx - pad;
                                    let xs = &vx[ix0..ix0 + cols.len()];
                                    for (o, &xv) in
                                        out[orow + cols.start..orow + cols.end].iter_mut().zip(xs)
                                    {
                                        *o += wv * xv;
                                    }
                                } else {
                                    for ox in cols.clone() {
                                        out[orow + ox] += wv * vx[xrow + ox * stride + kx - pad];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(
            vec![bs, o, ho, wo],
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
        ))
    }

    /// 2x2 max pooling with stride 2 over `[B, C, H, W]`; odd trailing rows
    /// and columns are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(NnError::shape("max_pool2", format!("{s:?}")));
        }
        let (bs, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let v = self.value(x);
        let mut out = Vec::with_capacity(bs * c * ho * wo);
        let mut argmax = Vec::with_capacity(bs * c * ho * wo);
        for plane in 0..bs * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if v[idx] > v[best] {
                            best = idx;
                        }
                    }
                    out.push(v[best]);
                    argmax.push(best);
                }
            }
        }
        Ok(self.push(vec![bs, c, ho, wo], out, Op::MaxPool2 { x, argmax }))
    }

    /// Mean squared error against a constant target; returns a scalar.
    pub fn mse(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != target.len() || p.is_empty() {
            return Err(NnError::shape(
                "mse",
                format!("{} predictions vs {} targets", p.len(), target.len()),
            ));
        }
        let loss = p
            .iter()
            .zip(target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / p.len() as f64;
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
        ))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.iter().sum::<f64>() / v.len().max(1) as f64;
        self.push(vec![1], vec![m], Op::Mean(x))
    }

    /// Reverse-mode sweep from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(NnError::NoGraph);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(NnError::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.nodes[loss.0].shape),
            ));
        }
        let Graph { nodes, grads } = self;
        grads.clear();
        grads.resize(nodes.len(), None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else {
                continue;
            };
            let node = &nodes[i];
            backprop(nodes, node, &dy, grads);
            grads[i] = Some(dy);
        }
        Ok(())
    }
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut [f64] {
    let n = nodes[v.0].value.len();
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn backprop(nodes: &[Node], node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
            let (n, k, m) = (sa[0], sa[1], sb[1]);
            let va = &nodes[a.0].value;
            let vb = &nodes[b.0].value;
            {
                let ga = acc(grads, nodes, *a);
                for i in 0..n {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..m {
                            s += dy[i * m + j] * vb[p * m + j];
                        }
                        ga[i * k + p] += s;
                    }
                }
            }
            let gb = acc(grads, nodes, *b);
            for i in 0..n {
                for p in 0..k {
                    let x = va[i * k + p];
                    if x == 0.0 {
                        continue;
                    }
                    for j in 0..m {
                        gb[p * m + j] += x * dy[i * m + j];
                    }
                }
            }
        }
        Op::BatchMatMul(a, b) => {
            let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
            let (bs, n, k, m) = (sa[0], sa[1], sa[2], sb[2]);
            let va = &nodes[a.0].value;
            let vb = &nodes[b.0].value;
            {
                let ga = acc(grads, nodes, *a);
                for t in 0..bs {
                    for i in 0..n {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..m {
                                s += dy[t * n * m + i * m + j] * vb[t * k * m + p * m + j];
                            }
                            ga[t * n * k + i * k + p] += s;
                        }
                    }
                }
            }
            let gb = acc(grads, nodes, *b);
            for t in 0..bs {
                for i in 0..n {
                    for p in 0..k {
                        let x = va[t * n * k + i * k + p];
                        for j in 0..m {
                            gb[t * k * m + p * m + j] += x * dy[t * n * m + i * m + j];
                        }
                    }
                }
            }
        }
        Op::TransposeLast(x) => {
            let s = &nodes[x.0].shape;
            let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
            let batches = if s.len() == 3 { s[0] } else { 1 };
            let gx = acc(grads, nodes, *x);
            for b in 0..batches {
                let o = b * r * c;
                for i in 0..r {
                    for j in 0..c {
                        gx[o + i * c + j] += dy[o + j * r + i];
                    }
                }
            }
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) {
                -1.0
            } else {
                1.0
            };
            {
                let ga = acc(grads, nodes, *a);
                for (g, d) in ga.iter_mut().zip(dy) {
                    *g += d;
                }
            }
            let gb = acc(grads, nodes, *b);
            let nb = gb.len();
            for (i, d) in dy.iter().enumerate() {
                gb[i % nb] += sign * d;
            }
        }
        Op::Mul(a, b) => {
            let va = &nodes[a.0].value;
            let vb = &nodes[b.0].value;
            let nb = vb.len();
            {
                let ga = acc(grads, nodes, *a);
                for (i, d) in dy.iter().enumerate() {
                    ga[i] += d * vb[i % nb];
                }
            }
            let gb = acc(grads, nodes, *b);
            for (i, d) in dy.iter().enumerate() {
                gb[i % nb] += d * va[i];
            }
        }
        Op::Scale(x, s) => {
            let gx = acc(grads, nodes, *x);
            for (g, d) in gx.iter_mut().zip(dy) {
                *g += s * d;
            }
        }
        Op::Relu(x) => {
            let vx = &nodes[x.0].value;
            let gx = acc(grads, nodes, *x);
            for ((g, d), &v) in gx.iter_mut().zip(dy).zip(vx) {
                if v > 0.0 {
                    *g += d;
                }
            }
        }
        Op::Sigmoid(x) => {
            let gx = acc(grads, nodes, *x);
            for ((g, d), y) in gx.iter_mut().zip(dy).zip(&node.value) {
                *g += d * y * (1.0 - y);
            }
        }
        Op::Softmax(x) => {
            let last = *node.shape.last().unwrap_or(&1);
            let gx = acc(grads, nodes, *x);
            for ((grow, drow), yrow) in gx
                .chunks_mut(last)
                .zip(dy.chunks(last))
                .zip(node.value.chunks(last))
            {
                let dot: f64 = drow.iter().zip(yrow).map(|(d, y)| d * y).sum();
                for ((g, d), y) in grow.iter_mut().zip(drow).zip(yrow) {
                    *g += y * (d - dot);
                }
            }
        }
        Op::LayerNorm { x, rstd } => {
            let last = *node.shape.last().unwrap_or(&1);
            let n = last as f64;
            let gx = acc(grads, nodes, *x);
            for (((grow, drow), yrow), r) in gx
                .chunks_mut(last)
                .zip(dy.chunks(last))
                .zip(node.value.chunks(last))
                .zip(rstd)
            {
                let md = drow.iter().sum::<f64>() / n;
                let mdy = drow.iter().zip(yrow).map(|(d, y)| d * y).sum::<f64>() / n;
                for ((g, d), y) in grow.iter_mut().zip(drow).zip(yrow) {
                    *g += r * (d - md - y * mdy);
                }
            }
        }
        Op::MeanAxis1(x) => {
            let s = &nodes[x.0].shape;
            let (b, t, d) = (s[0], s[1], s[2]);
            let inv = 1.0 / t as f64;
            let gx = acc(grads, nodes, *x);
            for bi in 0..b {
                for ti in 0..t {
                    for di in 0..d {
                        gx[(bi * t + ti) * d + di] += dy[bi * d + di] * inv;
                    }
                }
            }
        }
        Op::Concat(parts) => {
            let total = *node.shape.last().unwrap();
            let rows = node.value.len() / total;
            let mut offset = 0;
            for p in parts {
                let w = *nodes[p.0].shape.last().unwrap();
                let gp = acc(grads, nodes, *p);
                for r in 0..rows {
                    for j in 0..w {
                        gp[r * w + j] += dy[r * total + offset + j];
                    }
                }
                offset += w;
            }
        }
        Op::Slice { x, start } => {
            let w = *nodes[x.0].shape.last().unwrap();
            let len = *node.shape.last().unwrap();
            let rows = node.value.len() / len;
            let gx = acc(grads, nodes, *x);
            for r in 0..rows {
                for j in 0..len {
                    gx[r * w + start + j] += dy[r * len + j];
                }
            }
        }
        Op::Reshape(x) => {
            let gx = acc(grads, nodes, *x);
            for (g, d) in gx.iter_mut().zip(dy) {
                *g += d;
            }
        }
        Op::Conv2d {
            x,
            w,
            b,
            stride,
            pad,
        } => {
            let sx = &nodes[x.0].shape;
            let sw = &nodes[w.0].shape;
            let (bs, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
            let (o, k) = (sw[0], sw[2]);
            let (ho, wo) = (node.shape[2], node.shape[3]);
            let vx = &nodes[x.0].value;
            let vw = &nodes[w.0].value;
            let (stride, pad) = (*stride, *pad);
            if let Some(b) = b {
                let gb = acc(grads, nodes, *b);
                for bi in 0..bs {
                    for oc in 0..o {
                        let base = (bi * o + oc) * ho * wo;
                        gb[oc] += dy[base..base + ho * wo].iter().sum::<f64>();
                    }
                }
            }
            // Both gradients share the loop nest; accumulate locally to keep
            // the two mutable borrows of `grads` apart.
            let mut gx = vec![0.0; vx.len()];
            let mut gw = vec![0.0; vw.len()];
            for bi in 0..bs {
                for oc in 0..o {
                    let obase = (bi * o + oc) * ho * wo;
                    for ic in 0..c {
                        let xbase = (bi * c + ic) * h * wd;
                        for ky in 0..k {
                            let rows = tap_range(ky, stride, pad, h, ho);
                            for kx in 0..k {
                                let widx = ((oc * c + ic) * k + ky) * k + kx;
                                let wv = vw[widx];
                                let cols = tap_range(kx, stride, pad, wd, wo);
                                let mut gwv = 0.0;
                                for oy in rows.clone() {
                                    let xrow = xbase + (oy * stride + ky - pad) * wd;
                                    let orow = obase + oy * wo;
                                    if stride == 1 {
                                        let ix0 = xrow + cols.start + kx - pad;
                                        let ds = &dy[orow + cols.start..orow + cols.end];
                                        for (g, &d) in gx[ix0..ix0 + cols.len()].iter_mut().zip(ds)
                                        {
                                            *g += wv * d;
                                        }
                                        gwv += vx[ix0..ix0 + cols.len()]
                                            .iter()
                                            .zip(ds)
                                            .map(|(a, b)| a * b)
                                            .sum::<f64>();
                                    } else {
                                        for ox in cols.clone() {
                                            let ix = xrow + ox * stride + kx - pad;
                                            let d = dy[orow + ox];
                                            gx[ix] += wv * d;
                                            gwv += vx[ix] * d;
                                        }
                                    }
                                }
                                gw[widx] += gwv;
                            }
                        }
                    }
                }
            }
            for (g, v) in acc(grads, nodes, *x).iter_mut().zip(gx) {
                *g += v;
            }
            for (g, v) in acc(grads, nodes, *w).iter_mut().zip(gw) {
                *g += v;
            }
        }
        Op::MaxPool2 { x, argmax } => {
            let gx = acc(grads, nodes, *x);
            for (d, &idx) in dy.iter().zip(argmax) {
                gx[idx] += d;
            }
        }
        Op::Mse { pred, target } => {
            let vp = &nodes[pred.0].value;
            let scale = 2.0 * dy[0] / vp.len() as f64;
            let gp = acc(grads, nodes, *pred);
            for ((g, p), t) in gp.iter_mut().zip(vp).zip(target) {
                *g += scale * (p - t);
            }
        }
        Op::Mean(x) => {
            let n = nodes[x.0].value.len() as f64;
            let gx = acc(grads, nodes, *x);
            for g in gx.iter_mut() {
                *g += dy[0] / n;
            }
        }
    }
}

/// Output positions whose input index `o * stride + tap - pad` lies in
/// `0..n_in`, clipped to `0..n_out`.
fn tap_range(
    tap: usize,
    stride: usize,
    pad: usize,
    n_in: usize,
    n_out: usize,
) -> std::ops::Range<usize> {
    let lo = if tap >= pad {
        0
    } else {
        (pad - tap).div_ceil(stride)
    };
    let hi = if n_in + pad > tap {
        ((n_in - 1 + pad - tap) / stride + 1).min(n_out)
    } else {
        0
    };
    lo..hi.max(lo)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn backward_without_graph_fails() {
        let mut g = Graph::new();
        assert!(matches!(g.backward(Var(0)), Err(NnError::NoGraph)));
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(vec![3]));
        let y = g.sigmoid(x);
        assert_eq!(g.value(y), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn softmax_of_constant_is_uniform() {
        let mut g = Graph::new();
        for n in 1..8 {
            let x = g.input(Tensor::full(vec![2, n], 3.7));
            let y = g.softmax(x);
            for &v in g.value(y) {
                assert!((v - 1.0 / n as f64).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(vec![2, 3]));
        let b = g.input(Tensor::zeros(vec![2, 3]));
        assert!(matches!(g.matmul(a, b), Err(NnError::ShapeMismatch { .. })));
    }

    #[test]
    fn broadcast_add_rejects_non_suffix() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(vec![2, 3]));
        let b = g.input(Tensor::zeros(vec![2]));
        assert!(g.add(a, b).is_err());
        let c = g.input(Tensor::zeros(vec![3]));
        assert!(g.add(a, c).is_ok());
    }

    #[test]
    fn conv_identity_kernel_copies_input() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let x = g.input(t(&[1, 1, 4, 4], &data));
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = g.input(t(&[1, 1, 3, 3], &k));
        let y = g.conv2d(x, w, None, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 4, 4]);
        assert_eq!(g.value(y), &data[..]);
    }

    #[test]
    fn tap_range_matches_bounds_check() {
        for stride in 1..4 {
            for pad in 0..3 {
                for tap in 0..5 {
                    for n_in in 1..9 {
                        let n_out: usize = n_in + 2;
                        let want: Vec<usize> = (0..n_out)
                            .filter(|&o| {
                                let i = (o * stride + tap) as isize - pad as isize;
                                i >= 0 && i < n_in as isize
                            })
                            .collect();
                        let got: Vec<usize> = tap_range(tap, stride, pad, n_in, n_out).collect();
                        assert_eq!(got, want, "tap {tap} stride {stride} pad {pad} n_in {n_in}");
                    }
                }
            }
        }
    }

    #[test]
    fn max_pool_picks_window_max() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 1, 2, 4], &[1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 7.0, 6.0]));
        let y = g.max_pool2(x).unwrap();
        assert_eq!(g.value(y), &[5.0, 7.0]);
        let l = g.mean(y);
        g.backward(l).unwrap();
        assert_eq!(
            g.grad(x).unwrap(),
            &[0.0, 0.5, 0.0, 0.0, 0.0, 0.0, 0.5, 0.0]
        );
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut g = Graph::new();
        let x = g.input(t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 10.0, 3.0]));
        let y = g.layer_norm(x, 0.0);
        for row in g.value(y).chunks(4) {
            let m: f64 = row.iter().sum::<f64>() / 4.0;
            let v: f64 = row.iter().map(|r| r * r).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-12);
        }
    }
}
