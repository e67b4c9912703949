use super::{axis_split, kernels, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    /// a · bᵀ
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    /// x · s where s holds a single value
    MulScalar(Var, Var),
    Scale(Var, f32),
    Sum(Var),
    Mean(Var),
    Softmax(Var, usize),
    LogSoftmax(Var),
    MaskedSoftmax(Var, Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: Vec<(f32, f32)> },
    Gelu(Var),
    Sigmoid(Var),
    Recip(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, rows: Vec<usize> },
    MeanRows(Var),
    RepeatRows(Var),
    Reshape(Var),
    Gather { x: Var, idx: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records primitive ops in execution order for one reverse pass.
///
/// Nodes are appended as ops run, so every node's inputs precede it.
/// [`Tape::backward`] replays the record once; afterwards the tape is spent.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    /// Set once any recorded value is NaN or infinite.
    poisoned: bool,
}

/// Gradients of a scalar loss with respect to every leaf that requires grad.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it participates in gradients iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Records a leaf that requires grad regardless of the tensor's own flag.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// True when some recorded value is not finite.
    pub fn is_poisoned(&self) -> bool {
        self.poisoned
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        if !self.poisoned && !value.is_finite() {
            self.poisoned = true;
        }
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ` for `a[m×k]`, `b[n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims2();
        let (n, k2) = bv.dims2();
        if k != k2 || av.rank() != 2 || bv.rank() != 2 {
            return Err(mismatch("matmul_nt", av, bv));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt_acc(av.data(), bv.data(), &mut out, m, k, n);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNt(a, b), ng))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: fn(f32, f32) -> f32, op: Op) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch(name, av, bv));
        }
        let out = av.zip_map(bv, f)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(&mut self, x: Var, r: Var, name: &'static str, f: fn(f32, f32) -> f32) -> Result<(Tensor, bool)> {
        let (xv, rv) = (self.value(x), self.value(r));
        let (rows, cols) = xv.dims2();
        if rv.numel() != cols {
            return Err(mismatch(name, xv, rv));
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_exact_mut(cols) {
            for (o, &b) in row.iter_mut().zip(rv.data()) {
                *o = f(*o, b);
            }
        }
        debug_assert_eq!(out.len(), rows * cols);
        Ok((Tensor::from_parts(xv.shape().to_vec(), out), self.ng(&[x, r])))
    }

    /// Adds a length-`n` row vector to every row of `x[m×n]`.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let (out, ng) = self.row_broadcast(x, r, "add_row", |a, b| a + b)?;
        Ok(self.push(out, Op::AddRow(x, r), ng))
    }

    /// Scales every row of `x[m×n]` elementwise by a length-`n` vector.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let (out, ng) = self.row_broadcast(x, r, "mul_row", |a, b| a * b)?;
        Ok(self.push(out, Op::MulRow(x, r), ng))
    }

    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.numel() != 1 {
            return Err(mismatch("mul_scalar", self.value(x), sv));
        }
        let k = sv.data()[0];
        let out = self.value(x).map(|v| v * k);
        let ng = self.ng(&[x, s]);
        Ok(self.push(out, Op::MulScalar(x, s), ng))
    }

    pub fn scale(&mut self, x: Var, k: f32) -> Var {
        let out = self.value(x).map(|v| v * k);
        let ng = self.ng(&[x]);
        self.push(out, Op::Scale(x, k), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|&v| f64::from(v)).sum::<f64>();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s as f32), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().map(|&v| f64::from(v)).sum::<f64>() / xv.numel() as f64;
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s as f32), Op::Mean(x), ng)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.value(x).softmax(axis)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Softmax(x, axis), ng))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (_, cols) = xv.dims2();
        let mut out = xv.data().to_vec();
        for row in out.chunks_exact_mut(cols) {
            kernels::log_softmax_row(row);
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        let ng = self.ng(&[x]);
        self.push(out, Op::LogSoftmax(x), ng)
    }

    /// Row softmax of `scores[m×n]` reweighted per column by `mask[n]`
    /// (equivalently `softmax(scores + ln mask)`).
    pub fn masked_softmax(&mut self, scores: Var, mask: Var) -> Result<Var> {
        let (sv, mv) = (self.value(scores), self.value(mask));
        let (rows, cols) = sv.dims2();
        if mv.numel() != cols {
            return Err(mismatch("masked_softmax", sv, mv));
        }
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            kernels::masked_softmax_row(
                &sv.data()[r * cols..(r + 1) * cols],
                mv.data(),
                &mut out[r * cols..(r + 1) * cols],
            );
        }
        let out = Tensor::from_parts(sv.shape().to_vec(), out);
        if !out.is_finite() {
            return Err(TensorError::NonFinite("masked_softmax"));
        }
        let ng = self.ng(&[scores, mask]);
        Ok(self.push(out, Op::MaskedSoftmax(scores, mask), ng))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        if eps <= 0.0 || !eps.is_finite() {
            return Err(TensorError::BadEpsilon(eps));
        }
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let (rows, cols) = xv.dims2();
        if gv.numel() != cols || bv.numel() != cols {
            return Err(mismatch("layer_norm", xv, gv));
        }
        let mut out = vec![0.0; rows * cols];
        let mut stats = Vec::with_capacity(rows);
        kernels::layer_norm(xv.data(), gv.data(), bv.data(), eps, rows, cols, &mut out, Some(&mut stats));
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, stats }, ng))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::gelu);
        let ng = self.ng(&[x]);
        self.push(out, Op::Gelu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::sigmoid);
        let ng = self.ng(&[x]);
        self.push(out, Op::Sigmoid(x), ng)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| 1.0 / v);
        let ng = self.ng(&[x]);
        self.push(out, Op::Recip(x), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.dims2();
        if start + len > cols || len == 0 {
            return Err(TensorError::Invalid(format!("column slice {start}..{} of {cols}", start + len)));
        }
        let mut out = Vec::with_capacity(rows * len);
        for row in xv.data().chunks_exact(cols) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::from_parts(vec![rows, len], out), Op::SliceCols { x, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).dims2().0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).dims2().1).collect();
        if parts.iter().any(|&p| self.value(p).dims2().0 != rows) {
            return Err(TensorError::Invalid("concat_cols row count mismatch".into()));
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(Tensor::from_parts(vec![rows, total], out), Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).dims2().1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2();
            if c != cols {
                return Err(mismatch("concat_rows", self.value(parts[0]), self.value(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let ng = self.ng(parts);
        Ok(self.push(Tensor::from_parts(vec![rows, cols], out), Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (n, cols) = xv.dims2();
        if rows.is_empty() || rows.iter().any(|&r| r >= n) {
            return Err(TensorError::Invalid(format!("row gather out of range for {n} rows")));
        }
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            out.extend_from_slice(&xv.data()[r * cols..(r + 1) * cols]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![rows.len(), cols], out),
            Op::GatherRows { x, rows: rows.to_vec() },
            ng,
        ))
    }

    /// Column means of `x[m×n]` as a `[1×n]` row.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dims2();
        let mut out = vec![0.0; cols];
        for row in xv.data().chunks_exact(cols) {
            add_into(&mut out, row);
        }
        let inv = 1.0 / rows as f32;
        out.iter_mut().for_each(|v| *v *= inv);
        let ng = self.ng(&[x]);
        self.push(Tensor::from_parts(vec![1, cols], out), Op::MeanRows(x), ng)
    }

    /// Tiles a `[1×n]` row into `[m×n]`.
    pub fn repeat_rows(&mut self, x: Var, m: usize) -> Var {
        let row = self.value(x).data().to_vec();
        let cols = row.len();
        let out: Vec<f32> = std::iter::repeat_n(row, m).flatten().collect();
        let ng = self.ng(&[x]);
        self.push(Tensor::from_parts(vec![m, cols], out), Op::RepeatRows(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out.with_requires_grad(false), Op::Reshape(x), ng))
    }

    /// Elementwise gather `out[i] = x[idx[i]]` reshaped to `shape`.
    pub fn gather(&mut self, x: Var, idx: &[usize], shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if shape.iter().product::<usize>() != idx.len() || idx.iter().any(|&i| i >= xv.numel()) {
            return Err(TensorError::Invalid("gather index or shape out of range".into()));
        }
        let out: Vec<f32> = idx.iter().map(|&i| xv.data()[i]).collect();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), out), Op::Gather { x, idx: idx.to_vec() }, ng))
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape's record.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        if !lv.is_finite() {
            return Err(TensorError::NonFinite("loss"));
        }
        if self.poisoned {
            return Err(TensorError::NonFinite("intermediate value"));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                if matches!(node.op, Op::Leaf) && node.needs_grad {
                    let data = g.unwrap_or_else(|| vec![0.0; node.value.numel()]);
                    Some(Tensor::from_parts(node.value.shape().to_vec(), data))
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, idx: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        // accumulates into an input's gradient buffer, allocating on first use
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f32])| {
            let input = &nodes[v.0];
            if !input.needs_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; input.value.numel()]);
            f(buf);
        };
        let val = |v: Var| &nodes[v.0].value;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2();
                let n = val(*b).dims2().1;
                let (ad, bd) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |ga| kernels::matmul_nt_acc(g, bd, ga, m, n, k));
                acc(*b, &mut |gb| kernels::matmul_tn_acc(ad, g, gb, m, k, n));
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = val(*a).dims2();
                let n = val(*b).dims2().0;
                let (ad, bd) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |ga| kernels::matmul_acc(g, bd, ga, m, n, k));
                acc(*b, &mut |gb| kernels::matmul_tn_acc(g, ad, gb, m, n, k));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bd[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * ad[i];
                    }
                });
            }
            Op::AddRow(x, r) => {
                let cols = val(*r).numel();
                acc(*x, &mut |gx| add_into(gx, g));
                acc(*r, &mut |gr| {
                    for row in g.chunks_exact(cols) {
                        add_into(gr, row);
                    }
                });
            }
            Op::MulRow(x, r) => {
                let cols = val(*r).numel();
                let (xd, rd) = (val(*x).data(), val(*r).data());
                acc(*x, &mut |gx| {
                    for (i, v) in gx.iter_mut().enumerate() {
                        *v += g[i] * rd[i % cols];
                    }
                });
                acc(*r, &mut |gr| {
                    for (i, (&gi, &xi)) in g.iter().zip(xd).enumerate() {
                        gr[i % cols] += gi * xi;
                    }
                });
            }
            Op::MulScalar(x, s) => {
                let k = val(*s).data()[0];
                let xd = val(*x).data();
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi * k));
                acc(*s, &mut |gs| gs[0] += g.iter().zip(xd).map(|(&a, &b)| a * b).sum::<f32>());
            }
            Op::Scale(x, k) => acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi * k)),
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let inv = g[0] / val(*x).numel() as f32;
                acc(*x, &mut |gx| gx.iter_mut().for_each(|d| *d += inv));
            }
            Op::Softmax(x, axis) => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(node.value.shape(), *axis).expect("axis checked at record");
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let dot: f32 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                            for l in 0..len {
                                gx[at(l)] += y[at(l)] * (g[at(l)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let y = node.value.data();
                let cols = node.value.dims2().1;
                acc(*x, &mut |gx| {
                    for (r, grow) in g.chunks_exact(cols).enumerate() {
                        let gsum: f32 = grow.iter().sum();
                        for c in 0..cols {
                            gx[r * cols + c] += grow[c] - y[r * cols + c].exp() * gsum;
                        }
                    }
                });
            }
            Op::MaskedSoftmax(s, m) => {
                let p = node.value.data();
                let (rows, cols) = node.value.dims2();
                let (sd, md) = (val(*s).data(), val(*m).data());
                // per-row Σ_k g_k p_k
                let dots: Vec<f32> = (0..rows)
                    .map(|r| (0..cols).map(|c| g[r * cols + c] * p[r * cols + c]).sum())
                    .collect();
                acc(*s, &mut |gs| {
                    for r in 0..rows {
                        for c in 0..cols {
                            let i = r * cols + c;
                            gs[i] += p[i] * (g[i] - dots[r]);
                        }
                    }
                });
                acc(*m, &mut |gm| {
                    for r in 0..rows {
                        let row = &sd[r * cols..(r + 1) * cols];
                        let max = row
                            .iter()
                            .zip(md)
                            .filter(|(_, &w)| w > 0.0)
                            .fold(f32::NEG_INFINITY, |a, (&v, _)| a.max(v));
                        let z: f32 = row.iter().zip(md).map(|(&v, &w)| w * (v - max).exp()).sum();
                        for c in 0..cols {
                            let e = (row[c] - max).exp() / z;
                            gm[c] += e * (g[r * cols + c] - dots[r]);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let (rows, cols) = val(*x).dims2();
                let xd = val(*x).data();
                let gd = val(*gamma).data();
                let xhat = |r: usize, c: usize| (xd[r * cols + c] - stats[r].0) * stats[r].1;
                acc(*gamma, &mut |gg| {
                    for r in 0..rows {
                        for c in 0..cols {
                            gg[c] += g[r * cols + c] * xhat(r, c);
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for row in g.chunks_exact(cols) {
                        add_into(gb, row);
                    }
                });
                acc(*x, &mut |gx| {
                    let n = cols as f32;
                    for r in 0..rows {
                        let rstd = stats[r].1;
                        let mut sum_dy = 0.0;
                        let mut sum_dy_xhat = 0.0;
                        for c in 0..cols {
                            let dy = g[r * cols + c] * gd[c];
                            sum_dy += dy;
                            sum_dy_xhat += dy * xhat(r, c);
                        }
                        for c in 0..cols {
                            let dy = g[r * cols + c] * gd[c];
                            gx[r * cols + c] += rstd * (dy - sum_dy / n - xhat(r, c) * sum_dy_xhat / n);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xd = val(*x).data();
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * kernels::gelu_grad(xd[i]);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Recip(x) => {
                let y = node.value.data();
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] -= g[i] * y[i] * y[i];
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let cols = val(*x).dims2().1;
                let len = node.value.dims2().1;
                acc(*x, &mut |gx| {
                    for (r, grow) in g.chunks_exact(len).enumerate() {
                        add_into(&mut gx[r * cols + start..r * cols + start + len], grow);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.dims2().1;
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).dims2().1;
                    acc(p, &mut |gp| {
                        for (r, grow) in gp.chunks_exact_mut(w).enumerate() {
                            add_into(grow, &g[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).numel();
                    acc(p, &mut |gp| add_into(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::GatherRows { x, rows } => {
                let cols = val(*x).dims2().1;
                acc(*x, &mut |gx| {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut gx[r * cols..(r + 1) * cols], &g[i * cols..(i + 1) * cols]);
                    }
                });
            }
            Op::MeanRows(x) => {
                let (rows, cols) = val(*x).dims2();
                let inv = 1.0 / rows as f32;
                acc(*x, &mut |gx| {
                    for row in gx.chunks_exact_mut(cols) {
                        row.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi * inv);
                    }
                });
            }
            Op::RepeatRows(x) => {
                let cols = val(*x).numel();
                acc(*x, &mut |gx| {
                    for row in g.chunks_exact(cols) {
                        add_into(gx, row);
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |gx| add_into(gx, g)),
            Op::Gather { x, idx } => acc(*x, &mut |gx| {
                for (&i, &gi) in idx.iter().zip(g) {
                    gx[i] += gi;
                }
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-2.0..2.0))
    }

    /// Compares tape gradients with central differences for a builder that
    /// maps one input to a scalar.
    fn check(shape: &[usize], seed: u64, build: impl Fn(&mut Tape, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, shape);
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let loss = build(&mut tape, xv);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(xv).unwrap();
        let numeric = finite_diff(
            |t| {
                let mut tape = Tape::new();
                let v = tape.constant(t.clone());
                let l = build(&mut tape, v);
                f64::from(tape.value(l).data()[0])
            },
            &x,
            1e-2,
        );
        for (i, (&a, &n)) in analytic.data().iter().zip(&numeric).enumerate() {
            let a = f64::from(a);
            let err = (a - n).abs() / a.abs().max(n.abs()).max(1.0);
            assert!(err < 1e-3, "coord {i}: analytic {a} numeric {n}");
        }
    }

    /// Fixed random weighting so the loss depends on every output entry.
    fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Var {
        let shape = tape.value(y).shape().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = tape.constant(rand_tensor(&mut rng, &shape));
        let p = tape.mul(y, w).unwrap();
        tape.sum(p)
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::from_fn(&[2, 3], |i| i as f32));
        let loss = tape.sum(w);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn square_gradient_is_twice_input() {
        let mut tape = Tape::new();
        let data = vec![0.5, -1.0, 3.0];
        let w = tape.param(Tensor::new(vec![3], data.clone()).unwrap());
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        let expected: Vec<f32> = data.iter().map(|x| 2.0 * x).collect();
        assert_eq!(g.get(w).unwrap().data(), expected.as_slice());
    }

    #[test]
    fn matmul_gradient_is_ones_times_bt() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let mut tape = Tape::new();
        let av = tape.param(a.clone());
        let bv = tape.constant(b.clone());
        let c = tape.matmul(av, bv).unwrap();
        let loss = tape.sum(c);
        let g = tape.backward(loss).unwrap();
        // ones(3×2) × bᵀ: each row equals the row sums of b
        for r in 0..3 {
            for p in 0..4 {
                let expected = b.data()[p * 2] + b.data()[p * 2 + 1];
                assert!((g.get(av).unwrap().data()[r * 4 + p] - expected).abs() < 1e-6);
            }
        }
        // and the finite-difference oracle agrees
        let fd = finite_diff(
            |t| f64::from(t.matmul(&b).unwrap().sum()),
            &a,
            1e-3,
        );
        for (x, y) in g.get(av).unwrap().data().iter().zip(&fd) {
            assert!((f64::from(*x) - y).abs() < 1e-3);
        }
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        check(&[3, 4], 1, |t, x| {
            let w = t.constant(Tensor::from_fn(&[4, 5], |i| (i as f32 * 0.37).sin()));
            let y = t.matmul(x, w).unwrap();
            weighted_sum(t, y, 10)
        });
        check(&[3, 4], 2, |t, x| {
            let w = t.constant(Tensor::from_fn(&[5, 4], |i| (i as f32 * 0.21).cos()));
            let y = t.matmul_nt(x, w).unwrap();
            weighted_sum(t, y, 11)
        });
        check(&[2, 5], 3, |t, x| {
            let y = t.softmax(x, 1).unwrap();
            weighted_sum(t, y, 12)
        });
        check(&[3, 2], 13, |t, x| {
            let y = t.softmax(x, 0).unwrap();
            weighted_sum(t, y, 14)
        });
        check(&[2, 5], 4, |t, x| {
            let y = t.log_softmax(x);
            weighted_sum(t, y, 13)
        });
        check(&[3, 6], 5, |t, x| {
            let g = t.constant(Tensor::from_fn(&[6], |i| 0.5 + i as f32 * 0.1));
            let b = t.constant(Tensor::from_fn(&[6], |i| i as f32 * -0.2));
            let y = t.layer_norm(x, g, b, 1e-5).unwrap();
            weighted_sum(t, y, 14)
        });
        check(&[2, 4], 6, |t, x| {
            let y = t.gelu(x);
            weighted_sum(t, y, 15)
        });
        check(&[2, 4], 7, |t, x| {
            let y = t.sigmoid(x);
            weighted_sum(t, y, 16)
        });
        check(&[2, 4], 8, |t, x| {
            let s = t.slice_cols(x, 1, 2).unwrap();
            let c = t.concat_cols(&[s, x]).unwrap();
            let r = t.concat_rows(&[c, c]).unwrap();
            let gsel = t.gather_rows(r, &[3, 0, 0]).unwrap();
            let flat = t.gather(gsel, &[5, 0, 17, 5], &[2, 2]).unwrap();
            let c2 = t.concat_rows(&[flat, flat]).unwrap();
            let l1 = weighted_sum(t, gsel, 17);
            let l2 = weighted_sum(t, c2, 19);
            t.add(l1, l2).unwrap()
        });
        check(&[3, 4], 9, |t, x| {
            let m = t.mean_rows(x);
            let rep = t.repeat_rows(m, 2);
            let row = t.constant(Tensor::from_fn(&[4], |i| i as f32 - 1.5));
            let a = t.add_row(rep, row).unwrap();
            let b = t.mul_row(a, row).unwrap();
            weighted_sum(t, b, 18)
        });
    }

    #[test]
    fn masked_softmax_gradients_for_scores_and_mask() {
        check(&[3, 4], 20, |t, x| {
            let m = t.constant(Tensor::new(vec![4], vec![1.0, 0.3, 0.0, 0.8]).unwrap());
            let y = t.masked_softmax(x, m).unwrap();
            weighted_sum(t, y, 21)
        });
        // gradient wrt the mask itself, away from zero
        check(&[4], 22, |t, m_raw| {
            let m = t.sigmoid(m_raw);
            let s = t.constant(Tensor::from_fn(&[3, 4], |i| (i as f32 * 0.7).sin()));
            let y = t.masked_softmax(s, m).unwrap();
            weighted_sum(t, y, 23)
        });
    }

    #[test]
    fn scalar_ops_gradients() {
        check(&[2, 3], 30, |t, x| {
            let s = t.sum(x);
            let r = t.recip(s);
            let y = t.mul_scalar(x, r).unwrap();
            let z = t.scale(y, 0.5);
            let sub = t.sub(z, x).unwrap();
            let m = t.mean(sub);
            let q = t.mul(m, m).unwrap();
            t.sum(q)
        });
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::ones(&[2]));
        assert!(matches!(tape.backward(w), Err(TensorError::NotScalar(_))));
        let s = tape.sum(w);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(TensorError::TapeConsumed)));
    }

    #[test]
    fn non_finite_intermediate_blocks_backward() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::new(vec![2], vec![1.0, f32::INFINITY]).unwrap());
        let z = tape.scale(w, 0.0);
        let s = tape.sum(z);
        assert!(tape.is_poisoned());
        assert!(matches!(tape.backward(s), Err(TensorError::NonFinite(_))));
    }

    #[test]
    fn unreached_param_gets_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::ones(&[2]));
        let b = tape.param(Tensor::ones(&[3]));
        let s = tape.sum(a);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn ops_are_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.param(Tensor::from_fn(&[4, 8], |i| (i as f32).sin()));
            let y = tape.softmax(x, 1).unwrap();
            let z = tape.gelu(y);
            let l = tape.sum(z);
            let g = tape.backward(l).unwrap();
            (tape.value(z).clone(), g.get(x).unwrap().clone())
        };
        let (a, ga) = run();
        let (b, gb) = run();
        assert_eq!(a.data(), b.data());
        assert_eq!(ga.data(), gb.data());
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_sum_to_one(row in proptest::collection::vec(-1e4f32..1e4, 1..16)) {
            let n = row.len();
            let s = Tensor::new(vec![1, n], row).unwrap().softmax(1).unwrap();
            let total: f64 = s.data().iter().map(|&v| f64::from(v)).sum();
            proptest::prop_assert!((total - 1.0).abs() < 1e-6);
            proptest::prop_assert!(s.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn layer_norm_standardizes(row in proptest::collection::vec(-10f32..10.0, 4..32)) {
            let n = row.len();
            let spread = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b))
                - row.iter().fold(f32::INFINITY, |a, &b| a.min(b));
            proptest::prop_assume!(spread > 1e-2);
            let y = Tensor::new(vec![1, n], row)
                .unwrap()
                .layer_norm(&Tensor::ones(&[n]), &Tensor::zeros(&[n]), 1e-9)
                .unwrap();
            let mean = y.data().iter().map(|&v| f64::from(v)).sum::<f64>() / n as f64;
            let var = y.data().iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n as f64;
            proptest::prop_assert!(mean.abs() < 1e-5);
            proptest::prop_assert!((var - 1.0).abs() < 1e-4);
        }
    }
}
