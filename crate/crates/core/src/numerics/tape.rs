use super::kernels;
use super::{NumericsError, Tensor};

/// Handle to a value recorded on a [`Tape`].
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
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    LogSoftmax(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Log(Var),
    Exp(Var),
    Silu(Var),
    Sum(Var),
    Mean(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
    Attention(Box<AttentionSaved>),
}

#[derive(Debug)]
struct AttentionSaved {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    q_start: usize,
    /// Per head, `rows × keys` softmax probabilities (masked entries are 0).
    probs: Vec<Vec<f64>>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records primitive applications in topological order for one
/// forward/backward cycle.
///
/// Every primitive checks its output for non-finite values and fails with
/// [`NumericsError::NonFinite`] instead of propagating them. After
/// [`Tape::backward`] the tape is spent; call [`Tape::reset`] to reuse it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    spent: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root with respect to `var`; zero when `var` does not
    /// influence the root.
    pub fn wrt(&self, var: Var) -> Tensor {
        let shape = self.shapes[var.0].clone();
        match &self.grads[var.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        let shape = self.shapes[var.0].clone();
        match self.grads[var.0].take() {
            Some(g) => Tensor::from_parts(shape, g),
            None => Tensor::zeros(&shape),
        }
    }
}

fn shape_err(op: &'static str, detail: String) -> NumericsError {
    NumericsError::Shape { op, detail }
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

    /// Clears every recorded node so the tape can record a new forward pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.spent = false;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, op: &'static str, value: Tensor, node_op: Op, needs_grad: bool) -> Result<Var, NumericsError> {
        if self.spent {
            return Err(NumericsError::SpentTape);
        }
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op });
        }
        self.nodes.push(Node { value, op: node_op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records an input tensor. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var, NumericsError> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var, NumericsError> {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var, NumericsError> {
        self.leaf(value, true)
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize), NumericsError> {
        let t = &self.nodes[v.0].value;
        match t.shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(shape_err(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", format!("inner dims {k} vs {k2}")));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), ng)
    }

    /// `a[m×k] · b[n×k]ᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = self.dims2("matmul_bt", a)?;
        let (n, k2) = self.dims2("matmul_bt", b)?;
        if k != k2 {
            return Err(shape_err("matmul_bt", format!("inner dims {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        self.push("matmul_bt", Tensor::from_parts(vec![m, n], out), Op::MatMulBt(a, b), ng)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericsError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, node: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var, NumericsError> {
        self.same_shape(op, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(op, value, node, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a length-`c` vector to every row of an `r×c` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, NumericsError> {
        let (r, c) = self.dims2("add_row", a)?;
        if self.value(bias).numel() != c {
            return Err(shape_err("add_row", format!("bias of {} for {c} columns", self.value(bias).numel())));
        }
        let mut data = self.value(a).data().to_vec();
        let b = self.value(bias).data();
        for row in data.chunks_mut(c) {
            for (x, &bv) in row.iter_mut().zip(b) {
                *x += bv;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        self.push("add_row", Tensor::from_parts(vec![r, c], data), Op::AddRow(a, bias), ng)
    }

    fn map(&mut self, op: &'static str, a: Var, node: Op, f: impl Fn(f64) -> f64) -> Result<Var, NumericsError> {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        let ng = self.ng(a);
        self.push(op, value, node, ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, NumericsError> {
        self.map("scale", a, Op::Scale(a, c), |x| c * x)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.scale(a, -1.0)
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, a: Var, c: f64) -> Result<Var, NumericsError> {
        self.map("shift", a, Op::Shift(a), |x| x + c)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.map("sigmoid", a, Op::Sigmoid(a), kernels::sigmoid)
    }

    /// `log σ(x)`, computed as `-softplus(-x)` so it stays finite when saturated.
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.map("log_sigmoid", a, Op::LogSigmoid(a), kernels::log_sigmoid)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.map("log", a, Op::Log(a), f64::ln)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.map("exp", a, Op::Exp(a), f64::exp)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.map("silu", a, Op::Silu(a), kernels::silu)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push("sum", Tensor::from_parts(Vec::new(), vec![s]), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumericsError> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(shape_err("mean", "empty tensor".into()));
        }
        let n = t.numel() as f64;
        let m0 = t.data().iter().sum::<f64>() / n;
        // Second pass corrects the rounding of the first, so a mean of equal
        // values returns that value exactly.
        let m = m0 + t.data().iter().map(|x| x - m0).sum::<f64>() / n;
        let ng = self.ng(a);
        self.push("mean", Tensor::from_parts(Vec::new(), vec![m]), Op::Mean(a), ng)
    }

    /// Looks up rows of a `V×d` table: token-embedding lookup.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let (v, d) = self.dims2("gather_rows", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(shape_err("gather_rows", format!("row {bad} out of {v}")));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let ng = self.ng(table);
        self.push("gather_rows", Tensor::from_parts(vec![ids.len(), d], data), Op::GatherRows(table, ids.to_vec()), ng)
    }

    /// Selects one entry per `(row, col)` pair into a vector: log-prob selection.
    pub fn pick(&mut self, a: Var, coords: &[(usize, usize)]) -> Result<Var, NumericsError> {
        let (r, c) = self.dims2("pick", a)?;
        let mut flat = Vec::with_capacity(coords.len());
        for &(i, j) in coords {
            if i >= r || j >= c {
                return Err(shape_err("pick", format!("({i}, {j}) outside {r}×{c}")));
            }
            flat.push(i * c + j);
        }
        let src = self.value(a).data();
        let data = flat.iter().map(|&f| src[f]).collect();
        let ng = self.ng(a);
        self.push("pick", Tensor::from_parts(vec![coords.len()], data), Op::Pick(a, flat), ng)
    }

    /// Row-wise log-softmax of a matrix (a vector counts as one row).
    pub fn log_softmax(&mut self, a: Var) -> Result<Var, NumericsError> {
        let t = self.value(a);
        let c = t.cols();
        if c == 0 {
            return Err(shape_err("log_softmax", "zero columns".into()));
        }
        let mut data = vec![0.0; t.numel()];
        for (src, dst) in t.data().chunks(c).zip(data.chunks_mut(c)) {
            kernels::log_softmax_row(src, dst);
        }
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        let ng = self.ng(a);
        self.push("log_softmax", value, Op::LogSoftmax(a), ng)
    }

    /// Concatenates matrices with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = *parts.first().ok_or_else(|| shape_err("concat_rows", "no inputs".into()))?;
        let (_, c) = self.dims2("concat_rows", first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c2) = self.dims2("concat_rows", p)?;
            if c2 != c {
                return Err(shape_err("concat_rows", format!("column mismatch {c} vs {c2}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push("concat_rows", Tensor::from_parts(vec![rows, c], data), Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Flattens the inputs, in order, into one vector.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        if parts.is_empty() {
            return Err(shape_err("stack", "no inputs".into()));
        }
        let data: Vec<f64> = parts.iter().flat_map(|&p| self.value(p).data().iter().copied()).collect();
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push("stack", Tensor::from_parts(vec![data.len()], data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let (r, c) = self.dims2("slice_rows", a)?;
        if start + len > r {
            return Err(shape_err("slice_rows", format!("rows {start}..{} of {r}", start + len)));
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let ng = self.ng(a);
        self.push("slice_rows", Tensor::from_parts(vec![len, c], data), Op::SliceRows(a, start), ng)
    }

    /// Root-mean-square normalization of each row followed by a learned gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var, NumericsError> {
        let (r, c) = self.dims2("rms_norm", x)?;
        if self.value(gain).numel() != c {
            return Err(shape_err("rms_norm", format!("gain of {} for {c} columns", self.value(gain).numel())));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let mut inv_rms = Vec::with_capacity(r);
        let mut data = vec![0.0; r * c];
        for (row, out) in xs.chunks(c).zip(data.chunks_mut(c)) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            for ((o, &v), &gv) in out.iter_mut().zip(row).zip(g) {
                *o = v * inv * gv;
            }
        }
        let ng = self.ng(x) || self.ng(gain);
        self.push("rms_norm", Tensor::from_parts(vec![r, c], data), Op::RmsNorm { x, gain, inv_rms }, ng)
    }

    /// Multi-head causal scaled dot-product attention.
    ///
    /// `q` is `S×d`, `k` and `v` are `T×d`. Query row `i` sits at absolute
    /// position `q_start + i` and attends to keys `0..=q_start + i`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, q_start: usize) -> Result<Var, NumericsError> {
        let (s, d) = self.dims2("attention", q)?;
        let (t, dk) = self.dims2("attention", k)?;
        let (tv, dv) = self.dims2("attention", v)?;
        if dk != d || dv != d || tv != t {
            return Err(shape_err("attention", format!("q {s}×{d}, k {t}×{dk}, v {tv}×{dv}")));
        }
        if heads == 0 || d % heads != 0 {
            return Err(shape_err("attention", format!("{d} columns not divisible into {heads} heads")));
        }
        if q_start + s > t {
            return Err(shape_err("attention", format!("queries reach position {} but only {t} keys", q_start + s)));
        }
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let (out, probs) = attention_forward(qd, kd, vd, s, t, d, heads, q_start);
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        let saved = AttentionSaved { q, k, v, heads, q_start, probs };
        self.push("attention", Tensor::from_parts(vec![s, d], out), Op::Attention(Box::new(saved)), ng)
    }

    /// Reverse pass from a scalar root. Gradients sum over all paths; leaves
    /// that do not reach the root get zero. Marks the tape spent.
    pub fn backward(&mut self, root: Var) -> Result<Gradients, NumericsError> {
        if self.spent {
            return Err(NumericsError::SpentTape);
        }
        if !self.nodes[root.0].value.is_scalar() {
            return Err(NumericsError::NotScalar { shape: self.nodes[root.0].value.shape().to_vec() });
        }
        self.spent = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[root.0].needs_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn with_grad(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]);
        f(slot);
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let out = &nodes[idx].value;
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, n) = (out.shape()[0], out.shape()[1]);
                let k = nodes[a.0].value.shape()[1];
                self.with_grad(grads, *a, |ga| {
                    kernels::matmul_nt_acc(g, val(*b), ga, m, n, k);
                });
                self.with_grad(grads, *b, |gb| {
                    kernels::matmul_tn_acc(val(*a), g, gb, m, k, n);
                });
            }
            Op::MatMulBt(a, b) => {
                let (m, n) = (out.shape()[0], out.shape()[1]);
                let k = nodes[a.0].value.shape()[1];
                self.with_grad(grads, *a, |ga| {
                    kernels::matmul_acc(g, val(*b), ga, m, n, k);
                });
                self.with_grad(grads, *b, |gb| {
                    kernels::matmul_tn_acc(g, val(*a), gb, m, n, k);
                });
            }
            Op::Add(a, b) => {
                self.with_grad(grads, *a, |ga| {
                    kernels::axpy(1.0, g, ga);
                });
                self.with_grad(grads, *b, |gb| {
                    kernels::axpy(1.0, g, gb);
                });
            }
            Op::Sub(a, b) => {
                self.with_grad(grads, *a, |ga| {
                    kernels::axpy(1.0, g, ga);
                });
                self.with_grad(grads, *b, |gb| {
                    kernels::axpy(-1.0, g, gb);
                });
            }
            Op::AddRow(a, bias) => {
                self.with_grad(grads, *a, |ga| {
                    kernels::axpy(1.0, g, ga);
                });
                self.with_grad(grads, *bias, |gb| {
                    let c = gb.len();
                    for row in g.chunks(c) {
                        kernels::axpy(1.0, row, gb);
                    }
                });
            }
            Op::Mul(a, b) => {
                self.with_grad(grads, *a, |ga| {
                    for ((o, &gv), &bv) in ga.iter_mut().zip(g).zip(val(*b)) {
                        *o += gv * bv;
                    }
                });
                self.with_grad(grads, *b, |gb| {
                    for ((o, &gv), &av) in gb.iter_mut().zip(g).zip(val(*a)) {
                        *o += gv * av;
                    }
                });
            }
            Op::Scale(a, c) => {
                self.with_grad(grads, *a, |ga| {
                    kernels::axpy(*c, g, ga);
                });
            }
            Op::Shift(a) => {
                self.with_grad(grads, *a, |ga| {
                    kernels::axpy(1.0, g, ga);
                });
            }
            Op::GatherRows(table, ids) => {
                self.with_grad(grads, *table, |gt| {
                    let d = out.shape()[1];
                    for (r, &id) in ids.iter().enumerate() {
                        kernels::axpy(1.0, &g[r * d..(r + 1) * d], &mut gt[id * d..(id + 1) * d]);
                    }
                });
            }
            Op::Pick(a, flat) => {
                self.with_grad(grads, *a, |ga| {
                    for (&f, &gv) in flat.iter().zip(g) {
                        ga[f] += gv;
                    }
                });
            }
            Op::LogSoftmax(a) => {
                self.with_grad(grads, *a, |ga| {
                    let c = out.cols();
                    for ((grow, yrow), orow) in g.chunks(c).zip(out.data().chunks(c)).zip(ga.chunks_mut(c)) {
                        let gsum: f64 = grow.iter().sum();
                        for ((o, &gv), &y) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += gv - y.exp() * gsum;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                self.with_grad(grads, *a, |ga| {
                    for ((o, &gv), &s) in ga.iter_mut().zip(g).zip(out.data()) {
                        *o += gv * s * (1.0 - s);
                    }
                });
            }
            Op::LogSigmoid(a) => {
                self.with_grad(grads, *a, |ga| {
                    for ((o, &gv), &x) in ga.iter_mut().zip(g).zip(val(*a)) {
                        *o += gv * kernels::sigmoid(-x);
                    }
                });
            }
            Op::Log(a) => {
                self.with_grad(grads, *a, |ga| {
                    for ((o, &gv), &x) in ga.iter_mut().zip(g).zip(val(*a)) {
                        *o += gv / x;
                    }
                });
            }
            Op::Exp(a) => {
                self.with_grad(grads, *a, |ga| {
                    for ((o, &gv), &y) in ga.iter_mut().zip(g).zip(out.data()) {
                        *o += gv * y;
                    }
                });
            }
            Op::Silu(a) => {
                self.with_grad(grads, *a, |ga| {
                    for ((o, &gv), &x) in ga.iter_mut().zip(g).zip(val(*a)) {
                        let s = kernels::sigmoid(x);
                        *o += gv * s * (1.0 + x * (1.0 - s));
                    }
                });
            }
            Op::Sum(a) => {
                self.with_grad(grads, *a, |ga| {
                    for o in ga.iter_mut() {
                        *o += g[0];
                    }
                });
            }
            Op::Mean(a) => {
                self.with_grad(grads, *a, |ga| {
                    let s = g[0] / ga.len() as f64;
                    for o in ga.iter_mut() {
                        *o += s;
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.numel();
                    self.with_grad(grads, p, |gp| {
                        kernels::axpy(1.0, &g[offset..offset + len], gp);
                    });
                    offset += len;
                }
            }
            Op::SliceRows(a, start) => {
                self.with_grad(grads, *a, |ga| {
                    let c = out.cols();
                    kernels::axpy(1.0, g, &mut ga[start * c..start * c + g.len()]);
                });
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let c = out.cols();
                let xs = val(*x);
                let gs = val(*gain);
                self.with_grad(grads, *gain, |ggain| {
                    for ((grow, xrow), &inv) in g.chunks(c).zip(xs.chunks(c)).zip(inv_rms) {
                        for ((o, &gv), &xv) in ggain.iter_mut().zip(grow).zip(xrow) {
                            *o += gv * xv * inv;
                        }
                    }
                });
                self.with_grad(grads, *x, |gx| {
                    for (((grow, xrow), &inv), orow) in g.chunks(c).zip(xs.chunks(c)).zip(inv_rms).zip(gx.chunks_mut(c)) {
                        let mut proj = 0.0;
                        for ((&gv, &xv), &gn) in grow.iter().zip(xrow).zip(gs) {
                            proj += gv * gn * xv * inv;
                        }
                        proj /= c as f64;
                        for (((o, &gv), &xv), &gn) in orow.iter_mut().zip(grow).zip(xrow).zip(gs) {
                            *o += inv * (gv * gn - xv * inv * proj);
                        }
                    }
                });
            }
            Op::Attention(saved) => {
                let AttentionSaved { q, k, v, heads, q_start, probs } = saved.as_ref();
                let (s, d) = (out.shape()[0], out.shape()[1]);
                let t = nodes[k.0].value.shape()[0];
                let (dq, dk, dv) = attention_backward(g, val(*q), val(*k), val(*v), probs, s, t, d, *heads, *q_start);
                self.with_grad(grads, *q, |gq| {
                    kernels::axpy(1.0, &dq, gq);
                });
                self.with_grad(grads, *k, |gk| {
                    kernels::axpy(1.0, &dk, gk);
                });
                self.with_grad(grads, *v, |gv| {
                    kernels::axpy(1.0, &dv, gv);
                });
            }
        }
    }
}

fn head_slice(src: &[f64], rows: usize, d: usize, h: usize, dh: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * dh);
    for r in 0..rows {
        out.extend_from_slice(&src[r * d + h * dh..r * d + (h + 1) * dh]);
    }
    out
}

fn head_scatter(dst: &mut [f64], src: &[f64], rows: usize, d: usize, h: usize, dh: usize) {
    for r in 0..rows {
        dst[r * d + h * dh..r * d + (h + 1) * dh].copy_from_slice(&src[r * dh..(r + 1) * dh]);
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    s: usize,
    t: usize,
    d: usize,
    heads: usize,
    q_start: usize,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; s * d];
    let mut all_probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = head_slice(q, s, d, h, dh);
        let kt = kernels::transpose(&head_slice(k, t, d, h, dh), t, dh);
        let vh = head_slice(v, t, d, h, dh);
        let mut probs = vec![0.0; s * t];
        let mut oh = vec![0.0; s * dh];
        for i in 0..s {
            let lim = q_start + i + 1;
            let row = &mut probs[i * t..i * t + lim];
            for p in 0..dh {
                let qv = qh[i * dh + p] * scale;
                kernels::axpy(qv, &kt[p * t..p * t + lim], row);
            }
            kernels::softmax_in_place(row);
            let orow = &mut oh[i * dh..(i + 1) * dh];
            for (j, &pj) in row.iter().enumerate() {
                kernels::axpy(pj, &vh[j * dh..(j + 1) * dh], orow);
            }
        }
        head_scatter(&mut out, &oh, s, d, h, dh);
        all_probs.push(probs);
    }
    (out, all_probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    g: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[Vec<f64>],
    s: usize,
    t: usize,
    d: usize,
    heads: usize,
    q_start: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; s * d];
    let mut dk = vec![0.0; t * d];
    let mut dv = vec![0.0; t * d];
    for h in 0..heads {
        let qh = head_slice(q, s, d, h, dh);
        let kh = head_slice(k, t, d, h, dh);
        let vh = head_slice(v, t, d, h, dh);
        let vt = kernels::transpose(&vh, t, dh);
        let gh = head_slice(g, s, d, h, dh);
        let p = &probs[h];
        let mut dqh = vec![0.0; s * dh];
        let mut dkh = vec![0.0; t * dh];
        let mut dvh = vec![0.0; t * dh];
        let mut dp = vec![0.0; t];
        for i in 0..s {
            let lim = q_start + i + 1;
            let prow = &p[i * t..i * t + lim];
            let grow = &gh[i * dh..(i + 1) * dh];
            for (j, &pj) in prow.iter().enumerate() {
                kernels::axpy(pj, grow, &mut dvh[j * dh..(j + 1) * dh]);
            }
            let dprow = &mut dp[..lim];
            dprow.fill(0.0);
            for (pi, &gv) in grow.iter().enumerate() {
                kernels::axpy(gv, &vt[pi * t..pi * t + lim], dprow);
            }
            let inner = kernels::dot(prow, dprow);
            let qrow = &qh[i * dh..(i + 1) * dh];
            let dqrow = &mut dqh[i * dh..(i + 1) * dh];
            for j in 0..lim {
                let ds = prow[j] * (dprow[j] - inner) * scale;
                if ds == 0.0 {
                    continue;
                }
                kernels::axpy(ds, &kh[j * dh..(j + 1) * dh], dqrow);
                kernels::axpy(ds, qrow, &mut dkh[j * dh..(j + 1) * dh]);
            }
        }
        head_scatter(&mut dq, &dqh, s, d, h, dh);
        head_scatter(&mut dk, &dkh, t, d, h, dh);
        head_scatter(&mut dv, &dvh, t, d, h, dh);
    }
    (dq, dk, dv)
}
