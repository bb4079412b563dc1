//! Reverse-mode automatic differentiation over dense 2-d arrays.
//!
//! A [`Tape`] records every operation eagerly; [`Tensor`] is a cheap copyable
//! handle (tape reference + node id + shape). Calling [`Tape::backward`] on a
//! scalar walks the nodes in reverse creation order and accumulates gradients
//! for every node, so gradients with respect to parameters *and* arbitrary
//! intermediate values are available.
//!
//! Shapes are `[rows, cols]`. Binary elementwise operations broadcast a
//! one-row operand against many rows and a one-column operand against many
//! columns (and scalars against anything). All arithmetic is `f64`.
//!
//! A tape is single-threaded; independent tapes may run concurrently.

use std::cell::RefCell;
use std::collections::HashMap;
use std::ops::{Add, Div, Mul, Sub};

// Value and gradient buffers are recycled through a thread-local pool:
// tapes allocate hundreds of megabytes per pass, and handing that memory
// back to the OS between passes costs far more in page faults than the
// arithmetic itself.
thread_local! {
    static BUF_POOL: RefCell<HashMap<usize, Vec<Vec<f64>>>> = RefCell::new(HashMap::new());
}

fn pool_alloc(len: usize) -> Vec<f64> {
    BUF_POOL.with(|p| {
        if let Some(mut v) = p.borrow_mut().get_mut(&len).and_then(|b| b.pop()) {
            v.fill(0.0);
            return v;
        }
        vec![0.0; len]
    })
}

fn pool_release(v: Vec<f64>) {
    if v.is_empty() {
        return;
    }
    BUF_POOL.with(|p| {
        let mut pool = p.borrow_mut();
        let bucket = pool.entry(v.len()).or_default();
        if bucket.len() < 256 {
            bucket.push(v);
        }
    });
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Div(u32, u32),
    Matmul(u32, u32),
    /// `a · bᵀ` where `b` is stored row-major `[n, k]`.
    MatmulTb(u32, u32),
    ConcatCols(Vec<u32>),
    ConcatRows(Vec<u32>),
    SliceCols(u32, usize),
    SliceRows(u32, usize),
    SumAll(u32),
    MeanAll(u32),
    Relu(u32),
    Elu(u32),
    Softplus(u32),
    Exp(u32),
    Log(u32),
    Square(u32),
    Recip(u32),
    ClampMin(u32, f64),
    Scale(u32, f64),
    AddScalar(u32),
    Neg(u32),
    StopGrad(u32),
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
}

/// Records the computation graph for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Drop for Tape {
    fn drop(&mut self) {
        for node in self.nodes.get_mut().drain(..) {
            pool_release(node.value);
        }
    }
}

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Tensor<'t> {
    tape: &'t Tape,
    id: u32,
    rows: usize,
    cols: usize,
}

impl std::fmt::Debug for Tensor<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor#{}[{}, {}]", self.id, self.rows, self.cols)
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Drop for Gradients {
    fn drop(&mut self) {
        for g in self.grads.drain(..).flatten() {
            pool_release(g);
        }
    }
}

impl Gradients {
    /// Gradient of the backward root with respect to `t`, if any path existed.
    pub fn get(&self, t: Tensor<'_>) -> Option<&[f64]> {
        self.grads
            .get(t.id as usize)
            .and_then(|g| g.as_deref())
    }

    /// Gradient of `t`, treating unreached nodes as zero.
    pub fn get_or_zero(&self, t: Tensor<'_>) -> Vec<f64> {
        match self.get(t) {
            Some(g) => g.to_vec(),
            None => vec![0.0; t.len()],
        }
    }
}

fn broadcast_index(i: usize, j: usize, rows: usize, cols: usize) -> usize {
    let r = if rows == 1 { 0 } else { i };
    let c = if cols == 1 { 0 } else { j };
    r * cols + c
}

fn broadcast_shape(a: &Tensor<'_>, b: &Tensor<'_>, what: &str) -> (usize, usize) {
    let rows = match (a.rows, b.rows) {
        (x, y) if x == y => x,
        (1, y) => y,
        (x, 1) => x,
        (x, y) => panic!("{what}: incompatible rows {x} vs {y}"),
    };
    let cols = match (a.cols, b.cols) {
        (x, y) if x == y => x,
        (1, y) => y,
        (x, 1) => x,
        (x, y) => panic!("{what}: incompatible cols {x} vs {y}"),
    };
    (rows, cols)
}

/// `out += a · b`, `a: [m,k]`, `b: [k,n]`.
fn matmul_acc(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    for (arow, orow) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (&av, brow) in arow.iter().zip(b.chunks_exact(n)) {
            if av != 0.0 {
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

/// `out += a · bᵀ`, `a: [m,k]`, `b: [n,k]`.
fn matmul_tb_acc(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    for (arow, orow) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (o, brow) in orow.iter_mut().zip(b.chunks_exact(k)) {
            let mut acc = 0.0;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            *o += acc;
        }
    }
}

/// `out += aᵀ · b`, `a: [m,k]`, `b: [m,n]`, `out: [k,n]`.
fn matmul_ta_acc(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    for (arow, brow) in a.chunks_exact(k).zip(b.chunks_exact(n)) {
        for (&av, orow) in arow.iter().zip(out.chunks_exact_mut(n)) {
            if av != 0.0 {
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, rows: usize, cols: usize, value: Vec<f64>) -> Tensor<'_> {
        debug_assert_eq!(value.len(), rows * cols);
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len() as u32;
        nodes.push(Node {
            op,
            rows,
            cols,
            value,
        });
        Tensor {
            tape: self,
            id,
            rows,
            cols,
        }
    }

    /// New leaf holding `data` (row-major).
    pub fn leaf(&self, rows: usize, cols: usize, data: Vec<f64>) -> Tensor<'_> {
        assert_eq!(
            data.len(),
            rows * cols,
            "leaf: data length {} does not match shape [{rows}, {cols}]",
            data.len()
        );
        self.push(Op::Leaf, rows, cols, data)
    }

    /// `[1, 1]` leaf.
    pub fn scalar(&self, v: f64) -> Tensor<'_> {
        self.push(Op::Leaf, 1, 1, vec![v])
    }

    /// Leaf filled with `v`.
    pub fn full(&self, rows: usize, cols: usize, v: f64) -> Tensor<'_> {
        let mut buf = pool_alloc(rows * cols);
        buf.fill(v);
        self.push(Op::Leaf, rows, cols, buf)
    }

    fn binary(&self, a: Tensor<'_>, b: Tensor<'_>, kind: u8, what: &str) -> Tensor<'_> {
        let (rows, cols) = broadcast_shape(&a, &b, what);
        let mut out = pool_alloc(rows * cols);
        {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.id as usize].value;
            let bv = &nodes[b.id as usize].value;
            if a.rows == rows && a.cols == cols && b.rows == rows && b.cols == cols {
                // same-shape fast path
                match kind {
                    0 => {
                        for ((o, &x), &y) in out.iter_mut().zip(av).zip(bv) {
                            *o = x + y;
                        }
                    }
                    1 => {
                        for ((o, &x), &y) in out.iter_mut().zip(av).zip(bv) {
                            *o = x - y;
                        }
                    }
                    2 => {
                        for ((o, &x), &y) in out.iter_mut().zip(av).zip(bv) {
                            *o = x * y;
                        }
                    }
                    _ => {
                        for ((o, &x), &y) in out.iter_mut().zip(av).zip(bv) {
                            *o = x / y;
                        }
                    }
                }
            } else {
                for i in 0..rows {
                    for j in 0..cols {
                        let x = av[broadcast_index(i, j, a.rows, a.cols)];
                        let y = bv[broadcast_index(i, j, b.rows, b.cols)];
                        out[i * cols + j] = match kind {
                            0 => x + y,
                            1 => x - y,
                            2 => x * y,
                            _ => x / y,
                        };
                    }
                }
            }
        }
        let op = match kind {
            0 => Op::Add(a.id, b.id),
            1 => Op::Sub(a.id, b.id),
            2 => Op::Mul(a.id, b.id),
            _ => Op::Div(a.id, b.id),
        };
        self.push(op, rows, cols, out)
    }

    /// Concatenate along columns; all inputs share the row count.
    pub fn concat_cols<'t>(&'t self, parts: &[Tensor<'t>]) -> Tensor<'t> {
        assert!(!parts.is_empty(), "concat_cols: empty input");
        let rows = parts[0].rows;
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut out = pool_alloc(rows * cols);
        {
            let nodes = self.nodes.borrow();
            let mut off = 0;
            for p in parts {
                assert_eq!(p.rows, rows, "concat_cols: row mismatch");
                let v = &nodes[p.id as usize].value;
                for i in 0..rows {
                    out[i * cols + off..i * cols + off + p.cols]
                        .copy_from_slice(&v[i * p.cols..(i + 1) * p.cols]);
                }
                off += p.cols;
            }
        }
        self.push(
            Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
            rows,
            cols,
            out,
        )
    }

    /// Concatenate along rows; all inputs share the column count.
    pub fn concat_rows<'t>(&'t self, parts: &[Tensor<'t>]) -> Tensor<'t> {
        assert!(!parts.is_empty(), "concat_rows: empty input");
        let cols = parts[0].cols;
        let rows: usize = parts.iter().map(|p| p.rows).sum();
        let mut out = pool_alloc(rows * cols);
        {
            let nodes = self.nodes.borrow();
            let mut off = 0;
            for p in parts {
                assert_eq!(p.cols, cols, "concat_rows: col mismatch");
                let v = &nodes[p.id as usize].value;
                out[off..off + v.len()].copy_from_slice(v);
                off += v.len();
            }
        }
        self.push(
            Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
            rows,
            cols,
            out,
        )
    }

    fn backward_into(&self, root: Tensor<'_>, grads: &mut Vec<Option<Vec<f64>>>) {
        assert_eq!(root.len(), 1, "backward: root must be scalar");
        let nodes = self.nodes.borrow();
        grads.resize(nodes.len(), None);
        grads[root.id as usize] = Some(vec![1.0]);

        for id in (0..=root.id as usize).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let (rows, cols) = (node.rows, node.cols);

            // Accumulates `contribution` into the gradient of input `src`,
            // reducing over broadcast axes.
            macro_rules! acc_binary {
                ($src:expr, $f:expr) => {{
                    let src = $src as usize;
                    let (sr, sc) = (nodes[src].rows, nodes[src].cols);
                    let slot = grads[src].get_or_insert_with(|| pool_alloc(sr * sc));
                    for i in 0..rows {
                        for j in 0..cols {
                            let d = $f(i, j) * g[i * cols + j];
                            slot[broadcast_index(i, j, sr, sc)] += d;
                        }
                    }
                }};
            }
            macro_rules! acc_unary {
                ($src:expr, $f:expr) => {{
                    let src = $src as usize;
                    let sv = &nodes[src].value;
                    let slot = grads[src].get_or_insert_with(|| pool_alloc(sv.len()));
                    for (idx, s) in slot.iter_mut().enumerate() {
                        *s += $f(sv[idx], idx) * g[idx];
                    }
                }};
            }

            match &node.op {
                // leaves terminate; stop_gradient blocks backward flow
                Op::Leaf => {}
                Op::StopGrad(src) => {
                    let _ = src;
                }
                Op::Add(a, b) => {
                    acc_binary!(*a, |_i, _j| 1.0);
                    acc_binary!(*b, |_i, _j| 1.0);
                }
                Op::Sub(a, b) => {
                    acc_binary!(*a, |_i, _j| 1.0);
                    acc_binary!(*b, |_i, _j| -1.0);
                }
                Op::Mul(a, b) => {
                    let (bv, br, bc) = {
                        let n = &nodes[*b as usize];
                        (&n.value, n.rows, n.cols)
                    };
                    let (av, ar, ac) = {
                        let n = &nodes[*a as usize];
                        (&n.value, n.rows, n.cols)
                    };
                    acc_binary!(*a, |i, j| bv[broadcast_index(i, j, br, bc)]);
                    acc_binary!(*b, |i, j| av[broadcast_index(i, j, ar, ac)]);
                }
                Op::Div(a, b) => {
                    let (bv, br, bc) = {
                        let n = &nodes[*b as usize];
                        (&n.value, n.rows, n.cols)
                    };
                    let (av, ar, ac) = {
                        let n = &nodes[*a as usize];
                        (&n.value, n.rows, n.cols)
                    };
                    acc_binary!(*a, |i, j| 1.0 / bv[broadcast_index(i, j, br, bc)]);
                    acc_binary!(*b, |i, j| {
                        let y = bv[broadcast_index(i, j, br, bc)];
                        -av[broadcast_index(i, j, ar, ac)] / (y * y)
                    });
                }
                Op::Matmul(a, b) => {
                    let (m, k) = (nodes[*a as usize].rows, nodes[*a as usize].cols);
                    let n = nodes[*b as usize].cols;
                    let av = &nodes[*a as usize].value;
                    let bv = &nodes[*b as usize].value;
                    {
                        let slot = grads[*a as usize].get_or_insert_with(|| pool_alloc(m * k));
                        matmul_tb_acc(&g, m, n, bv, k, slot);
                    }
                    {
                        let slot = grads[*b as usize].get_or_insert_with(|| pool_alloc(k * n));
                        matmul_ta_acc(av, m, k, &g, n, slot);
                    }
                }
                Op::MatmulTb(a, b) => {
                    // y = a · bᵀ, a: [m,k], b: [n,k], y: [m,n]
                    let (m, k) = (nodes[*a as usize].rows, nodes[*a as usize].cols);
                    let n = nodes[*b as usize].rows;
                    let av = &nodes[*a as usize].value;
                    let bv = &nodes[*b as usize].value;
                    {
                        // da = g · b : [m,n]·[n,k]
                        let slot = grads[*a as usize].get_or_insert_with(|| pool_alloc(m * k));
                        matmul_acc(&g, m, n, bv, k, slot);
                    }
                    {
                        // db = gᵀ · a : [n,m]·[m,k]
                        let slot = grads[*b as usize].get_or_insert_with(|| pool_alloc(n * k));
                        matmul_ta_acc(&g, m, n, av, k, slot);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (pr, pc) = (nodes[p as usize].rows, nodes[p as usize].cols);
                        let slot = grads[p as usize].get_or_insert_with(|| pool_alloc(pr * pc));
                        for i in 0..rows {
                            for j in 0..pc {
                                slot[i * pc + j] += g[i * cols + off + j];
                            }
                        }
                        off += pc;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (pr, pc) = (nodes[p as usize].rows, nodes[p as usize].cols);
                        let slot = grads[p as usize].get_or_insert_with(|| pool_alloc(pr * pc));
                        for (s, &d) in slot.iter_mut().zip(&g[off..off + pr * pc]) {
                            *s += d;
                        }
                        off += pr * pc;
                    }
                }
                Op::SliceCols(src, start) => {
                    let (sr, sc) = (nodes[*src as usize].rows, nodes[*src as usize].cols);
                    let slot = grads[*src as usize].get_or_insert_with(|| pool_alloc(sr * sc));
                    for i in 0..rows {
                        for j in 0..cols {
                            slot[i * sc + start + j] += g[i * cols + j];
                        }
                    }
                }
                Op::SliceRows(src, start) => {
                    let (sr, sc) = (nodes[*src as usize].rows, nodes[*src as usize].cols);
                    let slot = grads[*src as usize].get_or_insert_with(|| pool_alloc(sr * sc));
                    for (s, &d) in slot[start * sc..start * sc + rows * cols]
                        .iter_mut()
                        .zip(&g)
                    {
                        *s += d;
                    }
                }
                Op::SumAll(src) => {
                    let sv = &nodes[*src as usize].value;
                    let slot = grads[*src as usize].get_or_insert_with(|| pool_alloc(sv.len()));
                    for s in slot.iter_mut() {
                        *s += g[0];
                    }
                }
                Op::MeanAll(src) => {
                    let sv = &nodes[*src as usize].value;
                    let n = sv.len() as f64;
                    let slot = grads[*src as usize].get_or_insert_with(|| pool_alloc(sv.len()));
                    for s in slot.iter_mut() {
                        *s += g[0] / n;
                    }
                }
                Op::Relu(src) => acc_unary!(*src, |x: f64, _| if x > 0.0 { 1.0 } else { 0.0 }),
                Op::Elu(src) => {
                    acc_unary!(*src, |x: f64, _| if x > 0.0 { 1.0 } else { x.exp() })
                }
                Op::Softplus(src) => acc_unary!(*src, |x: f64, _| sigmoid(x)),
                Op::Exp(src) => {
                    let out = &node.value;
                    acc_unary!(*src, |_x: f64, idx: usize| out[idx]);
                }
                Op::Log(src) => acc_unary!(*src, |x: f64, _| 1.0 / x),
                Op::Square(src) => acc_unary!(*src, |x: f64, _| 2.0 * x),
                Op::Recip(src) => acc_unary!(*src, |x: f64, _| -1.0 / (x * x)),
                Op::ClampMin(src, m) => {
                    let m = *m;
                    acc_unary!(*src, |x: f64, _| if x > m { 1.0 } else { 0.0 });
                }
                Op::Scale(src, s) => {
                    let s = *s;
                    acc_unary!(*src, |_x: f64, _| s);
                }
                Op::AddScalar(src) => acc_unary!(*src, |_x: f64, _| 1.0),
                Op::Neg(src) => acc_unary!(*src, |_x: f64, _| -1.0),
            }

            grads[id] = Some(g);
        }
    }

    /// Reverse pass from a scalar `root`; returns gradients for every node.
    pub fn backward(&self, root: Tensor<'_>) -> Gradients {
        let mut grads = Vec::new();
        self.backward_into(root, &mut grads);
        Gradients { grads }
    }
}

impl<'t> Tensor<'t> {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Copy of the node value (row-major).
    pub fn value(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id as usize].value.clone()
    }

    /// Read the value without copying.
    pub fn with_value<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id as usize].value)
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item: tensor is not scalar");
        self.tape.nodes.borrow()[self.id as usize].value[0]
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: Op) -> Tensor<'t> {
        let mut out = pool_alloc(self.len());
        {
            let nodes = self.tape.nodes.borrow();
            for (o, &x) in out.iter_mut().zip(&nodes[self.id as usize].value) {
                *o = f(x);
            }
        }
        self.tape.push(op, self.rows, self.cols, out)
    }

    pub fn relu(&self) -> Tensor<'t> {
        self.unary(|x| x.max(0.0), Op::Relu(self.id))
    }

    pub fn elu(&self) -> Tensor<'t> {
        self.unary(
            |x| if x > 0.0 { x } else { x.exp() - 1.0 },
            Op::Elu(self.id),
        )
    }

    pub fn softplus(&self) -> Tensor<'t> {
        self.unary(softplus, Op::Softplus(self.id))
    }

    pub fn exp(&self) -> Tensor<'t> {
        self.unary(f64::exp, Op::Exp(self.id))
    }

    pub fn log(&self) -> Tensor<'t> {
        self.unary(f64::ln, Op::Log(self.id))
    }

    pub fn square(&self) -> Tensor<'t> {
        self.unary(|x| x * x, Op::Square(self.id))
    }

    pub fn recip(&self) -> Tensor<'t> {
        self.unary(|x| 1.0 / x, Op::Recip(self.id))
    }

    pub fn clamp_min(&self, m: f64) -> Tensor<'t> {
        self.unary(|x| x.max(m), Op::ClampMin(self.id, m))
    }

    pub fn scale(&self, s: f64) -> Tensor<'t> {
        self.unary(|x| x * s, Op::Scale(self.id, s))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<'t> {
        self.unary(|x| x + c, Op::AddScalar(self.id))
    }

    pub fn neg(&self) -> Tensor<'t> {
        self.unary(|x| -x, Op::Neg(self.id))
    }

    /// Forward identity that blocks gradient flow.
    pub fn stop_gradient(&self) -> Tensor<'t> {
        self.unary(|x| x, Op::StopGrad(self.id))
    }

    pub fn sum_all(&self) -> Tensor<'t> {
        let s: f64 = self.with_value(|v| v.iter().sum());
        self.tape.push(Op::SumAll(self.id), 1, 1, vec![s])
    }

    pub fn mean_all(&self) -> Tensor<'t> {
        let s: f64 = self.with_value(|v| v.iter().sum::<f64>() / v.len() as f64);
        self.tape.push(Op::MeanAll(self.id), 1, 1, vec![s])
    }

    /// `self · rhs`, `[m,k] · [k,n]`.
    pub fn matmul(&self, rhs: Tensor<'t>) -> Tensor<'t> {
        assert_eq!(
            self.cols, rhs.rows,
            "matmul: [{},{}] · [{},{}]",
            self.rows, self.cols, rhs.rows, rhs.cols
        );
        let (m, k, n) = (self.rows, self.cols, rhs.cols);
        let mut out = pool_alloc(m * n);
        {
            let nodes = self.tape.nodes.borrow();
            matmul_acc(
                &nodes[self.id as usize].value,
                m,
                k,
                &nodes[rhs.id as usize].value,
                n,
                &mut out,
            );
        }
        self.tape.push(Op::Matmul(self.id, rhs.id), m, n, out)
    }

    /// `self · rhsᵀ`, `[m,k] · [n,k]ᵀ`.
    pub fn matmul_tb(&self, rhs: Tensor<'t>) -> Tensor<'t> {
        assert_eq!(
            self.cols, rhs.cols,
            "matmul_tb: [{},{}] · [{},{}]ᵀ",
            self.rows, self.cols, rhs.rows, rhs.cols
        );
        let (m, k, n) = (self.rows, self.cols, rhs.rows);
        let mut out = pool_alloc(m * n);
        {
            let nodes = self.tape.nodes.borrow();
            matmul_tb_acc(
                &nodes[self.id as usize].value,
                m,
                k,
                &nodes[rhs.id as usize].value,
                n,
                &mut out,
            );
        }
        self.tape.push(Op::MatmulTb(self.id, rhs.id), m, n, out)
    }

    /// Column window `[start, start+len)`.
    pub fn slice_cols(&self, start: usize, len: usize) -> Tensor<'t> {
        assert!(start + len <= self.cols, "slice_cols out of range");
        let mut out = pool_alloc(self.rows * len);
        self.with_value(|v| {
            for i in 0..self.rows {
                out[i * len..(i + 1) * len]
                    .copy_from_slice(&v[i * self.cols + start..i * self.cols + start + len]);
            }
        });
        self.tape
            .push(Op::SliceCols(self.id, start), self.rows, len, out)
    }

    /// Row window `[start, start+len)`.
    pub fn slice_rows(&self, start: usize, len: usize) -> Tensor<'t> {
        assert!(start + len <= self.rows, "slice_rows out of range");
        let mut out = pool_alloc(len * self.cols);
        self.with_value(|v| {
            out.copy_from_slice(&v[start * self.cols..(start + len) * self.cols]);
        });
        self.tape
            .push(Op::SliceRows(self.id, start), len, self.cols, out)
    }
}

macro_rules! impl_binop {
    ($trait:ident, $meth:ident, $kind:expr, $what:expr) => {
        impl<'t> $trait for Tensor<'t> {
            type Output = Tensor<'t>;
            fn $meth(self, rhs: Tensor<'t>) -> Tensor<'t> {
                self.tape.binary(self, rhs, $kind, $what)
            }
        }
    };
}

impl_binop!(Add, add, 0, "add");
impl_binop!(Sub, sub, 1, "sub");
impl_binop!(Mul, mul, 2, "mul");
impl_binop!(Div, div, 3, "div");

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!(
            (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0),
            "{a} vs {b}"
        );
    }

    #[test]
    fn square_gradient_at_three() {
        let tape = Tape::new();
        let x = tape.scalar(3.0);
        let y = x.square().sum_all();
        let g = tape.backward(y);
        assert_eq!(g.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn softplus_derivative_at_zero() {
        let tape = Tape::new();
        let x = tape.scalar(0.0);
        let y = x.softplus().sum_all();
        let g = tape.backward(y);
        assert_close(g.get(x).unwrap()[0], 0.5, 1e-12);
    }

    #[test]
    fn stop_gradient_preserves_value_and_blocks_flow() {
        let tape = Tape::new();
        let x = tape.leaf(1, 3, vec![1.0, -2.0, 0.5]);
        let cut = x.stop_gradient();
        assert_eq!(cut.value(), x.value());
        let y = cut.square().sum_all();
        let g = tape.backward(y);
        assert!(g.get(x).is_none());
    }

    #[test]
    fn broadcast_row_and_col() {
        let tape = Tape::new();
        let a = tape.leaf(2, 3, vec![1., 2., 3., 4., 5., 6.]);
        let row = tape.leaf(1, 3, vec![10., 20., 30.]);
        let col = tape.leaf(2, 1, vec![100., 200.]);
        let y = a + row + col;
        assert_eq!(y.value(), vec![111., 122., 133., 214., 225., 236.]);
        let s = y.sum_all();
        let g = tape.backward(s);
        assert_eq!(g.get(row).unwrap(), &[2.0, 2.0, 2.0]);
        assert_eq!(g.get(col).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn matmul_forward_and_backward() {
        let tape = Tape::new();
        let a = tape.leaf(2, 2, vec![1., 2., 3., 4.]);
        let b = tape.leaf(2, 2, vec![5., 6., 7., 8.]);
        let y = a.matmul(b);
        assert_eq!(y.value(), vec![19., 22., 43., 50.]);
        let s = y.sum_all();
        let g = tape.backward(s);
        // dA = 1·Bᵀ summed: rows of ones times Bᵀ
        assert_eq!(g.get(a).unwrap(), &[11., 15., 11., 15.]);
        assert_eq!(g.get(b).unwrap(), &[4., 4., 6., 6.]);
    }

    #[test]
    fn concat_slice_roundtrip_gradients() {
        let tape = Tape::new();
        let a = tape.leaf(2, 2, vec![1., 2., 3., 4.]);
        let b = tape.leaf(2, 1, vec![5., 6.]);
        let c = tape.concat_cols(&[a, b]);
        let s = c.slice_cols(2, 1); // re-extract b
        assert_eq!(s.value(), vec![5., 6.]);
        let y = (s * s).sum_all();
        let g = tape.backward(y);
        assert_eq!(g.get(b).unwrap(), &[10., 12.]);
        assert!(g.get_or_zero(a).iter().all(|&x| x == 0.0));
    }

    // Central finite differences against analytic gradients on a composed
    // expression exercising every differentiable op.
    #[test]
    fn finite_difference_all_ops() {
        let build = |vals: &[f64]| -> f64 {
            let tape = Tape::new();
            let x = tape.leaf(2, 3, vals[..6].to_vec());
            let w = tape.leaf(3, 2, vals[6..12].to_vec());
            let b = tape.leaf(1, 2, vals[12..14].to_vec());
            let h = x.matmul(w) + b;
            let r = h.relu() + h.softplus() + h.elu().scale(0.25);
            let e = r.add_scalar(1.5).log() + r.exp().scale(1e-3) + r.square();
            let d = e.recip() + e.clamp_min(0.8);
            let m = d.matmul_tb(w); // [2,3]
            let q = (m * x) / x.add_scalar(5.0) - x.neg();
            let cat = tape.concat_cols(&[q, m.slice_cols(0, 2)]);
            cat.mean_all().item()
        };
        let grad = |vals: &[f64]| -> Vec<f64> {
            let tape = Tape::new();
            let x = tape.leaf(2, 3, vals[..6].to_vec());
            let w = tape.leaf(3, 2, vals[6..12].to_vec());
            let b = tape.leaf(1, 2, vals[12..14].to_vec());
            let h = x.matmul(w) + b;
            let r = h.relu() + h.softplus() + h.elu().scale(0.25);
            let e = r.add_scalar(1.5).log() + r.exp().scale(1e-3) + r.square();
            let d = e.recip() + e.clamp_min(0.8);
            let m = d.matmul_tb(w);
            let q = (m * x) / x.add_scalar(5.0) - x.neg();
            let cat = tape.concat_cols(&[q, m.slice_cols(0, 2)]);
            let root = cat.mean_all();
            let g = tape.backward(root);
            let mut out = g.get_or_zero(x);
            out.extend(g.get_or_zero(w));
            out.extend(g.get_or_zero(b));
            out
        };

        // away from relu/clamp kinks
        let vals: Vec<f64> = vec![
            0.7, -0.3, 1.2, 0.4, -0.9, 0.6, // x
            0.5, -0.2, 0.8, 0.3, -0.6, 0.9, // w
            0.35, -0.15, // b
        ];
        let g = grad(&vals);
        let h = 1e-5;
        for i in 0..vals.len() {
            let mut plus = vals.clone();
            plus[i] += h;
            let mut minus = vals.clone();
            minus[i] -= h;
            let fd = (build(&plus) - build(&minus)) / (2.0 * h);
            let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1.0);
            assert!(rel < 1e-6, "param {i}: analytic {} vs fd {fd}", g[i]);
        }
    }

    #[test]
    fn replay_determinism() {
        let run = || {
            let tape = Tape::new();
            let x = tape.leaf(1, 4, vec![0.3, -0.2, 0.9, 1.4]);
            let y = (x.softplus() * x.exp() + x.square()).mean_all();
            let g = tape.backward(y);
            (y.item(), g.get_or_zero(x))
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1.to_bits(), v2.to_bits());
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
