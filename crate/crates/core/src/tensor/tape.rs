use std::cell::{Ref, RefCell};
use std::rc::Rc;

use super::{sigmoid, softplus, Result, Tensor, TensorError};

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    /// `a * b^T`
    MatMulT(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MaxScalar(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Sum(usize),
    RowSums(usize),
    ColSums(usize),
    LogSumExpRows(usize),
    Gather(usize, Vec<usize>),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    Reshape(usize),
    RepeatRows(usize, usize),
    SoftmaxXent {
        logits: usize,
        targets: Vec<usize>,
        mask: Vec<f64>,
        probs: Vec<f64>,
    },
    PairwiseSqDist(usize, usize),
    GaussLogPdfPairwise(usize, usize, usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, so every node's inputs precede it and
/// [`Tape::backward`] is a single reverse sweep. Backward does not mutate the
/// tape.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.value().shape())
    }
}

/// Gradients of one backward sweep, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// d loss / d `v`; zeros when `v` does not reach the loss.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.id]),
        }
    }

    pub fn take(&mut self, v: Var<'_>) -> Tensor {
        self.grads[v.id]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.id]))
    }

    pub fn reached(&self, v: Var<'_>) -> bool {
        self.grads[v.id].is_some()
    }
}

fn shape2(r: usize, c: usize) -> Vec<usize> {
    vec![r, c]
}

fn broadcast_dims(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
) -> Result<(usize, usize)> {
    let (ar, ac) = a.dims2();
    let (br, bc) = b.dims2();
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    match (dim(ar, br), dim(ac, bc)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(TensorError::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        }),
    }
}

#[inline]
fn bidx(r: usize, c: usize, rows: usize, cols: usize) -> usize {
    (if rows == 1 { 0 } else { r }) * cols + if cols == 1 { 0 } else { c }
}

fn broadcast_zip(
    a: &Tensor,
    b: &Tensor,
    rows: usize,
    cols: usize,
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    if a.dims2() == (rows, cols) && b.dims2() == (rows, cols) {
        return a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    }
    let (ar, ac) = a.dims2();
    let (br, bc) = b.dims2();
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push(f(a.data()[bidx(r, c, ar, ac)], b.data()[bidx(r, c, br, bc)]));
        }
    }
    out
}

/// Sum a `rows x cols` gradient down to the (broadcast) shape of `target`.
fn reduce_to(g: &[f64], rows: usize, cols: usize, target: (usize, usize)) -> Vec<f64> {
    if target == (rows, cols) {
        return g.to_vec();
    }
    let (tr, tc) = target;
    let mut out = vec![0.0; tr * tc];
    for r in 0..rows {
        for c in 0..cols {
            out[bidx(r, c, tr, tc)] += g[r * cols + c];
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices whose extents cover the strided index
    // ranges `[0, m*k)` and `[0, k*n)`, and `c` is a dense `m x n` block.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drop every node so the tape can record a fresh forward pass.
    pub fn clear(&mut self) {
        self.nodes.get_mut().clear();
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A differentiable leaf (parameter or input we want gradients for).
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn unary(&self, x: usize, value: Tensor, op: Op) -> Var<'_> {
        let rg = self.needs(&[x]);
        self.push(value, op, rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes: Ref<'_, Vec<Node>> = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let shapes: Vec<Vec<usize>> = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                grads[id] = Some(g);
                continue;
            }
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }
}

fn acc<'a>(nodes: &[Node], grads: &'a mut [Option<Tensor>], id: usize) -> Option<&'a mut Tensor> {
    if !nodes[id].requires_grad {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| Tensor::zeros(nodes[id].value.shape())))
}

fn acc_vec(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, delta: &[f64]) {
    if let Some(t) = acc(nodes, grads, id) {
        for (x, d) in t.data_mut().iter_mut().zip(delta) {
            *x += d;
        }
    }
}

fn backprop(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let out = &nodes[id].value;
    let gd = g.data();
    match &nodes[id].op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            let (m, k) = av.dims2();
            let n = bv.cols();
            if let Some(ga) = acc(nodes, grads, a) {
                // dA = dC B^T
                gemm(m, n, k, gd, n as isize, 1, bv.data(), 1, n as isize, ga.data_mut());
            }
            if let Some(gb) = acc(nodes, grads, b) {
                // dB = A^T dC
                gemm(k, m, n, av.data(), 1, k as isize, gd, n as isize, 1, gb.data_mut());
            }
        }
        &Op::MatMulT(a, b) => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            let (m, k) = av.dims2();
            let n = bv.rows();
            if let Some(ga) = acc(nodes, grads, a) {
                // dA = dC B
                gemm(m, n, k, gd, n as isize, 1, bv.data(), k as isize, 1, ga.data_mut());
            }
            if let Some(gb) = acc(nodes, grads, b) {
                // dB = dC^T A
                gemm(n, m, k, gd, 1, n as isize, av.data(), k as isize, 1, gb.data_mut());
            }
        }
        &Op::Transpose(a) => {
            let (r, c) = out.dims2();
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    d[j * r + i] = gd[i * c + j];
                }
            }
            acc_vec(nodes, grads, a, &d);
        }
        &Op::Add(a, b) | &Op::Sub(a, b) => {
            let (r, c) = out.dims2();
            let sign = if matches!(nodes[id].op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if nodes[a].requires_grad {
                let d = reduce_to(gd, r, c, nodes[a].value.dims2());
                acc_vec(nodes, grads, a, &d);
            }
            if nodes[b].requires_grad {
                let mut d = reduce_to(gd, r, c, nodes[b].value.dims2());
                if sign < 0.0 {
                    d.iter_mut().for_each(|x| *x = -*x);
                }
                acc_vec(nodes, grads, b, &d);
            }
        }
        &Op::Mul(a, b) => {
            let (r, c) = out.dims2();
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            if nodes[a].requires_grad {
                let full = broadcast_zip(g, bv, r, c, |g, y| g * y);
                acc_vec(nodes, grads, a, &reduce_to(&full, r, c, av.dims2()));
            }
            if nodes[b].requires_grad {
                let full = broadcast_zip(g, av, r, c, |g, x| g * x);
                acc_vec(nodes, grads, b, &reduce_to(&full, r, c, bv.dims2()));
            }
        }
        &Op::Div(a, b) => {
            let (r, c) = out.dims2();
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            if nodes[a].requires_grad {
                let full = broadcast_zip(g, bv, r, c, |g, y| g / y);
                acc_vec(nodes, grads, a, &reduce_to(&full, r, c, av.dims2()));
            }
            if nodes[b].requires_grad {
                // d(x/y)/dy = -out / y
                let (br, bc) = bv.dims2();
                let mut full = Vec::with_capacity(r * c);
                for i in 0..r {
                    for j in 0..c {
                        let k = i * c + j;
                        full.push(-gd[k] * out.data()[k] / bv.data()[bidx(i, j, br, bc)]);
                    }
                }
                acc_vec(nodes, grads, b, &reduce_to(&full, r, c, bv.dims2()));
            }
        }
        &Op::Scale(a, f) => {
            let d: Vec<f64> = gd.iter().map(|x| x * f).collect();
            acc_vec(nodes, grads, a, &d);
        }
        &Op::AddScalar(a) => acc_vec(nodes, grads, a, gd),
        &Op::MaxScalar(a, floor) => {
            let x = &nodes[a].value;
            let d: Vec<f64> = gd
                .iter()
                .zip(x.data())
                .map(|(g, &x)| if x > floor { *g } else { 0.0 })
                .collect();
            acc_vec(nodes, grads, a, &d);
        }
        &Op::Tanh(a) => {
            let d: Vec<f64> = gd.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
            acc_vec(nodes, grads, a, &d);
        }
        &Op::Sigmoid(a) => {
            let d: Vec<f64> = gd.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
            acc_vec(nodes, grads, a, &d);
        }
        &Op::Softplus(a) => {
            let x = &nodes[a].value;
            let d: Vec<f64> = gd.iter().zip(x.data()).map(|(g, &x)| g * sigmoid(x)).collect();
            acc_vec(nodes, grads, a, &d);
        }
        &Op::Exp(a) => {
            let d: Vec<f64> = gd.iter().zip(out.data()).map(|(g, y)| g * y).collect();
            acc_vec(nodes, grads, a, &d);
        }
        &Op::Log(a) => {
            let x = &nodes[a].value;
            let d: Vec<f64> = gd.iter().zip(x.data()).map(|(g, x)| g / x).collect();
            acc_vec(nodes, grads, a, &d);
        }
        &Op::Square(a) => {
            let x = &nodes[a].value;
            let d: Vec<f64> = gd.iter().zip(x.data()).map(|(g, x)| 2.0 * g * x).collect();
            acc_vec(nodes, grads, a, &d);
        }
        &Op::Sum(a) => {
            let d = vec![gd[0]; nodes[a].value.len()];
            acc_vec(nodes, grads, a, &d);
        }
        &Op::RowSums(a) => {
            let (r, c) = nodes[a].value.dims2();
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                d[i * c..(i + 1) * c].iter_mut().for_each(|x| *x = gd[i]);
            }
            acc_vec(nodes, grads, a, &d);
        }
        &Op::ColSums(a) => {
            let (r, c) = nodes[a].value.dims2();
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                d[i * c..(i + 1) * c].copy_from_slice(&gd[..c]);
            }
            acc_vec(nodes, grads, a, &d);
        }
        &Op::LogSumExpRows(a) => {
            let x = &nodes[a].value;
            let (r, c) = x.dims2();
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                let lse = out.data()[i];
                for j in 0..c {
                    d[i * c + j] = gd[i] * (x.data()[i * c + j] - lse).exp();
                }
            }
            acc_vec(nodes, grads, a, &d);
        }
        Op::Gather(table, ids) => {
            if let Some(gt) = acc(nodes, grads, *table) {
                let e = gt.cols();
                let data = gt.data_mut();
                for (row, &tok) in ids.iter().enumerate() {
                    for j in 0..e {
                        data[tok * e + j] += gd[row * e + j];
                    }
                }
            }
        }
        &Op::SliceRows(a, start) => {
            if let Some(ga) = acc(nodes, grads, a) {
                let c = ga.cols();
                let dst = &mut ga.data_mut()[start * c..start * c + gd.len()];
                dst.iter_mut().zip(gd).for_each(|(x, g)| *x += g);
            }
        }
        &Op::SliceCols(a, start) => {
            if let Some(ga) = acc(nodes, grads, a) {
                let c = ga.cols();
                let (r, w) = out.dims2();
                let data = ga.data_mut();
                for i in 0..r {
                    for j in 0..w {
                        data[i * c + start + j] += gd[i * w + j];
                    }
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = nodes[p].value.len();
                acc_vec(nodes, grads, p, &gd[offset..offset + n]);
                offset += n;
            }
        }
        Op::ConcatCols(parts) => {
            let (r, total) = out.dims2();
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p].value.cols();
                if nodes[p].requires_grad {
                    let mut d = Vec::with_capacity(r * w);
                    for i in 0..r {
                        d.extend_from_slice(&gd[i * total + offset..i * total + offset + w]);
                    }
                    acc_vec(nodes, grads, p, &d);
                }
                offset += w;
            }
        }
        &Op::Reshape(a) => acc_vec(nodes, grads, a, gd),
        &Op::RepeatRows(a, times) => {
            let (r, c) = nodes[a].value.dims2();
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                for k in 0..times {
                    let src = &gd[(i * times + k) * c..(i * times + k + 1) * c];
                    d[i * c..(i + 1) * c].iter_mut().zip(src).for_each(|(x, s)| *x += s);
                }
            }
            acc_vec(nodes, grads, a, &d);
        }
        Op::SoftmaxXent {
            logits,
            targets,
            mask,
            probs,
        } => {
            let v = nodes[*logits].value.cols();
            let mut d = probs.clone();
            for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                let row = &mut d[i * v..(i + 1) * v];
                row[t] -= 1.0;
                let s = gd[i] * m;
                row.iter_mut().for_each(|x| *x *= s);
            }
            acc_vec(nodes, grads, *logits, &d);
        }
        &Op::PairwiseSqDist(a, b) => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            let (n, dim) = av.dims2();
            let m = bv.rows();
            let mut da = vec![0.0; n * dim];
            let mut db = vec![0.0; m * dim];
            for i in 0..n {
                for j in 0..m {
                    let gij = gd[i * m + j];
                    if gij == 0.0 {
                        continue;
                    }
                    for k in 0..dim {
                        let diff = 2.0 * gij * (av.data()[i * dim + k] - bv.data()[j * dim + k]);
                        da[i * dim + k] += diff;
                        db[j * dim + k] -= diff;
                    }
                }
            }
            acc_vec(nodes, grads, a, &da);
            acc_vec(nodes, grads, b, &db);
        }
        &Op::GaussLogPdfPairwise(z, loc, scale) => {
            let (zv, lv, sv) = (&nodes[z].value, &nodes[loc].value, &nodes[scale].value);
            let (b, dim) = zv.dims2();
            let c = lv.rows();
            let mut dz = vec![0.0; b * dim];
            let mut dl = vec![0.0; c * dim];
            let mut ds = vec![0.0; c * dim];
            for i in 0..b {
                for j in 0..c {
                    let gij = gd[i * c + j];
                    for k in 0..dim {
                        let s = sv.data()[j * dim + k];
                        let diff = zv.data()[i * dim + k] - lv.data()[j * dim + k];
                        let w = diff / (s * s);
                        dz[i * dim + k] -= gij * w;
                        dl[j * dim + k] += gij * w;
                        ds[j * dim + k] += gij * (diff * diff / (s * s * s) - 1.0 / s);
                    }
                }
            }
            acc_vec(nodes, grads, z, &dz);
            acc_vec(nodes, grads, loc, &dl);
            acc_vec(nodes, grads, scale, &ds);
        }
    }
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    /// First element of the value; the number held by a scalar node.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn check_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.check_tape(other);
        let (a, b) = (self.value(), other.value());
        let (m, k) = a.dims2();
        let (k2, n) = b.dims2();
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, a.data(), k as isize, 1, b.data(), n as isize, 1, &mut c);
        let rg = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(Tensor::matrix(m, n, c)?, Op::MatMul(self.id, other.id), rg))
    }

    /// `self * other^T`, used for the tied output projection.
    pub fn matmul_t(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.check_tape(other);
        let (a, b) = (self.value(), other.value());
        let (m, k) = a.dims2();
        let (n, k2) = b.dims2();
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul_t",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, a.data(), k as isize, 1, b.data(), 1, k as isize, &mut c);
        let rg = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(Tensor::matrix(m, n, c)?, Op::MatMulT(self.id, other.id), rg))
    }

    pub fn transpose(&self) -> Var<'t> {
        let a = self.value();
        let (r, c) = a.dims2();
        let mut d = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                d[j * r + i] = a.data()[i * c + j];
            }
        }
        self.tape
            .unary(self.id, Tensor { shape: shape2(c, r), data: d }, Op::Transpose(self.id))
    }

    fn binary(
        &self,
        other: &Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        self.check_tape(other);
        let (a, b) = (self.value(), other.value());
        let (r, c) = broadcast_dims(name, &a, &b)?;
        let data = broadcast_zip(&a, &b, r, c, f);
        let rg = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(Tensor { shape: shape2(r, c), data }, op, rg))
    }

    /// Broadcasting sum (either operand may have a unit row or column dimension).
    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", |x, y| x / y, Op::Div(self.id, other.id))
    }

    pub fn scale(&self, factor: f64) -> Var<'t> {
        let v = self.value().map(|x| x * factor);
        self.tape.unary(self.id, v, Op::Scale(self.id, factor))
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x + c);
        self.tape.unary(self.id, v, Op::AddScalar(self.id))
    }

    /// Elementwise `max(x, floor)`; the gradient is zero wherever `x <= floor`.
    pub fn max_scalar(&self, floor: f64) -> Var<'t> {
        let v = self.value().map(|x| x.max(floor));
        self.tape.unary(self.id, v, Op::MaxScalar(self.id, floor))
    }

    pub fn tanh(&self) -> Var<'t> {
        let v = self.value().map(f64::tanh);
        self.tape.unary(self.id, v, Op::Tanh(self.id))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let v = self.value().map(sigmoid);
        self.tape.unary(self.id, v, Op::Sigmoid(self.id))
    }

    pub fn softplus(&self) -> Var<'t> {
        let v = self.value().map(softplus);
        self.tape.unary(self.id, v, Op::Softplus(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        let v = self.value().map(f64::exp);
        self.tape.unary(self.id, v, Op::Exp(self.id))
    }

    pub fn log(&self) -> Result<Var<'t>> {
        let x = self.value();
        if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        let v = x.map(f64::ln);
        Ok(self.tape.unary(self.id, v, Op::Log(self.id)))
    }

    pub fn square(&self) -> Var<'t> {
        let v = self.value().map(|x| x * x);
        self.tape.unary(self.id, v, Op::Square(self.id))
    }

    /// Sum of all elements, as a `1 x 1` node.
    pub fn sum(&self) -> Var<'t> {
        let s = self.value().sum();
        self.tape.unary(self.id, Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Per-row sums, `r x c -> r x 1`.
    pub fn row_sums(&self) -> Var<'t> {
        let x = self.value();
        let (r, c) = x.dims2();
        let d = (0..r).map(|i| x.data()[i * c..(i + 1) * c].iter().sum()).collect();
        self.tape
            .unary(self.id, Tensor { shape: shape2(r, 1), data: d }, Op::RowSums(self.id))
    }

    /// Per-column sums, `r x c -> 1 x c`.
    pub fn col_sums(&self) -> Var<'t> {
        let x = self.value();
        let (r, c) = x.dims2();
        let mut d = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                d[j] += x.data()[i * c + j];
            }
        }
        self.tape
            .unary(self.id, Tensor { shape: shape2(1, c), data: d }, Op::ColSums(self.id))
    }

    /// Per-row log-sum-exp with max subtraction, `r x c -> r x 1`.
    pub fn log_sum_exp_rows(&self) -> Var<'t> {
        let x = self.value();
        let (r, c) = x.dims2();
        let d = (0..r)
            .map(|i| super::log_sum_exp(&x.data()[i * c..(i + 1) * c]))
            .collect();
        self.tape.unary(
            self.id,
            Tensor { shape: shape2(r, 1), data: d },
            Op::LogSumExpRows(self.id),
        )
    }

    /// Row lookup: `self` is a `V x E` table, result is `ids.len() x E`.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Var<'t>> {
        let t = self.value();
        let (v, e) = t.dims2();
        let mut d = Vec::with_capacity(ids.len() * e);
        for &i in ids {
            if i >= v {
                return Err(TensorError::Index { index: i, size: v });
            }
            d.extend_from_slice(&t.data()[i * e..(i + 1) * e]);
        }
        Ok(self.tape.unary(
            self.id,
            Tensor { shape: shape2(ids.len(), e), data: d },
            Op::Gather(self.id, ids.to_vec()),
        ))
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (r, c) = x.dims2();
        if start > end || end > r {
            return Err(TensorError::Index { index: end, size: r });
        }
        let d = x.data()[start * c..end * c].to_vec();
        Ok(self.tape.unary(
            self.id,
            Tensor { shape: shape2(end - start, c), data: d },
            Op::SliceRows(self.id, start),
        ))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (r, c) = x.dims2();
        if start > end || end > c {
            return Err(TensorError::Index { index: end, size: c });
        }
        let w = end - start;
        let mut d = Vec::with_capacity(r * w);
        for i in 0..r {
            d.extend_from_slice(&x.data()[i * c + start..i * c + end]);
        }
        Ok(self.tape.unary(
            self.id,
            Tensor { shape: shape2(r, w), data: d },
            Op::SliceCols(self.id, start),
        ))
    }

    /// Reinterpret as `rows x cols` (same element count, row-major).
    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Var<'t>> {
        let x = self.value();
        if rows * cols != x.len() {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: x.shape().to_vec(),
                rhs: vec![rows, cols],
            });
        }
        Ok(self.tape.unary(
            self.id,
            Tensor { shape: shape2(rows, cols), data: x.data().to_vec() },
            Op::Reshape(self.id),
        ))
    }

    /// Each row repeated `times` times consecutively.
    pub fn repeat_rows(&self, times: usize) -> Var<'t> {
        let x = self.value();
        let (r, c) = x.dims2();
        let mut d = Vec::with_capacity(r * c * times);
        for i in 0..r {
            for _ in 0..times {
                d.extend_from_slice(&x.data()[i * c..(i + 1) * c]);
            }
        }
        self.tape.unary(
            self.id,
            Tensor { shape: shape2(r * times, c), data: d },
            Op::RepeatRows(self.id, times),
        )
    }

    /// Row-wise softmax cross-entropy.
    ///
    /// `self` holds `n x V` logits; the result is `n x 1` with entry
    /// `mask[i] * -log softmax(logits_i)[targets[i]]`.
    pub fn softmax_xent(&self, targets: &[usize], mask: &[f64]) -> Result<Var<'t>> {
        let x = self.value();
        let (n, v) = x.dims2();
        if targets.len() != n || mask.len() != n {
            return Err(TensorError::Shape {
                op: "softmax_xent",
                lhs: x.shape().to_vec(),
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let mut probs = Vec::with_capacity(n * v);
        let mut losses = Vec::with_capacity(n);
        for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
            if t >= v {
                return Err(TensorError::Index { index: t, size: v });
            }
            let row = &x.data()[i * v..(i + 1) * v];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|l| (l - mx).exp()).sum();
            let lse = mx + z.ln();
            probs.extend(row.iter().map(|l| (l - lse).exp()));
            losses.push(m * (lse - row[t]));
        }
        Ok(self.tape.unary(
            self.id,
            Tensor { shape: shape2(n, 1), data: losses },
            Op::SoftmaxXent {
                logits: self.id,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
            },
        ))
    }

    /// Squared Euclidean distances between rows: `n x D`, `m x D` -> `n x m`.
    pub fn pairwise_sq_dist(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.check_tape(other);
        let (a, b) = (self.value(), other.value());
        let (n, d) = a.dims2();
        let (m, d2) = b.dims2();
        if d != d2 {
            return Err(TensorError::Shape {
                op: "pairwise_sq_dist",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let ai = &a.data()[i * d..(i + 1) * d];
            for j in 0..m {
                let bj = &b.data()[j * d..(j + 1) * d];
                out.push(ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum());
            }
        }
        let rg = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(
            Tensor { shape: shape2(n, m), data: out },
            Op::PairwiseSqDist(self.id, other.id),
            rg,
        ))
    }

    /// Diagonal-Gaussian log-densities of every row of `self` (`B x D`) under
    /// every component (`loc`, `scale`: `C x D`), giving `B x C`.
    pub fn gauss_log_pdf_pairwise(&self, loc: &Var<'t>, scale: &Var<'t>) -> Result<Var<'t>> {
        self.check_tape(loc);
        self.check_tape(scale);
        let (z, l, s) = (self.value(), loc.value(), scale.value());
        let (b, d) = z.dims2();
        let (c, d2) = l.dims2();
        if d != d2 || l.dims2() != s.dims2() {
            return Err(TensorError::Shape {
                op: "gauss_log_pdf_pairwise",
                lhs: z.shape().to_vec(),
                rhs: l.shape().to_vec(),
            });
        }
        let log_norm: Vec<f64> = (0..c)
            .map(|j| {
                s.data()[j * d..(j + 1) * d]
                    .iter()
                    .map(|x| x.ln() + HALF_LN_2PI)
                    .sum()
            })
            .collect();
        let mut out = Vec::with_capacity(b * c);
        for i in 0..b {
            for j in 0..c {
                let mut q = 0.0;
                for k in 0..d {
                    let u = (z.data()[i * d + k] - l.data()[j * d + k]) / s.data()[j * d + k];
                    q += u * u;
                }
                out.push(-0.5 * q - log_norm[j]);
            }
        }
        let rg = self.tape.needs(&[self.id, loc.id, scale.id]);
        Ok(self.tape.push(
            Tensor { shape: shape2(b, c), data: out },
            Op::GaussLogPdfPairwise(self.id, loc.id, scale.id),
            rg,
        ))
    }
}

/// Stack rows of several vars (all with equal column count).
pub(crate) fn concat_rows<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| TensorError::Contract("concat of zero parts".into()))?;
    let tape = first.tape;
    let cols = first.value().cols();
    let mut data = Vec::new();
    let mut rows = 0;
    for p in parts {
        let v = p.value();
        if v.cols() != cols {
            return Err(TensorError::Shape {
                op: "concat_rows",
                lhs: first.shape(),
                rhs: v.shape().to_vec(),
            });
        }
        rows += v.rows();
        data.extend_from_slice(v.data());
    }
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let rg = tape.needs(&ids);
    Ok(tape.push(Tensor { shape: shape2(rows, cols), data }, Op::ConcatRows(ids), rg))
}

/// Place vars side by side (all with equal row count).
pub(crate) fn concat_cols<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| TensorError::Contract("concat of zero parts".into()))?;
    let tape = first.tape;
    let rows = first.value().rows();
    let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    if let Some(bad) = values.iter().find(|v| v.rows() != rows) {
        return Err(TensorError::Shape {
            op: "concat_cols",
            lhs: first.shape(),
            rhs: bad.shape().to_vec(),
        });
    }
    let total: usize = values.iter().map(|v| v.cols()).sum();
    let mut data = Vec::with_capacity(rows * total);
    for i in 0..rows {
        for v in &values {
            data.extend_from_slice(v.row_slice(i));
        }
    }
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let rg = tape.needs(&ids);
    Ok(tape.push(Tensor { shape: shape2(rows, total), data }, Op::ConcatCols(ids), rg))
}

impl Tape {
    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        concat_rows(parts)
    }

    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        concat_cols(parts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn positive(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(0.3..2.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let tape = Tape::new();
        let i = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let x = tape.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
        assert_eq!(i.matmul(&x).unwrap().value().data(), &[3.0, 4.0]);
        let a = tape.scalar(2.0);
        let b = tape.scalar(0.0);
        assert_eq!(a.matmul(&b).unwrap().item(), 0.0);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = (random(&mut rng, 3, 4), random(&mut rng, 4, 2));
        let tape = Tape::new();
        let c = tape.constant(a.clone()).matmul(&tape.constant(b.clone())).unwrap().value();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.get(i, k) * b.get(k, j);
                }
                assert!((c.get(i, j) - s).abs() < 1e-14);
            }
        }
        let bt = tape.constant(b.clone()).transpose();
        let ct = tape.constant(a).matmul_t(&bt).unwrap().value();
        assert_eq!(ct.data(), c.data());
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = a.matmul(&b).unwrap_err();
        assert_eq!(
            err,
            TensorError::Shape { op: "matmul", lhs: vec![2, 3], rhs: vec![2, 3] }
        );
        assert!(err.to_string().contains("[2, 3] vs [2, 3]"));
    }

    #[test]
    fn elementwise_examples() {
        let tape = Tape::new();
        let zero = tape.scalar(0.0);
        assert!((zero.softplus().item() - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(zero.tanh().item(), 0.0);
        let s = tape.constant(Tensor::row(vec![50.0, -50.0])).sigmoid().value();
        assert!(s.data().iter().all(|&v| v > 0.0 && v <= 1.0));
        assert!(matches!(
            tape.constant(Tensor::row(vec![1.0, 0.0])).log(),
            Err(TensorError::Domain { .. })
        ));
    }

    #[test]
    fn softmax_xent_examples() {
        let tape = Tape::new();
        let v = 7;
        let logits = tape.param(Tensor::row(vec![0.3; v]));
        let loss = logits.softmax_xent(&[4], &[1.0]).unwrap();
        assert!((loss.item() - (v as f64).ln()).abs() < 1e-14);
        let g = tape.backward(loss.sum()).unwrap().wrt(logits);
        for (j, &gj) in g.data().iter().enumerate() {
            let expected = if j == 4 { 1.0 / v as f64 - 1.0 } else { 1.0 / v as f64 };
            assert!((gj - expected).abs() < 1e-15);
        }
        // -log softmax([10,-10])[0] = log(1 + e^-20) = 2.0611536203143807e-9
        // computed as lse - x, so accuracy is absolute at the scale of the logits
        let l = tape.constant(Tensor::row(vec![10.0, -10.0])).softmax_xent(&[0], &[1.0]).unwrap();
        assert!((l.item() - 2.061_153_620_314_380_7e-9).abs() < 1e-14);
        let err = tape.constant(Tensor::row(vec![0.0; 3])).softmax_xent(&[3], &[1.0]);
        assert_eq!(err.unwrap_err(), TensorError::Index { index: 3, size: 3 });
    }

    #[test]
    fn backward_identity_and_square() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        assert_eq!(tape.backward(x).unwrap().wrt(x).item(), 1.0);
        let y = tape.param(Tensor::row(vec![1.0, -2.0, 0.5]));
        let loss = y.mul(&y).unwrap().sum();
        assert_eq!(tape.backward(loss).unwrap().wrt(y).data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_zeroes_unreached() {
        let tape = Tape::new();
        let x = tape.param(Tensor::row(vec![1.0, 2.0]));
        let unused = tape.param(Tensor::row(vec![5.0]));
        assert!(matches!(tape.backward(x), Err(TensorError::Contract(_))));
        let g = tape.backward(x.sum()).unwrap();
        assert_eq!(g.wrt(unused).data(), &[0.0]);
        // reusable: a second sweep gives the same answer, no accumulation
        let g2 = tape.backward(x.sum()).unwrap();
        assert_eq!(g2.wrt(x).data(), g.wrt(x).data());
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let tape = Tape::new();
            let a = tape.param(random(&mut rng, 5, 6));
            let b = tape.param(random(&mut rng, 6, 3));
            a.matmul(&b).unwrap().tanh().log_sum_exp_rows().value().data().to_vec()
        };
        assert_eq!(run(), run());
    }

    fn assert_grad<F>(inputs: Vec<Tensor>, f: F)
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    {
        let report = gradcheck::check(&inputs, 1e-5, f).unwrap();
        assert!(report.max_rel_error() < 1e-4, "{:?}", report.rel_errors);
    }

    #[test]
    fn finite_differences_for_every_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let (a, b) = (random(&mut rng, 3, 4), random(&mut rng, 4, 2));
            assert_grad(vec![a.clone(), b], |_, v| Ok(v[0].matmul(&v[1])?.tanh().sum()));
            let c = random(&mut rng, 5, 4);
            assert_grad(vec![a.clone(), c], |_, v| Ok(v[0].matmul_t(&v[1])?.square().sum()));
            let bias = random(&mut rng, 1, 4);
            let col = positive(&mut rng, 3, 1);
            assert_grad(vec![a.clone(), bias.clone(), col.clone()], |_, v| {
                let s = v[0].add(&v[1])?.mul(&v[2])?.sub(&v[1])?.div(&v[2])?;
                Ok(s.sigmoid().sum())
            });
            assert_grad(vec![a.clone()], |_, v| Ok(v[0].softplus().exp().mean()));
            let p = positive(&mut rng, 3, 4);
            assert_grad(vec![p], |_, v| Ok(v[0].log()?.scale(1.7).add_scalar(0.2).square().sum()));
            assert_grad(vec![a.clone()], |_, v| Ok(v[0].log_sum_exp_rows().sum()));
            assert_grad(vec![a.clone()], |_, v| {
                Ok(v[0].row_sums().square().sum().add(&v[0].col_sums().square().sum())?)
            });
            assert_grad(vec![a.clone()], |_, v| Ok(v[0].transpose().reshape(2, 6)?.repeat_rows(3).tanh().sum()));
            assert_grad(vec![a.clone()], |t, v| {
                let top = v[0].slice_rows(0, 2)?;
                let right = v[0].slice_cols(1, 4)?;
                let rows = t.concat_rows(&[top, v[0]])?;
                let cols = t.concat_cols(&[right, v[0]])?;
                Ok(rows.square().sum().add(&cols.tanh().sum())?)
            });
            let table = random(&mut rng, 6, 3);
            assert_grad(vec![table], |_, v| Ok(v[0].gather_rows(&[4, 0, 4, 2])?.square().sum()));
            let logits = random(&mut rng, 4, 5).map(|x| 3.0 * x);
            assert_grad(vec![logits], |_, v| {
                Ok(v[0].softmax_xent(&[0, 3, 4, 1], &[1.0, 0.5, 0.0, 1.0])?.sum())
            });
            let (x, y) = (random(&mut rng, 4, 3), random(&mut rng, 5, 3));
            assert_grad(vec![x.clone(), y], |_, v| Ok(v[0].pairwise_sq_dist(&v[1])?.scale(-0.5).exp().sum()));
            let (loc, scale) = (random(&mut rng, 3, 3), positive(&mut rng, 3, 3));
            assert_grad(vec![x, loc, scale], |_, v| {
                Ok(v[0].gauss_log_pdf_pairwise(&v[1], &v[2])?.log_sum_exp_rows().sum())
            });
            let m = random(&mut rng, 2, 3);
            assert_grad(vec![m], |_, v| Ok(v[0].max_scalar(0.05).square().sum()));
        }
    }
}
