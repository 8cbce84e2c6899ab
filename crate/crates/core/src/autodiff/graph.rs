//! Eager tape of tensor operations with reverse-mode differentiation.
//!
//! Every primitive computes its value when it is recorded, so model code can
//! read intermediate values (argmax, beam candidates) while the tape is being
//! built. Node ids are strictly increasing, which makes append order a valid
//! topological order for the backward sweep.

use super::tensor::{Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Affine { a: usize, scale: T },
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    Reshape { a: usize },
    Transpose { a: usize },
    Tanh { a: usize },
    Sigmoid { a: usize },
    Relu { a: usize },
    Exp { a: usize },
    Log { a: usize },
    Softmax { a: usize, axis: usize },
    LogSoftmax { a: usize, axis: usize },
    Sum { a: usize, axis: Option<usize> },
    Mean { a: usize, axis: Option<usize> },
    MaxOverTime { a: usize, argmax: Vec<usize> },
    GatherRows { table: usize, ids: Vec<usize>, padding: Option<usize> },
    Conv1d { input: usize, kernel: usize, bias: usize, seq_len: usize },
    Dropout { a: usize, mask: Vec<T> },
    Gather { a: usize, idx: Vec<usize> },
    LogSumExp { a: usize },
    BroadcastRows { a: usize },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "elementwise_mul",
            Op::Affine { .. } => "affine",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape { .. } => "reshape",
            Op::Transpose { .. } => "transpose",
            Op::Tanh { .. } => "tanh",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Relu { .. } => "relu",
            Op::Exp { .. } => "exp",
            Op::Log { .. } => "log",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::MaxOverTime { .. } => "max_over_time",
            Op::GatherRows { .. } => "embedding_lookup",
            Op::Conv1d { .. } => "conv1d",
            Op::Dropout { .. } => "dropout",
            Op::Gather { .. } => "gather",
            Op::LogSumExp { .. } => "logsumexp",
            Op::BroadcastRows { .. } => "broadcast_rows",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Append-only computation graph. Not shared across threads; build one per
/// example or per worker.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

/// `outer x size x inner` decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Period of `b` when broadcast against `a` over leading dimensions.
fn broadcast_period(op: &'static str, a: &[usize], b: &[usize]) -> Result<usize> {
    let mut b_trim = b;
    while b_trim.len() > 1 && b_trim[0] == 1 {
        b_trim = &b_trim[1..];
    }
    let ok = b_trim.len() <= a.len() && a[a.len() - b_trim.len()..] == *b_trim;
    if !ok {
        return Err(Error::shape(op, format!("cannot broadcast {b:?} onto {a:?}")));
    }
    Ok(b_trim.iter().product())
}

fn reduce_shape(shape: &[usize], axis: Option<usize>) -> Vec<usize> {
    match axis {
        None => vec![1],
        Some(ax) => {
            let mut s: Vec<usize> = shape.to_vec();
            s.remove(ax);
            if s.is_empty() {
                vec![1]
            } else {
                s
            }
        }
    }
}

/// Additive mask with `0` on the first `valid` positions and a large
/// negative value on the rest.
pub fn length_mask<T: Float>(total: usize, valid: usize) -> Vec<T> {
    (0..total)
        .map(|i| if i < valid { T::zero() } else { T::MASKED })
        .collect()
}

struct MatDims {
    m: usize,
    k: usize,
    n: usize,
    rsa: isize,
    csa: isize,
    rsb: isize,
    csb: isize,
}

fn matmul_dims(
    a: &[usize],
    b: &[usize],
    ta: bool,
    tb: bool,
) -> Result<(MatDims, Vec<usize>)> {
    let bad = |why: &str| Error::shape("matmul", format!("{a:?} x {b:?} ({why})"));
    let (ar, ac) = match a.len() {
        1 => (1, a[0]),
        2 => (a[0], a[1]),
        _ => return Err(bad("lhs must be 1D or 2D")),
    };
    let (br, bc) = match b.len() {
        1 => (b[0], 1),
        2 => (b[0], b[1]),
        _ => return Err(bad("rhs must be 1D or 2D")),
    };
    let (m, k1, rsa, csa) = if ta && a.len() == 2 {
        (ac, ar, 1, ac as isize)
    } else {
        (ar, ac, ac as isize, 1)
    };
    let (k2, n, rsb, csb) = if tb && b.len() == 2 {
        (bc, br, 1, bc as isize)
    } else {
        (br, bc, bc as isize, 1)
    };
    if k1 != k2 {
        return Err(bad(&format!("inner dims {k1} != {k2}")));
    }
    let out = match (a.len(), b.len()) {
        (1, 1) => vec![1],
        (1, _) => vec![n],
        (_, 1) => vec![m],
        _ => vec![m, n],
    };
    Ok((
        MatDims {
            m,
            k: k1,
            n,
            rsa,
            csa,
            rsb,
            csb,
        },
        out,
    ))
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            check_finite: false,
        }
    }

    /// Graph that verifies every produced value is finite.
    pub fn checked() -> Self {
        Graph {
            nodes: Vec::new(),
            check_finite: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Smallest `|x|` over all relu inputs; `None` without relu nodes.
    /// Central differences are unreliable when this is below the step size.
    pub fn relu_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu { a } => self.nodes[a]
                    .value
                    .data()
                    .iter()
                    .map(|x| x.to_f64_lossy().abs())
                    .reduce(f64::min),
                _ => None,
            })
            .reduce(f64::min)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes[id].value.requires_grad()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, inputs: &[usize]) -> Result<Var> {
        let rg = inputs.iter().any(|&i| self.requires(i));
        let id = self.nodes.len();
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite { node: id, op: op.name() });
        }
        self.nodes.push(Node {
            op,
            value: value.with_grad(rg),
        });
        Ok(Var(id))
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t.with_grad(true),
        });
        Var(id)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t.with_grad(false),
        });
        Var(id)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, false)
    }

    /// `a x b^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, true)
    }

    pub fn matmul_ex(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (d, out_shape) = matmul_dims(self.shape(a), self.shape(b), ta, tb)?;
        let mut out = vec![T::zero(); d.m * d.n];
        T::gemm_acc(
            d.m,
            d.k,
            d.n,
            self.data(a),
            d.rsa,
            d.csa,
            self.data(b),
            d.rsb,
            d.csb,
            &mut out,
            d.n as isize,
            1,
        );
        let t = Tensor::new(out_shape, out)?;
        self.push(Op::MatMul { a: a.0, b: b.0, ta, tb }, t, &[a.0, b.0])
    }

    fn binary(&mut self, a: Var, b: Var, kind: u8) -> Result<Var> {
        let name = ["add", "sub", "elementwise_mul"][kind as usize];
        let period = broadcast_period(name, self.shape(a), self.shape(b))?;
        let av = self.data(a);
        let bv = self.data(b);
        let out: Vec<T> = av
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bv[i % period];
                match kind {
                    0 => x + y,
                    1 => x - y,
                    _ => x * y,
                }
            })
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let op = match kind {
            0 => Op::Add { a: a.0, b: b.0 },
            1 => Op::Sub { a: a.0, b: b.0 },
            _ => Op::Mul { a: a.0, b: b.0 },
        };
        self.push(op, t, &[a.0, b.0])
    }

    /// `a + b`, with `b` broadcast over the leading dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, 0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, 1)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, 2)
    }

    /// `scale * a + shift`
    pub fn affine(&mut self, a: Var, scale: T, shift: T) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| scale * x + shift).collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push(Op::Affine { a: a.0, scale }, t, &[a.0])
    }

    pub fn scale(&mut self, a: Var, scale: T) -> Result<Var> {
        self.affine(a, scale, T::zero())
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        self.affine(a, -T::one(), T::one())
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let same_rank = s.len() == base.len();
            let compatible = same_rank
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("axis {axis}: {base:?} vs {s:?}"),
                ));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let chunk = self.shape(*v)[axis] * inner;
                out.extend_from_slice(&self.data(*v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let ids: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        let t = Tensor::new(out_shape, out)?;
        self.push(
            Op::Concat {
                inputs: ids.clone(),
                axis,
            },
            t,
            &ids,
        )
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {end}) on axis {axis} of {shape:?}"),
            ));
        }
        let (outer, size, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        let src = self.data(a);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * size + start) * inner..(o * size + end) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        let t = Tensor::new(out_shape, out)?;
        self.push(Op::Slice { a: a.0, axis, start }, t, &[a.0])
    }

    /// Row `i` of a 2D tensor as a `(1, cols)` tensor.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        self.slice(a, 0, i, i + 1)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().with_grad(false).reshaped(shape.to_vec())?;
        self.push(Op::Reshape { a: a.0 }, t, &[a.0])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("need 2D, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.data(a);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], out)?;
        self.push(Op::Transpose { a: a.0 }, t, &[a.0])
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| f(x)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push(op, t, &[a.0])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh { a: a.0 }, |x| x.tanh())
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid { a: a.0 }, sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu { a: a.0 }, |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.unary(a, Op::Exp { a: a.0 }, |x| x.exp())?;
        if let Some(x) = self.data(v).iter().find(|x| !x.is_finite()) {
            let bad = *x;
            self.nodes.pop();
            return Err(Error::Domain {
                op: "exp",
                detail: format!("overflow to {bad}"),
            });
        }
        Ok(v)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.data(a).iter().find(|&&x| !(x > T::zero())) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("argument {x} is not positive"),
            });
        }
        self.unary(a, Op::Log { a: a.0 }, |x| x.ln())
    }

    fn check_mask(&self, a: Var, axis: usize, mask: Option<&[T]>) -> Result<()> {
        let s = self.shape(a);
        if axis >= s.len() {
            return Err(Error::shape("softmax", format!("axis {axis} of {s:?}")));
        }
        if let Some(m) = mask {
            if m.len() != s[axis] && m.len() != self.value(a).len() {
                return Err(Error::shape(
                    "softmax",
                    format!("mask of length {} for {s:?} along axis {axis}", m.len()),
                ));
            }
        }
        Ok(())
    }

    /// Shifted and masked logits, normalised along `axis`. Returns
    /// `(log_probabilities, probabilities)`.
    fn normalise(&self, a: Var, axis: usize, mask: Option<&[T]>) -> (Vec<T>, Vec<T>) {
        let (outer, size, inner) = split_axis(self.shape(a), axis);
        let x = self.data(a);
        let mut logp = vec![T::zero(); x.len()];
        let mut p = vec![T::zero(); x.len()];
        let m_at = |idx: usize, i: usize| -> T {
            match mask {
                None => T::zero(),
                Some(m) if m.len() == size => m[i],
                Some(m) => m[idx],
            }
        };
        for o in 0..outer {
            for r in 0..inner {
                let at = |i: usize| (o * size + i) * inner + r;
                let mut mx = T::neg_infinity();
                for i in 0..size {
                    let v = x[at(i)] + m_at(at(i), i);
                    if v > mx {
                        mx = v;
                    }
                }
                let mut z = T::zero();
                for i in 0..size {
                    let e = (x[at(i)] + m_at(at(i), i) - mx).exp();
                    p[at(i)] = e;
                    z += e;
                }
                let lz = z.ln();
                for i in 0..size {
                    let idx = at(i);
                    p[idx] = p[idx] / z;
                    logp[idx] = x[idx] + m_at(idx, i) - mx - lz;
                }
            }
        }
        (logp, p)
    }

    /// Softmax along `axis`. `mask` is additive and has either the length of
    /// that axis (shared by every slice) or the full number of elements.
    pub fn softmax(&mut self, a: Var, axis: usize, mask: Option<&[T]>) -> Result<Var> {
        self.check_mask(a, axis, mask)?;
        let (_, p) = self.normalise(a, axis, mask);
        let t = Tensor::new(self.shape(a).to_vec(), p)?;
        self.push(Op::Softmax { a: a.0, axis }, t, &[a.0])
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize, mask: Option<&[T]>) -> Result<Var> {
        self.check_mask(a, axis, mask)?;
        let (lp, _) = self.normalise(a, axis, mask);
        let t = Tensor::new(self.shape(a).to_vec(), lp)?;
        self.push(Op::LogSoftmax { a: a.0, axis }, t, &[a.0])
    }

    fn reduce(&mut self, a: Var, axis: Option<usize>, mean: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let x = self.data(a);
        let out = match axis {
            None => {
                let s: T = x.iter().copied().sum();
                if mean {
                    vec![s / T::from_usize(x.len()).unwrap()]
                } else {
                    vec![s]
                }
            }
            Some(ax) => {
                if ax >= shape.len() {
                    return Err(Error::shape("sum", format!("axis {ax} of {shape:?}")));
                }
                let (outer, size, inner) = split_axis(&shape, ax);
                let mut out = vec![T::zero(); outer * inner];
                for o in 0..outer {
                    for i in 0..size {
                        for r in 0..inner {
                            out[o * inner + r] += x[(o * size + i) * inner + r];
                        }
                    }
                }
                if mean {
                    let d = T::from_usize(size).unwrap();
                    out.iter_mut().for_each(|v| *v = *v / d);
                }
                out
            }
        };
        let t = Tensor::new(reduce_shape(&shape, axis), out)?;
        let op = if mean {
            Op::Mean { a: a.0, axis }
        } else {
            Op::Sum { a: a.0, axis }
        };
        self.push(op, t, &[a.0])
    }

    /// Sum over `axis`, or over everything when `axis` is `None`.
    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(a, axis, false)
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(a, axis, true)
    }

    /// Column-wise max over the rows of a `(L, c)` tensor, giving `(c,)`.
    pub fn max_over_time(&mut self, a: Var) -> Result<Var> {
        let rows = self.value(a).rows();
        let v = self.max_over_time_grouped(a, rows)?;
        let c = self.value(a).cols();
        self.nodes[v.0].value = self.nodes[v.0].value.clone().reshaped(vec![c])?;
        Ok(v)
    }

    /// Max over consecutive blocks of `group` rows: `(G*group, c)` to `(G, c)`.
    /// Ties route the gradient to the earliest row.
    pub fn max_over_time_grouped(&mut self, a: Var, group: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || group == 0 || !s[0].is_multiple_of(group) {
            return Err(Error::shape(
                "max_over_time",
                format!("{s:?} with group {group}"),
            ));
        }
        let (r, c) = (s[0], s[1]);
        let g = r / group;
        let x = self.data(a);
        let mut out = vec![T::zero(); g * c];
        let mut arg = vec![0usize; g * c];
        for gi in 0..g {
            for ci in 0..c {
                let mut best = gi * group;
                for t in 1..group {
                    let row = gi * group + t;
                    if x[row * c + ci] > x[best * c + ci] {
                        best = row;
                    }
                }
                out[gi * c + ci] = x[best * c + ci];
                arg[gi * c + ci] = best;
            }
        }
        let t = Tensor::new(vec![g, c], out)?;
        self.push(Op::MaxOverTime { a: a.0, argmax: arg }, t, &[a.0])
    }

    /// Rows of `table` selected by `ids`. Rows whose id equals `padding`
    /// are zero and pass no gradient.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize], padding: Option<usize>) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("embedding_lookup", format!("table {s:?}")));
        }
        if ids.is_empty() {
            return Err(Error::shape("embedding_lookup", "no ids"));
        }
        let (v, c) = (s[0], s[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::shape(
                "embedding_lookup",
                format!("id {bad} out of range for {v} rows"),
            ));
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            if Some(i) == padding {
                out.extend(std::iter::repeat_n(T::zero(), c));
            } else {
                out.extend_from_slice(&src[i * c..(i + 1) * c]);
            }
        }
        let t = Tensor::new(vec![ids.len(), c], out)?;
        self.push(
            Op::GatherRows {
                table: table.0,
                ids: ids.to_vec(),
                padding,
            },
            t,
            &[table.0],
        )
    }

    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize], padding: Option<usize>) -> Result<Var> {
        self.gather_rows(table, ids, padding)
    }

    /// Same-padded 1D convolution applied independently to consecutive
    /// blocks of `seq_len` rows. `input: (G*seq_len, c_in)`,
    /// `kernel: (c_in, c_out, width)` with odd width, `bias: (c_out,)`.
    pub fn conv1d(&mut self, input: Var, kernel: Var, bias: Var, seq_len: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        let bs = self.shape(bias).to_vec();
        let ok = xs.len() == 2
            && ks.len() == 3
            && ks[0] == xs[1]
            && ks[2] % 2 == 1
            && bs == [ks[1]]
            && seq_len > 0
            && xs[0].is_multiple_of(seq_len);
        if !ok {
            return Err(Error::shape(
                "conv1d",
                format!("input {xs:?}, kernel {ks:?}, bias {bs:?}, seq_len {seq_len}"),
            ));
        }
        let (rows, cin) = (xs[0], xs[1]);
        let (cout, width) = (ks[1], ks[2]);
        let half = (width / 2) as isize;
        let groups = rows / seq_len;
        let mut out = vec![T::zero(); rows * cout];
        let x = self.data(input);
        let k = self.data(kernel);
        for g in 0..groups {
            for w in 0..width {
                let off = w as isize - half;
                let (lo, hi) = conv_range(seq_len, off);
                if lo >= hi {
                    continue;
                }
                let src = (g * seq_len) as isize + lo as isize + off;
                let dst = g * seq_len + lo;
                T::gemm_acc(
                    hi - lo,
                    cin,
                    cout,
                    &x[src as usize * cin..],
                    cin as isize,
                    1,
                    &k[w..],
                    (cout * width) as isize,
                    width as isize,
                    &mut out[dst * cout..],
                    cout as isize,
                    1,
                );
            }
        }
        let b = self.data(bias);
        for r in 0..rows {
            for o in 0..cout {
                out[r * cout + o] += b[o];
            }
        }
        let t = Tensor::new(vec![rows, cout], out)?;
        self.push(
            Op::Conv1d {
                input: input.0,
                kernel: kernel.0,
                bias: bias.0,
                seq_len,
            },
            t,
            &[input.0, kernel.0, bias.0],
        )
    }

    /// Multiplies by a fixed, externally sampled mask broadcast over the
    /// leading dimensions.
    pub fn dropout(&mut self, a: Var, mask: &[T]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let period = mask.len();
        if shape.last() != Some(&period) {
            return Err(Error::shape("dropout", format!("mask of length {period} for {shape:?}")));
        }
        let out = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x * mask[i % period])
            .collect();
        let t = Tensor::new(shape, out)?;
        self.push(
            Op::Dropout {
                a: a.0,
                mask: mask.to_vec(),
            },
            t,
            &[a.0],
        )
    }

    /// Picks flat elements by index into a 1D tensor.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let n = self.value(a).len();
        if idx.is_empty() || idx.iter().any(|&i| i >= n) {
            return Err(Error::shape("gather", format!("indices {idx:?} for {n} elements")));
        }
        let x = self.data(a);
        let out = idx.iter().map(|&i| x[i]).collect();
        let t = Tensor::new(vec![idx.len()], out)?;
        self.push(
            Op::Gather {
                a: a.0,
                idx: idx.to_vec(),
            },
            t,
            &[a.0],
        )
    }

    /// Stable `log(sum(exp(a)))` over all elements.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        let x = self.data(a);
        let mx = x.iter().copied().fold(T::neg_infinity(), T::max);
        let s: T = x.iter().map(|&v| (v - mx).exp()).sum();
        let t = Tensor::scalar(mx + s.ln());
        self.push(Op::LogSumExp { a: a.0 }, t, &[a.0])
    }

    /// Repeats a `(c,)` or `(1, c)` tensor into `(rows, c)`.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let c = match s.as_slice() {
            [c] => *c,
            [1, c] => *c,
            _ => return Err(Error::shape("broadcast_rows", format!("{s:?}"))),
        };
        let x = self.data(a);
        let mut out = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            out.extend_from_slice(x);
        }
        let t = Tensor::new(vec![rows, c], out)?;
        self.push(Op::BroadcastRows { a: a.0 }, t, &[a.0])
    }

    /// Zeroes accumulated leaf gradients.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            if matches!(n.op, Op::Leaf) {
                n.value.zero_grad();
            }
        }
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.requires(id) {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                self.nodes[id].value.accumulate_grad(&g);
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        macro_rules! buf {
            ($i:expr) => {{
                let len = self.nodes[$i].value.len();
                grads[$i].get_or_insert_with(|| vec![T::zero(); len])
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let (d, _) = matmul_dims(self.nodes[a].value.shape(), self.nodes[b].value.shape(), ta, tb)
                    .expect("validated in forward");
                let av = self.nodes[a].value.data();
                let bv = self.nodes[b].value.data();
                let (m, k, n) = (d.m, d.k, d.n);
                if self.requires(a) {
                    let ga = buf!(a);
                    if !ta || self.nodes[a].value.shape().len() == 1 {
                        T::gemm_acc(m, n, k, g, n as isize, 1, bv, d.csb, d.rsb, ga, k as isize, 1);
                    } else {
                        T::gemm_acc(k, n, m, bv, d.rsb, d.csb, g, 1, n as isize, ga, m as isize, 1);
                    }
                }
                if self.requires(b) {
                    let gb = buf!(b);
                    if !tb || self.nodes[b].value.shape().len() == 1 {
                        T::gemm_acc(k, m, n, av, d.csa, d.rsa, g, n as isize, 1, gb, n as isize, 1);
                    } else {
                        T::gemm_acc(n, m, k, g, 1, n as isize, av, d.rsa, d.csa, gb, k as isize, 1);
                    }
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let neg = matches!(node.op, Op::Sub { .. });
                let (a, b) = (*a, *b);
                if self.requires(a) {
                    let ga = buf!(a);
                    for (x, &gi) in ga.iter_mut().zip(g) {
                        *x += gi;
                    }
                }
                if self.requires(b) {
                    let gb = buf!(b);
                    let p = gb.len();
                    for (i, &gi) in g.iter().enumerate() {
                        if neg {
                            gb[i % p] -= gi;
                        } else {
                            gb[i % p] += gi;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let av = self.nodes[a].value.data();
                let bv = self.nodes[b].value.data();
                let p = bv.len();
                if self.requires(a) {
                    let ga = buf!(a);
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i % p];
                    }
                }
                if self.requires(b) {
                    let gb = buf!(b);
                    for i in 0..g.len() {
                        gb[i % p] += g[i] * av[i];
                    }
                }
            }
            Op::Affine { a, scale } => {
                let ga = buf!(*a);
                for (x, &gi) in ga.iter_mut().zip(g) {
                    *x += *scale * gi;
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let total = node.value.shape()[*axis] * inner;
                let mut offset = 0;
                for &inp in inputs {
                    let chunk = self.nodes[inp].value.shape()[*axis] * inner;
                    if self.requires(inp) {
                        let gi = buf!(inp);
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            for (x, &v) in gi[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *x += v;
                            }
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Slice { a, axis, start } => {
                let a = *a;
                let in_shape = self.nodes[a].value.shape().to_vec();
                let (outer, size, inner) = split_axis(&in_shape, *axis);
                let len = node.value.shape()[*axis];
                let ga = buf!(a);
                for o in 0..outer {
                    let dst = &mut ga[(o * size + start) * inner..(o * size + start + len) * inner];
                    for (x, &v) in dst.iter_mut().zip(&g[o * len * inner..(o + 1) * len * inner]) {
                        *x += v;
                    }
                }
            }
            Op::Reshape { a } => {
                let ga = buf!(*a);
                for (x, &v) in ga.iter_mut().zip(g) {
                    *x += v;
                }
            }
            Op::Transpose { a } => {
                let s = self.nodes[*a].value.shape().to_vec();
                let (r, c) = (s[0], s[1]);
                let ga = buf!(*a);
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Tanh { a } => {
                let ga = buf!(*a);
                for i in 0..g.len() {
                    ga[i] += g[i] * (T::one() - y[i] * y[i]);
                }
            }
            Op::Sigmoid { a } => {
                let ga = buf!(*a);
                for i in 0..g.len() {
                    ga[i] += g[i] * y[i] * (T::one() - y[i]);
                }
            }
            Op::Relu { a } => {
                let x = self.nodes[*a].value.data();
                let ga = buf!(*a);
                for i in 0..g.len() {
                    if x[i] > T::zero() {
                        ga[i] += g[i];
                    }
                }
            }
            Op::Exp { a } => {
                let ga = buf!(*a);
                for i in 0..g.len() {
                    ga[i] += g[i] * y[i];
                }
            }
            Op::Log { a } => {
                let x = self.nodes[*a].value.data();
                let ga = buf!(*a);
                for i in 0..g.len() {
                    ga[i] += g[i] / x[i];
                }
            }
            Op::Softmax { a, axis } => {
                let (outer, size, inner) = split_axis(node.value.shape(), *axis);
                let ga = buf!(*a);
                for o in 0..outer {
                    for r in 0..inner {
                        let at = |i: usize| (o * size + i) * inner + r;
                        let dot: T = (0..size).map(|i| g[at(i)] * y[at(i)]).sum();
                        for i in 0..size {
                            ga[at(i)] += y[at(i)] * (g[at(i)] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax { a, axis } => {
                let (outer, size, inner) = split_axis(node.value.shape(), *axis);
                let ga = buf!(*a);
                for o in 0..outer {
                    for r in 0..inner {
                        let at = |i: usize| (o * size + i) * inner + r;
                        let gs: T = (0..size).map(|i| g[at(i)]).sum();
                        for i in 0..size {
                            ga[at(i)] += g[at(i)] - y[at(i)].exp() * gs;
                        }
                    }
                }
            }
            Op::Sum { a, axis } | Op::Mean { a, axis } => {
                let mean = matches!(node.op, Op::Mean { .. });
                let in_shape = self.nodes[*a].value.shape().to_vec();
                let ga = buf!(*a);
                match axis {
                    None => {
                        let scale = if mean {
                            T::one() / T::from_usize(ga.len()).unwrap()
                        } else {
                            T::one()
                        };
                        for x in ga.iter_mut() {
                            *x += g[0] * scale;
                        }
                    }
                    Some(ax) => {
                        let (outer, size, inner) = split_axis(&in_shape, *ax);
                        let scale = if mean {
                            T::one() / T::from_usize(size).unwrap()
                        } else {
                            T::one()
                        };
                        for o in 0..outer {
                            for i in 0..size {
                                for r in 0..inner {
                                    ga[(o * size + i) * inner + r] += g[o * inner + r] * scale;
                                }
                            }
                        }
                    }
                }
            }
            Op::MaxOverTime { a, argmax } => {
                let c = self.nodes[*a].value.cols();
                let ga = buf!(*a);
                for (i, &row) in argmax.iter().enumerate() {
                    ga[row * c + i % c] += g[i];
                }
            }
            Op::GatherRows { table, ids, padding } => {
                let c = self.nodes[*table].value.cols();
                let gt = buf!(*table);
                for (r, &id) in ids.iter().enumerate() {
                    if Some(id) == *padding {
                        continue;
                    }
                    for j in 0..c {
                        gt[id * c + j] += g[r * c + j];
                    }
                }
            }
            Op::Conv1d {
                input,
                kernel,
                bias,
                seq_len,
            } => {
                let (input, kernel, bias, seq_len) = (*input, *kernel, *bias, *seq_len);
                let xs = self.nodes[input].value.shape().to_vec();
                let ks = self.nodes[kernel].value.shape().to_vec();
                let (rows, cin) = (xs[0], xs[1]);
                let (cout, width) = (ks[1], ks[2]);
                let half = (width / 2) as isize;
                let groups = rows / seq_len;
                let x = self.nodes[input].value.data();
                let k = self.nodes[kernel].value.data();
                let each = |f: &mut dyn FnMut(usize, usize, usize, usize)| {
                    for gi in 0..groups {
                        for w in 0..width {
                            let off = w as isize - half;
                            let (lo, hi) = conv_range(seq_len, off);
                            if lo < hi {
                                let src = ((gi * seq_len + lo) as isize + off) as usize;
                                f(w, src, gi * seq_len + lo, hi - lo);
                            }
                        }
                    }
                };
                if self.requires(input) {
                    let gx = buf!(input);
                    each(&mut |w, src, dst, len| {
                        T::gemm_acc(
                            len,
                            cout,
                            cin,
                            &g[dst * cout..],
                            cout as isize,
                            1,
                            &k[w..],
                            width as isize,
                            (cout * width) as isize,
                            &mut gx[src * cin..],
                            cin as isize,
                            1,
                        );
                    });
                }
                if self.requires(kernel) {
                    let gk = buf!(kernel);
                    each(&mut |w, src, dst, len| {
                        T::gemm_acc(
                            cin,
                            len,
                            cout,
                            &x[src * cin..],
                            1,
                            cin as isize,
                            &g[dst * cout..],
                            cout as isize,
                            1,
                            &mut gk[w..],
                            (cout * width) as isize,
                            width as isize,
                        );
                    });
                }
                if self.requires(bias) {
                    let gb = buf!(bias);
                    for r in 0..rows {
                        for o in 0..cout {
                            gb[o] += g[r * cout + o];
                        }
                    }
                }
            }
            Op::Dropout { a, mask } => {
                let ga = buf!(*a);
                let p = mask.len();
                for i in 0..g.len() {
                    ga[i] += g[i] * mask[i % p];
                }
            }
            Op::Gather { a, idx } => {
                let ga = buf!(*a);
                for (k, &i) in idx.iter().enumerate() {
                    ga[i] += g[k];
                }
            }
            Op::LogSumExp { a } => {
                let x = self.nodes[*a].value.data();
                let lse = y[0];
                let ga = buf!(*a);
                for i in 0..x.len() {
                    ga[i] += g[0] * (x[i] - lse).exp();
                }
            }
            Op::BroadcastRows { a } => {
                let ga = buf!(*a);
                let c = ga.len();
                for (i, &v) in g.iter().enumerate() {
                    ga[i % c] += v;
                }
            }
        }
    }
}

fn conv_range(seq_len: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (seq_len as isize - off).min(seq_len as isize).max(0) as usize;
    (lo.min(seq_len), hi)
}

pub(crate) fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
