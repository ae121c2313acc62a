//! Elementwise, reduction and shape ops and their backward rules.

use crate::conv;
use crate::error::{invalid, Result, TensorError};
use crate::graph::{BinaryKind, Graph, Op, UnaryKind, Var};
use crate::tensor::{strides_of, Tensor};

/// Splits `shape` around `axis` into (outer, extent, inner).
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::AxisOutOfRange {
            op,
            axis,
            rank: shape.len(),
        });
    }
    Ok(())
}

/// Index plan for a same-rank broadcasting binary op.
struct Broadcast {
    out_shape: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
    same: bool,
}

impl Broadcast {
    fn new(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        let mismatch = || TensorError::IncompatibleShapes {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        };
        if a == b {
            return Ok(Self {
                out_shape: a.to_vec(),
                a_strides: Vec::new(),
                b_strides: Vec::new(),
                same: true,
            });
        }
        if a.len() != b.len() {
            // A scalar operand broadcasts against anything.
            if a.iter().product::<usize>() == 1 && a.len() <= b.len() {
                return Self::new(op, &vec![1; b.len()], b);
            }
            if b.iter().product::<usize>() == 1 && b.len() <= a.len() {
                return Self::new(op, a, &vec![1; a.len()]);
            }
            return Err(mismatch());
        }
        let mut out_shape = Vec::with_capacity(a.len());
        for (&x, &y) in a.iter().zip(b) {
            if x == y || y == 1 {
                out_shape.push(x);
            } else if x == 1 {
                out_shape.push(y);
            } else {
                return Err(mismatch());
            }
        }
        let masked = |shape: &[usize]| -> Vec<usize> {
            strides_of(shape)
                .into_iter()
                .zip(shape)
                .map(|(s, &n)| if n == 1 { 0 } else { s })
                .collect()
        };
        Ok(Self {
            a_strides: masked(a),
            b_strides: masked(b),
            out_shape,
            same: false,
        })
    }

    fn numel(&self) -> usize {
        self.out_shape.iter().product()
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let n = self.numel();
        if self.same {
            for i in 0..n {
                f(i, i, i);
            }
            return;
        }
        let rank = self.out_shape.len();
        if rank == 0 {
            f(0, 0, 0);
            return;
        }
        let last = rank - 1;
        let inner = self.out_shape[last];
        let (sa, sb) = (self.a_strides[last], self.b_strides[last]);
        let mut counter = vec![0usize; rank];
        let mut out = 0;
        while out < n {
            let mut ia = 0;
            let mut ib = 0;
            for d in 0..last {
                ia += counter[d] * self.a_strides[d];
                ib += counter[d] * self.b_strides[d];
            }
            for j in 0..inner {
                f(out + j, ia + j * sa, ib + j * sb);
            }
            out += inner;
            for d in (0..last).rev() {
                counter[d] += 1;
                if counter[d] < self.out_shape[d] {
                    break;
                }
                counter[d] = 0;
            }
        }
    }
}

fn unary_forward(kind: UnaryKind, x: f64) -> f64 {
    match kind {
        UnaryKind::Scale(c) => c * x,
        UnaryKind::AddScalar(c) => x + c,
        UnaryKind::Tanh => x.tanh(),
        UnaryKind::Relu => x.max(0.0),
        UnaryKind::LeakyRelu(slope) => {
            if x > 0.0 {
                x
            } else {
                slope * x
            }
        }
        UnaryKind::Sigmoid => {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        }
        UnaryKind::Exp => x.exp(),
    }
}

fn unary_derivative(kind: UnaryKind, x: f64, y: f64) -> f64 {
    match kind {
        UnaryKind::Scale(c) => c,
        UnaryKind::AddScalar(_) => 1.0,
        UnaryKind::Tanh => 1.0 - y * y,
        UnaryKind::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        UnaryKind::LeakyRelu(slope) => {
            if x > 0.0 {
                1.0
            } else {
                slope
            }
        }
        UnaryKind::Sigmoid => y * (1.0 - y),
        UnaryKind::Exp => y,
    }
}

impl Graph {
    fn unary(&mut self, x: Var, kind: UnaryKind) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).map(|v| unary_forward(kind, v));
        self.push(value, Op::Unary { kind, x })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, UnaryKind::Scale(c))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Scale(-1.0))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, UnaryKind::AddScalar(c))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Relu)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.unary(x, UnaryKind::LeakyRelu(slope))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Exp)
    }

    fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let op_name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let (av, bv) = (self.value(a), self.value(b));
        let plan = Broadcast::new(op_name, av.shape(), bv.shape())?;
        let (ad, bd) = (av.data(), bv.data());
        let mut out = vec![0.0; plan.numel()];
        match kind {
            BinaryKind::Add => plan.for_each(|o, i, j| out[o] = ad[i] + bd[j]),
            BinaryKind::Sub => plan.for_each(|o, i, j| out[o] = ad[i] - bd[j]),
            BinaryKind::Mul => plan.for_each(|o, i, j| out[o] = ad[i] * bd[j]),
            BinaryKind::Div => plan.for_each(|o, i, j| out[o] = ad[i] / bd[j]),
        }
        let value = Tensor::new(plan.out_shape, out)?;
        self.push(value, Op::Binary { kind, a, b })
    }

    /// Elementwise sum with broadcasting over unit extents.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    /// Hadamard product with broadcasting over unit extents.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Div)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        if t.is_empty() {
            return Err(invalid("mean", "empty tensor"));
        }
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(value, Op::MeanAll(x))
    }

    /// Sum along `axis`, keeping it as a unit extent.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        check_axis("sum_axis", t.shape(), axis)?;
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let d = t.data();
        for o in 0..outer {
            for k in 0..n {
                let src = &d[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::SumAxis { x, axis })
    }

    /// `max(‖x‖₂, eps)` along `axis`, keeping it as a unit extent.
    pub fn l2_norm(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        check_axis("l2_norm", t.shape(), axis)?;
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let d = t.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i] * d[base + i];
                }
            }
        }
        for v in &mut out {
            *v = v.sqrt().max(eps);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::L2Norm { x, axis, eps })
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        t.ensure_finite("softmax")?;
        let value = softmax_tensor(t, axis)?;
        self.push(value, Op::Softmax { x, axis })
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(invalid("concat", "no inputs"));
        }
        for &v in xs {
            self.check(v)?;
        }
        let first = self.value(xs[0]).shape().to_vec();
        check_axis("concat", &first, axis)?;
        let mut total = 0;
        for &v in xs {
            let s = self.value(v).shape();
            if s.len() != first.len() {
                return Err(TensorError::IncompatibleShapes {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            for (d, (&p, &q)) in first.iter().zip(s).enumerate() {
                if d != axis && p != q {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        dim: format!("axis {d}"),
                        expected: p,
                        got: q,
                    });
                }
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let n = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        self.push(
            value,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(value, Op::Reshape(x))
    }

    /// Reverses the order of elements along `axis`.
    pub fn flip(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        check_axis("flip", t.shape(), axis)?;
        let value = flip_tensor(t, axis);
        self.push(value, Op::Flip { x, axis })
    }

    /// The `len` elements along `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        check_axis("narrow", t.shape(), axis)?;
        let (outer, n, inner) = axis_split(t.shape(), axis);
        if start + len > n {
            return Err(invalid(
                "narrow",
                format!("range {start}..{} exceeds extent {n}", start + len),
            ));
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::Narrow { x, axis, start })
    }
}

pub fn softmax_tensor(t: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis("softmax", t.shape(), axis)?;
    let (outer, n, inner) = axis_split(t.shape(), axis);
    if n == 0 {
        return Err(TensorError::EmptyAxis { op: "softmax", axis });
    }
    let d = t.data();
    let mut out = vec![0.0; d.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let mut m = f64::NEG_INFINITY;
            for k in 0..n {
                m = m.max(d[at(k)]);
            }
            let mut s = 0.0;
            for k in 0..n {
                let e = (d[at(k)] - m).exp();
                out[at(k)] = e;
                s += e;
            }
            for k in 0..n {
                out[at(k)] /= s;
            }
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}

pub fn flip_tensor(t: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = axis_split(t.shape(), axis);
    let d = t.data();
    let mut out = vec![0.0; d.len()];
    for o in 0..outer {
        for k in 0..n {
            let src = (o * n + k) * inner;
            let dst = (o * n + (n - 1 - k)) * inner;
            out[dst..dst + inner].copy_from_slice(&d[src..src + inner]);
        }
    }
    Tensor::new(t.shape().to_vec(), out).expect("flip preserves length")
}

fn binary_backward(
    kind: BinaryKind,
    a: &Tensor,
    b: &Tensor,
    grad: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let plan = Broadcast::new("binary", a.shape(), b.shape())?;
    let (ad, bd, g) = (a.data(), b.data(), grad.data());
    let mut ga = vec![0.0; ad.len()];
    let mut gb = vec![0.0; bd.len()];
    match kind {
        BinaryKind::Add => plan.for_each(|o, i, j| {
            ga[i] += g[o];
            gb[j] += g[o];
        }),
        BinaryKind::Sub => plan.for_each(|o, i, j| {
            ga[i] += g[o];
            gb[j] -= g[o];
        }),
        BinaryKind::Mul => plan.for_each(|o, i, j| {
            ga[i] += g[o] * bd[j];
            gb[j] += g[o] * ad[i];
        }),
        BinaryKind::Div => plan.for_each(|o, i, j| {
            ga[i] += g[o] / bd[j];
            gb[j] -= g[o] * ad[i] / (bd[j] * bd[j]);
        }),
    }
    Ok((
        Tensor::new(a.shape().to_vec(), ga)?,
        Tensor::new(b.shape().to_vec(), gb)?,
    ))
}

pub(crate) fn backward_node(graph: &Graph, idx: usize, grad: &Tensor) -> Result<Vec<(Var, Tensor)>> {
    let node = &graph.nodes[idx];
    let val = |v: Var| &graph.nodes[v.0].value;
    let needs = |v: Var| graph.nodes[v.0].requires_grad;
    let out = &node.value;
    let result = match &node.op {
        Op::Leaf => Vec::new(),
        Op::Unary { kind, x } => {
            let xv = val(*x);
            let data = xv
                .data()
                .iter()
                .zip(out.data())
                .zip(grad.data())
                .map(|((&xi, &yi), &gi)| gi * unary_derivative(*kind, xi, yi))
                .collect();
            vec![(*x, Tensor::new(xv.shape().to_vec(), data)?)]
        }
        Op::Binary { kind, a, b } => {
            let (ga, gb) = binary_backward(*kind, val(*a), val(*b), grad)?;
            vec![(*a, ga), (*b, gb)]
        }
        Op::SumAll(x) => {
            let g = grad.item()?;
            vec![(*x, Tensor::full(val(*x).shape().to_vec(), g))]
        }
        Op::MeanAll(x) => {
            let xv = val(*x);
            let g = grad.item()? / xv.len() as f64;
            vec![(*x, Tensor::full(xv.shape().to_vec(), g))]
        }
        Op::SumAxis { x, axis } => {
            let xv = val(*x);
            let (outer, n, inner) = axis_split(xv.shape(), *axis);
            let mut gx = vec![0.0; xv.len()];
            for o in 0..outer {
                for k in 0..n {
                    let dst = (o * n + k) * inner;
                    gx[dst..dst + inner].copy_from_slice(&grad.data()[o * inner..(o + 1) * inner]);
                }
            }
            vec![(*x, Tensor::new(xv.shape().to_vec(), gx)?)]
        }
        Op::L2Norm { x, axis, eps } => {
            let xv = val(*x);
            let (outer, n, inner) = axis_split(xv.shape(), *axis);
            let (xd, nd, g) = (xv.data(), out.data(), grad.data());
            let mut gx = vec![0.0; xv.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let norm = nd[o * inner + i];
                    // Floored norms are constant in x.
                    let raw: f64 = (0..n)
                        .map(|k| xd[(o * n + k) * inner + i].powi(2))
                        .sum::<f64>()
                        .sqrt();
                    if raw <= *eps {
                        continue;
                    }
                    let gi = g[o * inner + i] / norm;
                    for k in 0..n {
                        let at = (o * n + k) * inner + i;
                        gx[at] = gi * xd[at];
                    }
                }
            }
            vec![(*x, Tensor::new(xv.shape().to_vec(), gx)?)]
        }
        Op::Softmax { x, axis } => {
            let (outer, n, inner) = axis_split(out.shape(), *axis);
            let (y, g) = (out.data(), grad.data());
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let dot: f64 = (0..n).map(|k| y[at(k)] * g[at(k)]).sum();
                    for k in 0..n {
                        gx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                    }
                }
            }
            vec![(*x, Tensor::new(out.shape().to_vec(), gx)?)]
        }
        Op::Concat { xs, axis } => {
            let (outer, total, inner) = axis_split(out.shape(), *axis);
            let mut offset = 0;
            let mut grads = Vec::with_capacity(xs.len());
            for &v in xs {
                let t = val(v);
                let n = t.shape()[*axis];
                let mut gx = Vec::with_capacity(t.len());
                for o in 0..outer {
                    let base = (o * total + offset) * inner;
                    gx.extend_from_slice(&grad.data()[base..base + n * inner]);
                }
                offset += n;
                grads.push((v, Tensor::new(t.shape().to_vec(), gx)?));
            }
            grads
        }
        Op::Reshape(x) => vec![(*x, grad.clone().reshape(val(*x).shape().to_vec())?)],
        Op::Flip { x, axis } => vec![(*x, flip_tensor(grad, *axis))],
        Op::Narrow { x, axis, start } => {
            let xv = val(*x);
            let (outer, n, inner) = axis_split(xv.shape(), *axis);
            let len = out.shape()[*axis];
            let mut gx = vec![0.0; xv.len()];
            for o in 0..outer {
                let dst = (o * n + start) * inner;
                let src = o * len * inner;
                gx[dst..dst + len * inner].copy_from_slice(&grad.data()[src..src + len * inner]);
            }
            vec![(*x, Tensor::new(xv.shape().to_vec(), gx)?)]
        }
        Op::Conv {
            x,
            kernel,
            bias,
            geom,
        } => {
            let mut grads = Vec::with_capacity(3);
            if needs(*x) {
                grads.push((*x, conv::input_grad(geom, val(*kernel), grad)?));
            }
            if needs(*kernel) {
                grads.push((*kernel, conv::kernel_grad(geom, val(*x), grad)?));
            }
            if let Some(b) = bias {
                if needs(*b) {
                    grads.push((*b, conv::bias_grad(geom, grad)?));
                }
            }
            grads
        }
        Op::Custom { inputs, op } => {
            let values: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
            let grads = op.backward(&values, out, grad)?;
            if grads.len() != inputs.len() {
                return Err(invalid(
                    "backward",
                    format!(
                        "custom op {} returned {} gradients for {} inputs",
                        op.name(),
                        grads.len(),
                        inputs.len()
                    ),
                ));
            }
            inputs
                .iter()
                .zip(grads)
                .filter_map(|(&v, g)| g.map(|g| (v, g)))
                .collect()
        }
    };
    Ok(result)
}
