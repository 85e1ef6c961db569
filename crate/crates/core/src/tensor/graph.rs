use super::kernels::{self, ConvGeom};
use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<T>,
        rstd: Vec<T>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
        outer: usize,
        inner: usize,
    },
    MeanOver {
        x: Var,
        kept: Vec<usize>,
        count: usize,
    },
    Sum(Var),
    Conv3d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        batch: usize,
    },
    GatherRows {
        table: Var,
        rows: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Operation tape. Nodes are appended in evaluation order, so every node's
/// inputs precede it.
pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if any path
    /// reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        self.grad(v).map(|g| Tensor {
            shape: self.shape(v).to_vec(),
            data: g.to_vec(),
        })
    }

    /// `input > 0` for every entry of every relu node, in tape order. Two
    /// evaluations of one program with equal patterns lie on the same linear
    /// piece of every relu.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                out.extend(self.nodes[x.0].value.data().iter().map(|&v| v > T::zero()));
            }
        }
        out
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let value = Tensor { shape: vec![m, n], data: out };
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// Transpose of a matrix.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::dim("transpose", s, &[0, 0]));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor { shape: vec![c, r], data: out };
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Ok(Tensor {
                shape: va.shape().to_vec(),
                data,
            });
        }
        let shape = kernels::broadcast_shape(op, va.shape(), vb.shape())?;
        let ia = kernels::broadcast_index(va.shape(), &shape);
        let ib = kernels::broadcast_index(vb.shape(), &shape);
        let data = ia
            .iter()
            .zip(&ib)
            .map(|(&i, &j)| f(va.data()[i], vb.data()[j]))
            .collect();
        Ok(Tensor { shape, data })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::Offset(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Usage(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value(a).data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
        let value = Tensor { shape, data: out };
        Ok(self.push(value, Op::Softmax { x: a, outer, len, inner }, &[a]))
    }

    /// Layer normalization over the last axis with population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| Error::Usage("layer_norm of a scalar".into()))?;
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::dim("layer_norm", &shape, self.shape(gain)));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xs.len() / n;
        let nf = T::of(n as f64);
        let mut normed = vec![T::zero(); xs.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xs.len()];
        for r in 0..rows {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + T::of(eps)).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let xh = (row[j] - mean) * rs;
                normed[r * n + j] = xh;
                out[r * n + j] = xh * g[j] + b[j];
            }
        }
        let value = Tensor { shape, data: out };
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Usage("concat of an empty list".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Usage(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let agrees = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !agrees {
                return Err(Error::dim("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let block = self.shape(*v)[axis] * inner;
                data.extend_from_slice(&self.value(*v).data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor { shape, data };
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
                outer,
                inner,
            },
            inputs,
        ))
    }

    /// Mean over `axes`, which are removed from the result shape.
    pub fn mean_over(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if let Some(&bad) = axes.iter().find(|&&ax| ax >= shape.len()) {
            return Err(Error::Usage(format!("mean_over axis {bad} out of range for {shape:?}")));
        }
        let kept: Vec<usize> = shape
            .iter()
            .enumerate()
            .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
            .collect();
        let count = axes.iter().map(|&ax| shape[ax]).product::<usize>();
        let index = kernels::broadcast_index(&kept, &shape);
        let out_len: usize = kept.iter().product();
        let mut acc = vec![T::zero(); out_len];
        for (&o, &x) in index.iter().zip(self.value(a).data()) {
            acc[o] += x;
        }
        let inv = T::one() / T::of(count as f64);
        acc.iter_mut().for_each(|v| *v *= inv);
        let out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect();
        let value = Tensor {
            shape: out_shape,
            data: acc,
        };
        Ok(self.push(value, Op::MeanOver { x: a, kept, count }, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(total), Op::Sum(a), &[a])
    }

    /// 3D cross-correlation. `x`: `[n, c, f, h, w]`, `kernel`:
    /// `[k, c, kf, kh, kw]`, optional `bias`: `[k]`.
    pub fn conv3d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Var> {
        let (sx, sk) = (self.shape(x), self.shape(kernel));
        if sx.len() != 5 || sk.len() != 5 || sx[1] != sk[1] {
            return Err(Error::dim("conv3d", sx, sk));
        }
        let k = sk[0];
        if let Some(b) = bias {
            if self.shape(b) != [k] {
                return Err(Error::dim("conv3d bias", self.shape(b), &[k]));
            }
        }
        let batch = sx[0];
        let geom = ConvGeom::new(sx[1], [sx[2], sx[3], sx[4]], [sk[2], sk[3], sk[4]], stride, padding)?;
        let p = geom.positions();
        let ck = geom.patch_len();
        let xin = self.value(x).data();
        let kd = self.value(kernel).data();
        let mut out = vec![T::zero(); batch * k * p];
        let mut cols = Vec::new();
        for n in 0..batch {
            let xn = &xin[n * geom.input_len()..(n + 1) * geom.input_len()];
            geom.im2col(xn, &mut cols);
            let on = &mut out[n * k * p..(n + 1) * k * p];
            if let Some(b) = bias {
                let bd = self.value(b).data();
                for (row, &bv) in on.chunks_mut(p).zip(bd) {
                    row.iter_mut().for_each(|v| *v = bv);
                }
            }
            T::gemm(k, ck, p, T::one(), kd, ck as isize, 1, &cols, p as isize, 1, T::one(), on, p as isize, 1);
        }
        let [of, oh, ow] = geom.out;
        let value = Tensor {
            shape: vec![batch, k, of, oh, ow],
            data: out,
        };
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        Ok(self.push(
            value,
            Op::Conv3d {
                x,
                kernel,
                bias,
                geom,
                batch,
            },
            &inputs,
        ))
    }

    /// Row lookup: `out[i] = table[rows[i]]`, equivalent to a one-hot matrix
    /// product.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::dim("gather_rows", s, &[0, 0]));
        }
        let (v, d) = (s[0], s[1]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= v) {
            return Err(Error::Usage(format!("row {bad} out of range for table of {v} rows")));
        }
        let t = self.value(table).data();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(&t[r * d..(r + 1) * d]);
        }
        let value = Tensor {
            shape: vec![rows.len(), d],
            data,
        };
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                rows: rows.to_vec(),
            },
            &[table],
        ))
    }

    /// Populate gradients of `loss` with respect to every node that requires
    /// them. Allowed once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Usage("backward already ran on this graph; rebuild the forward pass".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            propagate(&self.nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }
}

#[inline]
pub(crate) fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn slot<'a, T: Float>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]))
}

fn accumulate_binary<T: Float>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    target: Var,
    out_shape: &[usize],
    g: &[T],
    factor: Option<(&Tensor<T>, f64)>,
) {
    let tshape = nodes[target.0].value.shape().to_vec();
    let same = tshape == out_shape;
    let index = (!same).then(|| kernels::broadcast_index(&tshape, out_shape));
    let factor_vals: Option<Vec<T>> = factor.map(|(other, sign)| {
        let s = T::of(sign);
        if other.shape() == out_shape {
            other.data().iter().map(|&v| v * s).collect()
        } else {
            kernels::broadcast_index(other.shape(), out_shape)
                .into_iter()
                .map(|i| other.data()[i] * s)
                .collect()
        }
    });
    if let Some(dst) = slot(nodes, grads, target) {
        kernels::accumulate_broadcast(dst, g, index.as_deref(), factor_vals.as_deref());
    }
}

fn propagate<T: Float>(nodes: &[Node<T>], i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[i];
    let out_shape = node.value.shape();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
            if let Some(da) = slot(nodes, grads, *a) {
                // da += g · bᵀ
                T::gemm(m, n, k, T::one(), g, n as isize, 1, vb.data(), 1, n as isize, T::one(), da, k as isize, 1);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                // db += aᵀ · g
                T::gemm(k, m, n, T::one(), va.data(), 1, k as isize, g, n as isize, 1, T::one(), db, n as isize, 1);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (out_shape[1], out_shape[0]);
            if let Some(da) = slot(nodes, grads, *a) {
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Reshape(a) | Op::Offset(a) => {
            if let Some(da) = slot(nodes, grads, *a) {
                da.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
            }
        }
        Op::Add(a, b) => {
            accumulate_binary(nodes, grads, *a, out_shape, g, None);
            accumulate_binary(nodes, grads, *b, out_shape, g, None);
        }
        Op::Sub(a, b) => {
            accumulate_binary(nodes, grads, *a, out_shape, g, None);
            let neg = Tensor::full(out_shape.to_vec(), T::one());
            accumulate_binary(nodes, grads, *b, out_shape, g, Some((&neg, -1.0)));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            accumulate_binary(nodes, grads, *a, out_shape, g, Some((vb, 1.0)));
            accumulate_binary(nodes, grads, *b, out_shape, g, Some((va, 1.0)));
        }
        Op::Scale(a, s) => {
            if let Some(da) = slot(nodes, grads, *a) {
                da.iter_mut().zip(g).for_each(|(d, &v)| *d += v * *s);
            }
        }
        Op::Sigmoid(a) => {
            let y = node.value.data();
            if let Some(da) = slot(nodes, grads, *a) {
                for ((d, &gv), &yv) in da.iter_mut().zip(g).zip(y) {
                    *d += gv * yv * (T::one() - yv);
                }
            }
        }
        Op::Relu(a) => {
            let x = nodes[a.0].value.data();
            if let Some(da) = slot(nodes, grads, *a) {
                for ((d, &gv), &xv) in da.iter_mut().zip(g).zip(x) {
                    if xv > T::zero() {
                        *d += gv;
                    }
                }
            }
        }
        Op::Softmax { x, outer, len, inner } => {
            let y = node.value.data();
            let (outer, len, inner) = (*outer, *len, *inner);
            if let Some(dx) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot = (0..len).map(|j| g[at(j)] * y[at(j)]).sum::<T>();
                        for j in 0..len {
                            dx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            normed,
            rstd,
        } => {
            let n = *out_shape.last().unwrap_or(&1);
            let rows = normed.len() / n;
            let gv = nodes[gain.0].value.data();
            if let Some(dg) = slot(nodes, grads, *gain) {
                for r in 0..rows {
                    for j in 0..n {
                        dg[j] += g[r * n + j] * normed[r * n + j];
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, *bias) {
                for r in 0..rows {
                    for j in 0..n {
                        db[j] += g[r * n + j];
                    }
                }
            }
            if let Some(dx) = slot(nodes, grads, *x) {
                let nf = T::of(n as f64);
                let mut dxh = vec![T::zero(); n];
                for r in 0..rows {
                    let xh = &normed[r * n..(r + 1) * n];
                    for j in 0..n {
                        dxh[j] = g[r * n + j] * gv[j];
                    }
                    let s1 = dxh.iter().copied().sum::<T>();
                    let s2 = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>();
                    let k = rstd[r] / nf;
                    for j in 0..n {
                        dx[r * n + j] += k * (nf * dxh[j] - s1 - xh[j] * s2);
                    }
                }
            }
        }
        Op::Concat {
            inputs,
            axis,
            outer,
            inner,
        } => {
            let total = out_shape[*axis];
            let mut offset = 0;
            for v in inputs {
                let block = nodes[v.0].value.shape()[*axis] * inner;
                if let Some(dv) = slot(nodes, grads, *v) {
                    for o in 0..*outer {
                        let start = o * total * inner + offset;
                        dv[o * block..(o + 1) * block]
                            .iter_mut()
                            .zip(&g[start..start + block])
                            .for_each(|(d, &s)| *d += s);
                    }
                }
                offset += block;
            }
        }
        Op::MeanOver { x, kept, count } => {
            let xshape = nodes[x.0].value.shape().to_vec();
            let index = kernels::broadcast_index(kept, &xshape);
            let inv = T::one() / T::of(*count as f64);
            if let Some(dx) = slot(nodes, grads, *x) {
                for (d, &o) in dx.iter_mut().zip(&index) {
                    *d += g[o] * inv;
                }
            }
        }
        Op::Sum(a) => {
            if let Some(da) = slot(nodes, grads, *a) {
                da.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Conv3d {
            x,
            kernel,
            bias,
            geom,
            batch,
        } => {
            let k = out_shape[1];
            let p = geom.positions();
            let ck = geom.patch_len();
            let il = geom.input_len();
            if let Some(b) = bias {
                if let Some(db) = slot(nodes, grads, *b) {
                    for n in 0..*batch {
                        for (kk, d) in db.iter_mut().enumerate() {
                            let row = &g[(n * k + kk) * p..(n * k + kk + 1) * p];
                            *d += row.iter().copied().sum::<T>();
                        }
                    }
                }
            }
            let xin = nodes[x.0].value.data();
            let kd = nodes[kernel.0].value.data();
            let need_dk = nodes[kernel.0].requires_grad;
            let need_dx = nodes[x.0].requires_grad;
            let mut cols = Vec::new();
            let mut dcols = if need_dx { vec![T::zero(); ck * p] } else { Vec::new() };
            for n in 0..*batch {
                let gn = &g[n * k * p..(n + 1) * k * p];
                if need_dk {
                    geom.im2col(&xin[n * il..(n + 1) * il], &mut cols);
                    let dk = slot(nodes, grads, *kernel).expect("kernel requires grad");
                    // dK += dOut · colsᵀ
                    T::gemm(k, p, ck, T::one(), gn, p as isize, 1, &cols, 1, p as isize, T::one(), dk, ck as isize, 1);
                }
                if need_dx {
                    // dcols = Kᵀ · dOut
                    T::gemm(ck, k, p, T::one(), kd, 1, ck as isize, gn, p as isize, 1, T::zero(), &mut dcols, p as isize, 1);
                    let dx = slot(nodes, grads, *x).expect("input requires grad");
                    geom.col2im(&dcols, &mut dx[n * il..(n + 1) * il]);
                }
            }
        }
        Op::GatherRows { table, rows } => {
            let d = out_shape[1];
            if let Some(dt) = slot(nodes, grads, *table) {
                for (i, &r) in rows.iter().enumerate() {
                    dt[r * d..(r + 1) * d]
                        .iter_mut()
                        .zip(&g[i * d..(i + 1) * d])
                        .for_each(|(a, &b)| *a += b);
                }
            }
        }
    }
}
