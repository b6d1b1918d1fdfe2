//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] on a scalar output walks the record in reverse and
//! accumulates gradients into the trainable parameters of a [`ParamStore`].
//! The graph is thrown away after each step.

use crate::engine::tensor::invert_axes;
use crate::engine::{ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Constant,
    Param(ParamId),
    /// `a[.., k] · b[k, n]`, or `a · bᵀ` with `b[n, k]` when `trans_b`.
    MatMul { a: Var, b: Var, trans_b: bool },
    /// `a[B, m, k] · b[B, k, n]` (or `b[B, n, k]` transposed).
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `b` has the trailing shape of `a` and is repeated over leading rows.
    AddBroadcast(Var, Var),
    Scale(Var, T),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu { a: Var, tanh: Vec<T> },
    Relu(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { a: Var, axis: usize, start: usize },
    Reshape(Var),
    Permute { a: Var, axes: Vec<usize> },
    ExpandBatch(Var),
    L2Normalize { a: Var, norms: Vec<T> },
    Pick { a: Var, index: Vec<usize> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Tape of recorded operations.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert!(
            value.all_finite(),
            "non-finite output from engine op #{}",
            self.nodes.len()
        );
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Leaf for a stored parameter. Gradients flow back to it only when the
    /// parameter is trainable.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param(id), p.trainable)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `b` stored as `[n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 {
            return Err(Error::shape("matmul", format!("rhs must be 2-D, got {:?}", bv.shape())));
        }
        let k = av.last_dim();
        let (bk, n) = if trans_b {
            (bv.shape()[1], bv.shape()[0])
        } else {
            (bv.shape()[0], bv.shape()[1])
        };
        if k != bk {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?} (trans_b={trans_b})", av.shape(), bv.shape()),
            ));
        }
        let m = av.rows();
        let mut out = vec![T::zero(); m * n];
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        T::gemm(m, k, n, av.data(), k as isize, 1, bv.data(), rsb, csb, &mut out, T::zero());
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul { a, b, trans_b }, needs))
    }

    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 3 || bv.shape().len() != 3 || av.shape()[0] != bv.shape()[0] {
            return Err(Error::shape("bmm", format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let (bs, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (bk, n) = if trans_b {
            (bv.shape()[2], bv.shape()[1])
        } else {
            (bv.shape()[1], bv.shape()[2])
        };
        if k != bk {
            return Err(Error::shape("bmm", format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let mut out = vec![T::zero(); bs * m * n];
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        for i in 0..bs {
            T::gemm(
                m,
                k,
                n,
                &av.data()[i * m * k..(i + 1) * m * k],
                k as isize,
                1,
                &bv.data()[i * k * n..(i + 1) * k * n],
                rsb,
                csb,
                &mut out[i * m * n..(i + 1) * m * n],
                T::zero(),
            );
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(&[bs, m, n], out)?, Op::BatchMatMul { a, b, trans_b }, needs))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(name, format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add_broadcast", format!("{sa:?} + {sb:?}")));
        }
        let inner = bv.len();
        let mut out = av.data().to_vec();
        for chunk in out.chunks_mut(inner) {
            for (o, &v) in chunk.iter_mut().zip(bv.data()) {
                *o += v;
            }
        }
        let out = Tensor::new(sa, out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::AddBroadcast(a, b), needs))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let av = self.value(a);
        let out = Tensor::new(av.shape(), av.data().iter().map(|&x| x * c).collect()).unwrap();
        let needs = self.needs(a);
        self.push(out, Op::Scale(a, c), needs)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(av.last_dim()) {
            softmax_in_place(row);
        }
        let out = Tensor::new(av.shape(), out).unwrap();
        let needs = self.needs(a);
        self.push(out, Op::Softmax(a), needs)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(av.last_dim()) {
            let (m, tail) = log_sum_exp_split(row);
            row.iter_mut().for_each(|v| *v = (*v - m) - tail);
        }
        let out = Tensor::new(av.shape(), out).unwrap();
        let needs = self.needs(a);
        self.push(out, Op::LogSoftmax(a), needs)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::shape("layer_norm", format!("affine size vs last dim {d}")));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xv.rows();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        let dn = T::of(d as f64);
        let eps = T::of(LN_EPS);
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = T::of(GELU_C);
        let k = T::of(GELU_A);
        let half = T::of(0.5);
        let two = T::of(2.0);
        let av = self.value(a);
        // tanh(u) = 1 − 2/(1 + e^{2u}), one exp instead of libm tanh
        let tanh: Vec<T> = av
            .data()
            .iter()
            .map(|&x| T::one() - two / (T::one() + (two * c * (x + k * x * x * x)).exp()))
            .collect();
        let out = av
            .data()
            .iter()
            .zip(&tanh)
            .map(|(&x, &t)| half * x * (T::one() + t))
            .collect();
        let out = Tensor::new(av.shape(), out).unwrap();
        let needs = self.needs(a);
        self.push(out, Op::Gelu { a, tanh }, needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.data().iter().map(|&x| x.max(T::zero())).collect();
        let out = Tensor::new(av.shape(), out).unwrap();
        let needs = self.needs(a);
        self.push(out, Op::Relu(a), needs)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.data().iter().map(|&x| x.ln()).collect();
        let out = Tensor::new(av.shape(), out).unwrap();
        let needs = self.needs(a);
        self.push(out, Op::Log(a), needs)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.data().iter().copied().sum::<T>() / T::of(av.len().max(1) as f64);
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Mean(a), needs)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(inputs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} for rank {}", first.len())));
        }
        let outer: usize = first[..axis].iter().product();
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(Error::shape("concat", format!("{first:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.len() / outer;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let needs = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            needs,
        ))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let s = av.shape();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::shape("narrow", format!("{s:?} axis {axis} [{start}, {})", start + len)));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * s[axis] * inner + start * inner;
            out.extend_from_slice(&av.data()[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Narrow { a, axis, start }, needs))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        let needs = self.needs(a);
        Ok(self.push(out, Op::Reshape(a), needs))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let out = self.value(a).permute(axes)?;
        let needs = self.needs(a);
        Ok(self.push(
            out,
            Op::Permute {
                a,
                axes: axes.to_vec(),
            },
            needs,
        ))
    }

    /// Repeat `a` `n` times along a new leading axis.
    pub fn expand_batch(&mut self, a: Var, n: usize) -> Var {
        let av = self.value(a);
        let mut shape = vec![n];
        shape.extend_from_slice(av.shape());
        let mut out = Vec::with_capacity(n * av.len());
        for _ in 0..n {
            out.extend_from_slice(av.data());
        }
        let needs = self.needs(a);
        self.push(Tensor::new(&shape, out).unwrap(), Op::ExpandBatch(a), needs)
    }

    /// Divide every row (last axis) by its L2 norm. Zero rows are rejected.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let d = av.last_dim();
        let mut out = av.data().to_vec();
        let mut norms = Vec::with_capacity(av.rows());
        for row in out.chunks_mut(d) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(n > T::zero()) {
                return Err(Error::ZeroNorm("l2_normalize"));
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let out = Tensor::new(av.shape(), out)?;
        let needs = self.needs(a);
        Ok(self.push(out, Op::L2Normalize { a, norms }, needs))
    }

    /// `out[i] = a[i, index[i]]` for a 2-D `a`.
    pub fn pick(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let c = av.last_dim();
        if av.rows() != index.len() || index.iter().any(|&i| i >= c) {
            return Err(Error::shape("pick", format!("{:?} with {} indices", av.shape(), index.len())));
        }
        let out: Vec<T> = index
            .iter()
            .enumerate()
            .map(|(r, &i)| av.data()[r * c + i])
            .collect();
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::new(&[index.len()], out)?,
            Op::Pick {
                a,
                index: index.to_vec(),
            },
            needs,
        ))
    }

    /// Propagate `∂loss/∂·` back to every trainable parameter leaf; gradients
    /// are accumulated into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.needs(loss) {
            return Err(Error::DetachedGraph);
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lv.shape(), vec![T::one()])?);
        let mut reached = false;
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    let p = store.get_mut(*id);
                    if p.trainable {
                        p.grad.add_assign(&g);
                        reached = true;
                    }
                }
                op => self.backprop_op(op, &node.value, g, &mut grads)?,
            }
        }
        if !reached {
            return Err(Error::DetachedGraph);
        }
        Ok(())
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_op(
        &self,
        op: &Op<T>,
        out: &Tensor<T>,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match op {
            Op::Constant | Op::Param(_) => unreachable!(),
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let m = av.rows();
                let k = av.last_dim();
                let n = g.last_dim();
                if self.needs(*a) {
                    // dA = G · Bᵀ   (or G · B when b was transposed)
                    let mut da = vec![T::zero(); m * k];
                    let (rsb, csb) = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                    T::gemm(m, n, k, g.data(), n as isize, 1, bv.data(), rsb, csb, &mut da, T::zero());
                    self.accum(grads, *a, Tensor::new(av.shape(), da)?);
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); k * n];
                    if *trans_b {
                        // dB[n,k] = Gᵀ · A
                        T::gemm(n, m, k, g.data(), 1, n as isize, av.data(), k as isize, 1, &mut db, T::zero());
                    } else {
                        // dB[k,n] = Aᵀ · G
                        T::gemm(k, m, n, av.data(), 1, k as isize, g.data(), n as isize, 1, &mut db, T::zero());
                    }
                    self.accum(grads, *b, Tensor::new(bv.shape(), db)?);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (bs, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = g.shape()[2];
                if self.needs(*a) {
                    let mut da = vec![T::zero(); bs * m * k];
                    let (rsb, csb) = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                    for i in 0..bs {
                        T::gemm(
                            m,
                            n,
                            k,
                            &g.data()[i * m * n..(i + 1) * m * n],
                            n as isize,
                            1,
                            &bv.data()[i * k * n..(i + 1) * k * n],
                            rsb,
                            csb,
                            &mut da[i * m * k..(i + 1) * m * k],
                            T::zero(),
                        );
                    }
                    self.accum(grads, *a, Tensor::new(av.shape(), da)?);
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); bs * k * n];
                    for i in 0..bs {
                        let gi = &g.data()[i * m * n..(i + 1) * m * n];
                        let ai = &av.data()[i * m * k..(i + 1) * m * k];
                        let dbi = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            T::gemm(n, m, k, gi, 1, n as isize, ai, k as isize, 1, dbi, T::zero());
                        } else {
                            T::gemm(k, m, n, ai, 1, k as isize, gi, n as isize, 1, dbi, T::zero());
                        }
                    }
                    self.accum(grads, *b, Tensor::new(bv.shape(), db)?);
                }
            }
            Op::Add(a, b) => {
                if self.needs(*b) {
                    self.accum(grads, *b, g.clone());
                }
                self.accum(grads, *a, g);
            }
            Op::Sub(a, b) => {
                if self.needs(*b) {
                    let neg = g.data().iter().map(|&v| -v).collect();
                    self.accum(grads, *b, Tensor::new(g.shape(), neg)?);
                }
                self.accum(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                    self.accum(grads, *a, Tensor::new(g.shape(), d)?);
                }
                if self.needs(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    self.accum(grads, *b, Tensor::new(g.shape(), d)?);
                }
            }
            Op::AddBroadcast(a, b) => {
                if self.needs(*b) {
                    let bv = self.value(*b);
                    let mut db = vec![T::zero(); bv.len()];
                    for chunk in g.data().chunks(bv.len()) {
                        for (d, &v) in db.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    self.accum(grads, *b, Tensor::new(bv.shape(), db)?);
                }
                self.accum(grads, *a, g);
            }
            Op::Scale(a, c) => {
                let d = g.data().iter().map(|&v| v * *c).collect();
                self.accum(grads, *a, Tensor::new(g.shape(), d)?);
            }
            Op::Softmax(a) => {
                let c = out.last_dim();
                let mut d = vec![T::zero(); out.len()];
                for ((dr, yr), gr) in d.chunks_mut(c).zip(out.data().chunks(c)).zip(g.data().chunks(c)) {
                    let dot: T = yr.iter().zip(gr).map(|(&y, &gv)| y * gv).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accum(grads, *a, Tensor::new(out.shape(), d)?);
            }
            Op::LogSoftmax(a) => {
                let c = out.last_dim();
                let mut d = vec![T::zero(); out.len()];
                for ((dr, yr), gr) in d.chunks_mut(c).zip(out.data().chunks(c)).zip(g.data().chunks(c)) {
                    let gs: T = gr.iter().copied().sum();
                    for j in 0..c {
                        dr[j] = gr[j] - yr[j].exp() * gs;
                    }
                }
                self.accum(grads, *a, Tensor::new(out.shape(), d)?);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = out.last_dim();
                let rows = out.rows();
                let gv = self.value(*gamma).data();
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dg = vec![T::zero(); d];
                    let mut db = vec![T::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            let gg = g.data()[r * d + j];
                            dg[j] += gg * xhat[r * d + j];
                            db[j] += gg;
                        }
                    }
                    self.accum(grads, *gamma, Tensor::new(self.value(*gamma).shape(), dg)?);
                    self.accum(grads, *beta, Tensor::new(self.value(*beta).shape(), db)?);
                }
                if self.needs(*x) {
                    let dn = T::of(d as f64);
                    let mut dx = vec![T::zero(); out.len()];
                    for r in 0..rows {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let dh = g.data()[r * d + j] * gv[j];
                            s1 += dh;
                            s2 += dh * xhat[r * d + j];
                        }
                        let (m1, m2) = (s1 / dn, s2 / dn);
                        for j in 0..d {
                            let dh = g.data()[r * d + j] * gv[j];
                            dx[r * d + j] = rstd[r] * (dh - m1 - xhat[r * d + j] * m2);
                        }
                    }
                    self.accum(grads, *x, Tensor::new(out.shape(), dx)?);
                }
            }
            Op::Gelu { a, tanh } => {
                let c = T::of(GELU_C);
                let half = T::of(0.5);
                let three_k = T::of(3.0 * GELU_A);
                let av = self.value(*a);
                let d = av
                    .data()
                    .iter()
                    .zip(tanh)
                    .zip(g.data())
                    .map(|((&x, &t), &gv)| {
                        let dt = (T::one() - t * t) * c * (T::one() + three_k * x * x);
                        gv * (half * (T::one() + t) + half * x * dt)
                    })
                    .collect();
                self.accum(grads, *a, Tensor::new(av.shape(), d)?);
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                let d = av
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gv)| if x > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accum(grads, *a, Tensor::new(av.shape(), d)?);
            }
            Op::Log(a) => {
                let av = self.value(*a);
                let d = av.data().iter().zip(g.data()).map(|(&x, &gv)| gv / x).collect();
                self.accum(grads, *a, Tensor::new(av.shape(), d)?);
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                self.accum(grads, *a, Tensor::full(av.shape(), g.item()));
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let v = g.item() / T::of(av.len().max(1) as f64);
                self.accum(grads, *a, Tensor::full(av.shape(), v));
            }
            Op::Concat { inputs, axis } => {
                let outer: usize = out.shape()[..*axis].iter().product();
                let out_chunk = out.len() / outer;
                let mut offset = 0;
                for &v in inputs {
                    let t = self.value(v);
                    let chunk = t.len() / outer;
                    if self.needs(v) {
                        let mut d = Vec::with_capacity(t.len());
                        for o in 0..outer {
                            let base = o * out_chunk + offset;
                            d.extend_from_slice(&g.data()[base..base + chunk]);
                        }
                        self.accum(grads, v, Tensor::new(t.shape(), d)?);
                    }
                    offset += chunk;
                }
            }
            Op::Narrow { a, axis, start } => {
                let av = self.value(*a);
                let s = av.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[*axis + 1..].iter().product();
                let len = out.shape()[*axis];
                let mut d = vec![T::zero(); av.len()];
                for o in 0..outer {
                    let dst = o * s[*axis] * inner + start * inner;
                    let src = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.accum(grads, *a, Tensor::new(s, d)?);
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accum(grads, *a, g.reshaped(&shape)?);
            }
            Op::Permute { a, axes } => {
                let d = g.permute(&invert_axes(axes))?;
                self.accum(grads, *a, d);
            }
            Op::ExpandBatch(a) => {
                let av = self.value(*a);
                let mut d = vec![T::zero(); av.len()];
                for chunk in g.data().chunks(av.len()) {
                    for (x, &v) in d.iter_mut().zip(chunk) {
                        *x += v;
                    }
                }
                self.accum(grads, *a, Tensor::new(av.shape(), d)?);
            }
            Op::L2Normalize { a, norms } => {
                let c = out.last_dim();
                let mut d = vec![T::zero(); out.len()];
                for (r, ((dr, yr), gr)) in d
                    .chunks_mut(c)
                    .zip(out.data().chunks(c))
                    .zip(g.data().chunks(c))
                    .enumerate()
                {
                    let dot: T = yr.iter().zip(gr).map(|(&y, &gv)| y * gv).sum();
                    for j in 0..c {
                        dr[j] = (gr[j] - yr[j] * dot) / norms[r];
                    }
                }
                self.accum(grads, *a, Tensor::new(out.shape(), d)?);
            }
            Op::Pick { a, index } => {
                let av = self.value(*a);
                let c = av.last_dim();
                let mut d = vec![T::zero(); av.len()];
                for (r, &i) in index.iter().enumerate() {
                    d[r * c + i] = g.data()[r];
                }
                self.accum(grads, *a, Tensor::new(av.shape(), d)?);
            }
        }
        Ok(())
    }
}

/// Numerically stable in-place softmax of one row.
/// `ln Σ e^x` split as `(max, ln(1 + Σ_{others} e^{x − max}))`, so that
/// `x − lse` keeps full relative precision when the other terms are tiny.
pub fn log_sum_exp_split<T: Real>(x: &[T]) -> (T, T) {
    let (arg, m) = x
        .iter()
        .enumerate()
        .fold((0, T::neg_infinity()), |(ai, m), (i, &v)| if v > m { (i, v) } else { (ai, m) });
    let rest: T = x
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, &v)| (v - m).exp())
        .sum();
    (m, rest.ln_1p())
}

pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[(&str, Tensor<f64>)]) -> (ParamStore<f64>, Vec<ParamId>) {
        let mut s = ParamStore::new();
        let ids = values.iter().map(|(n, t)| s.add(*n, t.clone())).collect();
        (s, ids)
    }

    #[test]
    fn square_gradient() {
        let (mut store, ids) = store_with(&[("x", Tensor::scalar(3.0))]);
        let mut g = Graph::new();
        let x = g.param(&store, ids[0]);
        let y = g.mul(x, x).unwrap();
        g.backward(y, &mut store).unwrap();
        assert_eq!(store.grad(ids[0]).item(), 6.0);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let (mut store, ids) =
            store_with(&[("x", Tensor::from_f64(&[1, 4], &[0.3, -1.2, 2.0, 0.0]).unwrap())]);
        let mut g = Graph::new();
        let x = g.param(&store, ids[0]);
        let s = g.softmax(x);
        let l = g.sum(s);
        g.backward(l, &mut store).unwrap();
        assert!(store.grad(ids[0]).data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let (mut store, ids) = store_with(&[("x", Tensor::zeros(&[2]))]);
        let mut g = Graph::new();
        let x = g.param(&store, ids[0]);
        assert!(matches!(g.backward(x, &mut store), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn detached_graph_rejected() {
        let (mut store, ids) = store_with(&[("x", Tensor::scalar(1.0))]);
        store.set_trainable(ids[0], false);
        let mut g = Graph::new();
        let x = g.param(&store, ids[0]);
        let c = g.constant(Tensor::scalar(2.0));
        let y = g.mul(x, c).unwrap();
        assert!(matches!(g.backward(y, &mut store), Err(Error::DetachedGraph)));
        assert_eq!(store.grad(ids[0]).item(), 0.0);
    }

    #[test]
    fn frozen_leaf_grad_untouched() {
        let (mut store, ids) = store_with(&[("a", Tensor::scalar(2.0)), ("b", Tensor::scalar(5.0))]);
        store.set_trainable(ids[1], false);
        let mut g = Graph::new();
        let a = g.param(&store, ids[0]);
        let b = g.param(&store, ids[1]);
        let y = g.mul(a, b).unwrap();
        g.backward(y, &mut store).unwrap();
        assert_eq!(store.grad(ids[0]).item(), 5.0);
        assert_eq!(store.grad(ids[1]).item(), 0.0);
    }

    #[test]
    fn l2_normalize_rejects_zero_rows() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.l2_normalize(x), Err(Error::ZeroNorm(_))));
    }

    #[test]
    fn matmul_matches_naive() {
        let a = Tensor::<f64>::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::<f64>::from_f64(&[3, 2], &[7., 8., 9., 10., 11., 12.]).unwrap();
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a), g.constant(b.clone()));
        let c = g.matmul(av, bv).unwrap();
        assert_eq!(g.value(c).data(), &[58., 64., 139., 154.]);
        let bt = b.permute(&[1, 0]).unwrap();
        let btv = g.constant(bt);
        let c2 = g.matmul_t(av, btv).unwrap();
        assert_eq!(g.value(c2).data(), &[58., 64., 139., 154.]);
    }
}
