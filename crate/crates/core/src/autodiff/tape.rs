use std::rc::Rc;

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add { a: Var, b: Var, broadcast: bool },
    Sub { a: Var, b: Var, broadcast: bool },
    Concat(Vec<Var>),
    Relu(Var),
    GatherRows { x: Var, index: Rc<[usize]> },
    ScatterMean { x: Var, index: Rc<[usize]>, counts: Vec<usize> },
    ReduceMean { x: Var, axis: Option<usize> },
    ReduceMax { x: Var, axis: usize, argmax: Vec<usize> },
    Square(Var),
    SqrtSumRows(Var),
    Scale(Var, T),
    Linear { x: Var, w: Var, b: Var, relu: bool },
    EdgeMean { own: Var, nbr: Var, bias: Var, targets: Rc<[usize]>, sources: Rc<[usize]>, counts: Vec<usize> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records a forward computation in creation order, which is a topological
/// order, and replays it backwards once.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn matmul_into<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: (&[T], isize, isize),
    b: (&[T], isize, isize),
    beta: T,
    c: &mut [T],
) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices whose lengths and strides describe the
    // stated m×k, k×n and m×n matrices; `c` is a distinct mutable buffer.
    unsafe {
        T::gemm(m, k, n, T::one(), a.0.as_ptr(), a.1, a.2, b.0.as_ptr(), b.1, b.2, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

fn relu_in_place<T: Real>(v: &mut [T]) {
    for x in v {
        if !(*x > T::zero()) {
            *x = T::zero();
        }
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf: receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Constant leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    fn dims2(&self, v: Var, context: &'static str) -> Result<(usize, usize)> {
        let t = self.value(v);
        t.dims2().map_err(|_| Error::shape(t.shape(), &[0, 0], context))
    }

    /// `(m×k)·(k×n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (k2, n) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::shape(self.shape(a), self.shape(b), "matmul"));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(
            m,
            k,
            n,
            (self.value(a).data(), k as isize, 1),
            (self.value(b).data(), n as isize, 1),
            T::zero(),
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMul(a, b)))
    }

    /// Whether `b` broadcasts over the rows of `a` (`[n]` or `[1, n]` against `[m, n]`).
    fn broadcast_kind(&self, a: Var, b: Var, context: &'static str) -> Result<bool> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(false);
        }
        let cols = match sb {
            [n] => *n,
            [1, n] => *n,
            _ => return Err(Error::shape(sa, sb, context)),
        };
        match sa {
            [_, n] if *n == cols => Ok(true),
            _ => Err(Error::shape(sa, sb, context)),
        }
    }

    fn binary(&mut self, a: Var, b: Var, sign: T, context: &'static str) -> Result<(Tensor<T>, bool)> {
        let broadcast = self.broadcast_kind(a, b, context)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let mut out = av.clone();
        if broadcast {
            let n = bv.len();
            for row in out.data_mut().chunks_exact_mut(n) {
                for (o, &y) in row.iter_mut().zip(bv) {
                    *o = *o + sign * y;
                }
            }
        } else {
            for (o, &y) in out.data_mut().iter_mut().zip(bv) {
                *o = *o + sign * y;
            }
        }
        Ok((out, broadcast))
    }

    /// `a + b`, with `b` optionally broadcast over the leading axis.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, broadcast) = self.binary(a, b, T::one(), "add")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::Add { a, b, broadcast }))
    }

    /// `a - b`, with `b` optionally broadcast over the leading axis.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, broadcast) = self.binary(a, b, -T::one(), "sub")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::Sub { a, b, broadcast }))
    }

    /// Concatenation of matrices along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let (m, _) = self.dims2(first, "concat")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat")?;
            if r != m {
                return Err(Error::shape(self.shape(first), self.shape(p), "concat"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![m, total], out)?, rg, Op::Concat(parts.to_vec())))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        relu_in_place(out.data_mut());
        let rg = self.rg(x);
        self.push(out, rg, Op::Relu(x))
    }

    /// Rows `index[e]` of `x`, stacked.
    pub fn gather_rows(&mut self, x: Var, index: Rc<[usize]>) -> Result<Var> {
        let (m, n) = self.dims2(x, "gather_rows")?;
        if let Some(&bad) = index.iter().find(|&&i| i >= m) {
            return Err(Error::InvalidArgument(format!("gather index {bad} out of range for {m} rows")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * n);
        for &i in index.iter() {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![index.len(), n], out)?, rg, Op::GatherRows { x, index }))
    }

    /// Row `r` of the result is the mean of the rows `e` of `x` with
    /// `index[e] == r`; rows nobody maps to are zero.
    pub fn scatter_mean(&mut self, x: Var, index: Rc<[usize]>, num_rows: usize) -> Result<Var> {
        let (e, n) = self.dims2(x, "scatter_mean")?;
        if index.len() != e {
            return Err(Error::shape(self.shape(x), &[index.len()], "scatter_mean index"));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= num_rows) {
            return Err(Error::InvalidArgument(format!("scatter index {bad} out of range for {num_rows} rows")));
        }
        let mut counts = vec![0usize; num_rows];
        for &i in index.iter() {
            counts[i] += 1;
        }
        let src = self.value(x).data();
        let mut out = vec![T::zero(); num_rows * n];
        for (row, &i) in src.chunks_exact(n).zip(index.iter()) {
            for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o += v;
            }
        }
        for (r, &c) in counts.iter().enumerate() {
            if c > 1 {
                let inv = T::one() / T::from_f64(c as f64);
                out[r * n..(r + 1) * n].iter_mut().for_each(|v| *v = *v * inv);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![num_rows, n], out)?, rg, Op::ScatterMean { x, index, counts }))
    }

    /// Mean of all elements (`axis == None`, scalar result) or along one
    /// axis of a matrix (kept as a size-1 axis).
    pub fn reduce_mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        let out = match axis {
            None => {
                let t = self.value(x);
                let s = t.data().iter().fold(T::zero(), |acc, &v| acc + v);
                Tensor::scalar(s / T::from_f64(t.numel() as f64))
            }
            Some(ax) => {
                let (m, n) = self.dims2(x, "reduce_mean")?;
                let d = self.value(x).data();
                match ax {
                    0 => {
                        let mut o = vec![T::zero(); n];
                        for row in d.chunks_exact(n) {
                            for (a, &v) in o.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        let inv = T::from_f64(m as f64);
                        Tensor::new(vec![1, n], o.into_iter().map(|v| v / inv).collect())?
                    }
                    1 => {
                        let inv = T::from_f64(n as f64);
                        let o = d.chunks_exact(n).map(|r| r.iter().fold(T::zero(), |a, &v| a + v) / inv).collect();
                        Tensor::new(vec![m, 1], o)?
                    }
                    _ => return Err(Error::InvalidArgument(format!("axis {ax} out of range for a matrix"))),
                }
            }
        };
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::ReduceMean { x, axis }))
    }

    /// Maximum along one axis of a matrix (kept as a size-1 axis). The
    /// gradient goes to the first maximal entry.
    pub fn reduce_max(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "reduce_max")?;
        let d = self.value(x).data();
        let (shape, vals, argmax) = match axis {
            0 => {
                let mut arg = vec![0usize; n];
                let mut best: Vec<T> = d[..n].to_vec();
                for r in 1..m {
                    for c in 0..n {
                        if d[r * n + c] > best[c] {
                            best[c] = d[r * n + c];
                            arg[c] = r;
                        }
                    }
                }
                (vec![1, n], best, arg)
            }
            1 => {
                let mut arg = vec![0usize; m];
                let mut best = Vec::with_capacity(m);
                for r in 0..m {
                    let row = &d[r * n..(r + 1) * n];
                    let mut b = row[0];
                    for (c, &v) in row.iter().enumerate().skip(1) {
                        if v > b {
                            b = v;
                            arg[r] = c;
                        }
                    }
                    best.push(b);
                }
                (vec![m, 1], best, arg)
            }
            _ => return Err(Error::InvalidArgument(format!("axis {axis} out of range for a matrix"))),
        };
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, vals)?, rg, Op::ReduceMax { x, axis, argmax }))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = *v * *v);
        let rg = self.rg(x);
        self.push(out, rg, Op::Square(x))
    }

    /// Euclidean norm of each row: `[m, n] -> [m, 1]`.
    pub fn sqrt_sum_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "sqrt_sum_rows")?;
        let d = self.value(x).data();
        let out = (0..m)
            .map(|r| d[r * n..(r + 1) * n].iter().fold(T::zero(), |a, &v| a + v * v).sqrt())
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![m, 1], out)?, rg, Op::SqrtSumRows(x)))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = *v * factor);
        let rg = self.rg(x);
        self.push(out, rg, Op::Scale(x, factor))
    }

    /// `x·w + b`, optionally followed by ReLU. `x` is `[m, k]`, `w` is
    /// `[k, n]` and `b` is `[n]` or `[1, n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var, relu: bool) -> Result<Var> {
        let (m, k) = self.dims2(x, "linear input")?;
        let (k2, n) = self.dims2(w, "linear weight")?;
        if k != k2 {
            return Err(Error::shape(self.shape(x), self.shape(w), "linear"));
        }
        if self.value(b).numel() != n || self.shape(b).len() > 2 {
            return Err(Error::shape(self.shape(w), self.shape(b), "linear bias"));
        }
        let bias = self.value(b).data();
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(bias);
        }
        matmul_into(m, k, n, (self.value(x).data(), k as isize, 1), (self.value(w).data(), n as isize, 1), T::one(), &mut out);
        if relu {
            relu_in_place(&mut out);
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::Linear { x, w, b, relu }))
    }

    /// Mean over edges of `relu(own[t] + nbr[s] + bias)`, grouped by target
    /// `t`. Equivalent to gathering both operands per edge, adding, applying
    /// ReLU and calling [`Tape::scatter_mean`], without materialising the
    /// per-edge rows.
    pub fn edge_mean(
        &mut self,
        own: Var,
        nbr: Var,
        bias: Var,
        targets: Rc<[usize]>,
        sources: Rc<[usize]>,
    ) -> Result<Var> {
        let (m, n) = self.dims2(own, "edge_mean own")?;
        if self.shape(nbr) != self.shape(own) {
            return Err(Error::shape(self.shape(own), self.shape(nbr), "edge_mean neighbour"));
        }
        if self.value(bias).numel() != n || self.shape(bias).len() > 2 {
            return Err(Error::shape(self.shape(own), self.shape(bias), "edge_mean bias"));
        }
        if targets.len() != sources.len() {
            return Err(Error::shape(&[targets.len()], &[sources.len()], "edge_mean edges"));
        }
        if let Some(&bad) = targets.iter().chain(sources.iter()).find(|&&i| i >= m) {
            return Err(Error::InvalidArgument(format!("edge index {bad} out of range for {m} rows")));
        }
        let mut counts = vec![0usize; m];
        for &t in targets.iter() {
            counts[t] += 1;
        }
        let (a, q, b) = (self.value(own).data(), self.value(nbr).data(), self.value(bias).data());
        let mut out = vec![T::zero(); m * n];
        for (&t, &s) in targets.iter().zip(sources.iter()) {
            let o = &mut out[t * n..(t + 1) * n];
            let (ar, qr) = (&a[t * n..(t + 1) * n], &q[s * n..(s + 1) * n]);
            for (((o, &x), &y), &z) in o.iter_mut().zip(ar).zip(qr).zip(b) {
                *o += (x + y + z).max(T::zero());
            }
        }
        for (r, &c) in counts.iter().enumerate() {
            if c > 1 {
                let inv = T::one() / T::from_f64(c as f64);
                out[r * n..(r + 1) * n].iter_mut().for_each(|v| *v = *v * inv);
            }
        }
        let rg = self.rg(own) || self.rg(nbr) || self.rg(bias);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::EdgeMean { own, nbr, bias, targets, sources, counts }))
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => acc.add_assign(&g),
            None => node.grad = Some(g),
        }
    }

    /// Populates `grad` on every node that depends on a parameter, with
    /// d`loss`/d`node`. `loss` must hold exactly one element.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(self.shape(loss), &[], "backward needs a scalar loss"));
        }
        self.backward_done = true;
        if !self.rg(loss) {
            return Ok(());
        }
        let seed = Tensor::new(self.shape(loss).to_vec(), vec![T::one()])?;
        self.nodes[loss.0].grad = Some(seed);
        for id in (0..=loss.0).rev() {
            let Some(g) = self.nodes[id].grad.take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &g)?;
            self.nodes[id].grad = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, id: usize, g: &Tensor<T>) -> Result<()> {
        // Temporarily move the op out to borrow the node values freely.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let (_, n) = self.value(*b).dims2()?;
                if self.rg(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    // g (m×n) · bᵀ (n×k)
                    matmul_into(m, n, k, (g.data(), n as isize, 1), (self.value(*b).data(), 1, n as isize), T::zero(), &mut ga);
                    self.accumulate(*a, Tensor::new(vec![m, k], ga)?);
                }
                if self.rg(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    // aᵀ (k×m) · g (m×n)
                    matmul_into(k, m, n, (self.value(*a).data(), 1, k as isize), (g.data(), n as isize, 1), T::zero(), &mut gb);
                    self.accumulate(*b, Tensor::new(vec![k, n], gb)?);
                }
            }
            Op::Add { a, b, broadcast } | Op::Sub { a, b, broadcast } => {
                let sign = if matches!(op, Op::Sub { .. }) { -T::one() } else { T::one() };
                if self.rg(*a) {
                    self.accumulate(*a, g.clone());
                }
                if self.rg(*b) {
                    let bshape = self.shape(*b).to_vec();
                    let gb = if *broadcast {
                        let n = self.value(*b).numel();
                        let mut acc = vec![T::zero(); n];
                        for row in g.data().chunks_exact(n) {
                            for (s, &v) in acc.iter_mut().zip(row) {
                                *s += v;
                            }
                        }
                        acc.into_iter().map(|v| sign * v).collect()
                    } else {
                        g.data().iter().map(|&v| sign * v).collect()
                    };
                    self.accumulate(*b, Tensor::new(bshape, gb)?);
                }
            }
            Op::Concat(parts) => {
                let (m, total) = g.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let (_, w) = self.value(p).dims2()?;
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(m * w);
                        for r in 0..m {
                            gp.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(p, Tensor::new(vec![m, w], gp)?);
                    }
                    offset += w;
                }
            }
            Op::Relu(x) => {
                let out = &self.nodes[id].value;
                let gx = g.data().iter().zip(out.data()).map(|(&gv, &o)| if o > T::zero() { gv } else { T::zero() }).collect();
                let shape = out.shape().to_vec();
                self.accumulate(*x, Tensor::new(shape, gx)?);
            }
            Op::GatherRows { x, index } => {
                let (m, n) = self.value(*x).dims2()?;
                let mut gx = vec![T::zero(); m * n];
                for (row, &i) in g.data().chunks_exact(n).zip(index.iter()) {
                    for (a, &v) in gx[i * n..(i + 1) * n].iter_mut().zip(row) {
                        *a += v;
                    }
                }
                self.accumulate(*x, Tensor::new(vec![m, n], gx)?);
            }
            Op::ScatterMean { x, index, counts } => {
                let (e, n) = self.value(*x).dims2()?;
                let mut gx = Vec::with_capacity(e * n);
                for &i in index.iter() {
                    let inv = T::one() / T::from_f64(counts[i] as f64);
                    gx.extend(g.data()[i * n..(i + 1) * n].iter().map(|&v| v * inv));
                }
                self.accumulate(*x, Tensor::new(vec![e, n], gx)?);
            }
            Op::ReduceMean { x, axis } => {
                let shape = self.shape(*x).to_vec();
                let numel: usize = shape.iter().product();
                let gx = match axis {
                    None => vec![g.item() / T::from_f64(numel as f64); numel],
                    Some(ax) => {
                        let (m, n) = (shape[0], shape[1]);
                        let mut gx = vec![T::zero(); m * n];
                        for r in 0..m {
                            for c in 0..n {
                                gx[r * n + c] = if *ax == 0 {
                                    g.data()[c] / T::from_f64(m as f64)
                                } else {
                                    g.data()[r] / T::from_f64(n as f64)
                                };
                            }
                        }
                        gx
                    }
                };
                self.accumulate(*x, Tensor::new(shape, gx)?);
            }
            Op::ReduceMax { x, axis, argmax } => {
                let (m, n) = self.value(*x).dims2()?;
                let mut gx = vec![T::zero(); m * n];
                if *axis == 0 {
                    for (c, &r) in argmax.iter().enumerate() {
                        gx[r * n + c] += g.data()[c];
                    }
                } else {
                    for (r, &c) in argmax.iter().enumerate() {
                        gx[r * n + c] += g.data()[r];
                    }
                }
                self.accumulate(*x, Tensor::new(vec![m, n], gx)?);
            }
            Op::Square(x) => {
                let xv = self.value(*x);
                let two = T::from_f64(2.0);
                let gx = g.data().iter().zip(xv.data()).map(|(&gv, &v)| two * v * gv).collect();
                let shape = xv.shape().to_vec();
                self.accumulate(*x, Tensor::new(shape, gx)?);
            }
            Op::SqrtSumRows(x) => {
                let (m, n) = self.value(*x).dims2()?;
                let norms = self.nodes[id].value.data();
                let xd = self.value(*x).data();
                let mut gx = vec![T::zero(); m * n];
                for r in 0..m {
                    // Subgradient 0 at the origin.
                    if norms[r] > T::zero() {
                        let s = g.data()[r] / norms[r];
                        for c in 0..n {
                            gx[r * n + c] = s * xd[r * n + c];
                        }
                    }
                }
                self.accumulate(*x, Tensor::new(vec![m, n], gx)?);
            }
            Op::Scale(x, factor) => {
                let gx = g.data().iter().map(|&v| v * *factor).collect();
                self.accumulate(*x, Tensor::new(g.shape().to_vec(), gx)?);
            }
            Op::Linear { x, w, b, relu } => {
                let (m, k) = self.value(*x).dims2()?;
                let (_, n) = self.value(*w).dims2()?;
                let masked;
                let gz = if *relu {
                    let out = self.nodes[id].value.data();
                    masked = g.data().iter().zip(out).map(|(&gv, &o)| if o > T::zero() { gv } else { T::zero() }).collect::<Vec<_>>();
                    &masked[..]
                } else {
                    g.data()
                };
                if self.rg(*x) {
                    let mut gx = vec![T::zero(); m * k];
                    matmul_into(m, n, k, (gz, n as isize, 1), (self.value(*w).data(), 1, n as isize), T::zero(), &mut gx);
                    self.accumulate(*x, Tensor::new(vec![m, k], gx)?);
                }
                if self.rg(*w) {
                    let mut gw = vec![T::zero(); k * n];
                    matmul_into(k, m, n, (self.value(*x).data(), 1, k as isize), (gz, n as isize, 1), T::zero(), &mut gw);
                    self.accumulate(*w, Tensor::new(vec![k, n], gw)?);
                }
                if self.rg(*b) {
                    let mut gb = vec![T::zero(); n];
                    for row in gz.chunks_exact(n) {
                        for (s, &v) in gb.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    let shape = self.shape(*b).to_vec();
                    self.accumulate(*b, Tensor::new(shape, gb)?);
                }
            }
            Op::EdgeMean { own, nbr, bias, targets, sources, counts } => {
                let (m, n) = self.value(*own).dims2()?;
                let (a, q, b) = (self.value(*own).data(), self.value(*nbr).data(), self.value(*bias).data());
                let mut ga = vec![T::zero(); m * n];
                let mut gq = vec![T::zero(); m * n];
                let mut gb = vec![T::zero(); n];
                for (&t, &s) in targets.iter().zip(sources.iter()) {
                    let inv = T::one() / T::from_f64(counts[t] as f64);
                    let (gr, ar, qr) = (&g.data()[t * n..(t + 1) * n], &a[t * n..(t + 1) * n], &q[s * n..(s + 1) * n]);
                    let gar = &mut ga[t * n..(t + 1) * n];
                    for c in 0..n {
                        if ar[c] + qr[c] + b[c] > T::zero() {
                            let v = gr[c] * inv;
                            gar[c] += v;
                            gq[s * n + c] += v;
                            gb[c] += v;
                        }
                    }
                }
                let bshape = self.shape(*bias).to_vec();
                self.accumulate(*own, Tensor::new(vec![m, n], ga)?);
                self.accumulate(*nbr, Tensor::new(vec![m, n], gq)?);
                self.accumulate(*bias, Tensor::new(bshape, gb)?);
            }
        }
        self.nodes[id].op = op;
        Ok(())
    }
}
