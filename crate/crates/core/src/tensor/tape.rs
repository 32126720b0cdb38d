use super::{gemm, MatMut, MatRef, Real, Tensor};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    ScaleBy(Var, Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, rstd: Vec<T> },
    Gelu(Var),
    Softplus(Var),
    Transpose(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    MeanRows(Var),
    Mean(Var),
    Sum(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    MaskRows { a: Var, fill: Var, mask: Vec<bool> },
    L1 { a: Var, target: Vec<T>, weights: Option<Vec<T>> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Records a forward computation for one reverse sweep.
///
/// Leaves created with [`Tape::param`] receive gradients; leaves from
/// [`Tape::constant`] do not, and no work is spent on branches that only
/// depend on constants.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(op: &'static str, shapes: String) -> Error {
    Error::Shape { op, shapes }
}

#[inline]
fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let y = half * x * (T::one() + th);
    let dy = half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + T::of(3.0) * a * x * x);
    (y, dy)
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(shape_err("matmul", format!("{:?} x {:?}", self.shape(a), self.shape(b))));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(T::one(), self.value(a).view(), self.value(b).view(), T::zero(), MatMut::dense(&mut out, m, n));
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), tracked))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, rec: Op<T>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(t, rec, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Broadcast a `[1, n]` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.dims(row) != (1, n) {
            return Err(shape_err("add_row", format!("{:?} + {:?}", self.shape(a), self.shape(row))));
        }
        let r = self.value(row).data();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_mut(n) {
            for (o, b) in chunk.iter_mut().zip(r) {
                *o += *b;
            }
        }
        let tracked = self.tracked(a) || self.tracked(row);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::AddRow(a, row), tracked))
    }

    /// `x W + b` with `W: [in, out]`, `b: [1, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| *v * c).collect())?;
        let tracked = self.tracked(a);
        Ok(self.push(out, Op::Scale(a, c), tracked))
    }

    /// Multiply by a `[1, 1]` variable.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err("scale_by", format!("scalar expected, got {:?}", self.shape(s))));
        }
        let c = self.value(s).item();
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| *v * c).collect())?;
        let tracked = self.tracked(a) || self.tracked(s);
        Ok(self.push(out, Op::ScaleBy(a, s), tracked))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_row(row);
        }
        let tracked = self.tracked(a);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::Softmax(a), tracked))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.dims(gain) != (1, n) || self.dims(bias) != (1, n) {
            return Err(shape_err(
                "layer_norm",
                format!("{:?} with gain {:?}, bias {:?}", self.shape(x), self.shape(gain), self.shape(bias)),
            ));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); m * n];
        let mut rstd = Vec::with_capacity(m);
        let nf = T::of(n as f64);
        for (row, o) in xs.chunks(n).zip(out.chunks_mut(n)) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / nf;
            let r = T::one() / (var + T::of(eps)).sqrt();
            for i in 0..n {
                o[i] = (row[i] - mean) * r * g[i] + b[i];
            }
            rstd.push(r);
        }
        let tracked = self.tracked(x) || self.tracked(gain) || self.tracked(bias);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::LayerNorm { x, gain, bias, rstd }, tracked))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| gelu_parts(*v).0).collect())?;
        let tracked = self.tracked(a);
        Ok(self.push(out, Op::Gelu(a), tracked))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let data = t
            .data()
            .iter()
            .map(|&x| x.max(T::zero()) + (T::one() + (-x.abs()).exp()).ln())
            .collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let tracked = self.tracked(a);
        Ok(self.push(out, Op::Softplus(a), tracked))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let tracked = self.tracked(a);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::Transpose(a), tracked))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.len() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", t.shape())));
        }
        let out = Tensor::new(shape.to_vec(), t.data().to_vec())?;
        let tracked = self.tracked(a);
        Ok(self.push(out, Op::Reshape(a), tracked))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("concat_rows", "no inputs".into()));
        };
        let n = self.dims(first).1;
        if let Some(bad) = parts.iter().find(|p| self.dims(**p).1 != n) {
            return Err(shape_err("concat_rows", format!("{:?} vs {:?}", self.shape(first), self.shape(*bad))));
        }
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            out.extend_from_slice(self.value(*p).data());
            rows += self.dims(*p).0;
        }
        let tracked = parts.iter().any(|p| self.tracked(*p));
        Ok(self.push(Tensor::matrix(rows, n, out)?, Op::ConcatRows(parts.to_vec()), tracked))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if start > end || end > m {
            return Err(shape_err("slice_rows", format!("rows {start}..{end} of {:?}", self.shape(a))));
        }
        let out = self.value(a).data()[start * n..end * n].to_vec();
        let tracked = self.tracked(a);
        Ok(self.push(Tensor::matrix(end - start, n, out)?, Op::SliceRows(a, start), tracked))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if start > end || end > n {
            return Err(shape_err("slice_cols", format!("cols {start}..{end} of {:?}", self.shape(a))));
        }
        let src = self.value(a).data();
        let out: Vec<T> = src.chunks(n).flat_map(|r| r[start..end].iter().copied()).collect();
        let tracked = self.tracked(a);
        Ok(self.push(Tensor::matrix(m, end - start, out)?, Op::SliceCols(a, start), tracked))
    }

    /// Mean over rows: `[m, n] -> [1, n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if m == 0 {
            return Err(shape_err("mean_rows", "empty input".into()));
        }
        let mut out = vec![T::zero(); n];
        for row in self.value(a).data().chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += *v;
            }
        }
        let inv = T::one() / T::of(m as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        let tracked = self.tracked(a);
        Ok(self.push(Tensor::matrix(1, n, out)?, Op::MeanRows(a), tracked))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(shape_err("mean", "empty input".into()));
        }
        let v = t.data().iter().copied().sum::<T>() / T::of(t.len() as f64);
        let tracked = self.tracked(a);
        Ok(self.push(Tensor::scalar(v), Op::Mean(a), tracked))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).data().iter().copied().sum::<T>();
        let tracked = self.tracked(a);
        Ok(self.push(Tensor::scalar(v), Op::Sum(a), tracked))
    }

    /// Multi-head scaled dot-product self-attention over all rows.
    ///
    /// `q`, `k`, `v` are `[n, d]`; head `h` uses columns
    /// `h * d / heads .. (h + 1) * d / heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (n, d) = self.dims(q);
        if self.dims(k) != (n, d) || self.dims(v) != (n, d) || heads == 0 || d % heads != 0 {
            return Err(shape_err(
                "attention",
                format!("q {:?}, k {:?}, v {:?}, heads {heads}", self.shape(q), self.shape(k), self.shape(v)),
            ));
        }
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut probs = vec![T::zero(); heads * n * n];
        let mut out = vec![T::zero(); n * d];
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        for h in 0..heads {
            let p = &mut probs[h * n * n..(h + 1) * n * n];
            let qh = MatRef { data: qd, offset: h * dh, rows: n, cols: dh, rs: d, cs: 1 };
            let kh = MatRef { data: kd, offset: h * dh, rows: n, cols: dh, rs: d, cs: 1 };
            gemm(scale, qh, kh.t(), T::zero(), MatMut::dense(p, n, n));
            for row in p.chunks_mut(n) {
                softmax_row(row);
            }
            let vh = MatRef { data: vd, offset: h * dh, rows: n, cols: dh, rs: d, cs: 1 };
            gemm(
                T::one(),
                MatRef::dense(p, n, n),
                vh,
                T::zero(),
                MatMut { data: &mut out, offset: h * dh, rows: n, cols: dh, rs: d },
            );
        }
        let tracked = self.tracked(q) || self.tracked(k) || self.tracked(v);
        Ok(self.push(Tensor::matrix(n, d, out)?, Op::Attention { q, k, v, heads, probs }, tracked))
    }

    /// Attention probabilities recorded by an [`attention`](Self::attention)
    /// node, `[heads][n][n]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Replace rows where `mask` is set by the `[1, n]` row `fill`.
    pub fn mask_rows(&mut self, a: Var, fill: Var, mask: &[bool]) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.dims(fill) != (1, n) || mask.len() != m {
            return Err(shape_err(
                "mask_rows",
                format!("{:?} with fill {:?} and {} mask flags", self.shape(a), self.shape(fill), mask.len()),
            ));
        }
        let f = self.value(fill).data();
        let mut out = self.value(a).data().to_vec();
        for (row, &mk) in out.chunks_mut(n).zip(mask) {
            if mk {
                row.copy_from_slice(f);
            }
        }
        let tracked = self.tracked(a) || self.tracked(fill);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MaskRows { a, fill, mask: mask.to_vec() }, tracked))
    }

    /// `(1 / rows) * sum_i w_i * sum_c |a_ic - t_ic|` against a constant target.
    pub fn l1_rows(&mut self, a: Var, target: &[T], weights: Option<&[T]>) -> Result<Var> {
        let (m, n) = self.dims(a);
        if target.len() != m * n || weights.is_some_and(|w| w.len() != m) || m == 0 {
            return Err(shape_err(
                "l1_rows",
                format!("{:?} vs {} targets, {:?} weights", self.shape(a), target.len(), weights.map(|w| w.len())),
            ));
        }
        let ad = self.value(a).data();
        let mut total = T::zero();
        for i in 0..m {
            let w = weights.map_or(T::one(), |w| w[i]);
            let s: T = (0..n).map(|c| (ad[i * n + c] - target[i * n + c]).abs()).sum();
            total += w * s;
        }
        let v = total / T::of(m as f64);
        let tracked = self.tracked(a);
        Ok(self.push(
            Tensor::scalar(v),
            Op::L1 {
                a,
                target: target.to_vec(),
                weights: weights.map(|w| w.to_vec()),
            },
            tracked,
        ))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients<T>> {
        if self.value(out).len() != 1 {
            return Err(shape_err("backward", format!("scalar output expected, got {:?}", self.shape(out))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(vec![T::one()]);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = &node.value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].tracked {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                let gv = MatRef::dense(g, m, n);
                let bv = self.value(*b).view();
                let av = self.value(*a).view();
                acc(*a, &mut |ga| gemm(T::one(), gv, bv.t(), T::one(), MatMut::dense(ga, m, k)));
                acc(*b, &mut |gb| gemm(T::one(), av.t(), gv, T::one(), MatMut::dense(gb, k, n)));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, x)| *o -= *x));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| ga.iter_mut().zip(g).zip(bd).for_each(|((o, x), y)| *o += *x * *y));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).zip(ad).for_each(|((o, x), y)| *o += *x * *y));
            }
            Op::AddRow(a, row) => {
                let n = val.cols();
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*row, &mut |gr| {
                    for chunk in g.chunks(n) {
                        add_into(gr, chunk);
                    }
                });
            }
            Op::Scale(a, c) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += *x * *c));
            }
            Op::ScaleBy(a, s) => {
                let c = self.value(*s).item();
                let ad = self.value(*a).data();
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += *x * c));
                acc(*s, &mut |gs| gs[0] += g.iter().zip(ad).map(|(x, y)| *x * *y).sum::<T>());
            }
            Op::Softmax(a) => {
                let n = val.cols();
                let p = val.data();
                acc(*a, &mut |ga| {
                    for ((go, gi), pi) in ga.chunks_mut(n).zip(g.chunks(n)).zip(p.chunks(n)) {
                        let dot: T = gi.iter().zip(pi).map(|(x, y)| *x * *y).sum();
                        for c in 0..n {
                            go[c] += pi[c] * (gi[c] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, rstd } => {
                let n = val.cols();
                let xd = self.value(*x).data();
                let gd = self.value(*gain).data();
                let nf = T::of(n as f64);
                // xhat recomputed from x and the stored 1/std.
                let xhat: Vec<T> = xd
                    .chunks(n)
                    .zip(rstd)
                    .flat_map(|(row, r)| {
                        let mean = row.iter().copied().sum::<T>() / nf;
                        row.iter().map(move |v| (*v - mean) * *r)
                    })
                    .collect();
                acc(*gain, &mut |gg| {
                    for (gi, hi) in g.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            gg[c] += gi[c] * hi[c];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for gi in g.chunks(n) {
                        add_into(gb, gi);
                    }
                });
                acc(*x, &mut |gx| {
                    for (((go, gi), hi), r) in gx.chunks_mut(n).zip(g.chunks(n)).zip(xhat.chunks(n)).zip(rstd) {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for c in 0..n {
                            let dh = gi[c] * gd[c];
                            m1 += dh;
                            m2 += dh * hi[c];
                        }
                        m1 /= nf;
                        m2 /= nf;
                        for c in 0..n {
                            go[c] += *r * (gi[c] * gd[c] - m1 - hi[c] * m2);
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let ad = self.value(*a).data();
                acc(*a, &mut |ga| ga.iter_mut().zip(g).zip(ad).for_each(|((o, x), v)| *o += *x * gelu_parts(*v).1));
            }
            Op::Softplus(a) => {
                let ad = self.value(*a).data();
                acc(*a, &mut |ga| {
                    ga.iter_mut().zip(g).zip(ad).for_each(|((o, x), v)| {
                        let sig = T::one() / (T::one() + (-*v).exp());
                        *o += *x * sig
                    })
                });
            }
            Op::Transpose(a) => {
                let (m, n) = self.dims(*a);
                acc(*a, &mut |ga| {
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    acc(*p, &mut |gp| add_into(gp, &g[off..off + len]));
                    off += len;
                }
            }
            Op::SliceRows(a, start) => {
                let n = val.cols();
                let s = start * n;
                acc(*a, &mut |ga| add_into(&mut ga[s..s + g.len()], g));
            }
            Op::SliceCols(a, start) => {
                let n = self.dims(*a).1;
                let w = val.cols();
                acc(*a, &mut |ga| {
                    for (r, gi) in g.chunks(w).enumerate() {
                        add_into(&mut ga[r * n + start..r * n + start + w], gi);
                    }
                });
            }
            Op::MeanRows(a) => {
                let (m, n) = self.dims(*a);
                let inv = T::one() / T::of(m as f64);
                acc(*a, &mut |ga| {
                    for row in ga.chunks_mut(n) {
                        row.iter_mut().zip(g).for_each(|(o, x)| *o += *x * inv);
                    }
                });
            }
            Op::Mean(a) => {
                let len = self.value(*a).len();
                let d = g[0] / T::of(len as f64);
                acc(*a, &mut |ga| ga.iter_mut().for_each(|o| *o += d));
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|o| *o += g[0])),
            Op::Attention { q, k, v, heads, probs } => {
                let (n, d) = self.dims(*q);
                let (dq, dk, dv) = attention_backward(
                    g,
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    n,
                    d,
                    *heads,
                );
                acc(*q, &mut |x| add_into(x, &dq));
                acc(*k, &mut |x| add_into(x, &dk));
                acc(*v, &mut |x| add_into(x, &dv));
            }
            Op::MaskRows { a, fill, mask } => {
                let n = val.cols();
                acc(*a, &mut |ga| {
                    for ((go, gi), mk) in ga.chunks_mut(n).zip(g.chunks(n)).zip(mask) {
                        if !mk {
                            add_into(go, gi);
                        }
                    }
                });
                acc(*fill, &mut |gf| {
                    for (gi, mk) in g.chunks(n).zip(mask) {
                        if *mk {
                            add_into(gf, gi);
                        }
                    }
                });
            }
            Op::L1 { a, target, weights } => {
                let (m, n) = self.dims(*a);
                let ad = self.value(*a).data();
                let base = g[0] / T::of(m as f64);
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        let w = weights.as_ref().map_or(T::one(), |w| w[i]) * base;
                        for c in 0..n {
                            let r = ad[i * n + c] - target[i * n + c];
                            // subgradient 0 at an exact zero residual
                            let s = if r > T::zero() {
                                T::one()
                            } else if r < T::zero() {
                                -T::one()
                            } else {
                                T::zero()
                            };
                            ga[i * n + c] += w * s;
                        }
                    }
                });
            }
        }
    }
}

#[inline]
fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s);
}

#[inline]
fn softmax_row<T: Real>(row: &mut [T]) {
    let mut lanes = [T::neg_infinity(); 8];
    let mut chunks = row.chunks_exact(8);
    for c in &mut chunks {
        for i in 0..8 {
            if c[i] > lanes[i] {
                lanes[i] = c[i];
            }
        }
    }
    let mut max = lanes.iter().copied().fold(T::neg_infinity(), T::max);
    for v in chunks.remainder() {
        max = max.max(*v);
    }
    for v in row.iter_mut() {
        *v = (*v - max).softmax_exp();
    }
    let mut sums = [0.0f64; 8];
    let mut chunks = row.chunks_exact(8);
    for c in &mut chunks {
        for i in 0..8 {
            sums[i] += c[i].f64();
        }
    }
    let z: f64 = sums.iter().sum::<f64>() + chunks.remainder().iter().map(|v| v.f64()).sum::<f64>();
    let inv = T::of(1.0 / z);
    for v in row.iter_mut() {
        *v *= inv;
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Real>(
    g: &[T],
    qd: &[T],
    kd: &[T],
    vd: &[T],
    probs: &[T],
    n: usize,
    d: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut dq = vec![T::zero(); n * d];
    let mut dk = vec![T::zero(); n * d];
    let mut dv = vec![T::zero(); n * d];
    let mut ds = vec![T::zero(); n * n];
    for h in 0..heads {
        let p = &probs[h * n * n..(h + 1) * n * n];
        let col = |data| MatRef { data, offset: h * dh, rows: n, cols: dh, rs: d, cs: 1 };
        let gh = col(g);
        // dP = dO V^T
        gemm(T::one(), gh, col(vd).t(), T::zero(), MatMut::dense(&mut ds, n, n));
        // dV += P^T dO
        gemm(
            T::one(),
            MatRef::dense(p, n, n).t(),
            gh,
            T::one(),
            MatMut { data: &mut dv, offset: h * dh, rows: n, cols: dh, rs: d },
        );
        // dS = P * (dP - rowsum(dP * P))
        for (dsr, pr) in ds.chunks_mut(n).zip(p.chunks(n)) {
            let dot: T = dsr.iter().zip(pr).map(|(x, y)| *x * *y).sum();
            for (x, y) in dsr.iter_mut().zip(pr) {
                *x = *y * (*x - dot);
            }
        }
        let dsv = MatRef::dense(&ds, n, n);
        gemm(scale, dsv, col(kd), T::one(), MatMut { data: &mut dq, offset: h * dh, rows: n, cols: dh, rs: d });
        gemm(scale, dsv.t(), col(qd), T::one(), MatMut { data: &mut dk, offset: h * dh, rows: n, cols: dh, rs: d });
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, GradCheckOptions};

    fn t(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let data = (0..rows * cols)
            .map(|i| (((i as u64 + 1) * 2654435761 + seed * 97) % 1000) as f64 / 500.0 - 1.0)
            .collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    #[test]
    fn softmax_of_constant_row_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[2, 5], 3.0));
        let y = tape.softmax(x).unwrap();
        assert!(tape.value(y).data().iter().all(|v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(3, 16, 1));
        let g = tape.constant(Tensor::full(&[1, 16], 1.0));
        let b = tape.constant(Tensor::zeros(&[1, 16]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        for row in tape.value(y).data().chunks(16) {
            let mean: f64 = row.iter().sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(2, 3, 0));
        let b = tape.constant(t(2, 3, 1));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        assert!(tape.add_row(a, b).is_err());
        assert!(tape.slice_rows(a, 1, 4).is_err());
        assert!(tape.attention(a, a, a, 2).is_err());
    }

    #[test]
    fn six_op_chain_matches_finite_differences() {
        let inputs = vec![t(4, 6, 1), t(6, 5, 2), t(1, 5, 3), t(1, 5, 4), t(1, 5, 5)];
        let report = grad_check(
            |tape, v| {
                let h = tape.matmul(v[0], v[1])?;
                let h = tape.add_row(h, v[2])?;
                let h = tape.layer_norm(h, v[3], v[4], 1e-5)?;
                let h = tape.gelu(h)?;
                let h = tape.softmax(h)?;
                let h = tape.transpose(h)?;
                let h = tape.mul(h, h)?;
                tape.mean(h)
            },
            &inputs,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-6, "{report:?}");
    }

    #[test]
    fn remaining_ops_match_finite_differences() {
        let inputs = vec![t(5, 4, 7), t(1, 4, 8), t(1, 1, 9), t(3, 4, 10)];
        let target: Vec<f64> = (0..10).map(|i| i as f64 * 0.1 - 0.5).collect();
        let weights = [1.0, 0.0, 2.0, 0.5, 1.0];
        let report = grad_check(
            |tape, v| {
                let m = tape.mask_rows(v[0], v[1], &[false, true, false, true, false])?;
                let c = tape.concat_rows(&[m, v[3]])?;
                let s = tape.slice_rows(c, 1, 6)?;
                let cols = tape.slice_cols(s, 1, 3)?;
                let sp = tape.softplus(v[2])?;
                let sc = tape.scale_by(cols, sp)?;
                let l1 = tape.l1_rows(sc, &target, Some(&weights))?;
                let mr = tape.mean_rows(c)?;
                let r = tape.reshape(mr, &[2, 2])?;
                let sub = tape.sub(r, r)?;
                let sum = tape.sum(mr)?;
                let sum2 = tape.sum(sub)?;
                let a = tape.add(l1, sum)?;
                let a = tape.add(a, sum2)?;
                tape.scale(a, 1.5)
            },
            &inputs,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-6, "{report:?}");
    }

    #[test]
    fn attention_matches_finite_differences() {
        let inputs = vec![t(7, 8, 11), t(7, 8, 12), t(7, 8, 13)];
        let report = grad_check(
            |tape, v| {
                let o = tape.attention(v[0], v[1], v[2], 2)?;
                let o = tape.mul(o, o)?;
                tape.sum(o)
            },
            &inputs,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-6, "{report:?}");
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut tape = Tape::<f32>::new();
        let q = tape.constant(t(9, 8, 1).cast());
        let k = tape.constant(t(9, 8, 2).cast());
        let v = tape.constant(t(9, 8, 3).cast());
        let o = tape.attention(q, k, v, 4).unwrap();
        for row in tape.attention_probs(o).unwrap().chunks(9) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(2, 2, 1));
        let b = tape.param(t(2, 2, 2));
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(a).is_none());
        assert!(g.get(b).is_some());
    }
}
