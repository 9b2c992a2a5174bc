//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Every operation records its output value, its parent node ids and a
//! backward rule. [`Tape::backward`] walks the tape once in reverse and
//! accumulates gradients into every `requires_grad` node reachable from the
//! loss. Tapes are single-threaded and rebuilt per training step.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::TensorBase;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn<S> = Box<dyn Fn(&TensorBase<S>) -> Vec<TensorBase<S>>>;

struct Node<S: Scalar> {
    value: TensorBase<S>,
    grad: Option<TensorBase<S>>,
    requires_grad: bool,
    parents: Vec<Var>,
    backward: Option<BackFn<S>>,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    backward_done: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    /// Constant leaf: participates in the forward pass only.
    pub fn leaf(&mut self, value: TensorBase<S>) -> Var {
        self.insert(value, false)
    }

    /// Differentiable leaf: receives a gradient after [`Tape::backward`].
    pub fn leaf_grad(&mut self, value: TensorBase<S>) -> Var {
        self.insert(value, true)
    }

    fn insert(&mut self, value: TensorBase<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            parents: Vec::new(),
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: TensorBase<S>, parents: Vec<Var>, back: BackFn<S>) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            parents,
            backward: if requires_grad { Some(back) } else { None },
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &TensorBase<S> {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated on `v` by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&TensorBase<S>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Reverse pass from a scalar loss. Rejects a non-scalar loss and a
    /// second call on the same tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward(
                "backward already ran on this tape; build a fresh tape".into(),
            ));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<TensorBase<S>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(TensorBase::full(self.nodes[loss.0].value.shape(), S::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Some(back) = &node.backward {
                let contribs = back(&g);
                debug_assert_eq!(contribs.len(), node.parents.len());
                for (parent, contrib) in node.parents.clone().into_iter().zip(contribs) {
                    if !self.nodes[parent.0].requires_grad {
                        continue;
                    }
                    match &mut grads[parent.0] {
                        Some(acc) => acc.add_assign(&contrib),
                        slot => *slot = Some(contrib),
                    }
                }
            }
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }
}

// ── Raw kernels ─────────────────────────────────────────────────────────

/// C = A(m x k) * B(k x n).
pub(crate) fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// C = A(m x k) * B(n x k)^T.
fn matmul_nt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = S::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// C = A(k x m)^T * B(k x n).
fn matmul_tn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn rank2<S: Scalar>(t: &TensorBase<S>, op: &'static str) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() != 2 {
        return Err(Error::shape(op, format!("expected rank-2 tensor, got {s:?}")));
    }
    Ok((s[0], s[1]))
}

// ── Operations ─────────────────────────────────────────────────────────

impl<S: Scalar> Tape<S> {
    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rank2(self.value(a), "matmul")?;
        let (k2, n) = rank2(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions disagree: {m}x{k} vs {k2}x{n}"),
            ));
        }
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let out = TensorBase::new(vec![m, n], matmul_raw(av.data(), bv.data(), m, k, n))?;
        Ok(self.push(
            out,
            vec![a, b],
            Box::new(move |g| {
                let da = matmul_nt(g.data(), bv.data(), m, n, k);
                let db = matmul_tn(av.data(), g.data(), k, m, n);
                vec![
                    TensorBase::new(vec![m, k], da).unwrap(),
                    TensorBase::new(vec![k, n], db).unwrap(),
                ]
            }),
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = rank2(self.value(a), "transpose")?;
        let src = self.value(a).data();
        let mut data = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let out = TensorBase::new(vec![n, m], data)?;
        Ok(self.push(
            out,
            vec![a],
            Box::new(move |g| {
                let gd = g.data();
                let mut da = vec![S::zero(); m * n];
                for j in 0..n {
                    for i in 0..m {
                        da[i * n + j] = gd[j * m + i];
                    }
                }
                vec![TensorBase::new(vec![m, n], da).unwrap()]
            }),
        ))
    }

    fn binary_same_shape(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        back: impl Fn(S, S, S) -> (S, S) + 'static,
    ) -> Result<Var> {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        if !av.same_shape(&bv) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = TensorBase::new(av.shape().to_vec(), data)?;
        Ok(self.push(
            out,
            vec![a, b],
            Box::new(move |g| {
                let mut da = av.clone();
                let mut db = bv.clone();
                let adata = av.data();
                let bdata = bv.data();
                for (i, &gv) in g.data().iter().enumerate() {
                    let (dx, dy) = back(adata[i], bdata[i], gv);
                    da.data_mut()[i] = dx;
                    db.data_mut()[i] = dy;
                }
                vec![da, db]
            }),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b, |x, y| x + y, |_, _, g| (g, g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, |_, _, g| (g, -g))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, |x, y, g| (g * y, g * x))
    }

    fn unary(
        &mut self,
        a: Var,
        f: impl Fn(S) -> S,
        back: impl Fn(S, S, S) -> S + 'static,
    ) -> Var {
        let av = self.value(a).clone();
        let out = av.map(&f);
        let ov = out.clone();
        self.push(
            out,
            vec![a],
            Box::new(move |g| {
                let mut da = av.clone();
                for (i, &gv) in g.data().iter().enumerate() {
                    da.data_mut()[i] = back(av.data()[i], ov.data()[i], gv);
                }
                vec![da]
            }),
        )
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, |_, _, g| -g)
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, a: Var, k: S) -> Var {
        self.unary(a, move |x| x * k, move |_, _, g| g * k)
    }

    pub fn add_const(&mut self, a: Var, k: S) -> Var {
        self.unary(a, move |x| x + k, |_, _, g| g)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), |_, y, g| g * (S::one() - y * y))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), |_, y, g| g * y)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| x.max(S::zero()),
            |x, _, g| if x > S::zero() { g } else { S::zero() },
        )
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.recip(), |x, _, g| -g / (x * x))
    }

    /// Element-wise max with a constant; gradient passes where `x > k`.
    pub fn max_const(&mut self, a: Var, k: S) -> Var {
        self.unary(
            a,
            move |x| x.max(k),
            move |x, _, g| if x > k { g } else { S::zero() },
        )
    }

    /// Inverse hyperbolic tangent. Inputs with |x| >= 1 are rejected;
    /// magnitudes above 1 - 1e-7 are clamped there before evaluation.
    pub fn arctanh(&mut self, a: Var) -> Result<Var> {
        let limit = S::one() - S::from_f64(1e-7);
        if let Some(&bad) = self.value(a).data().iter().find(|v| v.abs() >= S::one()) {
            return Err(Error::domain(
                "arctanh",
                format!("input magnitude must be < 1, got {bad}"),
            ));
        }
        Ok(self.unary(
            a,
            move |x| x.min(limit).max(-limit).atanh(),
            move |x, _, g| {
                if x.abs() < limit {
                    g / (S::one() - x * x)
                } else {
                    S::zero()
                }
            },
        ))
    }

    /// Element-wise square root; negative inputs are rejected. The backward
    /// rule is epsilon-guarded at zero.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.value(a).data().iter().find(|v| **v < S::zero()) {
            return Err(Error::domain(
                "sqrt",
                format!("input must be non-negative, got {bad}"),
            ));
        }
        let tiny = S::from_f64(1e-12);
        Ok(self.unary(
            a,
            |x| x.sqrt(),
            move |_, y, g| g / ((y + y).max(tiny + tiny)),
        ))
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let (n, c) = rank2(self.value(a), "row_softmax")?;
        let av = self.value(a);
        let mut data = vec![S::zero(); n * c];
        for i in 0..n {
            let row = &av.data()[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for (j, &x) in row.iter().enumerate() {
                let e = (x - m).exp();
                data[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                data[i * c + j] /= sum;
            }
        }
        let out = TensorBase::new(vec![n, c], data)?;
        let y = out.clone();
        Ok(self.push(
            out,
            vec![a],
            Box::new(move |g| {
                let mut da = y.clone();
                for i in 0..n {
                    let yr = &y.data()[i * c..(i + 1) * c];
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let dot: S = yr
                        .iter()
                        .zip(gr)
                        .fold(S::zero(), |acc, (&yv, &gv)| acc + yv * gv);
                    for j in 0..c {
                        da.data_mut()[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![da]
            }),
        ))
    }

    /// Concatenates along `axis` (0 = stack rows, 1 = widen columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat"));
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        if axis > 1 {
            return Err(Error::shape("concat", format!("axis must be 0 or 1, got {axis}")));
        }
        let shapes: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| rank2(self.value(p), "concat"))
            .collect::<Result<_>>()?;
        let (r0, c0) = shapes[0];
        if axis == 0 {
            if shapes.iter().any(|&(_, c)| c != c0) {
                return Err(Error::shape("concat", "column counts disagree".to_string()));
            }
            let rows: usize = shapes.iter().map(|&(r, _)| r).sum();
            let mut data = Vec::with_capacity(rows * c0);
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            let out = TensorBase::new(vec![rows, c0], data)?;
            let row_counts: Vec<usize> = shapes.iter().map(|&(r, _)| r).collect();
            Ok(self.push(
                out,
                parts.to_vec(),
                Box::new(move |g| {
                    let mut grads = Vec::with_capacity(row_counts.len());
                    let mut off = 0;
                    for &r in &row_counts {
                        let chunk = g.data()[off * c0..(off + r) * c0].to_vec();
                        grads.push(TensorBase::new(vec![r, c0], chunk).unwrap());
                        off += r;
                    }
                    grads
                }),
            ))
        } else {
            if shapes.iter().any(|&(r, _)| r != r0) {
                return Err(Error::shape("concat", "row counts disagree".to_string()));
            }
            let cols: usize = shapes.iter().map(|&(_, c)| c).sum();
            let mut data = vec![S::zero(); r0 * cols];
            let mut off = 0;
            for (&p, &(_, c)) in parts.iter().zip(&shapes) {
                let src = self.value(p).data();
                for i in 0..r0 {
                    data[i * cols + off..i * cols + off + c]
                        .copy_from_slice(&src[i * c..(i + 1) * c]);
                }
                off += c;
            }
            let out = TensorBase::new(vec![r0, cols], data)?;
            let col_counts: Vec<usize> = shapes.iter().map(|&(_, c)| c).collect();
            Ok(self.push(
                out,
                parts.to_vec(),
                Box::new(move |g| {
                    let mut grads = Vec::with_capacity(col_counts.len());
                    let mut off = 0;
                    for &c in &col_counts {
                        let mut chunk = vec![S::zero(); r0 * c];
                        for i in 0..r0 {
                            chunk[i * c..(i + 1) * c]
                                .copy_from_slice(&g.data()[i * cols + off..i * cols + off + c]);
                        }
                        grads.push(TensorBase::new(vec![r0, c], chunk).unwrap());
                        off += c;
                    }
                    grads
                }),
            ))
        }
    }

    /// Column means of an n x c matrix, as 1 x c.
    pub fn mean_pool(&mut self, a: Var) -> Result<Var> {
        let (n, c) = rank2(self.value(a), "mean_pool")?;
        if n == 0 {
            return Err(Error::EmptyInput("mean_pool"));
        }
        let inv = S::one() / S::from_f64(n as f64);
        let av = self.value(a).data();
        let mut data = vec![S::zero(); c];
        for i in 0..n {
            for j in 0..c {
                data[j] += av[i * c + j];
            }
        }
        for v in data.iter_mut() {
            *v *= inv;
        }
        let out = TensorBase::new(vec![1, c], data)?;
        Ok(self.push(
            out,
            vec![a],
            Box::new(move |g| {
                let mut da = vec![S::zero(); n * c];
                for i in 0..n {
                    for j in 0..c {
                        da[i * c + j] = g.data()[j] * inv;
                    }
                }
                vec![TensorBase::new(vec![n, c], da).unwrap()]
            }),
        ))
    }

    /// Normalizes every row to unit length; denominator is
    /// `max(norm, 1e-12)` so zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (n, c) = rank2(self.value(a), "l2_normalize_rows")?;
        let eps = S::from_f64(1e-12);
        let av = self.value(a).clone();
        let mut norms = vec![S::zero(); n];
        let mut data = vec![S::zero(); n * c];
        for i in 0..n {
            let row = &av.data()[i * c..(i + 1) * c];
            let nrm = row
                .iter()
                .fold(S::zero(), |acc, &x| acc + x * x)
                .sqrt();
            norms[i] = nrm;
            let d = nrm.max(eps);
            for j in 0..c {
                data[i * c + j] = row[j] / d;
            }
        }
        let out = TensorBase::new(vec![n, c], data)?;
        let y = out.clone();
        Ok(self.push(
            out,
            vec![a],
            Box::new(move |g| {
                let mut da = vec![S::zero(); n * c];
                for i in 0..n {
                    let yr = &y.data()[i * c..(i + 1) * c];
                    let gr = &g.data()[i * c..(i + 1) * c];
                    if norms[i] >= eps {
                        let dot: S = yr
                            .iter()
                            .zip(gr)
                            .fold(S::zero(), |acc, (&yv, &gv)| acc + yv * gv);
                        for j in 0..c {
                            da[i * c + j] = (gr[j] - yr[j] * dot) / norms[i];
                        }
                    } else {
                        for j in 0..c {
                            da[i * c + j] = gr[j] / eps;
                        }
                    }
                }
                vec![TensorBase::new(vec![n, c], da).unwrap()]
            }),
        ))
    }

    /// Per-row inner product of two n x c matrices, as n x 1.
    pub fn rowwise_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, c) = rank2(self.value(a), "rowwise_dot")?;
        let bv = self.value(b);
        if bv.shape() != [n, c] {
            return Err(Error::shape(
                "rowwise_dot",
                format!("{:?} vs {:?}", [n, c], bv.shape()),
            ));
        }
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let mut data = vec![S::zero(); n];
        for (i, d) in data.iter_mut().enumerate() {
            let ar = &av.data()[i * c..(i + 1) * c];
            let br = &bv.data()[i * c..(i + 1) * c];
            *d = ar
                .iter()
                .zip(br)
                .fold(S::zero(), |acc, (&x, &y)| acc + x * y);
        }
        let out = TensorBase::new(vec![n, 1], data)?;
        Ok(self.push(
            out,
            vec![a, b],
            Box::new(move |g| {
                let mut da = vec![S::zero(); n * c];
                let mut db = vec![S::zero(); n * c];
                for i in 0..n {
                    let gv = g.data()[i];
                    for j in 0..c {
                        da[i * c + j] = gv * bv.data()[i * c + j];
                        db[i * c + j] = gv * av.data()[i * c + j];
                    }
                }
                vec![
                    TensorBase::new(vec![n, c], da).unwrap(),
                    TensorBase::new(vec![n, c], db).unwrap(),
                ]
            }),
        ))
    }

    /// Per-row Euclidean norm, n x 1; backward is epsilon-guarded at zero.
    pub fn rowwise_norm(&mut self, a: Var) -> Result<Var> {
        let (n, c) = rank2(self.value(a), "rowwise_norm")?;
        let av = self.value(a).clone();
        let mut data = vec![S::zero(); n];
        for (i, d) in data.iter_mut().enumerate() {
            let row = &av.data()[i * c..(i + 1) * c];
            *d = row
                .iter()
                .fold(S::zero(), |acc, &x| acc + x * x)
                .sqrt();
        }
        let out = TensorBase::new(vec![n, 1], data)?;
        let norms = out.clone();
        let tiny = S::from_f64(1e-12);
        Ok(self.push(
            out,
            vec![a],
            Box::new(move |g| {
                let mut da = vec![S::zero(); n * c];
                for i in 0..n {
                    let gv = g.data()[i] / norms.data()[i].max(tiny);
                    for j in 0..c {
                        da[i * c + j] = gv * av.data()[i * c + j];
                    }
                }
                vec![TensorBase::new(vec![n, c], da).unwrap()]
            }),
        ))
    }

    /// Scales row i of `a` (n x c) by entry i of `s` (n x 1).
    pub fn row_scale(&mut self, a: Var, s: Var) -> Result<Var> {
        let (n, c) = rank2(self.value(a), "row_scale")?;
        let sv = self.value(s);
        if sv.shape() != [n, 1] {
            return Err(Error::shape(
                "row_scale",
                format!("scale must be {n}x1, got {:?}", sv.shape()),
            ));
        }
        let av = self.value(a).clone();
        let sv = self.value(s).clone();
        let mut data = vec![S::zero(); n * c];
        for i in 0..n {
            let k = sv.data()[i];
            for j in 0..c {
                data[i * c + j] = av.data()[i * c + j] * k;
            }
        }
        let out = TensorBase::new(vec![n, c], data)?;
        Ok(self.push(
            out,
            vec![a, s],
            Box::new(move |g| {
                let mut da = vec![S::zero(); n * c];
                let mut ds = vec![S::zero(); n];
                for i in 0..n {
                    let k = sv.data()[i];
                    let mut acc = S::zero();
                    for j in 0..c {
                        let gv = g.data()[i * c + j];
                        da[i * c + j] = gv * k;
                        acc += gv * av.data()[i * c + j];
                    }
                    ds[i] = acc;
                }
                vec![
                    TensorBase::new(vec![n, c], da).unwrap(),
                    TensorBase::new(vec![n, 1], ds).unwrap(),
                ]
            }),
        ))
    }

    /// Multiplies a tensor by a 1x1 scalar variable.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(Error::shape(
                "mul_scalar",
                format!("scale must be 1x1, got {:?}", self.value(s).shape()),
            ));
        }
        let av = self.value(a).clone();
        let k = self.value(s).item();
        let out = av.map(|x| x * k);
        Ok(self.push(
            out,
            vec![a, s],
            Box::new(move |g| {
                let da = g.map(|x| x * k);
                let ds = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .fold(S::zero(), |acc, (&gv, &xv)| acc + gv * xv);
                vec![da, TensorBase::scalar(ds)]
            }),
        ))
    }

    /// Adds a 1 x c bias row to every row of an n x c matrix.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, c) = rank2(self.value(a), "add_bias")?;
        let bv = self.value(b);
        if bv.shape() != [1, c] {
            return Err(Error::shape(
                "add_bias",
                format!("bias must be 1x{c}, got {:?}", bv.shape()),
            ));
        }
        let av = self.value(a).clone();
        let bd = self.value(b).clone();
        let mut data = vec![S::zero(); n * c];
        for i in 0..n {
            for j in 0..c {
                data[i * c + j] = av.data()[i * c + j] + bd.data()[j];
            }
        }
        let out = TensorBase::new(vec![n, c], data)?;
        Ok(self.push(
            out,
            vec![a, b],
            Box::new(move |g| {
                let mut db = vec![S::zero(); c];
                for i in 0..n {
                    for (j, d) in db.iter_mut().enumerate() {
                        *d += g.data()[i * c + j];
                    }
                }
                vec![g.clone(), TensorBase::new(vec![1, c], db).unwrap()]
            }),
        ))
    }

    /// Selects rows by index (duplicates allowed); backward scatter-adds.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (n, c) = rank2(self.value(a), "gather_rows")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::shape(
                "gather_rows",
                format!("index {bad} out of range for {n} rows"),
            ));
        }
        let av = self.value(a).data();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(&av[i * c..(i + 1) * c]);
        }
        let out = TensorBase::new(vec![indices.len(), c], data)?;
        let idx = indices.to_vec();
        Ok(self.push(
            out,
            vec![a],
            Box::new(move |g| {
                let mut da = vec![S::zero(); n * c];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        da[i * c + j] += g.data()[k * c + j];
                    }
                }
                vec![TensorBase::new(vec![n, c], da).unwrap()]
            }),
        ))
    }

    /// Contiguous row range `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (n, c) = rank2(self.value(a), "slice_rows")?;
        if start >= end || end > n {
            return Err(Error::shape(
                "slice_rows",
                format!("range {start}..{end} invalid for {n} rows"),
            ));
        }
        let data = self.value(a).data()[start * c..end * c].to_vec();
        let out = TensorBase::new(vec![end - start, c], data)?;
        Ok(self.push(
            out,
            vec![a],
            Box::new(move |g| {
                let mut da = vec![S::zero(); n * c];
                da[start * c..end * c].copy_from_slice(g.data());
                vec![TensorBase::new(vec![n, c], da).unwrap()]
            }),
        ))
    }

    /// Column-wise max over consecutive blocks of `k` rows:
    /// (m*k) x c -> m x c. Ties route the gradient to the first max row.
    pub fn block_max(&mut self, a: Var, k: usize) -> Result<Var> {
        let (rows, c) = rank2(self.value(a), "block_max")?;
        if k == 0 || rows % k != 0 {
            return Err(Error::shape(
                "block_max",
                format!("block size {k} does not divide {rows} rows"),
            ));
        }
        let m = rows / k;
        let av = self.value(a).data();
        let mut data = vec![S::zero(); m * c];
        let mut argmax = vec![0usize; m * c];
        for b in 0..m {
            for j in 0..c {
                let mut best = av[(b * k) * c + j];
                let mut best_r = b * k;
                for r in b * k + 1..(b + 1) * k {
                    if av[r * c + j] > best {
                        best = av[r * c + j];
                        best_r = r;
                    }
                }
                data[b * c + j] = best;
                argmax[b * c + j] = best_r;
            }
        }
        let out = TensorBase::new(vec![m, c], data)?;
        Ok(self.push(
            out,
            vec![a],
            Box::new(move |g| {
                let mut da = vec![S::zero(); rows * c];
                for b in 0..m {
                    for j in 0..c {
                        da[argmax[b * c + j] * c + j] += g.data()[b * c + j];
                    }
                }
                vec![TensorBase::new(vec![rows, c], da).unwrap()]
            }),
        ))
    }

    /// Shape change over the same row-major buffer.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let old = self.value(a).shape().to_vec();
        let out = self.value(a).reshaped(shape.to_vec())?;
        Ok(self.push(
            out,
            vec![a],
            Box::new(move |g| vec![g.reshaped(old.clone()).unwrap()]),
        ))
    }

    /// Sum of all entries, as 1x1.
    pub fn sum(&mut self, a: Var) -> Var {
        let av = self.value(a).clone();
        let total = av.data().iter().fold(S::zero(), |acc, &x| acc + x);
        let shape = av.shape().to_vec();
        self.push(
            TensorBase::scalar(total),
            vec![a],
            Box::new(move |g| vec![TensorBase::full(&shape, g.item())]),
        )
    }

    /// 2-D cross-correlation with bias.
    ///
    /// `x`: [H, W, Cin], `kernel`: [kh, kw, Cin, Cout], `bias`: [1, Cout];
    /// output [H', W', Cout] with H' = (H + 2*pad - kh)/stride + 1.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ks = self.value(kernel).shape().to_vec();
        if xs.len() != 3 || ks.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("expected x rank 3 and kernel rank 4, got {xs:?} and {ks:?}"),
            ));
        }
        let (h, w, cin) = (xs[0], xs[1], xs[2]);
        let (kh, kw, kcin, cout) = (ks[0], ks[1], ks[2], ks[3]);
        if kcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("kernel expects {kcin} input channels, image has {cin}"),
            ));
        }
        if self.value(bias).shape() != [1, cout] {
            return Err(Error::shape(
                "conv2d",
                format!("bias must be 1x{cout}, got {:?}", self.value(bias).shape()),
            ));
        }
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} too large for padded {h}x{w} input"),
            ));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;

        let xv = self.value(x).clone();
        let kv = self.value(kernel).clone();
        let bv = self.value(bias).clone();
        let mut data = vec![S::zero(); oh * ow * cout];
        for i in 0..oh {
            for j in 0..ow {
                let o_off = (i * ow + j) * cout;
                data[o_off..o_off + cout].copy_from_slice(bv.data());
                for r in 0..kh {
                    let ih = (i * stride + r) as isize - pad as isize;
                    if ih < 0 || ih as usize >= h {
                        continue;
                    }
                    for c in 0..kw {
                        let iw = (j * stride + c) as isize - pad as isize;
                        if iw < 0 || iw as usize >= w {
                            continue;
                        }
                        let x_off = ((ih as usize) * w + iw as usize) * cin;
                        for ci in 0..cin {
                            let xval = xv.data()[x_off + ci];
                            let k_off = ((r * kw + c) * cin + ci) * cout;
                            for co in 0..cout {
                                data[o_off + co] += xval * kv.data()[k_off + co];
                            }
                        }
                    }
                }
            }
        }
        let out = TensorBase::new(vec![oh, ow, cout], data)?;
        Ok(self.push(
            out,
            vec![x, kernel, bias],
            Box::new(move |g| {
                let mut dx = vec![S::zero(); h * w * cin];
                let mut dk = vec![S::zero(); kh * kw * cin * cout];
                let mut db = vec![S::zero(); cout];
                for i in 0..oh {
                    for j in 0..ow {
                        let o_off = (i * ow + j) * cout;
                        let grow = &g.data()[o_off..o_off + cout];
                        for (co, &gv) in grow.iter().enumerate() {
                            db[co] += gv;
                        }
                        for r in 0..kh {
                            let ih = (i * stride + r) as isize - pad as isize;
                            if ih < 0 || ih as usize >= h {
                                continue;
                            }
                            for c in 0..kw {
                                let iw = (j * stride + c) as isize - pad as isize;
                                if iw < 0 || iw as usize >= w {
                                    continue;
                                }
                                let x_off = ((ih as usize) * w + iw as usize) * cin;
                                for ci in 0..cin {
                                    let k_off = ((r * kw + c) * cin + ci) * cout;
                                    let xval = xv.data()[x_off + ci];
                                    let mut acc = S::zero();
                                    for (co, &gv) in grow.iter().enumerate() {
                                        acc += gv * kv.data()[k_off + co];
                                        dk[k_off + co] += xval * gv;
                                    }
                                    dx[x_off + ci] += acc;
                                }
                            }
                        }
                    }
                }
                vec![
                    TensorBase::new(vec![h, w, cin], dx).unwrap(),
                    TensorBase::new(vec![kh, kw, cin, cout], dk).unwrap(),
                    TensorBase::new(vec![1, cout], db).unwrap(),
                ]
            }),
        ))
    }
}
