//! Tape-based reverse-mode differentiation.
//!
//! Every vector-Jacobian product is itself recorded with graph operations, so a
//! gradient obtained with `create_graph = true` can be differentiated again.
//! The critic's input-gradient penalty relies on this.

use std::sync::Arc;

use crate::element::Element;
use crate::error::{NnError, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Convolution window geometry over NHWC tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.k * self.k * self.c
    }

    pub fn patches(&self) -> usize {
        self.n * self.out_h() * self.out_w()
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MulConst(Var, Arc<Vec<T>>),
    Sigmoid(Var),
    Softplus(Var),
    Square(Var),
    Rsqrt(Var),
    Im2col(Var, ConvGeom),
    Col2im(Var, ConvGeom),
    ReduceMid(Var, [usize; 3]),
    BroadcastMid(Var, [usize; 3]),
    Reshape(Var),
    ConcatCols(Var, Var),
    SliceCols { x: Var, start: usize, total: usize },
    PadCols { x: Var, start: usize },
    /// `out[i] = x[perm[i]]`; holds the inverse for the adjoint.
    Permute(Var, Arc<Vec<usize>>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recording of tensor operations.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    recording: bool,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that participates in differentiation (parameters, penalized inputs).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = self.recording && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
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

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "scalar() on a tensor of shape {:?}", t.shape());
        t.data()[0]
    }

    // ---------------------------------------------------------------------
    // operations

    /// `op(a) · op(b)` for 2-D operands, where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(
            sa.len() == 2 && sb.len() == 2,
            "matmul needs 2-D operands, got {sa:?} and {sb:?}"
        );
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        assert_eq!(
            k,
            k2,
            "matmul inner dimensions {sa:?}{} x {sb:?}{}",
            if ta { "ᵀ" } else { "" },
            if tb { "ᵀ" } else { "" }
        );
        let (ca, cb) = (sa[1] as isize, sb[1] as isize);
        let (rsa, csa) = if ta { (1, ca) } else { (ca, 1) };
        let (rsb, csb) = if tb { (1, cb) } else { (cb, 1) };
        let mut out = vec![T::zero(); m * n];
        if m > 0 && n > 0 {
            if k == 0 {
                // empty inner dimension: result is zero
            } else {
                T::gemm(
                    m,
                    k,
                    n,
                    self.value(a).data(),
                    rsa,
                    csa,
                    self.value(b).data(),
                    rsb,
                    csb,
                    &mut out,
                    n as isize,
                    1,
                );
            }
        }
        self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul { a, b, ta, tb },
            &[a, b],
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, name: &str) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "{name}: shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    fn unary(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        self.value(a).map(f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |x, y| x + y, "add");
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |x, y| x - y, "sub");
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |x, y| x * y, "mul");
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.unary(a, |x| x * c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.unary(a, |x| x + c);
        self.push(v, Op::AddScalar(a), &[a])
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Var, k: Arc<Vec<T>>) -> Var {
        assert_eq!(self.value(a).len(), k.len(), "mul_const: length mismatch");
        let t = self.value(a);
        let data = t
            .data()
            .iter()
            .zip(k.iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let v = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(v, Op::MulConst(a, k), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let mask: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| if x > T::zero() { T::one() } else { slope })
            .collect();
        self.mul_const(a, Arc::new(mask))
    }

    /// Clamps values; the gradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let t = self.value(a);
        let mask: Vec<T> = t
            .data()
            .iter()
            .map(|&x| {
                if x >= lo && x <= hi {
                    T::one()
                } else {
                    T::zero()
                }
            })
            .collect();
        let clamped: Vec<T> = t.data().iter().map(|&x| x.max(lo).min(hi)).collect();
        let shape = t.shape().to_vec();
        // value is clamped; derivative routes only through the in-range mask
        let masked = self.mul_const(a, Arc::new(mask));
        let offset: Vec<T> = clamped
            .iter()
            .zip(self.value(masked).data())
            .map(|(&c, &m)| c - m)
            .collect();
        let off = self.constant(Tensor::from_parts(shape, offset));
        self.add(masked, off)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.unary(a, sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.unary(a, softplus);
        self.push(v, Op::Softplus(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.unary(a, |x| x * x);
        self.push(v, Op::Square(a), &[a])
    }

    pub fn rsqrt(&mut self, a: Var) -> Var {
        let v = self.unary(a, |x| T::one() / x.sqrt());
        self.push(v, Op::Rsqrt(a), &[a])
    }

    /// Extracts convolution patches: `[N,H,W,C] -> [N*Ho*Wo, k*k*C]`.
    pub fn im2col(&mut self, x: Var, geom: ConvGeom) -> Var {
        let t = self.value(x);
        assert_eq!(
            t.shape(),
            &[geom.n, geom.h, geom.w, geom.c],
            "im2col input shape"
        );
        let out = im2col(t.data(), &geom);
        self.push(
            Tensor::from_parts(vec![geom.patches(), geom.patch_len()], out),
            Op::Im2col(x, geom),
            &[x],
        )
    }

    /// Adjoint of [`Graph::im2col`]: scatters patches back with summation.
    pub fn col2im(&mut self, cols: Var, geom: ConvGeom) -> Var {
        let t = self.value(cols);
        assert_eq!(
            t.shape(),
            &[geom.patches(), geom.patch_len()],
            "col2im input shape"
        );
        let out = col2im(t.data(), &geom);
        self.push(
            Tensor::from_parts(vec![geom.n, geom.h, geom.w, geom.c], out),
            Op::Col2im(cols, geom),
            &[cols],
        )
    }

    /// Views `x` as `[outer, mid, inner]` and sums over `mid`, giving `[outer, inner]`.
    pub fn reduce_mid(&mut self, x: Var, dims: [usize; 3]) -> Var {
        let [outer, mid, inner] = dims;
        let t = self.value(x);
        assert_eq!(
            t.len(),
            outer * mid * inner,
            "reduce_mid dims {dims:?} vs {:?}",
            t.shape()
        );
        let src = t.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                for (d, &s) in dst.iter_mut().zip(&src[base..base + inner]) {
                    *d = *d + s;
                }
            }
        }
        self.push(
            Tensor::from_parts(vec![outer, inner], out),
            Op::ReduceMid(x, dims),
            &[x],
        )
    }

    /// Adjoint of [`Graph::reduce_mid`]: repeats `[outer, inner]` along a new `mid` axis.
    pub fn broadcast_mid(&mut self, x: Var, dims: [usize; 3], shape: &[usize]) -> Var {
        let [outer, mid, inner] = dims;
        let t = self.value(x);
        assert_eq!(
            t.len(),
            outer * inner,
            "broadcast_mid dims {dims:?} vs {:?}",
            t.shape()
        );
        assert_eq!(shape.iter().product::<usize>(), outer * mid * inner);
        let src = t.data();
        let mut out = Vec::with_capacity(outer * mid * inner);
        for o in 0..outer {
            let row = &src[o * inner..(o + 1) * inner];
            for _ in 0..mid {
                out.extend_from_slice(row);
            }
        }
        self.push(
            Tensor::from_parts(shape.to_vec(), out),
            Op::BroadcastMid(x, dims),
            &[x],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x);
        assert_eq!(
            t.len(),
            shape.iter().product::<usize>(),
            "reshape {:?} -> {shape:?}",
            t.shape()
        );
        let v = Tensor::from_parts(shape.to_vec(), t.data().to_vec());
        self.push(v, Op::Reshape(x), &[x])
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.reduce_mid(x, [1, n, 1]);
        self.reshape(s, &[1])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, T::one() / T::from_usize(n.max(1)).unwrap())
    }

    /// Sums a `[.., n]` tensor over all leading axes, giving `[n]`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = *t.shape().last().expect("sum_rows on a 0-d tensor");
        let rows = t.len() / n;
        let s = self.reduce_mid(x, [1, rows, n]);
        self.reshape(s, &[n])
    }

    /// Adds a `[n]` vector to every row of a `[.., n]` tensor.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        assert_eq!(self.value(b).len(), n, "add_row: vector length");
        let rows = self.value(x).len() / n;
        let bb = self.broadcast_mid(b, [1, rows, n], &shape);
        self.add(x, bb)
    }

    /// Multiplies every row of a `[.., n]` tensor elementwise by a `[n]` vector.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        assert_eq!(self.value(g).len(), n, "mul_row: vector length");
        let rows = self.value(x).len() / n;
        let gb = self.broadcast_mid(g, [1, rows, n], &shape);
        self.mul(x, gb)
    }

    /// Concatenates two `[m, *]` matrices along columns.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[0] == sb[0],
            "concat_cols {sa:?} {sb:?}"
        );
        let (m, p, q) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            out.extend_from_slice(&da[i * p..(i + 1) * p]);
            out.extend_from_slice(&db[i * q..(i + 1) * q]);
        }
        self.push(
            Tensor::from_parts(vec![m, p + q], out),
            Op::ConcatCols(a, b),
            &[a, b],
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(
            s.len() == 2 && start + len <= s[1],
            "slice_cols {s:?} [{start}, {len})"
        );
        let (m, total) = (s[0], s[1]);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&d[i * total + start..i * total + start + len]);
        }
        self.push(
            Tensor::from_parts(vec![m, len], out),
            Op::SliceCols { x, start, total },
            &[x],
        )
    }

    /// Reorders elements, `out[i] = x[perm[i]]`, keeping the shape. `perm`
    /// must be a permutation of `0..len`.
    pub fn permute(&mut self, x: Var, perm: Arc<Vec<usize>>) -> Var {
        let t = self.value(x);
        assert_eq!(t.len(), perm.len(), "permute: length mismatch");
        let mut inverse = vec![usize::MAX; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            assert!(p < perm.len() && inverse[p] == usize::MAX, "permute: not a permutation");
            inverse[p] = i;
        }
        let data = perm.iter().map(|&p| t.data()[p]).collect();
        let v = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(v, Op::Permute(x, Arc::new(inverse)), &[x])
    }

    fn pad_cols(&mut self, x: Var, start: usize, total: usize) -> Var {
        let s = self.shape(x).to_vec();
        let (m, len) = (s[0], s[1]);
        let d = self.value(x).data();
        let mut out = vec![T::zero(); m * total];
        for i in 0..m {
            out[i * total + start..i * total + start + len]
                .copy_from_slice(&d[i * len..(i + 1) * len]);
        }
        self.push(
            Tensor::from_parts(vec![m, total], out),
            Op::PadCols { x, start },
            &[x],
        )
    }

    // ---------------------------------------------------------------------
    // differentiation

    /// Gradients of the scalar `loss` with respect to each of `wrt`.
    ///
    /// With `create_graph` the returned gradients are recorded nodes that can
    /// themselves be differentiated. Unreachable inputs get zero gradients.
    pub fn grad(&mut self, loss: Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(NnError::ShapeMismatch(format!(
                "loss must be scalar, got shape {:?}",
                lt.shape()
            )));
        }
        if !lt.is_finite() {
            return Err(NnError::NonFinite {
                what: "loss".into(),
            });
        }
        let seed_shape = lt.shape().to_vec();
        let prev = self.recording;
        self.recording = create_graph;
        let seed = self.constant(Tensor::full(&seed_shape, T::one()));

        let mut grads: Vec<Option<Var>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(seed);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i] else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            for (parent, pg) in self.vjp(Var(i), &op, g) {
                grads[parent.0] = Some(match grads[parent.0] {
                    Some(acc) => self.add(acc, pg),
                    None => pg,
                });
            }
        }

        let mut out = Vec::with_capacity(wrt.len());
        for &w in wrt {
            let g = match grads.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let shape = self.shape(w).to_vec();
                    self.constant(Tensor::zeros(&shape))
                }
            };
            out.push(g);
        }
        self.recording = prev;
        Ok(out)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn vjp(&mut self, node: Var, op: &Op<T>, g: Var) -> Vec<(Var, Var)> {
        let mut out = Vec::new();
        match *op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                if self.needs(a) {
                    let da = if ta {
                        self.matmul_t(b, g, tb, true)
                    } else {
                        self.matmul_t(g, b, false, !tb)
                    };
                    out.push((a, da));
                }
                if self.needs(b) {
                    let db = if tb {
                        self.matmul_t(g, a, true, ta)
                    } else {
                        self.matmul_t(a, g, !ta, false)
                    };
                    out.push((b, db));
                }
            }
            Op::Add(a, b) => {
                if self.needs(a) {
                    out.push((a, g));
                }
                if self.needs(b) {
                    out.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if self.needs(a) {
                    out.push((a, g));
                }
                if self.needs(b) {
                    let ng = self.neg(g);
                    out.push((b, ng));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    let da = self.mul(g, b);
                    out.push((a, da));
                }
                if self.needs(b) {
                    let db = self.mul(g, a);
                    out.push((b, db));
                }
            }
            Op::Scale(a, c) => {
                let da = self.scale(g, c);
                out.push((a, da));
            }
            Op::AddScalar(a) => out.push((a, g)),
            Op::MulConst(a, ref k) => {
                let da = self.mul_const(g, Arc::clone(k));
                out.push((a, da));
            }
            Op::Sigmoid(a) => {
                // y (1 - y)
                let om = self.scale(node, -T::one());
                let om = self.add_scalar(om, T::one());
                let d = self.mul(node, om);
                let da = self.mul(g, d);
                out.push((a, da));
            }
            Op::Softplus(a) => {
                let s = self.sigmoid(a);
                let da = self.mul(g, s);
                out.push((a, da));
            }
            Op::Square(a) => {
                let two_a = self.scale(a, T::from_f64_lossy(2.0));
                let da = self.mul(g, two_a);
                out.push((a, da));
            }
            Op::Rsqrt(a) => {
                // d/dx x^{-1/2} = -y^3 / 2
                let y2 = self.square(node);
                let y3 = self.mul(y2, node);
                let d = self.scale(y3, T::from_f64_lossy(-0.5));
                let da = self.mul(g, d);
                out.push((a, da));
            }
            Op::Im2col(a, geom) => {
                let da = self.col2im(g, geom);
                out.push((a, da));
            }
            Op::Col2im(a, geom) => {
                let da = self.im2col(g, geom);
                out.push((a, da));
            }
            Op::ReduceMid(a, dims) => {
                let shape = self.shape(a).to_vec();
                let da = self.broadcast_mid(g, dims, &shape);
                out.push((a, da));
            }
            Op::BroadcastMid(a, dims) => {
                let shape = self.shape(a).to_vec();
                let r = self.reduce_mid(g, dims);
                let da = self.reshape(r, &shape);
                out.push((a, da));
            }
            Op::Reshape(a) => {
                let shape = self.shape(a).to_vec();
                let da = self.reshape(g, &shape);
                out.push((a, da));
            }
            Op::ConcatCols(a, b) => {
                let p = self.shape(a)[1];
                let q = self.shape(b)[1];
                if self.needs(a) {
                    let da = self.slice_cols(g, 0, p);
                    out.push((a, da));
                }
                if self.needs(b) {
                    let db = self.slice_cols(g, p, q);
                    out.push((b, db));
                }
            }
            Op::SliceCols { x, start, total } => {
                let dx = self.pad_cols(g, start, total);
                out.push((x, dx));
            }
            Op::PadCols { x, start, .. } => {
                let len = self.shape(x)[1];
                let dx = self.slice_cols(g, start, len);
                out.push((x, dx));
            }
            Op::Permute(x, ref inverse) => {
                let dx = self.permute(g, Arc::clone(inverse));
                out.push((x, dx));
            }
        }
        out
    }
}

pub fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Element>(x: T) -> T {
    // ln(1 + e^x) = max(x, 0) + ln(1 + e^{-|x|})
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn im2col<T: Element>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let pl = g.patch_len();
    let mut out = vec![T::zero(); g.patches() * pl];
    for n in 0..g.n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((n * ho + oy) * wo + ox) * pl;
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = ((n * g.h + iy as usize) * g.w + ix as usize) * g.c;
                        let dst = row + (ky * g.k + kx) * g.c;
                        out[dst..dst + g.c].copy_from_slice(&x[src..src + g.c]);
                    }
                }
            }
        }
    }
    out
}

fn col2im<T: Element>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let pl = g.patch_len();
    let mut out = vec![T::zero(); g.n * g.h * g.w * g.c];
    for n in 0..g.n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((n * ho + oy) * wo + ox) * pl;
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = ((n * g.h + iy as usize) * g.w + ix as usize) * g.c;
                        let src = row + (ky * g.k + kx) * g.c;
                        for c in 0..g.c {
                            out[dst + c] = out[dst + c] + cols[src + c];
                        }
                    }
                }
            }
        }
    }
    out
}
