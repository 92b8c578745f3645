//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tensor`] is an immutable node in a dynamically built graph. Every
//! primitive records its inputs so that [`Tensor::backward`] can walk the
//! graph in reverse topological order and accumulate vector-Jacobian
//! products into the leaves that were created with `requires_grad`.
//!
//! Graphs are single-threaded (`Rc`); model weights that need to be shared
//! across threads live outside the graph as plain buffers and are bound as
//! leaves per forward pass.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

/// A primitive defined outside this module, e.g. a fused quantizer.
pub trait CustomOp: fmt::Debug {
    fn name(&self) -> &'static str;
    /// Output `(shape, data)`.
    fn forward(&self, inputs: &[&Tensor]) -> Result<(Vec<usize>, Vec<f64>)>;
    /// Gradient for each input given the upstream gradient `g`.
    fn vjp(&self, inputs: &[Tensor], output: &[f64], g: &[f64]) -> Result<Vec<Option<Vec<f64>>>>;
}

/// Every operation the engine can record on the tape.
#[derive(Debug, Clone)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Div,
    /// `[.., m, k] x [k, n]` or batched `[b.., m, k] x [b.., k, n]`.
    Matmul,
    /// Axis permutation.
    Transpose { axes: Vec<usize> },
    Reshape { shape: Vec<usize> },
    Slice { axis: usize, start: usize, end: usize },
    Concat { axis: usize },
    /// Right-aligned broadcast to `shape`.
    Broadcast { shape: Vec<usize> },
    /// Reduction; `None` reduces everything to a scalar.
    Sum { axis: Option<usize> },
    Mean { axis: Option<usize> },
    Max { axis: usize },
    Exp,
    Log,
    Sqrt,
    Power { exponent: f64 },
    Scale { factor: f64 },
    Offset { value: f64 },
    Gelu,
    Softmax { axis: usize },
    /// Inputs are `[x]` or `[x, gamma, beta]` (affine).
    LayerNorm { axis: usize, eps: f64 },
    /// Resizes the two trailing axes, half-pixel centres (align-corners = false).
    BilinearResize { height: usize, width: usize },
    Clip { min: f64, max: f64 },
    /// Round half away from zero; gradient passes through unchanged.
    RoundSte,
    Custom(Rc<dyn CustomOp>),
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::Matmul => "matmul",
            Primitive::Transpose { .. } => "transpose",
            Primitive::Reshape { .. } => "reshape",
            Primitive::Slice { .. } => "slice",
            Primitive::Concat { .. } => "concat",
            Primitive::Broadcast { .. } => "broadcast",
            Primitive::Sum { .. } => "sum",
            Primitive::Mean { .. } => "mean",
            Primitive::Max { .. } => "max",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Sqrt => "sqrt",
            Primitive::Power { .. } => "power",
            Primitive::Scale { .. } => "scale",
            Primitive::Offset { .. } => "offset",
            Primitive::Gelu => "gelu",
            Primitive::Softmax { .. } => "softmax",
            Primitive::LayerNorm { .. } => "layer_norm",
            Primitive::BilinearResize { .. } => "bilinear_resize",
            Primitive::Clip { .. } => "clip",
            Primitive::RoundSte => "round_ste",
            Primitive::Custom(op) => op.name(),
        }
    }
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    op: Option<Primitive>,
    inputs: Vec<Tensor>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.op.as_ref().map(Primitive::name))
            .finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

/// Round half away from zero. `f64::round` already implements this tie-break.
#[inline]
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        Self::leaf(shape, data, false)
    }

    /// A leaf that collects gradients during [`Tensor::backward`].
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        Self::leaf(shape, data, true)
    }

    fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        if shape.contains(&0) {
            return Err(Error::shape("new", format!("zero extent in {shape:?}")));
        }
        if numel(&shape) != data.len() {
            return Err(Error::shape(
                "new",
                format!("shape {shape:?} needs {} values, got {}", numel(&shape), data.len()),
            ));
        }
        Ok(Tensor(Rc::new(Node {
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            op: None,
            inputs: Vec::new(),
        })))
    }

    pub fn scalar(v: f64) -> Tensor {
        Self::leaf(vec![], vec![v], false).expect("scalar shape is valid")
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::leaf(shape.to_vec(), vec![0.0; numel(shape)], false).expect("valid zeros")
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Self::leaf(shape.to_vec(), vec![v; numel(shape)], false).expect("valid full")
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.0.data.len(), 1);
        self.0.data[0]
    }

    /// Accumulated gradient, present after a backward pass reached this leaf.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn grad_or_zero(&self) -> Vec<f64> {
        self.grad().unwrap_or_else(|| vec![0.0; self.numel()])
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Self::leaf(self.0.shape.clone(), self.0.data.clone(), false).expect("valid detach")
    }

    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    /// Evaluates `kind` on `inputs` and records the node for differentiation.
    pub fn apply(kind: Primitive, inputs: &[&Tensor]) -> Result<Tensor> {
        let (shape, data) = forward(&kind, inputs)?;
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: format!("{} (element {bad})", kind.name()),
            });
        }
        let requires_grad = inputs.iter().any(|t| t.0.requires_grad);
        let inputs = if requires_grad {
            inputs.iter().map(|t| (*t).clone()).collect()
        } else {
            Vec::new()
        };
        Ok(Tensor(Rc::new(Node {
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            op: if requires_grad { Some(kind) } else { None },
            inputs,
        })))
    }

    /// Back-propagates from a scalar loss into every reachable leaf with
    /// `requires_grad`. Gradients accumulate across calls.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NotScalar(self.0.shape.clone()));
        }
        if !self.0.requires_grad {
            return Ok(());
        }
        let order = self.topo_order();
        let mut grads: HashMap<*const Node, Vec<f64>> = HashMap::new();
        grads.insert(Rc::as_ptr(&self.0), vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&Rc::as_ptr(&node.0)) else {
                continue;
            };
            match &node.0.op {
                None => {
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(kind) => {
                    let input_grads = vjp(kind, node, &g)?;
                    for (input, ig) in node.0.inputs.iter().zip(input_grads) {
                        let Some(ig) = ig else { continue };
                        match grads.get_mut(&Rc::as_ptr(&input.0)) {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(Rc::as_ptr(&input.0), ig);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen: HashMap<*const Node, ()> = HashMap::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            let key = Rc::as_ptr(&t.0);
            if expanded {
                order.push(t);
                continue;
            }
            if seen.insert(key, ()).is_some() {
                continue;
            }
            stack.push((t.clone(), true));
            for input in &t.0.inputs {
                if input.0.requires_grad && !seen.contains_key(&Rc::as_ptr(&input.0)) {
                    stack.push((input.clone(), false));
                }
            }
        }
        order
    }

    // Convenience wrappers.

    pub fn add(&self, o: &Tensor) -> Result<Tensor> {
        Self::apply(Primitive::Add, &[self, o])
    }
    pub fn sub(&self, o: &Tensor) -> Result<Tensor> {
        Self::apply(Primitive::Sub, &[self, o])
    }
    pub fn mul(&self, o: &Tensor) -> Result<Tensor> {
        Self::apply(Primitive::Mul, &[self, o])
    }
    pub fn div(&self, o: &Tensor) -> Result<Tensor> {
        Self::apply(Primitive::Div, &[self, o])
    }
    pub fn matmul(&self, o: &Tensor) -> Result<Tensor> {
        Self::apply(Primitive::Matmul, &[self, o])
    }
    pub fn transpose(&self, axes: &[usize]) -> Result<Tensor> {
        Self::apply(Primitive::Transpose { axes: axes.to_vec() }, &[self])
    }
    /// Swaps the two trailing axes.
    pub fn t(&self) -> Result<Tensor> {
        let r = self.shape().len();
        if r < 2 {
            return Err(Error::shape("transpose", "rank < 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.transpose(&axes)
    }
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Self::apply(Primitive::Reshape { shape: shape.to_vec() }, &[self])
    }
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        Self::apply(Primitive::Slice { axis, start, end }, &[self])
    }
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        Self::apply(Primitive::Concat { axis }, parts)
    }
    pub fn broadcast(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        Self::apply(Primitive::Broadcast { shape: shape.to_vec() }, &[self])
    }
    pub fn sum(&self) -> Result<Tensor> {
        Self::apply(Primitive::Sum { axis: None }, &[self])
    }
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        Self::apply(Primitive::Sum { axis: Some(axis) }, &[self])
    }
    pub fn mean(&self) -> Result<Tensor> {
        Self::apply(Primitive::Mean { axis: None }, &[self])
    }
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        Self::apply(Primitive::Mean { axis: Some(axis) }, &[self])
    }
    pub fn max_axis(&self, axis: usize) -> Result<Tensor> {
        Self::apply(Primitive::Max { axis }, &[self])
    }
    pub fn exp(&self) -> Result<Tensor> {
        Self::apply(Primitive::Exp, &[self])
    }
    pub fn ln(&self) -> Result<Tensor> {
        Self::apply(Primitive::Log, &[self])
    }
    pub fn sqrt(&self) -> Result<Tensor> {
        Self::apply(Primitive::Sqrt, &[self])
    }
    pub fn powf(&self, exponent: f64) -> Result<Tensor> {
        Self::apply(Primitive::Power { exponent }, &[self])
    }
    pub fn scale(&self, factor: f64) -> Result<Tensor> {
        Self::apply(Primitive::Scale { factor }, &[self])
    }
    pub fn offset(&self, value: f64) -> Result<Tensor> {
        Self::apply(Primitive::Offset { value }, &[self])
    }
    pub fn gelu(&self) -> Result<Tensor> {
        Self::apply(Primitive::Gelu, &[self])
    }
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        Self::apply(Primitive::Softmax { axis }, &[self])
    }
    pub fn layer_norm(&self, axis: usize, eps: f64) -> Result<Tensor> {
        Self::apply(Primitive::LayerNorm { axis, eps }, &[self])
    }
    pub fn layer_norm_affine(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        axis: usize,
        eps: f64,
    ) -> Result<Tensor> {
        Self::apply(Primitive::LayerNorm { axis, eps }, &[self, gamma, beta])
    }
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<Tensor> {
        Self::apply(Primitive::BilinearResize { height, width }, &[self])
    }
    pub fn clip(&self, min: f64, max: f64) -> Result<Tensor> {
        Self::apply(Primitive::Clip { min, max }, &[self])
    }
    pub fn round_ste(&self) -> Result<Tensor> {
        Self::apply(Primitive::RoundSte, &[self])
    }

    /// Elementwise op against `o` after broadcasting `o` to `self`'s shape.
    pub fn add_b(&self, o: &Tensor) -> Result<Tensor> {
        self.add(&o.broadcast(self.shape())?)
    }
    pub fn sub_b(&self, o: &Tensor) -> Result<Tensor> {
        self.sub(&o.broadcast(self.shape())?)
    }
    pub fn mul_b(&self, o: &Tensor) -> Result<Tensor> {
        self.mul(&o.broadcast(self.shape())?)
    }
    pub fn div_b(&self, o: &Tensor) -> Result<Tensor> {
        self.div(&o.broadcast(self.shape())?)
    }

    /// `log(softmax(x))` along `axis`, shifted by the (gradient-free) row max.
    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let mut reduced_shape = self.shape().to_vec();
        reduced_shape[axis] = 1;
        let mut shift = vec![f64::NEG_INFINITY; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                for i in 0..inner {
                    let v = self.data()[(o * len + a) * inner + i];
                    let s = &mut shift[o * inner + i];
                    if v > *s {
                        *s = v;
                    }
                }
            }
        }
        let shift = Tensor::new(reduced_shape.clone(), shift)?;
        let z = self.sub_b(&shift)?;
        let lse = z.exp()?.sum_axis(axis)?.ln()?.reshape(&reduced_shape)?;
        z.sub_b(&lse)
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::shape(op, format!("axis {axis} out of range for {shape:?}")));
    }
    Ok(())
}

fn arity(op: &'static str, inputs: &[&Tensor], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::shape(op, format!("expected {n} inputs, got {}", inputs.len())));
    }
    Ok(())
}

/// Layout of a matmul call after flattening leading axes.
struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    /// Right operand shared across the batch.
    shared_rhs: bool,
    out_shape: Vec<usize>,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatmulDims> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", format!("rank < 2: {a:?} x {b:?}")));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != kb {
        return Err(Error::shape("matmul", format!("{a:?} x {b:?}")));
    }
    let mut out_shape = a[..a.len() - 2].to_vec();
    out_shape.extend([m, n]);
    if b.len() == 2 {
        Ok(MatmulDims {
            batch: 1,
            m: numel(&a[..a.len() - 1]),
            k,
            n,
            shared_rhs: true,
            out_shape,
        })
    } else if a.len() == b.len() && a[..a.len() - 2] == b[..b.len() - 2] {
        Ok(MatmulDims {
            batch: numel(&a[..a.len() - 2]),
            m,
            k,
            n,
            shared_rhs: false,
            out_shape,
        })
    } else {
        Err(Error::shape("matmul", format!("batch dims differ: {a:?} x {b:?}")))
    }
}

/// `c (+)= op(a) * op(b)` where `a` is stored `[m,k]` (or `[k,m]` if
/// `ta`), `b` stored `[k,n]` (or `[n,k]` if `tb`), `c` is `[m,n]`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], acc: bool) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths cover the strided extents asserted above.
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
            if acc { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn permute(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = vec![0.0; data.len()];
    let rank = out_shape.len();
    if rank == 0 {
        return (out_shape, data.to_vec());
    }
    let last = out_shape[rank - 1];
    let last_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut pos = 0;
    while pos < out.len() {
        let base: usize = idx[..rank - 1]
            .iter()
            .zip(&src_strides[..rank - 1])
            .map(|(i, s)| i * s)
            .sum();
        for j in 0..last {
            out[pos + j] = data[base + j * last_stride];
        }
        pos += last;
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

/// True when broadcasting `src` to `dst` is plain tiling: `src`, minus
/// leading unit axes, equals the trailing axes of `dst`.
fn is_suffix(src: &[usize], dst: &[usize]) -> bool {
    let lead = src.iter().take_while(|&&e| e == 1).count();
    let core = &src[lead..];
    core.len() <= dst.len() && dst[dst.len() - core.len()..] == *core
}

/// Source offset of each output element for a right-aligned broadcast.
fn broadcast_map(src: &[usize], dst: &[usize]) -> Result<Vec<usize>> {
    if src.len() > dst.len() {
        return Err(Error::shape("broadcast", format!("{src:?} -> {dst:?}")));
    }
    let pad = dst.len() - src.len();
    let src_strides = strides(src);
    let mut eff = vec![0usize; dst.len()];
    for (i, &d) in dst.iter().enumerate() {
        if i < pad {
            continue;
        }
        let s = src[i - pad];
        if s == d {
            eff[i] = src_strides[i - pad];
        } else if s != 1 {
            return Err(Error::shape("broadcast", format!("{src:?} -> {dst:?}")));
        }
    }
    let total = numel(dst);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; dst.len()];
    for _ in 0..total {
        map.push(idx.iter().zip(&eff).map(|(i, s)| i * s).sum());
        for d in (0..dst.len()).rev() {
            idx[d] += 1;
            if idx[d] < dst[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(map)
}

/// Per output coordinate: (low index, high index, weight on high).
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

fn map_unary(x: &Tensor, f: impl Fn(f64) -> f64) -> Vec<f64> {
    x.data().iter().map(|&v| f(v)).collect()
}

fn forward(kind: &Primitive, inputs: &[&Tensor]) -> Result<(Vec<usize>, Vec<f64>)> {
    use Primitive as P;
    let op = kind.name();
    match kind {
        P::Add | P::Sub | P::Mul | P::Div => {
            arity(op, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            check_same(op, a, b)?;
            let f: fn(f64, f64) -> f64 = match kind {
                P::Add => |x, y| x + y,
                P::Sub => |x, y| x - y,
                P::Mul => |x, y| x * y,
                _ => |x, y| x / y,
            };
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Ok((a.shape().to_vec(), data))
        }
        P::Matmul => {
            arity(op, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            let d = matmul_dims(a.shape(), b.shape())?;
            let mut out = vec![0.0; numel(&d.out_shape)];
            if d.shared_rhs {
                gemm(d.m, d.k, d.n, a.data(), false, b.data(), false, &mut out, false);
            } else {
                let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
                for i in 0..d.batch {
                    gemm(
                        d.m,
                        d.k,
                        d.n,
                        &a.data()[i * sa..(i + 1) * sa],
                        false,
                        &b.data()[i * sb..(i + 1) * sb],
                        false,
                        &mut out[i * sc..(i + 1) * sc],
                        false,
                    );
                }
            }
            Ok((d.out_shape, out))
        }
        P::Transpose { axes } => {
            arity(op, inputs, 1)?;
            let x = inputs[0];
            let mut sorted = axes.clone();
            sorted.sort_unstable();
            if sorted != (0..x.shape().len()).collect::<Vec<_>>() {
                return Err(Error::shape(op, format!("bad permutation {axes:?} for {:?}", x.shape())));
            }
            Ok(permute(x.data(), x.shape(), axes))
        }
        P::Reshape { shape } => {
            arity(op, inputs, 1)?;
            let x = inputs[0];
            if numel(shape) != x.numel() || shape.contains(&0) {
                return Err(Error::shape(op, format!("{:?} -> {shape:?}", x.shape())));
            }
            Ok((shape.clone(), x.to_vec()))
        }
        P::Slice { axis, start, end } => {
            arity(op, inputs, 1)?;
            let x = inputs[0];
            check_axis(op, x.shape(), *axis)?;
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            if start >= end || *end > len {
                return Err(Error::shape(op, format!("range {start}..{end} on extent {len}")));
            }
            let w = end - start;
            let mut out = Vec::with_capacity(outer * w * inner);
            for o in 0..outer {
                let base = (o * len + start) * inner;
                out.extend_from_slice(&x.data()[base..base + w * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[*axis] = w;
            Ok((shape, out))
        }
        P::Concat { axis } => {
            if inputs.is_empty() {
                return Err(Error::shape(op, "no inputs"));
            }
            let first = inputs[0].shape();
            check_axis(op, first, *axis)?;
            let mut total = 0;
            for t in inputs {
                let s = t.shape();
                if s.len() != first.len()
                    || s.iter().enumerate().any(|(i, &e)| i != *axis && e != first[i])
                {
                    return Err(Error::shape(op, format!("{first:?} vs {s:?}")));
                }
                total += s[*axis];
            }
            let (outer, _, inner) = split_axis(first, *axis);
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for t in inputs {
                    let len = t.shape()[*axis];
                    out.extend_from_slice(&t.data()[o * len * inner..(o + 1) * len * inner]);
                }
            }
            let mut shape = first.to_vec();
            shape[*axis] = total;
            Ok((shape, out))
        }
        P::Broadcast { shape } => {
            arity(op, inputs, 1)?;
            let x = inputs[0];
            if is_suffix(x.shape(), shape) {
                let reps = numel(shape) / x.numel();
                let mut out = Vec::with_capacity(numel(shape));
                for _ in 0..reps {
                    out.extend_from_slice(x.data());
                }
                return Ok((shape.clone(), out));
            }
            let map = broadcast_map(x.shape(), shape)?;
            Ok((shape.clone(), map.iter().map(|&i| x.data()[i]).collect()))
        }
        P::Sum { axis } | P::Mean { axis } => {
            arity(op, inputs, 1)?;
            let x = inputs[0];
            let mean = matches!(kind, P::Mean { .. });
            match axis {
                None => {
                    let s: f64 = x.data().iter().sum();
                    Ok((vec![], vec![if mean { s / x.numel() as f64 } else { s }]))
                }
                Some(axis) => {
                    check_axis(op, x.shape(), *axis)?;
                    let (outer, len, inner) = split_axis(x.shape(), *axis);
                    let mut out = vec![0.0; outer * inner];
                    for o in 0..outer {
                        for a in 0..len {
                            let row = &x.data()[(o * len + a) * inner..(o * len + a + 1) * inner];
                            for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                    }
                    if mean {
                        out.iter_mut().for_each(|v| *v /= len as f64);
                    }
                    let mut shape = x.shape().to_vec();
                    shape.remove(*axis);
                    Ok((shape, out))
                }
            }
        }
        P::Max { axis } => {
            arity(op, inputs, 1)?;
            let x = inputs[0];
            check_axis(op, x.shape(), *axis)?;
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let mut out = vec![f64::NEG_INFINITY; outer * inner];
            for o in 0..outer {
                for a in 0..len {
                    for i in 0..inner {
                        let v = x.data()[(o * len + a) * inner + i];
                        if v > out[o * inner + i] {
                            out[o * inner + i] = v;
                        }
                    }
                }
            }
            let mut shape = x.shape().to_vec();
            shape.remove(*axis);
            Ok((shape, out))
        }
        P::Exp => unary(inputs, op, f64::exp),
        P::Log => unary(inputs, op, f64::ln),
        P::Sqrt => unary(inputs, op, f64::sqrt),
        P::Power { exponent } => {
            let e = *exponent;
            unary(inputs, op, move |v| v.powf(e))
        }
        P::Scale { factor } => {
            let c = *factor;
            unary(inputs, op, move |v| v * c)
        }
        P::Offset { value } => {
            let c = *value;
            unary(inputs, op, move |v| v + c)
        }
        P::Gelu => unary(inputs, op, gelu),
        P::Clip { min, max } => {
            if min > max {
                return Err(Error::Invalid(format!("clip range {min} > {max}")));
            }
            let (lo, hi) = (*min, *max);
            unary(inputs, op, move |v| v.clamp(lo, hi))
        }
        P::RoundSte => unary(inputs, op, round_half_away),
        P::Custom(c) => c.forward(inputs),
        P::Softmax { axis } => {
            arity(op, inputs, 1)?;
            let x = inputs[0];
            check_axis(op, x.shape(), *axis)?;
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let mut out = vec![0.0; x.numel()];
            let xd = x.data();
            if inner == 1 {
                for (row, dst) in xd.chunks(len).zip(out.chunks_mut(len)) {
                    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut s = 0.0;
                    for (d, &v) in dst.iter_mut().zip(row) {
                        *d = (v - mx).exp();
                        s += *d;
                    }
                    dst.iter_mut().for_each(|d| *d /= s);
                }
                return Ok((x.shape().to_vec(), out));
            }
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| (o * len + a) * inner + i;
                    let mx = (0..len).map(|a| xd[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut s = 0.0;
                    for a in 0..len {
                        let e = (xd[at(a)] - mx).exp();
                        out[at(a)] = e;
                        s += e;
                    }
                    for a in 0..len {
                        out[at(a)] /= s;
                    }
                }
            }
            Ok((x.shape().to_vec(), out))
        }
        P::LayerNorm { axis, eps } => {
            if inputs.len() != 1 && inputs.len() != 3 {
                return Err(Error::shape(op, "expects 1 or 3 inputs"));
            }
            let x = inputs[0];
            check_axis(op, x.shape(), *axis)?;
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let affine = if inputs.len() == 3 {
                let (g, b) = (inputs[1], inputs[2]);
                if g.shape() != [len] || b.shape() != [len] {
                    return Err(Error::shape(op, format!("affine params must be [{len}]")));
                }
                Some((g.data(), b.data()))
            } else {
                None
            };
            let mut out = vec![0.0; x.numel()];
            let xd = x.data();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| (o * len + a) * inner + i;
                    let (mu, rstd) = moments((0..len).map(|a| xd[at(a)]), len, *eps);
                    for a in 0..len {
                        let xh = (xd[at(a)] - mu) * rstd;
                        out[at(a)] = match affine {
                            Some((g, b)) => xh * g[a] + b[a],
                            None => xh,
                        };
                    }
                }
            }
            Ok((x.shape().to_vec(), out))
        }
        P::BilinearResize { height, width } => {
            arity(op, inputs, 1)?;
            let x = inputs[0];
            let r = x.shape().len();
            if r < 2 || *height == 0 || *width == 0 {
                return Err(Error::shape(op, format!("cannot resize {:?}", x.shape())));
            }
            let (ih, iw) = (x.shape()[r - 2], x.shape()[r - 1]);
            let planes = numel(&x.shape()[..r - 2]);
            let ty = bilinear_taps(ih, *height);
            let tx = bilinear_taps(iw, *width);
            let mut out = vec![0.0; planes * height * width];
            for p in 0..planes {
                let src = &x.data()[p * ih * iw..(p + 1) * ih * iw];
                let dst = &mut out[p * height * width..(p + 1) * height * width];
                for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                        let top = src[y0 * iw + x0] * (1.0 - wx) + src[y0 * iw + x1] * wx;
                        let bot = src[y1 * iw + x0] * (1.0 - wx) + src[y1 * iw + x1] * wx;
                        dst[oy * width + ox] = top * (1.0 - wy) + bot * wy;
                    }
                }
            }
            let mut shape = x.shape().to_vec();
            shape[r - 2] = *height;
            shape[r - 1] = *width;
            Ok((shape, out))
        }
    }
}

fn unary(inputs: &[&Tensor], op: &'static str, f: impl Fn(f64) -> f64) -> Result<(Vec<usize>, Vec<f64>)> {
    arity(op, inputs, 1)?;
    Ok((inputs[0].shape().to_vec(), map_unary(inputs[0], f)))
}

fn moments(values: impl Iterator<Item = f64> + Clone, len: usize, eps: f64) -> (f64, f64) {
    let mu = values.clone().sum::<f64>() / len as f64;
    let var = values.map(|v| (v - mu) * (v - mu)).sum::<f64>() / len as f64;
    (mu, 1.0 / (var + eps).sqrt())
}

/// Vector-Jacobian product for each input of `node`. `None` for inputs
/// that do not require gradients.
fn vjp(kind: &Primitive, node: &Tensor, g: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
    use Primitive as P;
    let inputs = &node.0.inputs;
    let want = |i: usize| inputs[i].requires_grad();
    let out = node.data();
    let grads = match kind {
        P::Add => vec![want(0).then(|| g.to_vec()), want(1).then(|| g.to_vec())],
        P::Sub => vec![
            want(0).then(|| g.to_vec()),
            want(1).then(|| g.iter().map(|v| -v).collect()),
        ],
        P::Mul => {
            let (a, b) = (inputs[0].data(), inputs[1].data());
            vec![
                want(0).then(|| g.iter().zip(b).map(|(g, b)| g * b).collect()),
                want(1).then(|| g.iter().zip(a).map(|(g, a)| g * a).collect()),
            ]
        }
        P::Div => {
            let (a, b) = (inputs[0].data(), inputs[1].data());
            vec![
                want(0).then(|| g.iter().zip(b).map(|(g, b)| g / b).collect()),
                want(1).then(|| {
                    g.iter()
                        .zip(a.iter().zip(b))
                        .map(|(g, (a, b))| -g * a / (b * b))
                        .collect()
                }),
            ]
        }
        P::Matmul => {
            let (a, b) = (&inputs[0], &inputs[1]);
            let d = matmul_dims(a.shape(), b.shape())?;
            let ga = want(0).then(|| {
                let mut ga = vec![0.0; a.numel()];
                let (sa, sb, sc) = (d.m * d.k, if d.shared_rhs { 0 } else { d.k * d.n }, d.m * d.n);
                for i in 0..d.batch {
                    // dA = dC * B^T
                    gemm(
                        d.m,
                        d.n,
                        d.k,
                        &g[i * sc..(i + 1) * sc],
                        false,
                        &b.data()[i * sb..i * sb + d.k * d.n],
                        true,
                        &mut ga[i * sa..(i + 1) * sa],
                        false,
                    );
                }
                ga
            });
            let gb = want(1).then(|| {
                let mut gb = vec![0.0; b.numel()];
                if d.shared_rhs {
                    gemm(d.k, d.m, d.n, a.data(), true, g, false, &mut gb, false);
                } else {
                    let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
                    for i in 0..d.batch {
                        // dB = A^T * dC
                        gemm(
                            d.k,
                            d.m,
                            d.n,
                            &a.data()[i * sa..(i + 1) * sa],
                            true,
                            &g[i * sc..(i + 1) * sc],
                            false,
                            &mut gb[i * sb..(i + 1) * sb],
                            false,
                        );
                    }
                }
                gb
            });
            vec![ga, gb]
        }
        P::Transpose { axes } => {
            let mut inv = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inv[a] = i;
            }
            vec![Some(permute(g, node.shape(), &inv).1)]
        }
        P::Reshape { .. } => vec![Some(g.to_vec())],
        P::Slice { axis, start, end } => {
            let x = &inputs[0];
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let w = end - start;
            let mut gx = vec![0.0; x.numel()];
            for o in 0..outer {
                let base = (o * len + start) * inner;
                gx[base..base + w * inner].copy_from_slice(&g[o * w * inner..(o + 1) * w * inner]);
            }
            vec![Some(gx)]
        }
        P::Concat { axis } => {
            let (outer, total, inner) = split_axis(node.shape(), *axis);
            let mut offset = 0;
            let mut res = Vec::with_capacity(inputs.len());
            for t in inputs {
                let len = t.shape()[*axis];
                if t.requires_grad() {
                    let mut gt = Vec::with_capacity(t.numel());
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gt.extend_from_slice(&g[base..base + len * inner]);
                    }
                    res.push(Some(gt));
                } else {
                    res.push(None);
                }
                offset += len;
            }
            res
        }
        P::Broadcast { shape } => {
            let x = &inputs[0];
            if is_suffix(x.shape(), shape) {
                let mut gx = vec![0.0; x.numel()];
                for chunk in g.chunks(x.numel()) {
                    gx.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                }
                return Ok(vec![Some(gx)]);
            }
            let map = broadcast_map(x.shape(), shape)?;
            let mut gx = vec![0.0; x.numel()];
            for (gi, &src) in g.iter().zip(&map) {
                gx[src] += gi;
            }
            vec![Some(gx)]
        }
        P::Sum { axis } | P::Mean { axis } => {
            let x = &inputs[0];
            let mean = matches!(kind, P::Mean { .. });
            match axis {
                None => {
                    let v = if mean { g[0] / x.numel() as f64 } else { g[0] };
                    vec![Some(vec![v; x.numel()])]
                }
                Some(axis) => {
                    let (outer, len, inner) = split_axis(x.shape(), *axis);
                    let c = if mean { 1.0 / len as f64 } else { 1.0 };
                    let mut gx = vec![0.0; x.numel()];
                    for o in 0..outer {
                        for a in 0..len {
                            for i in 0..inner {
                                gx[(o * len + a) * inner + i] = g[o * inner + i] * c;
                            }
                        }
                    }
                    vec![Some(gx)]
                }
            }
        }
        P::Max { axis } => {
            let x = &inputs[0];
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let mut gx = vec![0.0; x.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    // first maximal element takes the gradient
                    let at = |a: usize| (o * len + a) * inner + i;
                    let best = (0..len).find(|&a| x.data()[at(a)] == out[o * inner + i]).unwrap_or(0);
                    gx[at(best)] = g[o * inner + i];
                }
            }
            vec![Some(gx)]
        }
        P::Exp => vec![Some(g.iter().zip(out).map(|(g, y)| g * y).collect())],
        P::Log => vec![Some(g.iter().zip(inputs[0].data()).map(|(g, x)| g / x).collect())],
        P::Sqrt => vec![Some(g.iter().zip(out).map(|(g, y)| g * 0.5 / y).collect())],
        P::Power { exponent } => {
            let e = *exponent;
            vec![Some(
                g.iter()
                    .zip(inputs[0].data())
                    .map(|(g, x)| g * e * x.powf(e - 1.0))
                    .collect(),
            )]
        }
        P::Scale { factor } => vec![Some(g.iter().map(|v| v * factor).collect())],
        P::Offset { .. } | P::RoundSte => vec![Some(g.to_vec())],
        P::Custom(c) => c.vjp(inputs, out, g)?,
        P::Gelu => vec![Some(
            g.iter()
                .zip(inputs[0].data())
                .map(|(g, &x)| g * gelu_grad(x))
                .collect(),
        )],
        P::Clip { min, max } => vec![Some(
            g.iter()
                .zip(inputs[0].data())
                .map(|(g, &x)| if x >= *min && x <= *max { *g } else { 0.0 })
                .collect(),
        )],
        P::Softmax { axis } => {
            let (outer, len, inner) = split_axis(node.shape(), *axis);
            let mut gx = vec![0.0; g.len()];
            if inner == 1 {
                for ((gr, yr), dst) in g.chunks(len).zip(out.chunks(len)).zip(gx.chunks_mut(len)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, &gi), &yi) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = yi * (gi - dot);
                    }
                }
                return Ok(vec![Some(gx)]);
            }
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| (o * len + a) * inner + i;
                    let dot: f64 = (0..len).map(|a| g[at(a)] * out[at(a)]).sum();
                    for a in 0..len {
                        gx[at(a)] = out[at(a)] * (g[at(a)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }
        P::LayerNorm { axis, eps } => {
            let x = &inputs[0];
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let gamma = (inputs.len() == 3).then(|| inputs[1].data());
            let mut gx = want(0).then(|| vec![0.0; x.numel()]);
            let mut gg = (inputs.len() == 3 && want(1)).then(|| vec![0.0; len]);
            let mut gb = (inputs.len() == 3 && want(2)).then(|| vec![0.0; len]);
            let xd = x.data();
            let mut xhat = vec![0.0; len];
            let mut dxhat = vec![0.0; len];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| (o * len + a) * inner + i;
                    let (mu, rstd) = moments((0..len).map(|a| xd[at(a)]), len, *eps);
                    for a in 0..len {
                        xhat[a] = (xd[at(a)] - mu) * rstd;
                        let ga = g[at(a)];
                        dxhat[a] = match gamma {
                            Some(gm) => ga * gm[a],
                            None => ga,
                        };
                        if let Some(gg) = gg.as_mut() {
                            gg[a] += ga * xhat[a];
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb[a] += ga;
                        }
                    }
                    if let Some(gx) = gx.as_mut() {
                        let mean_d = dxhat.iter().sum::<f64>() / len as f64;
                        let mean_dx = dxhat.iter().zip(&xhat).map(|(d, x)| d * x).sum::<f64>() / len as f64;
                        for a in 0..len {
                            gx[at(a)] = rstd * (dxhat[a] - mean_d - xhat[a] * mean_dx);
                        }
                    }
                }
            }
            let mut res = vec![gx];
            if inputs.len() == 3 {
                res.push(gg);
                res.push(gb);
            }
            res
        }
        P::BilinearResize { height, width } => {
            let x = &inputs[0];
            let r = x.shape().len();
            let (ih, iw) = (x.shape()[r - 2], x.shape()[r - 1]);
            let planes = numel(&x.shape()[..r - 2]);
            let ty = bilinear_taps(ih, *height);
            let tx = bilinear_taps(iw, *width);
            let mut gx = vec![0.0; x.numel()];
            for p in 0..planes {
                let src = &g[p * height * width..(p + 1) * height * width];
                let dst = &mut gx[p * ih * iw..(p + 1) * ih * iw];
                for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                        let v = src[oy * width + ox];
                        dst[y0 * iw + x0] += v * (1.0 - wy) * (1.0 - wx);
                        dst[y0 * iw + x1] += v * (1.0 - wy) * wx;
                        dst[y1 * iw + x0] += v * wy * (1.0 - wx);
                        dst[y1 * iw + x1] += v * wy * wx;
                    }
                }
            }
            vec![Some(gx)]
        }
    };
    Ok(grads
        .into_iter()
        .enumerate()
        .map(|(i, gi)| gi.filter(|_| want(i)))
        .collect())
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(sizes: &[usize], lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step_count: 0,
            first_moment: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update of every parameter buffer from its gradient.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Option<&[f64]>]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::Invalid(format!(
                "adam tracks {} parameters, got {} params / {} grads",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let g = g.ok_or(Error::MissingGrad(i))?;
            if p.len() != self.first_moment[i].len() || g.len() != p.len() {
                return Err(Error::shape("adam", format!("parameter {i} size changed")));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].expect("checked above");
            let (m, v) = (&mut self.first_moment[i], &mut self.second_moment[i]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Largest `|analytic - central difference| / max(1, |analytic|)` over all
/// coordinates of `point`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if step <= 0.0 {
        return Err(Error::Invalid("finite-difference step must be positive".into()));
    }
    let x = Tensor::param(point.shape().to_vec(), point.to_vec())?;
    let loss = f(&x)?;
    loss.backward()?;
    let analytic = x.grad_or_zero();
    let mut worst: f64 = 0.0;
    let mut probe = point.to_vec();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = f(&Tensor::new(point.shape().to_vec(), probe.clone())?)?.item();
        probe[i] = orig - step;
        let down = f(&Tensor::new(point.shape().to_vec(), probe.clone())?)?.item();
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        if !numeric.is_finite() {
            return Err(Error::NonFinite {
                op: format!("finite difference at coordinate {i}"),
            });
        }
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
