//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! Every backward rule is itself expressed with differentiable tensor ops, so
//! a gradient computed with `create_graph = true` can be differentiated again.
//! Second-order MAML relies on this.
//!
//! Shape errors inside the op layer are programming errors and panic; the
//! public model-level functions validate their inputs and return `Result`.
//! Image tensors inside networks are laid out NHWC.

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Plain n-dimensional array, row-major. The storage type for everything that
/// outlives a computation graph (parameters, datasets, episodes).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Array { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Array {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Array {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Array {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Number of elements per entry along the first axis.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let r = self.row_len();
        &self.data[i * r..(i + 1) * r]
    }

    /// Selects entries along the first axis.
    pub fn select_rows(&self, rows: &[usize]) -> Array {
        let r = self.row_len();
        let mut data = Vec::with_capacity(rows.len() * r);
        for &i in rows {
            data.extend_from_slice(&self.data[i * r..(i + 1) * r]);
        }
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape.push(rows.len());
        } else {
            shape[0] = rows.len();
        }
        Array { shape, data }
    }

    /// Stacks arrays with identical shapes along a new first axis.
    pub fn stack(items: &[&Array]) -> Result<Array> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero arrays".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for a in items {
            if a.shape != first.shape {
                return Err(Error::Shape(format!(
                    "stack: {:?} vs {:?}",
                    a.shape, first.shape
                )));
            }
            data.extend_from_slice(&a.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Array { shape, data })
    }

    /// Concatenates along the first axis.
    pub fn concat_rows(items: &[&Array]) -> Result<Array> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("cannot concatenate zero arrays".into()))?;
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for a in items {
            if &a.shape[1..] != tail {
                return Err(Error::Shape(format!(
                    "concat: {:?} vs {:?}",
                    a.shape, first.shape
                )));
            }
            rows += a.shape[0];
            data.extend_from_slice(&a.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Ok(Array { shape, data })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static UPSAMPLE_CACHE: RefCell<HashMap<[usize; 4], Rc<GatherIndex>>> = RefCell::new(HashMap::new());
}

/// Runs `f` without recording any operations on the tape.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let _restore = Restore(prev);
    f()
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Flat gather index; `SKIP` entries produce zeros.
#[derive(Debug)]
pub struct GatherIndex {
    idx: Vec<u32>,
    src_shape: Vec<usize>,
    out_shape: Vec<usize>,
}

impl GatherIndex {
    pub const SKIP: u32 = u32::MAX;

    pub fn new(idx: Vec<u32>, src_shape: Vec<usize>, out_shape: Vec<usize>) -> Self {
        debug_assert_eq!(idx.len(), out_shape.iter().product::<usize>());
        GatherIndex {
            idx,
            src_shape,
            out_shape,
        }
    }
}

/// Stride-1 "same-ish" convolution geometry over an NHWC input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.k
    }
    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.k
    }
    fn input_shape(&self) -> Vec<usize> {
        vec![self.batch, self.h, self.w, self.c]
    }
    fn cols_shape(&self) -> Vec<usize> {
        vec![
            self.batch * self.out_h() * self.out_w(),
            self.k * self.k * self.c,
        ]
    }
}

#[derive(Clone)]
enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Pow(f64),
    MatMul { ta: bool, tb: bool },
    Reshape,
    Permute(Vec<usize>),
    SumTo,
    BroadcastTo,
    Gather(Rc<GatherIndex>),
    ScatterAdd(Rc<GatherIndex>),
    Im2Col(ConvGeom),
    Col2Im(ConvGeom),
    Concat { axis: usize },
    Slice { axis: usize, start: usize },
    Pad { axis: usize, start: usize },
}

struct Op {
    parents: Vec<Tensor>,
    kind: OpKind,
}

struct Node {
    data: Rc<Vec<f64>>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Option<Op>,
}

/// Reference-counted node of the computation graph.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            panic!("cannot broadcast {a:?} with {b:?}");
        };
    }
    out
}

/// Strides of `shape` viewed inside `out` with zeros on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let st = strides(shape);
    let off = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < off || shape[i - off] == 1 {
                0
            } else {
                st[i - off]
            }
        })
        .collect()
}

/// True when `small` (leading ones stripped) equals a suffix of `big`.
fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    let mut s = small;
    while let Some((&1, rest)) = s.split_first() {
        s = rest;
    }
    s.len() <= big.len() && big[big.len() - s.len()..] == *s
}

fn for_each_index(shape: &[usize], mut f: impl FnMut(usize, &[usize])) {
    let n = numel(shape);
    let mut idx = vec![0usize; shape.len()];
    for flat in 0..n {
        f(flat, &idx);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

fn binary_kernel(
    a: &[f64],
    ash: &[usize],
    b: &[f64],
    bsh: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> (Vec<f64>, Vec<usize>) {
    if ash == bsh {
        return (
            a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
            ash.to_vec(),
        );
    }
    let out = broadcast_shape(ash, bsh);
    if b.len() == 1 {
        let y = b[0];
        if out == ash {
            return (a.iter().map(|&x| f(x, y)).collect(), out);
        }
    }
    if a.len() == 1 && out == bsh {
        let x = a[0];
        return (b.iter().map(|&y| f(x, y)).collect(), out);
    }
    if out == ash && is_suffix(bsh, ash) && !b.is_empty() {
        let mut data = Vec::with_capacity(a.len());
        for chunk in a.chunks_exact(b.len()) {
            data.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
        }
        return (data, out);
    }
    if out == bsh && is_suffix(ash, bsh) && !a.is_empty() {
        let mut data = Vec::with_capacity(b.len());
        for chunk in b.chunks_exact(a.len()) {
            data.extend(a.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
        }
        return (data, out);
    }
    let sa = broadcast_strides(ash, &out);
    let sb = broadcast_strides(bsh, &out);
    let mut data = vec![0.0; numel(&out)];
    for_each_index(&out, |flat, idx| {
        let ia: usize = idx.iter().zip(&sa).map(|(i, s)| i * s).sum();
        let ib: usize = idx.iter().zip(&sb).map(|(i, s)| i * s).sum();
        data[flat] = f(a[ia], b[ib]);
    });
    (data, out)
}

fn sum_to_kernel(x: &[f64], xsh: &[usize], target: &[usize]) -> Vec<f64> {
    let tn = numel(target);
    if tn == x.len() {
        return x.to_vec();
    }
    if tn == 1 {
        return vec![x.iter().sum()];
    }
    let mut out = vec![0.0; tn];
    if is_suffix(target, xsh) {
        for chunk in x.chunks_exact(tn) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        return out;
    }
    let st = broadcast_strides(target, xsh);
    for_each_index(xsh, |flat, idx| {
        let it: usize = idx.iter().zip(&st).map(|(i, s)| i * s).sum();
        out[it] += x[flat];
    });
    out
}

fn broadcast_kernel(x: &[f64], xsh: &[usize], target: &[usize]) -> Vec<f64> {
    let tn = numel(target);
    if x.len() == tn {
        return x.to_vec();
    }
    if x.len() == 1 {
        return vec![x[0]; tn];
    }
    if is_suffix(xsh, target) {
        let mut out = Vec::with_capacity(tn);
        while out.len() < tn {
            out.extend_from_slice(x);
        }
        return out;
    }
    let st = broadcast_strides(xsh, target);
    let mut out = vec![0.0; tn];
    for_each_index(target, |flat, idx| {
        let i: usize = idx.iter().zip(&st).map(|(i, s)| i * s).sum();
        out[flat] = x[i];
    });
    out
}

fn matmul_kernel(
    a: &[f64],
    ash: &[usize],
    b: &[f64],
    bsh: &[usize],
    ta: bool,
    tb: bool,
) -> (Vec<f64>, Vec<usize>) {
    assert!(ash.len() == 2 && bsh.len() == 2, "matmul needs 2-D operands");
    let (m, k) = if ta { (ash[1], ash[0]) } else { (ash[0], ash[1]) };
    let (k2, n) = if tb { (bsh[1], bsh[0]) } else { (bsh[0], bsh[1]) };
    assert_eq!(k, k2, "matmul inner dims {ash:?} x {bsh:?} (ta={ta}, tb={tb})");
    let mut c: Vec<f64> = Vec::with_capacity(m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    if m > 0 && n > 0 && k > 0 {
        // SAFETY: the slices hold exactly the element counts implied by the
        // dimensions and strides above, and `c` does not alias `a` or `b`.
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
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
            // SAFETY: with beta = 0 dgemm writes every element of C without reading it.
            c.set_len(m * n);
        }
    } else {
        c.resize(m * n, 0.0);
    }
    (c, vec![m, n])
}

fn permute_kernel(x: &[f64], xsh: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| xsh[p]).collect();
    let xs = strides(xsh);
    let src_strides: Vec<usize> = perm.iter().map(|&p| xs[p]).collect();
    let mut out = vec![0.0; x.len()];
    for_each_index(&out_shape, |flat, idx| {
        let i: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out[flat] = x[i];
    });
    (out, out_shape)
}

fn im2col_kernel(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let kkc = g.k * g.k * g.c;
    let zeros = vec![0.0; g.c];
    let mut cols = Vec::with_capacity(g.batch * ho * wo * kkc);
    for b in 0..g.batch {
        for oy in 0..ho {
            for ox in 0..wo {
                for ky in 0..g.k {
                    let iy = oy as isize + ky as isize - g.pad as isize;
                    for kx in 0..g.k {
                        let ix = ox as isize + kx as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize || ix < 0 || ix >= g.w as isize {
                            cols.extend_from_slice(&zeros);
                        } else {
                            let src = ((b * g.h + iy as usize) * g.w + ix as usize) * g.c;
                            cols.extend_from_slice(&x[src..src + g.c]);
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_kernel(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let kkc = g.k * g.k * g.c;
    let mut x = vec![0.0; g.batch * g.h * g.w * g.c];
    for b in 0..g.batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let base = ((b * ho + oy) * wo + ox) * kkc;
                for ky in 0..g.k {
                    let iy = oy as isize + ky as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = ox as isize + kx as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = ((b * g.h + iy as usize) * g.w + ix as usize) * g.c;
                        let src = base + (ky * g.k + kx) * g.c;
                        for (o, v) in x[dst..dst + g.c].iter_mut().zip(&cols[src..src + g.c]) {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
    x
}

/// (outer, axis length, inner) decomposition around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

impl Tensor {
    fn from_op(data: Vec<f64>, shape: Vec<usize>, parents: Vec<Tensor>, kind: OpKind) -> Tensor {
        Tensor::from_shared(Rc::new(data), shape, parents, kind)
    }

    fn from_shared(data: Rc<Vec<f64>>, shape: Vec<usize>, parents: Vec<Tensor>, kind: OpKind) -> Tensor {
        debug_assert_eq!(data.len(), numel(&shape));
        let requires_grad = is_grad_enabled() && parents.iter().any(|p| p.0.requires_grad);
        let op = requires_grad.then_some(Op { parents, kind });
        Tensor(Rc::new(Node {
            data,
            shape,
            requires_grad,
            op,
        }))
    }

    fn leaf(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        assert_eq!(data.len(), numel(&shape), "leaf shape {shape:?}");
        Tensor(Rc::new(Node {
            data: Rc::new(data),
            shape,
            requires_grad,
            op: None,
        }))
    }

    /// A constant (never differentiated) tensor.
    pub fn constant(a: Array) -> Tensor {
        Tensor::leaf(a.data, a.shape, false)
    }

    /// A trainable leaf.
    pub fn param(a: Array) -> Tensor {
        Tensor::leaf(a.data, a.shape, true)
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::leaf(data, shape.to_vec(), false)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::leaf(vec![v], vec![], false)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::leaf(vec![0.0; numel(shape)], shape.to_vec(), false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn to_array(&self) -> Array {
        Array {
            shape: self.0.shape.clone(),
            data: self.0.data.to_vec(),
        }
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor(Rc::new(Node {
            data: Rc::clone(&self.0.data),
            shape: self.0.shape.clone(),
            requires_grad: false,
            op: None,
        }))
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    fn binary(&self, other: &Tensor, kind: OpKind, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (data, shape) = binary_kernel(self.data(), self.shape(), other.data(), other.shape(), f);
        Tensor::from_op(data, shape, vec![self.clone(), other.clone()], kind)
    }

    fn unary(&self, kind: OpKind, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(data, self.shape().to_vec(), vec![self.clone()], kind)
    }

    pub fn add(&self, o: &Tensor) -> Tensor {
        self.binary(o, OpKind::Add, |a, b| a + b)
    }

    pub fn sub(&self, o: &Tensor) -> Tensor {
        self.binary(o, OpKind::Sub, |a, b| a - b)
    }

    pub fn mul(&self, o: &Tensor) -> Tensor {
        self.binary(o, OpKind::Mul, |a, b| a * b)
    }

    pub fn div(&self, o: &Tensor) -> Tensor {
        self.binary(o, OpKind::Div, |a, b| a / b)
    }

    pub fn neg(&self) -> Tensor {
        self.unary(OpKind::Neg, |a| -a)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(OpKind::Exp, f64::exp)
    }

    pub fn ln(&self) -> Tensor {
        self.unary(OpKind::Log, f64::ln)
    }

    pub fn powf(&self, p: f64) -> Tensor {
        match p {
            2.0 => self.unary(OpKind::Pow(p), |a| a * a),
            0.5 => self.unary(OpKind::Pow(p), f64::sqrt),
            -0.5 => self.unary(OpKind::Pow(p), |a| 1.0 / a.sqrt()),
            -1.0 => self.unary(OpKind::Pow(p), |a| 1.0 / a),
            -2.0 => self.unary(OpKind::Pow(p), |a| 1.0 / (a * a)),
            _ => self.unary(OpKind::Pow(p), move |a| a.powf(p)),
        }
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.add(&Tensor::scalar(c))
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        self.mul(&Tensor::scalar(c))
    }

    pub fn square(&self) -> Tensor {
        self.mul(self)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.neg().exp().add_scalar(1.0).powf(-1.0)
    }

    pub fn relu(&self) -> Tensor {
        let mask: Vec<f64> = self.data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
        self.mul(&Tensor::from_vec(self.shape(), mask))
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        let mask: Vec<f64> = self
            .data()
            .iter()
            .map(|&v| if v > 0.0 { 1.0 } else { slope })
            .collect();
        self.mul(&Tensor::from_vec(self.shape(), mask))
    }

    /// `op(self) · op(other)` for 2-D tensors, with optional transposes.
    pub fn matmul_t(&self, o: &Tensor, ta: bool, tb: bool) -> Tensor {
        let (data, shape) = matmul_kernel(self.data(), self.shape(), o.data(), o.shape(), ta, tb);
        Tensor::from_op(data, shape, vec![self.clone(), o.clone()], OpKind::MatMul { ta, tb })
    }

    pub fn matmul(&self, o: &Tensor) -> Tensor {
        self.matmul_t(o, false, false)
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            numel(shape),
            self.numel(),
            "reshape {:?} -> {shape:?}",
            self.shape()
        );
        if shape == self.shape() {
            return self.clone();
        }
        Tensor::from_shared(Rc::clone(&self.0.data), shape.to_vec(), vec![self.clone()], OpKind::Reshape)
    }

    pub fn permute(&self, perm: &[usize]) -> Tensor {
        assert_eq!(perm.len(), self.shape().len(), "permute rank");
        if perm.iter().enumerate().all(|(i, &p)| i == p) {
            return self.clone();
        }
        let (data, shape) = permute_kernel(self.data(), self.shape(), perm);
        Tensor::from_op(data, shape, vec![self.clone()], OpKind::Permute(perm.to_vec()))
    }

    /// Sums broadcast axes so the result has `target` shape.
    pub fn sum_to(&self, target: &[usize]) -> Tensor {
        if target == self.shape() {
            return self.clone();
        }
        let data = sum_to_kernel(self.data(), self.shape(), target);
        Tensor::from_op(data, target.to_vec(), vec![self.clone()], OpKind::SumTo)
    }

    pub fn broadcast_to(&self, target: &[usize]) -> Tensor {
        if target == self.shape() {
            return self.clone();
        }
        let data = broadcast_kernel(self.data(), self.shape(), target);
        Tensor::from_op(data, target.to_vec(), vec![self.clone()], OpKind::BroadcastTo)
    }

    pub fn sum(&self) -> Tensor {
        self.sum_to(&[])
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    /// Sum over the last axis, keeping it with length 1.
    pub fn sum_last(&self) -> Tensor {
        let mut t = self.shape().to_vec();
        if let Some(l) = t.last_mut() {
            *l = 1;
        }
        self.sum_to(&t)
    }

    pub fn gather(&self, index: Rc<GatherIndex>) -> Tensor {
        assert_eq!(index.src_shape, self.shape(), "gather source shape");
        let src = self.data();
        let data = index
            .idx
            .iter()
            .map(|&i| if i == GatherIndex::SKIP { 0.0 } else { src[i as usize] })
            .collect();
        let shape = index.out_shape.clone();
        Tensor::from_op(data, shape, vec![self.clone()], OpKind::Gather(index))
    }

    pub fn scatter_add(&self, index: Rc<GatherIndex>) -> Tensor {
        assert_eq!(index.out_shape, self.shape(), "scatter source shape");
        let mut data = vec![0.0; numel(&index.src_shape)];
        for (&i, &v) in index.idx.iter().zip(self.data()) {
            if i != GatherIndex::SKIP {
                data[i as usize] += v;
            }
        }
        let shape = index.src_shape.clone();
        Tensor::from_op(data, shape, vec![self.clone()], OpKind::ScatterAdd(index))
    }

    /// Picks `cols[i]` from row `i` of a 2-D tensor, giving shape `[rows]`.
    pub fn pick(&self, cols: &[usize]) -> Tensor {
        let sh = self.shape();
        assert!(sh.len() == 2 && sh[0] == cols.len(), "pick shape");
        let idx = cols
            .iter()
            .enumerate()
            .map(|(r, &c)| {
                assert!(c < sh[1], "pick column {c} out of range {}", sh[1]);
                (r * sh[1] + c) as u32
            })
            .collect();
        self.gather(Rc::new(GatherIndex::new(idx, sh.to_vec(), vec![cols.len()])))
    }

    /// Selects columns of a 2-D tensor.
    pub fn select_cols(&self, cols: &[usize]) -> Tensor {
        let sh = self.shape();
        assert_eq!(sh.len(), 2, "select_cols needs 2-D");
        let mut idx = Vec::with_capacity(sh[0] * cols.len());
        for r in 0..sh[0] {
            for &c in cols {
                idx.push((r * sh[1] + c) as u32);
            }
        }
        self.gather(Rc::new(GatherIndex::new(
            idx,
            sh.to_vec(),
            vec![sh[0], cols.len()],
        )))
    }

    pub fn im2col(&self, geom: ConvGeom) -> Tensor {
        assert_eq!(self.shape(), geom.input_shape().as_slice(), "im2col input");
        let data = im2col_kernel(self.data(), &geom);
        Tensor::from_op(data, geom.cols_shape(), vec![self.clone()], OpKind::Im2Col(geom))
    }

    fn col2im(&self, geom: ConvGeom) -> Tensor {
        assert_eq!(self.shape(), geom.cols_shape().as_slice(), "col2im input");
        let data = col2im_kernel(self.data(), &geom);
        Tensor::from_op(data, geom.input_shape(), vec![self.clone()], OpKind::Col2Im(geom))
    }

    pub fn concat(parts: &[Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty(), "concat of nothing");
        if parts.len() == 1 {
            return parts[0].clone();
        }
        let base = parts[0].shape();
        let mut shape = base.to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let ps = p.shape();
                assert!(
                    ps.len() == base.len()
                        && ps.iter().zip(base).enumerate().all(|(i, (a, b))| i == axis || a == b),
                    "concat shapes {ps:?} vs {base:?}"
                );
                let chunk = ps[axis] * inner;
                data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        Tensor::from_op(data, shape, parts.to_vec(), OpKind::Concat { axis })
    }

    /// Entries `start..start + len` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let sh = self.shape();
        assert!(start + len <= sh[axis], "slice {start}+{len} beyond {}", sh[axis]);
        if start == 0 && len == sh[axis] {
            return self.clone();
        }
        let (outer, n, inner) = split_axis(sh, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = (o * n + start) * inner;
            data.extend_from_slice(&self.data()[off..off + len * inner]);
        }
        let mut shape = sh.to_vec();
        shape[axis] = len;
        Tensor::from_op(data, shape, vec![self.clone()], OpKind::Slice { axis, start })
    }

    /// Zero-pads along `axis` to length `total`, placing `self` at `start`.
    fn pad(&self, axis: usize, start: usize, total: usize) -> Tensor {
        let sh = self.shape();
        let (outer, n, inner) = split_axis(sh, axis);
        let mut shape = sh.to_vec();
        shape[axis] = total;
        let mut data = vec![0.0; numel(&shape)];
        for o in 0..outer {
            let src = o * n * inner;
            let dst = (o * total + start) * inner;
            data[dst..dst + n * inner].copy_from_slice(&self.data()[src..src + n * inner]);
        }
        Tensor::from_op(data, shape, vec![self.clone()], OpKind::Pad { axis, start })
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax(&self) -> Tensor {
        let sh = self.shape().to_vec();
        let k = *sh.last().expect("log_softmax on scalar");
        let rows = self.numel() / k;
        let mut mshape = sh.clone();
        *mshape.last_mut().unwrap() = 1;
        // The shift is a constant: it cancels exactly in every derivative order.
        let maxes: Vec<f64> = (0..rows)
            .map(|r| {
                self.data()[r * k..(r + 1) * k]
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let z = self.sub(&Tensor::from_vec(&mshape, maxes));
        let lse = z.exp().sum_last().ln();
        z.sub(&lse)
    }

    pub fn softmax(&self) -> Tensor {
        self.log_softmax().exp()
    }

    /// 2x2 max pooling with stride 2 on NHWC input (floor on odd sizes).
    pub fn max_pool2(&self) -> Tensor {
        let sh = self.shape();
        assert_eq!(sh.len(), 4, "max_pool2 needs NHWC");
        let (b, h, w, c) = (sh[0], sh[1], sh[2], sh[3]);
        let (ho, wo) = (h / 2, w / 2);
        let x = self.data();
        let mut idx = Vec::with_capacity(b * ho * wo * c);
        for bi in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    for ci in 0..c {
                        let mut best = u32::MAX;
                        let mut bv = f64::NEG_INFINITY;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = ((bi * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ci;
                                if best == u32::MAX || x[i] > bv {
                                    bv = x[i];
                                    best = i as u32;
                                }
                            }
                        }
                        idx.push(best);
                    }
                }
            }
        }
        self.gather(Rc::new(GatherIndex::new(idx, sh.to_vec(), vec![b, ho, wo, c])))
    }

    /// Nearest-neighbour 2x upsampling on NHWC input.
    pub fn upsample2(&self) -> Tensor {
        let sh = self.shape();
        assert_eq!(sh.len(), 4, "upsample2 needs NHWC");
        let key = [sh[0], sh[1], sh[2], sh[3]];
        let index = UPSAMPLE_CACHE.with(|cache| {
            cache
                .borrow_mut()
                .entry(key)
                .or_insert_with(|| {
                    let (b, h, w, c) = (sh[0], sh[1], sh[2], sh[3]);
                    let mut idx = Vec::with_capacity(b * 4 * h * w * c);
                    for bi in 0..b {
                        for y in 0..2 * h {
                            for x in 0..2 * w {
                                let src = ((bi * h + y / 2) * w + x / 2) * c;
                                idx.extend((0..c).map(|ci| (src + ci) as u32));
                            }
                        }
                    }
                    Rc::new(GatherIndex::new(
                        idx,
                        sh.to_vec(),
                        vec![b, 2 * h, 2 * w, c],
                    ))
                })
                .clone()
        });
        self.gather(index)
    }

    /// Stride-1 convolution: NHWC input, weight `[out, k*k*in]`, optional bias `[out]`.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, k: usize, pad: usize) -> Tensor {
        let sh = self.shape();
        assert_eq!(sh.len(), 4, "conv2d needs NHWC input");
        let geom = ConvGeom {
            batch: sh[0],
            h: sh[1],
            w: sh[2],
            c: sh[3],
            k,
            pad,
        };
        let out_c = weight.shape()[0];
        let cols = self.im2col(geom);
        let mut y = cols.matmul_t(weight, false, true);
        if let Some(b) = bias {
            y = y.add(b);
        }
        y.reshape(&[geom.batch, geom.out_h(), geom.out_w(), out_c])
    }
}

fn backward(op: &Op, out_shape: &[usize], g: &Tensor) -> Vec<Option<Tensor>> {
    let p = &op.parents;
    let need = |i: usize| p[i].requires_grad();
    let one = |i: usize, f: &dyn Fn() -> Tensor| if need(i) { Some(f()) } else { None };
    match &op.kind {
        OpKind::Add => vec![
            one(0, &|| g.sum_to(p[0].shape())),
            one(1, &|| g.sum_to(p[1].shape())),
        ],
        OpKind::Sub => vec![
            one(0, &|| g.sum_to(p[0].shape())),
            one(1, &|| g.neg().sum_to(p[1].shape())),
        ],
        OpKind::Mul => vec![
            one(0, &|| g.mul(&p[1]).sum_to(p[0].shape())),
            one(1, &|| g.mul(&p[0]).sum_to(p[1].shape())),
        ],
        OpKind::Div => vec![
            one(0, &|| g.div(&p[1]).sum_to(p[0].shape())),
            one(1, &|| {
                g.mul(&p[0])
                    .div(&p[1].square())
                    .neg()
                    .sum_to(p[1].shape())
            }),
        ],
        OpKind::Neg => vec![one(0, &|| g.neg())],
        OpKind::Exp => vec![one(0, &|| g.mul(&p[0].exp()))],
        OpKind::Log => vec![one(0, &|| g.div(&p[0]))],
        OpKind::Pow(e) => vec![one(0, &|| g.mul(&p[0].powf(e - 1.0)).mul_scalar(*e))],
        OpKind::MatMul { ta, tb } => {
            let (a, b) = (&p[0], &p[1]);
            let (ga, gb): (Box<dyn Fn() -> Tensor>, Box<dyn Fn() -> Tensor>) = match (ta, tb) {
                (false, false) => (
                    Box::new(|| g.matmul_t(b, false, true)),
                    Box::new(|| a.matmul_t(g, true, false)),
                ),
                (false, true) => (
                    Box::new(|| g.matmul_t(b, false, false)),
                    Box::new(|| g.matmul_t(a, true, false)),
                ),
                (true, false) => (
                    Box::new(|| b.matmul_t(g, false, true)),
                    Box::new(|| a.matmul_t(g, false, false)),
                ),
                (true, true) => (
                    Box::new(|| b.matmul_t(g, true, true)),
                    Box::new(|| g.matmul_t(a, true, true)),
                ),
            };
            vec![one(0, &*ga), one(1, &*gb)]
        }
        OpKind::Reshape => vec![one(0, &|| g.reshape(p[0].shape()))],
        OpKind::Permute(perm) => {
            let mut inv = vec![0; perm.len()];
            for (i, &q) in perm.iter().enumerate() {
                inv[q] = i;
            }
            vec![one(0, &|| g.permute(&inv))]
        }
        OpKind::SumTo => vec![one(0, &|| g.broadcast_to(p[0].shape()))],
        OpKind::BroadcastTo => vec![one(0, &|| g.sum_to(p[0].shape()))],
        OpKind::Gather(ix) => vec![one(0, &|| g.scatter_add(ix.clone()))],
        OpKind::ScatterAdd(ix) => vec![one(0, &|| g.gather(ix.clone()))],
        OpKind::Im2Col(geom) => vec![one(0, &|| g.col2im(*geom))],
        OpKind::Col2Im(geom) => vec![one(0, &|| g.im2col(*geom))],
        OpKind::Concat { axis } => {
            let mut start = 0;
            p.iter()
                .map(|t| {
                    let len = t.shape()[*axis];
                    let r = t.requires_grad().then(|| g.slice(*axis, start, len));
                    start += len;
                    r
                })
                .collect()
        }
        OpKind::Slice { axis, start } => {
            let total = p[0].shape()[*axis];
            vec![one(0, &|| g.pad(*axis, *start, total))]
        }
        OpKind::Pad { axis, start } => {
            let len = p[0].shape()[*axis];
            debug_assert!(start + len <= out_shape[*axis]);
            vec![one(0, &|| g.slice(*axis, *start, len))]
        }
    }
}

/// Gradients of a scalar `output` with respect to `wrt`.
///
/// With `create_graph` the returned gradients are themselves part of the
/// graph and can be differentiated again. Leaves that `output` does not depend
/// on get zero gradients.
pub fn grad(output: &Tensor, wrt: &[Tensor], create_graph: bool) -> Vec<Tensor> {
    assert_eq!(output.numel(), 1, "grad of non-scalar output {:?}", output.shape());
    let zeros = || wrt.iter().map(|w| Tensor::zeros(w.shape())).collect();
    if !output.requires_grad() {
        return zeros();
    }
    let run = || {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack = vec![(output.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.key()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = &t.0.op {
                for par in &op.parents {
                    if par.requires_grad() && !visited.contains(&par.key()) {
                        stack.push((par.clone(), false));
                    }
                }
            }
        }

        let mut grads: HashMap<usize, Tensor> = HashMap::new();
        grads.insert(output.key(), Tensor::leaf(vec![1.0], output.shape().to_vec(), false));
        let targets: HashSet<usize> = wrt.iter().map(Tensor::key).collect();
        for node in order.iter().rev() {
            let Some(op) = &node.0.op else { continue };
            let g = if targets.contains(&node.key()) {
                grads.get(&node.key()).cloned()
            } else {
                grads.remove(&node.key())
            };
            let Some(g) = g else { continue };
            for (par, pg) in op.parents.iter().zip(backward(op, node.shape(), &g)) {
                if let Some(pg) = pg {
                    let merged = match grads.remove(&par.key()) {
                        Some(prev) => prev.add(&pg),
                        None => pg,
                    };
                    grads.insert(par.key(), merged);
                }
            }
        }
        wrt.iter()
            .map(|w| {
                grads
                    .get(&w.key())
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(w.shape()))
            })
            .collect()
    };
    if create_graph {
        run()
    } else {
        no_grad(run)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::param(Array::new(shape.to_vec(), v.to_vec()).unwrap())
    }

    /// Central finite differences of `f` around `x0`.
    fn numeric_grad(f: &dyn Fn(&Tensor) -> f64, x0: &Array) -> Vec<f64> {
        let h = 1e-6;
        (0..x0.numel())
            .map(|i| {
                let mut up = x0.clone();
                up.data[i] += h;
                let mut dn = x0.clone();
                dn.data[i] -= h;
                (f(&Tensor::constant(up)) - f(&Tensor::constant(dn))) / (2.0 * h)
            })
            .collect()
    }

    fn check(f: &dyn Fn(&Tensor) -> Tensor, x0: Array) {
        let x = Tensor::param(x0.clone());
        let analytic = grad(&f(&x), &[x.clone()], false).remove(0);
        let numeric = numeric_grad(&|x| f(x).item(), &x0);
        for (a, n) in analytic.data().iter().zip(&numeric) {
            assert!((a - n).abs() <= 1e-5 * (1.0 + n.abs()), "{a} vs {n}");
        }
    }

    fn arange(shape: &[usize], scale: f64) -> Array {
        let n: usize = shape.iter().product();
        Array::new(
            shape.to_vec(),
            (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) * scale).collect(),
        )
        .unwrap()
    }

    #[test]
    fn broadcasting_add_and_its_gradient() {
        let a = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let b = t(&[3], &[10., 20., 30.]);
        let c = a.add(&b);
        assert_eq!(c.data(), &[11., 22., 33., 14., 25., 36.]);
        let g = grad(&c.sum(), &[a, b], false);
        assert_eq!(g[1].data(), &[2., 2., 2.]);
        assert_eq!(g[0].data(), &[1.; 6]);
    }

    #[test]
    fn middle_axis_broadcast_uses_general_path() {
        check(
            &|x| x.mul(&Tensor::from_vec(&[2, 1, 3], vec![1., 2., 3., 4., 5., 6.])).square().sum(),
            arange(&[2, 4, 3], 0.1),
        );
        check(&|x| x.sum_to(&[2, 1, 3]).square().sum(), arange(&[2, 4, 3], 0.1));
    }

    #[test]
    fn matmul_gradients_all_transpose_modes() {
        let b = Tensor::constant(arange(&[3, 4], 0.3));
        for (ta, tb) in [(false, false), (false, true), (true, false), (true, true)] {
            let ash = if ta { [3, 2] } else { [2, 3] };
            let bb = if tb { Tensor::constant(arange(&[4, 3], 0.3)) } else { b.clone() };
            check(&|x| x.matmul_t(&bb, ta, tb).square().sum(), arange(&ash, 0.2));
        }
    }

    #[test]
    fn conv_pool_upsample_gradients() {
        let w = Tensor::constant(arange(&[2, 9 * 3], 0.05));
        check(
            &|x| x.conv2d(&w, None, 3, 1).max_pool2().upsample2().square().sum(),
            arange(&[2, 4, 4, 3], 0.13),
        );
    }

    #[test]
    fn log_softmax_rows_normalise() {
        let x = t(&[2, 3], &[1000.0, 1001.0, 999.0, -3.0, 0.0, 2.0]);
        let p = x.softmax();
        for r in 0..2 {
            let s: f64 = p.data()[r * 3..r * 3 + 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        check(&|x| x.log_softmax().pick(&[1, 2]).sum(), arange(&[2, 3], 0.4));
    }

    #[test]
    fn concat_slice_round_trip() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        let b = t(&[2, 1], &[5., 6.]);
        let c = Tensor::concat(&[a.clone(), b.clone()], 1);
        assert_eq!(c.data(), &[1., 2., 5., 3., 4., 6.]);
        assert_eq!(c.slice(1, 2, 1).data(), &[5., 6.]);
        check(
            &|x| Tensor::concat(&[x.clone(), x.mul_scalar(2.0)], 0).slice(0, 1, 2).square().sum(),
            arange(&[2, 3], 0.5),
        );
    }

    #[test]
    fn second_order_gradient_of_cubic() {
        // f(x) = x^3 -> f'(x) = 3x^2 -> f''(x) = 6x
        let x = t(&[1], &[1.5]);
        let y = x.powf(3.0).sum();
        let g = grad(&y, &[x.clone()], true).remove(0);
        assert!((g.item() - 6.75).abs() < 1e-12);
        let gg = grad(&g.sum(), &[x], false).remove(0);
        assert!((gg.item() - 9.0).abs() < 1e-12);
    }

    #[test]
    fn second_order_through_matmul_and_softmax() {
        // d/dv of (grad_w L(w)) . v, checked against finite differences of grad_w.
        let x = Tensor::constant(arange(&[3, 2], 0.3));
        let loss = |w: &Tensor| x.matmul(w).log_softmax().pick(&[0, 1, 0]).sum().neg();
        let w0 = arange(&[2, 2], 0.2);
        let v = Tensor::constant(arange(&[2, 2], 0.1));
        let w = Tensor::param(w0.clone());
        let gw = grad(&loss(&w), &[w.clone()], true).remove(0);
        let hv = grad(&gw.mul(&v).sum(), &[w], false).remove(0);
        let gdot = |w: &Tensor| {
            let wp = Tensor::param(w.to_array());
            let g = grad(&loss(&wp), &[wp], false).remove(0);
            g.mul(&v).sum().item()
        };
        let numeric = numeric_grad(&gdot, &w0);
        for (a, n) in hv.data().iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-6, "{a} vs {n}");
        }
    }

    #[test]
    fn no_grad_disables_recording() {
        let x = t(&[1], &[2.0]);
        let y = no_grad(|| x.mul(&x));
        assert!(!y.requires_grad());
        assert!(x.mul(&x).requires_grad());
    }
}
