//! Reverse-mode autodiff over ndarray tensors, recorded on a per-sample tape.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{Array2, ArrayD, ArrayView2, Axis, IxDyn, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

use super::params::ParamSet;

pub trait Scalar:
    LinalgScalar
    + Float
    + FromPrimitive
    + ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + Debug
    + Display
    + Sum
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[inline]
pub fn cst<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("representable constant")
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param(usize),
    Conv2d { x: Var, w: Var, b: Var, k: usize, cols: Array2<T> },
    Linear { x: Var, w: Var, b: Var },
    Relu(Var),
    Add(Var, Var),
    Scale(Var, T),
    MulConst(Var, ArrayD<T>),
    AvgPool2(Var),
    Upsample2(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize, len: usize },
    SqErr { x: Var, target: ArrayD<T>, mask: Option<ArrayD<T>> },
    AbsErrAt { x: Var, at: Vec<[usize; 3]>, targets: Vec<T> },
    Sum(Var),
}

pub struct Graph<T: Scalar> {
    values: Vec<ArrayD<T>>,
    ops: Vec<Op<T>>,
}

/// Gradients of a scalar root with respect to every recorded value.
pub struct Grads<T> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<T>> {
        self.grads[v.0].as_ref()
    }
}

fn view2<T>(a: &ArrayD<T>, rows: usize, cols: usize) -> ArrayView2<'_, T> {
    ArrayView2::from_shape((rows, cols), a.as_slice().expect("standard layout")).expect("matching size")
}

fn into_dyn2<T: Scalar>(a: Array2<T>, shape: &[usize]) -> ArrayD<T> {
    let a = if a.is_standard_layout() { a } else { a.as_standard_layout().to_owned() };
    a.into_shape_with_order(IxDyn(shape)).expect("matching size")
}

/// `[C, H, W]` to `[C*k*k, H*W]` patches for a stride-1, same-padded `k`x`k` kernel.
fn im2col<T: Scalar>(x: &ArrayD<T>, k: usize) -> Array2<T> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let pad = k / 2;
    let xs = x.as_slice().expect("standard layout");
    let mut cols = Array2::<T>::zeros((c * k * k, h * w));
    let out = cols.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let x0 = pad.saturating_sub(kx);
                let x1 = (w + pad).saturating_sub(kx).min(w);
                for y in 0..h {
                    let sy = y + ky;
                    if sy < pad || sy - pad >= h {
                        continue;
                    }
                    let sy = sy - pad;
                    let dst = r * h * w + y * w;
                    let src = ci * h * w + sy * w;
                    for xx in x0..x1 {
                        out[dst + xx] = xs[src + xx + kx - pad];
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &Array2<T>, c: usize, h: usize, w: usize, k: usize) -> ArrayD<T> {
    let pad = k / 2;
    let mut x = ArrayD::<T>::zeros(IxDyn(&[c, h, w]));
    let xs = x.as_slice_mut().expect("fresh array");
    let cs = cols.as_slice().expect("standard layout");
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let x0 = pad.saturating_sub(kx);
                let x1 = (w + pad).saturating_sub(kx).min(w);
                for y in 0..h {
                    let sy = y + ky;
                    if sy < pad || sy - pad >= h {
                        continue;
                    }
                    let sy = sy - pad;
                    let src = r * h * w + y * w;
                    let dst = ci * h * w + sy * w;
                    for xx in x0..x1 {
                        xs[dst + xx + kx - pad] = xs[dst + xx + kx - pad] + cs[src + xx];
                    }
                }
            }
        }
    }
    x
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
        }
    }

    fn push(&mut self, value: ArrayD<T>, op: Op<T>) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.values[v.0]
    }

    pub fn scalar(&self, v: Var) -> T {
        self.values[v.0].iter().copied().next().expect("non-empty value")
    }

    /// A constant (no gradient flows further back than this node).
    pub fn input(&mut self, value: ArrayD<T>) -> Var {
        let value = value.as_standard_layout().into_owned();
        self.push(value, Op::Leaf)
    }

    /// A copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.values[v.0].clone();
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, params: &ParamSet<T>, id: usize) -> Var {
        self.push(params.values[id].clone(), Op::Param(id))
    }

    /// Stride-1 same-padded convolution of a `[C, H, W]` tensor with `[O, C, k, k]` weights.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let ws = self.values[w.0].shape().to_vec();
        let xs = self.values[x.0].shape().to_vec();
        assert_eq!(ws[1], xs[0], "conv input channels");
        let (o, k) = (ws[0], ws[2]);
        let (h, wd) = (xs[1], xs[2]);
        let cols = im2col(&self.values[x.0], k);
        let w2 = view2(&self.values[w.0], o, ws[1] * k * k);
        let mut y = w2.dot(&cols);
        let bias = self.values[b.0].view().into_shape_with_order(o).expect("bias shape");
        for (mut row, &bv) in y.axis_iter_mut(Axis(0)).zip(bias.iter()) {
            row.mapv_inplace(|v| v + bv);
        }
        let y = into_dyn2(y, &[o, h, wd]);
        self.push(y, Op::Conv2d { x, w, b, k, cols })
    }

    /// `x [B, F] * w [F, O] + b [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.values[x.0].shape().to_vec();
        let ws = self.values[w.0].shape().to_vec();
        assert_eq!(xs[1], ws[0], "linear input features");
        let xv = view2(&self.values[x.0], xs[0], xs[1]);
        let wv = view2(&self.values[w.0], ws[0], ws[1]);
        let mut y = xv.dot(&wv);
        let bias = self.values[b.0].view().into_shape_with_order(ws[1]).expect("bias shape");
        for mut row in y.axis_iter_mut(Axis(0)) {
            row += &bias;
        }
        let y = into_dyn2(y, &[xs[0], ws[1]]);
        self.push(y, Op::Linear { x, w, b })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.values[x.0].mapv(|v| if v > T::zero() { v } else { T::zero() });
        self.push(y, Op::Relu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.values[a.0].shape(), self.values[b.0].shape(), "add shapes");
        let y = &self.values[a.0] + &self.values[b.0];
        self.push(y, Op::Add(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let y = self.values[a.0].mapv(|v| v * c);
        self.push(y, Op::Scale(a, c))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, c: ArrayD<T>) -> Var {
        assert_eq!(self.values[a.0].shape(), c.shape(), "mul_const shapes");
        let y = &self.values[a.0] * &c;
        self.push(y, Op::MulConst(a, c))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let v = &self.values[x.0];
        let (c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even sizes");
        let quarter = cst::<T>(0.25);
        let y = ArrayD::from_shape_fn(IxDyn(&[c, h / 2, w / 2]), |i| {
            let (ci, y0, x0) = (i[0], 2 * i[1], 2 * i[2]);
            (v[[ci, y0, x0]] + v[[ci, y0, x0 + 1]] + v[[ci, y0 + 1, x0]] + v[[ci, y0 + 1, x0 + 1]]) * quarter
        });
        self.push(y, Op::AvgPool2(x))
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let v = &self.values[x.0];
        let (c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        let y = ArrayD::from_shape_fn(IxDyn(&[c, 2 * h, 2 * w]), |i| v[[i[0], i[1] / 2, i[2] / 2]]);
        self.push(y, Op::Upsample2(x))
    }

    /// Concatenation along the leading (channel) axis.
    pub fn concat(&mut self, xs: &[Var]) -> Var {
        let views: Vec<_> = xs.iter().map(|v| self.values[v.0].view()).collect();
        let y = ndarray::concatenate(Axis(0), &views).expect("concat shapes");
        let y = y.as_standard_layout().into_owned();
        self.push(y, Op::Concat(xs.to_vec()))
    }

    /// Channels `start..start + len` of `x`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let y = self.values[x.0]
            .slice_axis(Axis(0), ndarray::Slice::from(start..start + len))
            .as_standard_layout()
            .into_owned();
        self.push(y, Op::Slice { x, start, len })
    }

    /// `sum(mask * (x - target)^2)`.
    pub fn sq_err(&mut self, x: Var, target: ArrayD<T>, mask: Option<ArrayD<T>>) -> Var {
        let v = &self.values[x.0];
        assert_eq!(v.shape(), target.shape(), "sq_err shapes");
        let total = match &mask {
            Some(m) => ndarray::Zip::from(v).and(&target).and(m).fold(T::zero(), |acc, &a, &t, &m| {
                acc + m * (a - t) * (a - t)
            }),
            None => ndarray::Zip::from(v).and(&target).fold(T::zero(), |acc, &a, &t| acc + (a - t) * (a - t)),
        };
        self.push(ArrayD::from_elem(IxDyn(&[]), total), Op::SqErr { x, target, mask })
    }

    /// `sum_i |x[at_i] - targets_i|` for a `[C, H, W]` tensor.
    pub fn abs_err_at(&mut self, x: Var, at: Vec<[usize; 3]>, targets: Vec<T>) -> Var {
        assert_eq!(at.len(), targets.len());
        let v = &self.values[x.0];
        let total = at.iter().zip(&targets).fold(T::zero(), |acc, (i, &t)| acc + (v[&i[..]] - t).abs());
        self.push(ArrayD::from_elem(IxDyn(&[]), total), Op::AbsErrAt { x, at, targets })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.values[x.0].sum();
        self.push(ArrayD::from_elem(IxDyn(&[]), total), Op::Sum(x))
    }

    /// Sum of scalar nodes.
    pub fn add_all(&mut self, xs: &[Var]) -> Var {
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = self.add(acc, x);
        }
        acc
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Grads<T> {
        assert_eq!(self.values[root.0].len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<ArrayD<T>>> = vec![None; self.values.len()];
        grads[root.0] = Some(ArrayD::from_elem(self.values[root.0].raw_dim(), T::one()));
        let acc = |grads: &mut Vec<Option<ArrayD<T>>>, v: Var, g: ArrayD<T>| match &mut grads[v.0] {
            Some(e) => *e += &g,
            slot @ None => *slot = Some(g),
        };
        for i in (0..=root.0).rev() {
            if matches!(self.ops[i], Op::Leaf | Op::Param(_)) {
                continue;
            }
            // intermediate gradients are dropped once propagated
            let Some(g) = grads[i].take() else { continue };
            match &self.ops[i] {
                Op::Leaf | Op::Param(_) => unreachable!(),
                Op::Conv2d { x, w, b, k, cols } => {
                    let ws = self.values[w.0].shape();
                    let (o, c) = (ws[0], ws[1]);
                    let (h, wd) = (g.shape()[1], g.shape()[2]);
                    let gy = view2(&g, o, h * wd);
                    let dw = gy.dot(&cols.t());
                    acc(&mut grads, *w, into_dyn2(dw, ws));
                    acc(&mut grads, *b, gy.sum_axis(Axis(1)).into_dyn());
                    let w2 = view2(&self.values[w.0], o, c * k * k);
                    let dcols = w2.t().dot(&gy);
                    acc(&mut grads, *x, col2im(&dcols, c, h, wd, *k));
                }
                Op::Linear { x, w, b } => {
                    let (bsz, f) = (self.values[x.0].shape()[0], self.values[x.0].shape()[1]);
                    let o = self.values[w.0].shape()[1];
                    let gy = view2(&g, bsz, o);
                    let xv = view2(&self.values[x.0], bsz, f);
                    let wv = view2(&self.values[w.0], f, o);
                    acc(&mut grads, *x, into_dyn2(gy.dot(&wv.t()), &[bsz, f]));
                    acc(&mut grads, *w, into_dyn2(xv.t().dot(&gy), &[f, o]));
                    acc(&mut grads, *b, gy.sum_axis(Axis(0)).into_dyn());
                }
                Op::Relu(x) => {
                    let mut d = g;
                    d.zip_mut_with(&self.values[i], |d, &y| {
                        if y <= T::zero() {
                            *d = T::zero()
                        }
                    });
                    acc(&mut grads, *x, d);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g.mapv(|v| v * *c)),
                Op::MulConst(a, c) => acc(&mut grads, *a, g * c),
                Op::AvgPool2(x) => {
                    let s = self.values[x.0].shape();
                    let quarter = cst::<T>(0.25);
                    let d = ArrayD::from_shape_fn(IxDyn(s), |j| g[[j[0], j[1] / 2, j[2] / 2]] * quarter);
                    acc(&mut grads, *x, d);
                }
                Op::Upsample2(x) => {
                    let s = self.values[x.0].shape();
                    let d = ArrayD::from_shape_fn(IxDyn(s), |j| {
                        let (c, y0, x0) = (j[0], 2 * j[1], 2 * j[2]);
                        g[[c, y0, x0]] + g[[c, y0, x0 + 1]] + g[[c, y0 + 1, x0]] + g[[c, y0 + 1, x0 + 1]]
                    });
                    acc(&mut grads, *x, d);
                }
                Op::Concat(xs) => {
                    let mut start = 0;
                    for x in xs {
                        let n = self.values[x.0].shape()[0];
                        let part = g.slice_axis(Axis(0), ndarray::Slice::from(start..start + n)).to_owned();
                        acc(&mut grads, *x, part);
                        start += n;
                    }
                }
                Op::Slice { x, start, len } => {
                    let mut d = ArrayD::zeros(self.values[x.0].raw_dim());
                    d.slice_axis_mut(Axis(0), ndarray::Slice::from(*start..*start + *len)).assign(&g);
                    acc(&mut grads, *x, d);
                }
                Op::SqErr { x, target, mask } => {
                    let two_g = g.iter().copied().next().expect("scalar") * cst(2.0);
                    let mut d = &self.values[x.0] - target;
                    match mask {
                        Some(m) => d.zip_mut_with(m, |d, &m| *d = *d * m * two_g),
                        None => d.mapv_inplace(|d| d * two_g),
                    }
                    acc(&mut grads, *x, d);
                }
                Op::AbsErrAt { x, at, targets } => {
                    let gs = g.iter().copied().next().expect("scalar");
                    let v = &self.values[x.0];
                    let mut d = ArrayD::zeros(v.raw_dim());
                    for (j, &t) in at.iter().zip(targets) {
                        let r = v[&j[..]] - t;
                        let s = if r > T::zero() {
                            T::one()
                        } else if r < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        d[&j[..]] = d[&j[..]] + s * gs;
                    }
                    acc(&mut grads, *x, d);
                }
                Op::Sum(x) => {
                    let gs = g.iter().copied().next().expect("scalar");
                    acc(&mut grads, *x, ArrayD::from_elem(self.values[x.0].raw_dim(), gs));
                }
            }
        }
        Grads { grads }
    }

    /// Adds parameter gradients from `grads` into `params.grads`.
    pub fn accumulate(&self, grads: &Grads<T>, params: &mut ParamSet<T>) {
        for (i, op) in self.ops.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (op, &grads.grads[i]) {
                params.grads[*id] += g;
            }
        }
    }
}
