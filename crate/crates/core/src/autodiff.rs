//! Minimal tape-based reverse-mode differentiation over dense matrices.
//!
//! Every node holds a 2-D `f64` array; vectors are `1×n` or `n×1`. Binary
//! elementwise ops broadcast a size-1 axis against the other operand, and
//! the backward pass sums gradients back over broadcast axes.
//!
//! ```
//! use hyperedit::autodiff::Tape;
//! use ndarray::array;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(array![[3.0]]);
//! let y = tape.mul(x, x);
//! let grads = tape.backward(y);
//! assert_eq!(grads.get(x).unwrap()[[0, 0]], 6.0);
//! ```

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};

use crate::hyperbolic::{project_coords, Curvature};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Tanh(Var),
    Sigmoid(Var),
    Log(Var),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    LogSoftmaxRows(Var),
    ProjectRows(Var),
}

#[derive(Default)]
pub struct Tape {
    values: Vec<Array2<f64>>,
    ops: Vec<Op>,
}

/// Gradients of one scalar output with respect to every node.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads[v.0].take()
    }
}

fn reduce_to(grad: Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let mut g = grad;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("incompatible broadcast shapes {a:?} and {b:?}")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

fn expand(v: &Array2<f64>, shape: (usize, usize)) -> ArrayView2<'_, f64> {
    v.broadcast(shape).expect("broadcastable")
}

fn zip_with(a: &Array2<f64>, b: &Array2<f64>, f: impl Fn(f64, f64) -> f64) -> Array2<f64> {
    let shape = broadcast_shape(a.dim(), b.dim());
    let mut out = Array2::zeros(shape);
    Zip::from(&mut out)
        .and(&expand(a, shape))
        .and(&expand(b, shape))
        .for_each(|o, &x, &y| *o = f(x, y));
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    /// Inputs, parameters and constants all enter as leaves.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.leaf(Array2::from_elem((1, 1), x))
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.values[v.0]
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.values[v.0][[0, 0]]
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = zip_with(&self.values[a.0], &self.values[b.0], |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = zip_with(&self.values[a.0], &self.values[b.0], |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = zip_with(&self.values[a.0], &self.values[b.0], |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = zip_with(&self.values[a.0], &self.values[b.0], |x, y| x / y);
        self.push(v, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.values[a.0].mapv(|x| x + s);
        self.push(v, Op::AddScalar(a))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.values[a.0].mapv(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.values[a.0].dot(&self.values[b.0]);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.values[a.0].t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, shape: (usize, usize)) -> Var {
        let src = &self.values[a.0];
        assert_eq!(src.len(), shape.0 * shape.1, "reshape changes element count");
        let data: Vec<f64> = src.iter().copied().collect();
        let v = Array2::from_shape_vec(shape, data).expect("shape checked");
        self.push(v, Op::Reshape(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(crate::hyperbolic::sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(f64::ln);
        self.push(v, Op::Log(a))
    }

    /// Sum of all entries, as a `1×1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.values[a.0].sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.values[a.0].len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `m×n → m×1`, summing across each row.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.values[a.0].sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::SumRows(a))
    }

    /// `m×n → 1×n`, summing down each column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.values[a.0].sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(v, Op::SumCols(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.values[p.0].view()).collect();
        let v = concatenate(Axis(1), &views).expect("row counts agree");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.values[p.0].view()).collect();
        let v = concatenate(Axis(0), &views).expect("column counts agree");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    /// `out[i] = a[index[i]]`.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Var {
        let src = &self.values[a.0];
        let mut v = Array2::zeros((index.len(), src.ncols()));
        for (i, &j) in index.iter().enumerate() {
            v.row_mut(i).assign(&src.row(j));
        }
        self.push(v, Op::GatherRows(a, index.to_vec()))
    }

    /// `out[index[i]] += a[i]` into `rows` output rows, accumulated in input order.
    pub fn scatter_add_rows(&mut self, a: Var, index: &[usize], rows: usize) -> Var {
        let src = &self.values[a.0];
        assert_eq!(src.nrows(), index.len());
        let mut v = Array2::zeros((rows, src.ncols()));
        for (i, &j) in index.iter().enumerate() {
            let mut dst = v.row_mut(j);
            dst += &src.row(i);
        }
        self.push(v, Op::ScatterAddRows(a, index.to_vec()))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.values[a.0].clone();
        for mut row in v.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        self.push(v, Op::LogSoftmaxRows(a))
    }

    /// Row-wise projection onto the eps-interior of the ball of curvature `c`.
    pub fn project_rows(&mut self, a: Var, c: Curvature) -> Var {
        let mut v = self.values[a.0].clone();
        for mut row in v.rows_mut() {
            let src: Vec<f64> = row.iter().copied().collect();
            let p = project_coords(&src, c);
            for (dst, x) in row.iter_mut().zip(p) {
                *dst = x;
            }
        }
        self.push(v, Op::ProjectRows(a))
    }

    /// Reverse sweep from a scalar (`1×1`) output.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.values[out.0].dim(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.values.len()];
        grads[out.0] = Some(Array2::from_elem((1, 1), 1.0));

        fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(acc) => *acc += &g,
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let shape_of = |v: Var| self.values[v.0].dim();
            match &self.ops[idx] {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, reduce_to(g.clone(), shape_of(*a)));
                    accumulate(&mut grads, *b, reduce_to(g, shape_of(*b)));
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, reduce_to(g.clone(), shape_of(*a)));
                    accumulate(&mut grads, *b, reduce_to(-g, shape_of(*b)));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.values[a.0], &self.values[b.0]);
                    let ga = zip_with(&g, vb, |x, y| x * y);
                    let gb = zip_with(&g, va, |x, y| x * y);
                    accumulate(&mut grads, *a, reduce_to(ga, shape_of(*a)));
                    accumulate(&mut grads, *b, reduce_to(gb, shape_of(*b)));
                }
                Op::Div(a, b) => {
                    let (va, vb) = (&self.values[a.0], &self.values[b.0]);
                    let ga = zip_with(&g, vb, |x, y| x / y);
                    let ratio = zip_with(va, vb, |x, y| x / (y * y));
                    let gb = zip_with(&g, &ratio, |x, r| -x * r);
                    accumulate(&mut grads, *a, reduce_to(ga, shape_of(*a)));
                    accumulate(&mut grads, *b, reduce_to(gb, shape_of(*b)));
                }
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::Scale(a, s) => accumulate(&mut grads, *a, g * *s),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.values[b.0].t());
                    let gb = self.values[a.0].t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.t().to_owned()),
                Op::Reshape(a) => {
                    let data: Vec<f64> = g.iter().copied().collect();
                    let back = Array2::from_shape_vec(shape_of(*a), data).expect("same size");
                    accumulate(&mut grads, *a, back);
                }
                Op::Tanh(a) => {
                    let y = &self.values[idx];
                    let ga = zip_with(&g, y, |x, t| x * (1.0 - t * t));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let y = &self.values[idx];
                    let ga = zip_with(&g, y, |x, s| x * s * (1.0 - s));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Log(a) => {
                    let ga = zip_with(&g, &self.values[a.0], |x, v| x / v);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let ga = Array2::from_elem(shape_of(*a), g[[0, 0]]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::SumRows(a) | Op::SumCols(a) => {
                    let ga = expand(&g, shape_of(*a)).to_owned();
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.values[p.0].ncols();
                        accumulate(&mut grads, *p, g.slice(s![.., offset..offset + w]).to_owned());
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let h = self.values[p.0].nrows();
                        accumulate(&mut grads, *p, g.slice(s![offset..offset + h, ..]).to_owned());
                        offset += h;
                    }
                }
                Op::GatherRows(a, index) => {
                    let mut ga = Array2::zeros(shape_of(*a));
                    for (i, &j) in index.iter().enumerate() {
                        let mut dst = ga.row_mut(j);
                        dst += &g.row(i);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ScatterAddRows(a, index) => {
                    let mut ga = Array2::zeros(shape_of(*a));
                    for (i, &j) in index.iter().enumerate() {
                        ga.row_mut(i).assign(&g.row(j));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &self.values[idx];
                    let mut ga = g.clone();
                    for ((mut grow, yrow), orig) in ga.rows_mut().into_iter().zip(y.rows()).zip(g.rows()) {
                        let total: f64 = orig.sum();
                        Zip::from(&mut grow).and(&yrow).for_each(|gx, &ly| *gx -= ly.exp() * total);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ProjectRows(a) => {
                    let x = &self.values[a.0];
                    let y = &self.values[idx];
                    let mut ga = g.clone();
                    for ((mut grow, xrow), yrow) in ga.rows_mut().into_iter().zip(x.rows()).zip(y.rows()) {
                        if xrow == yrow {
                            continue;
                        }
                        // y = s·x with s = limit/‖x‖: J = s(I - x̂x̂ᵀ)
                        let xn = xrow.dot(&xrow).sqrt();
                        let s = yrow.dot(&yrow).sqrt() / xn;
                        let proj = grow.dot(&xrow) / (xn * xn);
                        Zip::from(&mut grow).and(&xrow).for_each(|gx, &xv| *gx = s * (*gx - proj * xv));
                    }
                    accumulate(&mut grads, *a, ga);
                }
            }
        }
        Gradients { grads }
    }
}

/// Row-wise Möbius addition `w_i ⊕_c Δ_i` recorded on the tape.
///
/// Returns the rows and the smallest denominator encountered so callers can
/// enforce the instability floor.
pub fn mobius_add_rows(tape: &mut Tape, w: Var, delta: Var, c: Curvature) -> (Var, f64) {
    let c = c.get();
    let wd_raw = tape.mul(w, delta);
    let wd = tape.sum_rows(wd_raw);
    let ww_raw = tape.mul(w, w);
    let w2 = tape.sum_rows(ww_raw);
    let dd_raw = tape.mul(delta, delta);
    let d2 = tape.sum_rows(dd_raw);

    let two_c_wd = tape.scale(wd, 2.0 * c);
    let c_d2 = tape.scale(d2, c);
    let coef_w_raw = tape.add(two_c_wd, c_d2);
    let coef_w = tape.add_scalar(coef_w_raw, 1.0);

    let neg_c_w2 = tape.scale(w2, -c);
    let coef_d = tape.add_scalar(neg_c_w2, 1.0);

    let w2d2 = tape.mul(w2, d2);
    let c2_w2d2 = tape.scale(w2d2, c * c);
    let den_raw = tape.add(two_c_wd, c2_w2d2);
    let den = tape.add_scalar(den_raw, 1.0);

    let left = tape.mul(w, coef_w);
    let right = tape.mul(delta, coef_d);
    let num = tape.add(left, right);
    let out = tape.div(num, den);
    let min_den = tape.value(den).iter().fold(f64::INFINITY, |m, &x| m.min(x.abs()));
    (out, min_den)
}
