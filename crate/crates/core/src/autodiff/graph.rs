use super::kernels::{axpy, matmul, matmul_nt, matmul_tn};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    RepeatRows(Var, usize),
    Scale(Var, T),
    AddScalar(Var, T),
    Ln(Var),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm(Var, T),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    SumAll(Var),
    MeanAll(Var),
    SumRows(Var),
    GroupMatMulNt(Var, Var, usize),
    GroupMatMul(Var, Var, usize),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A tape of operations recorded in execution order; that order is a valid
/// topological order for the backward sweep.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every node that needed one.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn shape_err(op: &str, a: [usize; 2], b: [usize; 2]) -> Error {
    Error::ShapeMismatch(format!("{op}: {}x{} vs {}x{}", a[0], a[1], b[0], b[1]))
}

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

    fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, name: &str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let out = matmul(self.value(a), self.value(b));
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.push("transpose", out, Op::Transpose(a), &[a])
    }

    fn zip(&mut self, name: &str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(name, sa, sb));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_vec(sa[0], sa[1], data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("add", a, b, |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("sub", a, b, |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("mul", a, b, |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    fn row_broadcast(&mut self, name: &str, a: Var, row: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr[0] != 1 || sr[1] != sa[1] {
            return Err(shape_err(name, sa, sr));
        }
        let mut out = self.value(a).clone();
        let r = self.value(row).data();
        for i in 0..sa[0] {
            for (o, &b) in out.row_mut(i).iter_mut().zip(r) {
                *o = f(*o, b);
            }
        }
        Ok(out)
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast("add_row", a, row, |x, y| x + y)?;
        self.push("add_row", out, Op::AddRow(a, row), &[a, row])
    }

    /// Multiplies every row of `a` elementwise by a `1 x c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast("mul_row", a, row, |x, y| x * y)?;
        self.push("mul_row", out, Op::MulRow(a, row), &[a, row])
    }

    /// Repeats each row `times` times consecutively: `r x c -> (r*times) x c`.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return Err(Error::InvalidArgument("repeat_rows by zero".into()));
        }
        let src = self.value(a);
        let mut out = Tensor::zeros(src.rows() * times, src.cols());
        for i in 0..src.rows() {
            for t in 0..times {
                out.row_mut(i * times + t).copy_from_slice(src.row(i));
            }
        }
        self.push("repeat_rows", out, Op::RepeatRows(a, times), &[a])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        self.push("scale", out, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).map(|x| x + s);
        self.push("add_scalar", out, Op::AddScalar(a, s), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.ln());
        self.push("ln", out, Op::Ln(a), &[a])
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let (c, k) = (T::lit(GELU_C), T::lit(GELU_A));
        let half = T::lit(0.5);
        let out = self
            .value(a)
            .map(|x| half * x * (T::one() + tanh(c * (x + k * x * x * x))));
        self.push("gelu", out, Op::Gelu(a), &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            softmax_in_place(out.row_mut(i));
        }
        self.push("softmax", out, Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        self.push("log_softmax", out, Op::LogSoftmax(a), &[a])
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm(&mut self, a: Var, eps: T) -> Result<Var> {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            normalize_row(out.row_mut(i), eps);
        }
        self.push("layer_norm", out, Op::LayerNorm(a, eps), &[a])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[0] != sb[0] {
            return Err(shape_err("concat_cols", sa, sb));
        }
        let mut out = Tensor::zeros(sa[0], sa[1] + sb[1]);
        for i in 0..sa[0] {
            let row = out.row_mut(i);
            row[..sa[1]].copy_from_slice(self.nodes[a.0].value.row(i));
            row[sa[1]..].copy_from_slice(self.nodes[b.0].value.row(i));
        }
        self.push("concat_cols", out, Op::ConcatCols(a, b), &[a, b])
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let sa = self.shape(a);
        if start >= end || end > sa[1] {
            return Err(Error::ShapeMismatch(format!(
                "slice_cols {start}..{end} of {} columns",
                sa[1]
            )));
        }
        let src = self.value(a);
        let mut out = Tensor::zeros(sa[0], end - start);
        for i in 0..sa[0] {
            out.row_mut(i).copy_from_slice(&src.row(i)[start..end]);
        }
        self.push("slice_cols", out, Op::SliceCols(a, start), &[a])
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let sa = self.shape(a);
        if rows.is_empty() || rows.iter().any(|&r| r >= sa[0]) {
            return Err(Error::ShapeMismatch(format!(
                "gather_rows out of range for {} rows",
                sa[0]
            )));
        }
        let src = self.value(a);
        let mut out = Tensor::zeros(rows.len(), sa[1]);
        for (o, &r) in rows.iter().enumerate() {
            out.row_mut(o).copy_from_slice(src.row(r));
        }
        self.push("gather_rows", out, Op::GatherRows(a, rows.to_vec()), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s: T = t.data().iter().copied().sum();
        let out = Tensor::scalar(s / T::from_usize(t.len()).unwrap());
        self.push("mean", out, Op::MeanAll(a), &[a])
    }

    /// Column sums as a `1 x c` row.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let mut out = Tensor::zeros(1, t.cols());
        for i in 0..t.rows() {
            axpy(T::one(), t.row(i), out.row_mut(0));
        }
        self.push("sum_rows", out, Op::SumRows(a), &[a])
    }

    /// Per-group `a_g b_gᵀ` over consecutive row blocks of size `group`:
    /// `(G*g) x k` and `(G*g) x k` give `(G*g) x g`.
    pub fn group_matmul_nt(&mut self, a: Var, b: Var, group: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb || group == 0 || sa[0] % group != 0 {
            return Err(shape_err("group_matmul_nt", sa, sb));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Tensor::zeros(sa[0], group);
        for blk in (0..sa[0]).step_by(group) {
            for i in 0..group {
                for j in 0..group {
                    out.set(blk + i, j, dot(av.row(blk + i), bv.row(blk + j)));
                }
            }
        }
        self.push("group_matmul_nt", out, Op::GroupMatMulNt(a, b, group), &[a, b])
    }

    /// Per-group `p_g v_g`: `(G*g) x g` and `(G*g) x c` give `(G*g) x c`.
    pub fn group_matmul(&mut self, p: Var, v: Var, group: usize) -> Result<Var> {
        let (sp, sv) = (self.shape(p), self.shape(v));
        if sp[0] != sv[0] || sp[1] != group || group == 0 || sp[0] % group != 0 {
            return Err(shape_err("group_matmul", sp, sv));
        }
        let (pv, vv) = (self.value(p), self.value(v));
        let mut out = Tensor::zeros(sv[0], sv[1]);
        for blk in (0..sp[0]).step_by(group) {
            for i in 0..group {
                for j in 0..group {
                    let w = pv.get(blk + i, j);
                    axpy(w, vv.row(blk + j), out.row_mut(blk + i));
                }
            }
        }
        self.push("group_matmul", out, Op::GroupMatMul(p, v, group), &[p, v])
    }

    /// Reverse sweep from a `1 x 1` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.shape(loss) != [1, 1] {
            return Err(Error::ShapeMismatch("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].needs_grad {
                    self.accumulate(grads, *a, matmul_nt(g, bv));
                }
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, *b, matmul_tn(av, g));
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, elementwise(g, bv, |x, y| x * y));
                self.accumulate(grads, *b, elementwise(g, av, |x, y| x * y));
            }
            Op::AddRow(a, r) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *r, column_sums(g));
            }
            Op::MulRow(a, r) => {
                let (av, rv) = (self.value(*a), self.value(*r));
                let mut ga = g.clone();
                for i in 0..ga.rows() {
                    for (x, &s) in ga.row_mut(i).iter_mut().zip(rv.data()) {
                        *x *= s;
                    }
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *r, column_sums(&elementwise(g, av, |x, y| x * y)));
            }
            Op::RepeatRows(a, times) => {
                let src = self.value(*a);
                let mut ga = Tensor::zeros(src.rows(), src.cols());
                for i in 0..src.rows() {
                    for t in 0..*times {
                        axpy(T::one(), g.row(i * times + t), ga.row_mut(i));
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|x| x * s));
            }
            Op::AddScalar(a, _) => self.accumulate(grads, *a, g.clone()),
            Op::Ln(a) => self.accumulate(grads, *a, elementwise(g, self.value(*a), |x, y| x / y)),
            Op::Gelu(a) => {
                let (c, k) = (T::lit(GELU_C), T::lit(GELU_A));
                let half = T::lit(0.5);
                let three = T::lit(3.0);
                let d = self.value(*a).map(|x| {
                    let t = tanh(c * (x + k * x * x * x));
                    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
                });
                self.accumulate(grads, *a, elementwise(g, &d, |x, y| x * y));
            }
            Op::Softmax(a) => {
                let mut ga = g.clone();
                for i in 0..ga.rows() {
                    let y = out.row(i);
                    let s: T = g.row(i).iter().zip(y).map(|(&dy, &yy)| dy * yy).sum();
                    for (gx, &yy) in ga.row_mut(i).iter_mut().zip(y) {
                        *gx = yy * (*gx - s);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LogSoftmax(a) => {
                let mut ga = g.clone();
                for i in 0..ga.rows() {
                    let s: T = g.row(i).iter().copied().sum();
                    for (gx, &y) in ga.row_mut(i).iter_mut().zip(out.row(i)) {
                        *gx -= y.exp() * s;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LayerNorm(a, eps) => {
                let x = self.value(*a);
                let n = T::from_usize(x.cols()).unwrap();
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    let row = x.row(i);
                    let mean = row.iter().copied().sum::<T>() / n;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                    let inv = T::one() / (var + *eps).sqrt();
                    let y = out.row(i);
                    let dy = g.row(i);
                    let mean_dy = dy.iter().copied().sum::<T>() / n;
                    let mean_dyy = dy.iter().zip(y).map(|(&a, &b)| a * b).sum::<T>() / n;
                    for ((gx, &d), &yy) in ga.row_mut(i).iter_mut().zip(dy).zip(y) {
                        *gx = inv * (d - mean_dy - yy * mean_dyy);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.shape(*a)[1];
                let mut ga = Tensor::zeros(g.rows(), ca);
                let mut gb = Tensor::zeros(g.rows(), g.cols() - ca);
                for i in 0..g.rows() {
                    ga.row_mut(i).copy_from_slice(&g.row(i)[..ca]);
                    gb.row_mut(i).copy_from_slice(&g.row(i)[ca..]);
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::SliceCols(a, start) => {
                let sa = self.shape(*a);
                let mut ga = Tensor::zeros(sa[0], sa[1]);
                for i in 0..sa[0] {
                    ga.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::GatherRows(a, rows) => {
                let sa = self.shape(*a);
                let mut ga = Tensor::zeros(sa[0], sa[1]);
                for (o, &r) in rows.iter().enumerate() {
                    axpy(T::one(), g.row(o), ga.row_mut(r));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let sa = self.shape(*a);
                self.accumulate(grads, *a, Tensor::full(sa[0], sa[1], g.item()));
            }
            Op::MeanAll(a) => {
                let sa = self.shape(*a);
                let v = g.item() / T::from_usize(sa[0] * sa[1]).unwrap();
                self.accumulate(grads, *a, Tensor::full(sa[0], sa[1], v));
            }
            Op::SumRows(a) => {
                let sa = self.shape(*a);
                let mut ga = Tensor::zeros(sa[0], sa[1]);
                for i in 0..sa[0] {
                    ga.row_mut(i).copy_from_slice(g.row(0));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::GroupMatMulNt(a, b, group) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                let mut gb = Tensor::zeros(bv.rows(), bv.cols());
                for blk in (0..av.rows()).step_by(*group) {
                    for i in 0..*group {
                        for j in 0..*group {
                            let w = g.get(blk + i, j);
                            axpy(w, bv.row(blk + j), ga.row_mut(blk + i));
                            axpy(w, av.row(blk + i), gb.row_mut(blk + j));
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::GroupMatMul(p, v, group) => {
                let (pv, vv) = (self.value(*p), self.value(*v));
                let mut gp = Tensor::zeros(pv.rows(), pv.cols());
                let mut gv = Tensor::zeros(vv.rows(), vv.cols());
                for blk in (0..pv.rows()).step_by(*group) {
                    for i in 0..*group {
                        for j in 0..*group {
                            gp.set(blk + i, j, dot(g.row(blk + i), vv.row(blk + j)));
                            axpy(pv.get(blk + i, j), g.row(blk + i), gv.row_mut(blk + j));
                        }
                    }
                }
                self.accumulate(grads, *p, gp);
                self.accumulate(grads, *v, gv);
            }
        }
        Ok(())
    }
}

/// `tanh` through a single `exp`; several times cheaper than the libm call.
#[inline]
fn tanh<T: Real>(x: T) -> T {
    let two = T::lit(2.0);
    T::one() - two / ((two * x).exp() + T::one())
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn elementwise<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

fn column_sums<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(1, g.cols());
    for i in 0..g.rows() {
        axpy(T::one(), g.row(i), out.row_mut(0));
    }
    out
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

fn normalize_row<T: Real>(row: &mut [T], eps: T) {
    let n = T::from_usize(row.len()).unwrap();
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let inv = T::one() / (var + eps).sqrt();
    row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Checks d(sum(w ⊙ f(inputs)))/d(inputs) against central differences.
    fn check<F>(inputs: Vec<Tensor<f64>>, f: F)
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let build = |ins: &[Tensor<f64>], weights: Option<&Tensor<f64>>| -> (Graph<f64>, Vec<Var>, Var, [usize; 2]) {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
            let out = f(&mut g, &vars).unwrap();
            let shape = g.value(out).shape();
            let w = weights.cloned().unwrap_or_else(|| Tensor::zeros(shape[0], shape[1]));
            let wv = g.constant(w);
            let prod = g.mul(out, wv).unwrap();
            let loss = g.sum(prod).unwrap();
            (g, vars, loss, shape)
        };
        let (_, _, _, out_shape) = build(&inputs, None);
        let weights = random(&mut rng, out_shape[0], out_shape[1]);
        let (g, vars, loss, _) = build(&inputs, Some(&weights));
        let grads = g.backward(loss).unwrap();
        let h = 1e-4;
        for (k, v) in vars.iter().enumerate() {
            let analytic = grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(inputs[k].rows(), inputs[k].cols()));
            for e in 0..inputs[k].len() {
                let eval = |delta: f64| {
                    let mut ins = inputs.clone();
                    ins[k].data_mut()[e] += delta;
                    let (g, _, loss, _) = build(&ins, Some(&weights));
                    g.value(loss).item()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[e];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                assert!(err < 1e-5, "input {k} elem {e}: analytic {a} numeric {numeric}");
            }
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    #[test]
    fn grad_matmul_and_transpose() {
        let mut r = rng();
        check(vec![random(&mut r, 3, 4), random(&mut r, 4, 2)], |g, v| {
            g.matmul(v[0], v[1])
        });
        check(vec![random(&mut r, 3, 4)], |g, v| g.transpose(v[0]));
    }

    #[test]
    fn grad_elementwise() {
        let mut r = rng();
        let (a, b) = (random(&mut r, 3, 4), random(&mut r, 3, 4));
        check(vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
        check(vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
        check(vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
        check(vec![a.clone()], |g, v| g.scale(v[0], 1.7));
        check(vec![a.clone()], |g, v| g.add_scalar(v[0], 0.3));
        check(vec![a.clone()], |g, v| g.gelu(v[0]));
        check(vec![a.map(|x| x.abs() + 0.5)], |g, v| g.ln(v[0]));
    }

    #[test]
    fn grad_broadcasts() {
        let mut r = rng();
        let (a, row) = (random(&mut r, 4, 3), random(&mut r, 1, 3));
        check(vec![a.clone(), row.clone()], |g, v| g.add_row(v[0], v[1]));
        check(vec![a.clone(), row.clone()], |g, v| g.mul_row(v[0], v[1]));
        check(vec![a.clone()], |g, v| g.repeat_rows(v[0], 3));
        check(vec![a.clone()], |g, v| g.sum_rows(v[0]));
    }

    #[test]
    fn grad_normalizations() {
        let mut r = rng();
        let a = random(&mut r, 4, 5);
        check(vec![a.clone()], |g, v| g.softmax(v[0]));
        check(vec![a.clone()], |g, v| g.log_softmax(v[0]));
        check(vec![a.clone()], |g, v| g.layer_norm(v[0], 1e-5));
    }

    #[test]
    fn grad_structural() {
        let mut r = rng();
        let (a, b) = (random(&mut r, 4, 3), random(&mut r, 4, 2));
        check(vec![a.clone(), b.clone()], |g, v| g.concat_cols(v[0], v[1]));
        check(vec![a.clone()], |g, v| g.slice_cols(v[0], 1, 3));
        check(vec![a.clone()], |g, v| g.gather_rows(v[0], &[2, 0, 2]));
        check(vec![a.clone()], |g, v| g.sum(v[0]));
        check(vec![a.clone()], |g, v| g.mean(v[0]));
    }

    #[test]
    fn grad_grouped_attention_products() {
        let mut r = rng();
        let (a, b) = (random(&mut r, 6, 4), random(&mut r, 6, 4));
        check(vec![a.clone(), b.clone()], |g, v| g.group_matmul_nt(v[0], v[1], 3));
        let (p, vv) = (random(&mut r, 6, 3), random(&mut r, 6, 5));
        check(vec![p, vv], |g, v| g.group_matmul(v[0], v[1], 3));
    }

    #[test]
    fn identity_matmul_passes_gradient_through() {
        let mut r = rng();
        let a = random(&mut r, 3, 3);
        let mut eye = Tensor::zeros(3, 3);
        for i in 0..3 {
            eye.set(i, i, 1.0);
        }
        let mut g = Graph::new();
        let i = g.constant(eye);
        let av = g.param(a.clone());
        let out = g.matmul(i, av).unwrap();
        assert_eq!(g.value(out), &a);
        let upstream = random(&mut r, 3, 3);
        let w = g.constant(upstream.clone());
        let prod = g.mul(out, w).unwrap();
        let loss = g.sum(prod).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(av).unwrap(), &upstream);
        assert!(grads.get(i).is_none());
    }

    #[test]
    fn softmax_of_constant_is_uniform_with_zero_sum_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::<f64>::full(1, 4, 0.7));
        let s = g.softmax(x).unwrap();
        assert!(g.value(s).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let total = g.sum(s).unwrap();
        let grads = g.backward(total).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn chain_matches_product_of_jacobians() {
        // loss = sum(scale(x ⊙ x, 3) + 1) => d/dx = 6x
        let x0 = Tensor::from_vec(1, 3, vec![0.5, -2.0, 1.5]).unwrap();
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let sq = g.mul(x, x).unwrap();
        let sc = g.scale(sq, 3.0).unwrap();
        let sh = g.add_scalar(sc, 1.0).unwrap();
        let loss = g.sum(sh).unwrap();
        assert_eq!(g.value(loss).item(), 3.0 * (0.25 + 4.0 + 2.25) + 3.0);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, -12.0, 9.0]);
    }

    #[test]
    fn shape_and_finiteness_errors() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::zeros(2, 3));
        let b = g.param(Tensor::zeros(2, 3));
        assert!(g.matmul(a, b).is_err());
        assert!(g.slice_cols(a, 2, 2).is_err());
        assert!(g.gather_rows(a, &[5]).is_err());
        let z = g.param(Tensor::zeros(1, 1));
        assert!(matches!(g.ln(z), Err(Error::NonFinite(_))));
        assert!(g.backward(a).is_err());
    }
}
