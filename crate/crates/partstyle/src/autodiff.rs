//! Minimal tape-based reverse-mode differentiation over `Array2<f64>`.
//!
//! Every tensor in the differentiable pipeline is a 2-D matrix (scalars are
//! 1x1, images are (h*w)x3 row-major). A [`Tape`] records operations as they
//! execute; [`Tape::backward`] replays them in reverse and accumulates
//! gradients for every node. Domain-specific operations with hand-derived
//! adjoints (the rasterizer) plug in through [`CustomOp`].
//!
//! Invariant: an op's inputs always precede it on the tape, so a single
//! reverse sweep visits children before parents.

use ndarray::{Array2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// A differentiable operation with a hand-written adjoint.
///
/// `backward` receives the forward input values, the gradient flowing into the
/// op's output, and one accumulator per input to add each input's gradient
/// contribution into.
pub trait CustomOp {
    fn backward(
        &self,
        inputs: &[&Array2<f64>],
        output_grad: &Array2<f64>,
        input_grads: &mut [Array2<f64>],
    );
    /// Name used in panic messages.
    fn name(&self) -> &'static str {
        "custom"
    }
}

enum Op {
    Leaf,
    /// A · B
    MatMul(Var, Var),
    /// A · Bᵀ
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// matrix + row vector broadcast over rows
    AddRow(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    /// k·x + c
    Affine(Var, f64),
    /// elementwise product with a constant of the same shape
    MulConst(Var, Array2<f64>),
    /// e×1 → e×n by column repetition
    RepeatCol(Var),
    Sum(Var),
    Mean(Var),
    Sqrt(Var),
    GatherRows(Var, Vec<usize>),
    /// arbitrary element gather → K×1
    Select(Var, Vec<(usize, usize)>),
    /// each row divided by its Euclidean norm
    NormalizeRows(Var),
    /// average pixels over a grid of equal patches, optionally removing each
    /// cell's gray (per-channel-mean) component
    PatchPool {
        input: Var,
        width: usize,
        height: usize,
        grid_w: usize,
        grid_h: usize,
        center: bool,
    },
    /// fixed sparse linear resampling: out row i = Σ weight·input row
    Resample(Var, Vec<[(usize, f64); 4]>),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Records a computation for later reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, if any path reached it.
    pub fn of(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "expected a scalar node");
        val[(0, 0)]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.leaf(Array2::from_elem((1, 1), x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    /// matrix + bias row (1×n), broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let bias_val = self.value(bias);
        assert_eq!(bias_val.nrows(), 1, "bias must be a row vector");
        let v = self.value(a) + bias_val;
        self.push(v, Op::AddRow(a, bias))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid_scalar);
        self.push(v, Op::Sigmoid(a))
    }

    /// ln(1 + eˣ), computed overflow-safely.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v =
            self.value(a).mapv(|x| if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() });
        self.push(v, Op::Softplus(a))
    }

    /// k·x + c elementwise.
    pub fn affine(&mut self, a: Var, k: f64, c: f64) -> Var {
        let v = self.value(a).mapv(|x| k * x + c);
        self.push(v, Op::Affine(a, k))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 0.0)
    }

    pub fn mul_const(&mut self, a: Var, c: Array2<f64>) -> Var {
        assert_eq!(self.value(a).dim(), c.dim(), "mul_const shape mismatch");
        let v = self.value(a) * &c;
        self.push(v, Op::MulConst(a, c))
    }

    /// e×1 → e×n.
    pub fn repeat_col(&mut self, a: Var, n: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.ncols(), 1, "repeat_col expects a column vector");
        let mut v = Array2::zeros((src.nrows(), n));
        for (i, row) in v.rows_mut().into_iter().enumerate() {
            let x = src[(i, 0)];
            for e in row {
                *e = x;
            }
        }
        self.push(v, Op::RepeatCol(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let val = self.value(a);
        let v = Array2::from_elem((1, 1), val.sum() / val.len() as f64);
        self.push(v, Op::Mean(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let src = self.value(a);
        let mut v = Array2::zeros((rows.len(), src.ncols()));
        for (out, &r) in rows.iter().enumerate() {
            v.row_mut(out).assign(&src.row(r));
        }
        self.push(v, Op::GatherRows(a, rows))
    }

    /// Gather arbitrary elements into a K×1 column.
    pub fn select(&mut self, a: Var, coords: Vec<(usize, usize)>) -> Var {
        let src = self.value(a);
        let mut v = Array2::zeros((coords.len(), 1));
        for (out, &(r, c)) in coords.iter().enumerate() {
            v[(out, 0)] = src[(r, c)];
        }
        self.push(v, Op::Select(a, coords))
    }

    /// Each row divided by its Euclidean norm. Rows must be non-zero.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut v = src.clone();
        for mut row in v.rows_mut() {
            let n = row.dot(&row).sqrt();
            assert!(n > 0.0, "normalize_rows: zero-norm row");
            row.mapv_inplace(|x| x / n);
        }
        self.push(v, Op::NormalizeRows(a))
    }

    /// Average an (h·w)×c image over an equal-patch grid → (gh·gw)×c, cells in
    /// row-major grid order. With `center`, each cell's per-channel mean is
    /// subtracted (removes the gray component).
    pub fn patch_pool(
        &mut self,
        input: Var,
        width: usize,
        height: usize,
        grid_w: usize,
        grid_h: usize,
        center: bool,
    ) -> Var {
        let src = self.value(input);
        assert_eq!(src.nrows(), width * height, "patch_pool: image shape mismatch");
        assert!(
            width.is_multiple_of(grid_w) && height.is_multiple_of(grid_h),
            "patch_pool: grid must divide the image"
        );
        let c = src.ncols();
        let (pw, ph) = (width / grid_w, height / grid_h);
        let inv_n = 1.0 / (pw * ph) as f64;
        let mut v = Array2::zeros((grid_w * grid_h, c));
        for gy in 0..grid_h {
            for gx in 0..grid_w {
                let mut acc = vec![0.0; c];
                for py in 0..ph {
                    let y = gy * ph + py;
                    for px in 0..pw {
                        let row = src.row(y * width + gx * pw + px);
                        for (a, x) in acc.iter_mut().zip(row.iter()) {
                            *a += x;
                        }
                    }
                }
                let mut out = v.row_mut(gy * grid_w + gx);
                for (o, a) in out.iter_mut().zip(acc.iter()) {
                    *o = a * inv_n;
                }
                if center {
                    let m = out.sum() / c as f64;
                    out.mapv_inplace(|x| x - m);
                }
            }
        }
        self.push(v, Op::PatchPool { input, width, height, grid_w, grid_h, center })
    }

    /// Sparse fixed-weight resampling (bilinear taps): out row i is the
    /// weighted sum of up to four input rows.
    pub fn resample(&mut self, input: Var, taps: Vec<[(usize, f64); 4]>) -> Var {
        let src = self.value(input);
        let mut v = Array2::zeros((taps.len(), src.ncols()));
        for (i, tap) in taps.iter().enumerate() {
            let mut out = v.row_mut(i);
            for &(idx, w) in tap {
                if w != 0.0 {
                    out.scaled_add(w, &src.row(idx));
                }
            }
        }
        self.push(v, Op::Resample(input, taps))
    }

    /// Record a custom operation. `value` must be the op's forward output for
    /// the given inputs; the op's `backward` supplies the adjoint.
    pub fn custom(&mut self, inputs: Vec<Var>, op: Box<dyn CustomOp>, value: Array2<f64>) -> Var {
        self.push(value, Op::Custom { inputs, op })
    }

    /// Reverse sweep from `loss` (seeded with ones; normally a 1×1 scalar).
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones(self.nodes[loss.0].value.dim()));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let (earlier, _) = grads.split_at_mut(id);
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(&mut earlier[a.0], g.dot(&bv.t()));
                    acc(&mut earlier[b.0], av.t().dot(&g));
                }
                Op::MatMulNT(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(&mut earlier[a.0], g.dot(bv));
                    acc(&mut earlier[b.0], g.t().dot(av));
                }
                Op::Add(a, b) => {
                    acc(&mut earlier[a.0], g.clone());
                    acc(&mut earlier[b.0], g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut earlier[a.0], g.clone());
                    acc(&mut earlier[b.0], -&g);
                }
                Op::Mul(a, b) => {
                    if a == b {
                        // square: both factor slots are the same node
                        acc(&mut earlier[a.0], 2.0 * &g * self.value(*a));
                    } else {
                        acc(&mut earlier[a.0], &g * self.value(*b));
                        acc(&mut earlier[b.0], &g * self.value(*a));
                    }
                }
                Op::AddRow(a, bias) => {
                    acc(&mut earlier[a.0], g.clone());
                    let col_sum = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut earlier[bias.0], col_sum);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    acc(&mut earlier[a.0], &g * &y.mapv(|t| 1.0 - t * t));
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    acc(&mut earlier[a.0], &g * &y.mapv(|s| s * (1.0 - s)));
                }
                Op::Softplus(a) => {
                    let x = self.value(*a);
                    acc(&mut earlier[a.0], &g * &x.mapv(sigmoid_scalar));
                }
                Op::Affine(a, k) => {
                    acc(&mut earlier[a.0], *k * &g);
                }
                Op::MulConst(a, c) => {
                    acc(&mut earlier[a.0], &g * c);
                }
                Op::RepeatCol(a) => {
                    let col_sum = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut earlier[a.0], col_sum);
                }
                Op::Sum(a) => {
                    let gv = g[(0, 0)];
                    acc(&mut earlier[a.0], Array2::from_elem(self.value(*a).dim(), gv));
                }
                Op::Mean(a) => {
                    let src = self.value(*a);
                    let gv = g[(0, 0)] / src.len() as f64;
                    acc(&mut earlier[a.0], Array2::from_elem(src.dim(), gv));
                }
                Op::Sqrt(a) => {
                    let y = &node.value;
                    acc(&mut earlier[a.0], &g * &y.mapv(|s| 0.5 / s));
                }
                Op::GatherRows(a, rows) => {
                    let mut da = Array2::zeros(self.value(*a).dim());
                    for (out, &r) in rows.iter().enumerate() {
                        let mut dst = da.row_mut(r);
                        dst += &g.row(out);
                    }
                    acc(&mut earlier[a.0], da);
                }
                Op::Select(a, coords) => {
                    let mut da = Array2::zeros(self.value(*a).dim());
                    for (out, &(r, c)) in coords.iter().enumerate() {
                        da[(r, c)] += g[(out, 0)];
                    }
                    acc(&mut earlier[a.0], da);
                }
                Op::NormalizeRows(a) => {
                    let src = self.value(*a);
                    let y = &node.value;
                    let mut da = Array2::zeros(src.dim());
                    for i in 0..src.nrows() {
                        let n = src.row(i).dot(&src.row(i)).sqrt();
                        let yg = y.row(i).dot(&g.row(i));
                        let mut dst = da.row_mut(i);
                        for (k, d) in dst.iter_mut().enumerate() {
                            *d = (g[(i, k)] - y[(i, k)] * yg) / n;
                        }
                    }
                    acc(&mut earlier[a.0], da);
                }
                Op::PatchPool { input, width, height, grid_w, grid_h, center } => {
                    let c = g.ncols();
                    let (pw, ph) = (width / grid_w, height / grid_h);
                    let inv_n = 1.0 / (pw * ph) as f64;
                    let mut da = Array2::zeros(self.value(*input).dim());
                    for gy in 0..*grid_h {
                        for gx in 0..*grid_w {
                            let gr = g.row(gy * grid_w + gx);
                            let mut cell = gr.to_owned();
                            if *center {
                                let m = cell.sum() / c as f64;
                                cell.mapv_inplace(|x| x - m);
                            }
                            cell.mapv_inplace(|x| x * inv_n);
                            for py in 0..ph {
                                let y = gy * ph + py;
                                for px in 0..pw {
                                    let mut dst = da.row_mut(y * width + gx * pw + px);
                                    dst += &cell;
                                }
                            }
                        }
                    }
                    acc(&mut earlier[input.0], da);
                }
                Op::Resample(input, taps) => {
                    let mut da = Array2::zeros(self.value(*input).dim());
                    for (i, tap) in taps.iter().enumerate() {
                        let gr = g.row(i);
                        for &(idx, w) in tap {
                            if w != 0.0 {
                                let mut dst = da.row_mut(idx);
                                dst.scaled_add(w, &gr);
                            }
                        }
                    }
                    acc(&mut earlier[input.0], da);
                }
                Op::Custom { inputs, op } => {
                    let vals: Vec<&Array2<f64>> = inputs.iter().map(|v| self.value(*v)).collect();
                    let mut deltas: Vec<Array2<f64>> =
                        vals.iter().map(|v| Array2::zeros(v.dim())).collect();
                    op.backward(&vals, &g, &mut deltas);
                    for (v, d) in inputs.iter().zip(deltas) {
                        acc(&mut earlier[v.0], d);
                    }
                }
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }
}

fn acc(slot: &mut Option<Array2<f64>>, delta: Array2<f64>) {
    match slot {
        Some(a) => *a += &delta,
        None => *slot = Some(delta),
    }
}
