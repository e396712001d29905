//! Reverse-mode automatic differentiation on small dense `f64` arrays.
//!
//! The training side of this crate needs exact gradients through attentive
//! pooling, the cycle encoders, gated fusion, the AAM head, and the tiny
//! frame encoders. All of those are compositions of a modest op vocabulary,
//! so the engine is an eager tape: each operation computes its value
//! immediately and records enough to replay the chain rule in reverse.
//! Builders can therefore branch on computed values, which is how the
//! degenerate-input guards (zero temporal std, near-zero norms) enter the
//! graph as plain Rust `if`s.
//!
//! Conventions:
//! - every value is an [`ArrayD<f64>`]; scalars are shape-`[1]` arrays;
//! - frame matrices are `[T, C]` with time as the row axis;
//! - shape mismatches inside the graph are programmer errors and panic;
//!   the public spec operations validate contracts before building graphs.

use ndarray::{Array1, Array2, ArrayD, ArrayViewD, Axis, Ix1, Ix2, Ix3, Ix4, IxDyn};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Boundary handling for temporal convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pad {
    Zero,
    Circular,
}

/// One linear-interpolation tap: `out[j] = w0*src[i0] + w1*src[i1]`.
#[derive(Debug, Clone, Copy)]
pub struct InterpTap {
    pub i0: usize,
    pub w0: f64,
    pub i1: usize,
    pub w1: f64,
}

/// Taps mapping a length-`src` track onto a length-`dst` track by linear
/// interpolation of normalized positions. `dst == 1` samples the midpoint;
/// `src == 1` broadcasts the single value.
pub fn interp_taps(src: usize, dst: usize) -> Vec<InterpTap> {
    assert!(src >= 1 && dst >= 1, "interp_taps needs non-empty tracks");
    (0..dst)
        .map(|j| {
            let pos = if dst == 1 {
                (src as f64 - 1.0) / 2.0
            } else if src == 1 {
                0.0
            } else {
                j as f64 * (src as f64 - 1.0) / (dst as f64 - 1.0)
            };
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            let t = pos - lo as f64;
            InterpTap {
                i0: lo,
                w0: 1.0 - t,
                i1: hi,
                w1: t,
            }
        })
        .collect()
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddConst(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    /// `sqrt(max(0, x))` with zero gradient on the clamped branch.
    ClampedSqrt(Var),
    /// Matrix plus a row vector broadcast over rows.
    AddRow(Var, Var),
    /// Matrix with row `t` scaled by `v[t]`.
    MulColVec(Var, Var),
    AddScalar(Var, Var),
    SubScalar(Var, Var),
    MulScalar(Var, Var),
    DivScalar(Var, Var),
    SumAll(Var),
    /// Column sums: `[T, A] -> [A]`.
    SumAxis0(Var),
    /// Row sums: `[T, A] -> [T]`.
    SumAxis1(Var),
    Transpose(Var),
    MatMul(Var, Var),
    MatVec(Var, Var),
    Dot(Var, Var),
    Concat(Var, Var),
    Select(Var, usize),
    /// Copy of a vector with a scalar added at one index.
    ScatterAdd(Var, usize, Var),
    /// Per-column softmax over rows (max-subtracted).
    SoftmaxCols(Var),
    LogSoftmax(Var),
    /// `x / ||x||`; vanishing-norm inputs pass through with zero gradient.
    NormalizeVec(Var),
    NormalizeRows(Var),
    /// `num[t]/den[t]` where `|den[t]| >= eps`, else 1 with zero gradient.
    SafeRatio(Var, Var),
    Interp(Var, Vec<InterpTap>),
    StackRows(Vec<Var>),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        pad: Pad,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
    },
    MeanSpatial(Var),
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

/// Eager reverse-mode tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    /// Gradient of the seed with respect to `v`; zero-filled if the node
    /// was never reached.
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads[v.0].as_ref()
    }
}

const NORM_EPS: f64 = 1e-12;
const RATIO_EPS: f64 = 1e-8;

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> ArrayViewD<'_, f64> {
        self.nodes[v.0].value.view()
    }

    /// Scalar value of a shape-`[1]` node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let val = &self.nodes[v.0].value;
        assert_eq!(val.len(), 1, "scalar_value on non-scalar node");
        val[[0]]
    }

    pub fn value1(&self, v: Var) -> Array1<f64> {
        self.nodes[v.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("value1 on non-vector node")
            .to_owned()
    }

    pub fn value2(&self, v: Var) -> Array2<f64> {
        self.nodes[v.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("value2 on non-matrix node")
            .to_owned()
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn leaf1(&mut self, value: Array1<f64>) -> Var {
        self.leaf(value.into_dyn())
    }

    pub fn leaf2(&mut self, value: Array2<f64>) -> Var {
        self.leaf(value.into_dyn())
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(ArrayD::from_elem(IxDyn(&[1]), value))
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value / &self.nodes[b.0].value;
        self.push(v, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        self.push(v, Op::AddConst(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn clamped_sqrt(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0).sqrt());
        self.push(v, Op::ClampedSqrt(a))
    }

    // ── Broadcasts ──────────────────────────────────────────────────────

    pub fn add_row(&mut self, m: Var, row: Var) -> Var {
        let mv = self.value2(m);
        let rv = self.value1(row);
        assert_eq!(mv.ncols(), rv.len(), "add_row: column/vector mismatch");
        let v = (&mv + &rv).into_dyn();
        self.push(v, Op::AddRow(m, row))
    }

    pub fn mul_col_vec(&mut self, m: Var, col: Var) -> Var {
        let mv = self.value2(m);
        let cv = self.value1(col);
        assert_eq!(mv.nrows(), cv.len(), "mul_col_vec: row/vector mismatch");
        let mut out = mv.clone();
        for (mut r, &c) in out.rows_mut().into_iter().zip(cv.iter()) {
            r.mapv_inplace(|x| x * c);
        }
        self.push(out.into_dyn(), Op::MulColVec(m, col))
    }

    pub fn add_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar_value(s);
        let v = self.nodes[a.0].value.mapv(|x| x + sv);
        self.push(v, Op::AddScalar(a, s))
    }

    pub fn sub_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar_value(s);
        let v = self.nodes[a.0].value.mapv(|x| x - sv);
        self.push(v, Op::SubScalar(a, s))
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar_value(s);
        let v = self.nodes[a.0].value.mapv(|x| x * sv);
        self.push(v, Op::MulScalar(a, s))
    }

    pub fn div_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar_value(s);
        let v = self.nodes[a.0].value.mapv(|x| x / sv);
        self.push(v, Op::DivScalar(a, s))
    }

    // ── Reductions ──────────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        self.push(ArrayD::from_elem(IxDyn(&[1]), s), Op::SumAll(a))
    }

    pub fn sum_axis0(&mut self, m: Var) -> Var {
        let v = self.value2(m).sum_axis(Axis(0)).into_dyn();
        self.push(v, Op::SumAxis0(m))
    }

    pub fn sum_axis1(&mut self, m: Var) -> Var {
        let v = self.value2(m).sum_axis(Axis(1)).into_dyn();
        self.push(v, Op::SumAxis1(m))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    pub fn transpose(&mut self, m: Var) -> Var {
        let v = self.value2(m).t().to_owned().into_dyn();
        self.push(v, Op::Transpose(m))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value2(a);
        let bv = self.value2(b);
        assert_eq!(av.ncols(), bv.nrows(), "matmul: inner dims differ");
        self.push(av.dot(&bv).into_dyn(), Op::MatMul(a, b))
    }

    pub fn matvec(&mut self, m: Var, v: Var) -> Var {
        let mv = self.value2(m);
        let vv = self.value1(v);
        assert_eq!(mv.ncols(), vv.len(), "matvec: inner dims differ");
        self.push(mv.dot(&vv).into_dyn(), Op::MatVec(m, v))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let av = self.value1(a);
        let bv = self.value1(b);
        assert_eq!(av.len(), bv.len(), "dot: length mismatch");
        let s = av.dot(&bv);
        self.push(ArrayD::from_elem(IxDyn(&[1]), s), Op::Dot(a, b))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value1(a).to_vec();
        v.extend(self.value1(b).iter());
        self.push(
            ArrayD::from_shape_vec(IxDyn(&[v.len()]), v).unwrap(),
            Op::Concat(a, b),
        )
    }

    pub fn select(&mut self, v: Var, idx: usize) -> Var {
        let x = self.value1(v)[idx];
        self.push(ArrayD::from_elem(IxDyn(&[1]), x), Op::Select(v, idx))
    }

    pub fn scatter_add(&mut self, v: Var, idx: usize, s: Var) -> Var {
        let mut out = self.value1(v);
        out[idx] += self.scalar_value(s);
        self.push(out.into_dyn(), Op::ScatterAdd(v, idx, s))
    }

    // ── Structured nonlinearities ───────────────────────────────────────

    pub fn softmax_cols(&mut self, m: Var) -> Var {
        let x = self.value2(m);
        let mut out = Array2::<f64>::zeros(x.raw_dim());
        for c in 0..x.ncols() {
            let col = x.column(c);
            let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for t in 0..x.nrows() {
                let e = (col[t] - max).exp();
                out[[t, c]] = e;
                denom += e;
            }
            for t in 0..x.nrows() {
                out[[t, c]] /= denom;
            }
        }
        self.push(out.into_dyn(), Op::SoftmaxCols(m))
    }

    pub fn log_softmax(&mut self, v: Var) -> Var {
        let x = self.value1(v);
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_denom = x.iter().map(|&e| (e - max).exp()).sum::<f64>().ln();
        let out = x.mapv(|e| e - max - log_denom);
        self.push(out.into_dyn(), Op::LogSoftmax(v))
    }

    pub fn normalize_vec(&mut self, v: Var) -> Var {
        let x = self.value1(v);
        let n = x.dot(&x).sqrt();
        let out = if n < NORM_EPS { x } else { x.mapv(|e| e / n) };
        self.push(out.into_dyn(), Op::NormalizeVec(v))
    }

    pub fn normalize_rows(&mut self, m: Var) -> Var {
        let x = self.value2(m);
        let mut out = x.clone();
        for mut r in out.rows_mut() {
            let n = r.dot(&r).sqrt();
            if n >= NORM_EPS {
                r.mapv_inplace(|e| e / n);
            }
        }
        self.push(out.into_dyn(), Op::NormalizeRows(m))
    }

    pub fn safe_ratio(&mut self, num: Var, den: Var) -> Var {
        let nv = self.value1(num);
        let dv = self.value1(den);
        assert_eq!(nv.len(), dv.len(), "safe_ratio: length mismatch");
        let out = Array1::from_iter(
            nv.iter()
                .zip(dv.iter())
                .map(|(&n, &d)| if d.abs() >= RATIO_EPS { n / d } else { 1.0 }),
        );
        self.push(out.into_dyn(), Op::SafeRatio(num, den))
    }

    pub fn interp(&mut self, v: Var, taps: Vec<InterpTap>) -> Var {
        let x = self.value1(v);
        let out = Array1::from_iter(
            taps.iter()
                .map(|t| t.w0 * x[t.i0] + t.w1 * x[t.i1]),
        );
        self.push(out.into_dyn(), Op::Interp(v, taps))
    }

    pub fn stack_rows(&mut self, rows: Vec<Var>) -> Var {
        assert!(!rows.is_empty(), "stack_rows: empty row list");
        let width = self.nodes[rows[0].0].value.len();
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in &rows {
            let rv = self.value1(r);
            assert_eq!(rv.len(), width, "stack_rows: ragged rows");
            data.extend(rv.iter());
        }
        let v = ArrayD::from_shape_vec(IxDyn(&[rows.len(), width]), data).unwrap();
        self.push(v, Op::StackRows(rows))
    }

    // ── Convolutions ────────────────────────────────────────────────────

    /// Temporal convolution preserving length. `x: [T, Cin]`,
    /// `w: [Cout, Cin, K]` with odd `K`, `b: [Cout]`, output `[T, Cout]`.
    pub fn conv1d_same(&mut self, x: Var, w: Var, b: Var, pad: Pad) -> Var {
        let xv = self.value2(x);
        let wv = self.nodes[w.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("conv1d weight must be rank 3");
        let bv = self.value1(b);
        let (t_len, c_in) = (xv.nrows(), xv.ncols());
        let (c_out, w_cin, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
        assert_eq!(c_in, w_cin, "conv1d: input channels mismatch");
        assert_eq!(bv.len(), c_out, "conv1d: bias length mismatch");
        assert!(k % 2 == 1, "conv1d: kernel width must be odd");
        let half = (k - 1) / 2;
        let mut out = Array2::<f64>::zeros((t_len, c_out));
        for t in 0..t_len {
            for o in 0..c_out {
                let mut acc = bv[o];
                for dk in 0..k {
                    let s = t as isize + dk as isize - half as isize;
                    let s = match pad {
                        Pad::Zero => {
                            if s < 0 || s >= t_len as isize {
                                continue;
                            }
                            s as usize
                        }
                        Pad::Circular => s.rem_euclid(t_len as isize) as usize,
                    };
                    for ci in 0..c_in {
                        acc += wv[[o, ci, dk]] * xv[[s, ci]];
                    }
                }
                out[[t, o]] = acc;
            }
        }
        self.push(out.into_dyn(), Op::Conv1d { x, w, b, pad })
    }

    /// Valid-padding 2-D convolution. `x: [Cin, H, W]`,
    /// `w: [Cout, Cin, kh, kw]`, `b: [Cout]`, output `[Cout, H', W']`.
    pub fn conv2d_valid(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("conv2d input must be rank 3");
        let wv = self.nodes[w.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv2d weight must be rank 4");
        let bv = self.value1(b);
        let (c_in, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (c_out, w_cin, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        assert_eq!(c_in, w_cin, "conv2d: input channels mismatch");
        assert_eq!(bv.len(), c_out, "conv2d: bias length mismatch");
        assert!(h >= kh && wd >= kw, "conv2d: kernel larger than input");
        let oh = (h - kh) / stride + 1;
        let ow = (wd - kw) / stride + 1;
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[c_out, oh, ow]));
        for o in 0..c_out {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = bv[o];
                    for ci in 0..c_in {
                        for a in 0..kh {
                            for bb in 0..kw {
                                acc += wv[[o, ci, a, bb]] * xv[[ci, i * stride + a, j * stride + bb]];
                            }
                        }
                    }
                    out[[o, i, j]] = acc;
                }
            }
        }
        self.push(out, Op::Conv2d { x, w, b, stride })
    }

    /// Spatial mean: `[C, H, W] -> [C]`.
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("mean_spatial input must be rank 3");
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut out = Array1::<f64>::zeros(c);
        for ci in 0..c {
            let mut acc = 0.0;
            for i in 0..h {
                for j in 0..w {
                    acc += xv[[ci, i, j]];
                }
            }
            out[ci] = acc / (h * w) as f64;
        }
        self.push(out.into_dyn(), Op::MeanSpatial(x))
    }

    // ── Composites ──────────────────────────────────────────────────────

    /// Mean and population standard deviation of a vector, as scalar nodes.
    pub fn mean_pop_std(&mut self, v: Var) -> (Var, Var) {
        let mean = self.mean_all(v);
        let centered = self.sub_scalar(v, mean);
        let sq = self.mul(centered, centered);
        let var = self.mean_all(sq);
        let std = self.clamped_sqrt(var);
        (mean, std)
    }

    /// Cosine similarity of two vectors as a scalar node. Either side with
    /// vanishing norm yields a constant 0 (the zero-cosine convention) that
    /// blocks gradient flow.
    pub fn cosine(&mut self, a: Var, b: Var) -> Var {
        let av = self.value1(a);
        let bv = self.value1(b);
        let na = av.dot(&av).sqrt();
        let nb = bv.dot(&bv).sqrt();
        if na < NORM_EPS || nb < NORM_EPS {
            return self.scalar(0.0);
        }
        let d = self.dot(a, b);
        let da = self.dot(a, a);
        let db = self.dot(b, b);
        let sa = self.clamped_sqrt(da);
        let sb = self.clamped_sqrt(db);
        let denom = self.mul(sa, sb);
        self.div(d, denom)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar seed node; returns per-node gradients.
    pub fn backward(&self, seed: Var) -> Grads {
        assert_eq!(
            self.nodes[seed.0].value.len(),
            1,
            "backward seed must be scalar"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[seed.0] = Some(ArrayD::from_elem(IxDyn(&[1]), 1.0));

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.apply_backward(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn accum(grads: &mut [Option<ArrayD<f64>>], v: Var, delta: ArrayD<f64>) {
        match &mut grads[v.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn apply_backward(&self, i: usize, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                Self::accum(grads, *a, g.clone());
                Self::accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                Self::accum(grads, *a, g.clone());
                Self::accum(grads, *b, g.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                Self::accum(grads, *a, g * val(*b));
                Self::accum(grads, *b, g * val(*a));
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                Self::accum(grads, *a, g / bv);
                Self::accum(grads, *b, -(g * val(*a)) / (bv * bv));
            }
            Op::Neg(a) => Self::accum(grads, *a, g.mapv(|x| -x)),
            Op::Scale(a, c) => Self::accum(grads, *a, g.mapv(|x| x * c)),
            Op::AddConst(a) => Self::accum(grads, *a, g.clone()),
            Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                Self::accum(grads, *a, g * &y.mapv(|t| 1.0 - t * t));
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                Self::accum(grads, *a, g * &y.mapv(|s| s * (1.0 - s)));
            }
            Op::Exp(a) => {
                let y = &self.nodes[i].value;
                Self::accum(grads, *a, g * y);
            }
            Op::ClampedSqrt(a) => {
                let x = val(*a);
                let y = &self.nodes[i].value;
                let mut d = g.clone();
                for ((d, &x), &y) in d.iter_mut().zip(x.iter()).zip(y.iter()) {
                    *d = if x > 1e-24 { *d / (2.0 * y) } else { 0.0 };
                }
                Self::accum(grads, *a, d);
            }
            Op::AddRow(m, row) => {
                Self::accum(grads, *m, g.clone());
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                Self::accum(grads, *row, g2.sum_axis(Axis(0)).into_dyn());
            }
            Op::MulColVec(m, col) => {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mv = val(*m).view().into_dimensionality::<Ix2>().unwrap();
                let cv = val(*col).view().into_dimensionality::<Ix1>().unwrap();
                let mut dm = g2.to_owned();
                for (mut r, &c) in dm.rows_mut().into_iter().zip(cv.iter()) {
                    r.mapv_inplace(|x| x * c);
                }
                let dcol = Array1::from_iter(
                    g2.rows()
                        .into_iter()
                        .zip(mv.rows())
                        .map(|(gr, mr)| gr.dot(&mr)),
                );
                Self::accum(grads, *m, dm.into_dyn());
                Self::accum(grads, *col, dcol.into_dyn());
            }
            Op::AddScalar(a, s) => {
                Self::accum(grads, *a, g.clone());
                Self::accum(grads, *s, ArrayD::from_elem(IxDyn(&[1]), g.sum()));
            }
            Op::SubScalar(a, s) => {
                Self::accum(grads, *a, g.clone());
                Self::accum(grads, *s, ArrayD::from_elem(IxDyn(&[1]), -g.sum()));
            }
            Op::MulScalar(a, s) => {
                let sv = val(*s)[[0]];
                Self::accum(grads, *a, g.mapv(|x| x * sv));
                let ds = (g * val(*a)).sum();
                Self::accum(grads, *s, ArrayD::from_elem(IxDyn(&[1]), ds));
            }
            Op::DivScalar(a, s) => {
                let sv = val(*s)[[0]];
                Self::accum(grads, *a, g.mapv(|x| x / sv));
                let ds = -(g * val(*a)).sum() / (sv * sv);
                Self::accum(grads, *s, ArrayD::from_elem(IxDyn(&[1]), ds));
            }
            Op::SumAll(a) => {
                let g0 = g[[0]];
                Self::accum(grads, *a, val(*a).mapv(|_| g0));
            }
            Op::SumAxis0(m) => {
                let mv = val(*m).view().into_dimensionality::<Ix2>().unwrap();
                let gv = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut dm = Array2::<f64>::zeros(mv.raw_dim());
                for mut r in dm.rows_mut() {
                    r.assign(&gv);
                }
                Self::accum(grads, *m, dm.into_dyn());
            }
            Op::SumAxis1(m) => {
                let mv = val(*m).view().into_dimensionality::<Ix2>().unwrap();
                let gv = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut dm = Array2::<f64>::zeros(mv.raw_dim());
                for (mut r, &gt) in dm.rows_mut().into_iter().zip(gv.iter()) {
                    r.fill(gt);
                }
                Self::accum(grads, *m, dm.into_dyn());
            }
            Op::Transpose(m) => {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                Self::accum(grads, *m, gv.t().to_owned().into_dyn());
            }
            Op::MatMul(a, b) => {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let av = val(*a).view().into_dimensionality::<Ix2>().unwrap();
                let bv = val(*b).view().into_dimensionality::<Ix2>().unwrap();
                Self::accum(grads, *a, g2.dot(&bv.t()).into_dyn());
                Self::accum(grads, *b, av.t().dot(&g2).into_dyn());
            }
            Op::MatVec(m, v) => {
                let gv = g.view().into_dimensionality::<Ix1>().unwrap();
                let mv = val(*m).view().into_dimensionality::<Ix2>().unwrap();
                let vv = val(*v).view().into_dimensionality::<Ix1>().unwrap();
                let mut dm = Array2::<f64>::zeros(mv.raw_dim());
                for ((mut r, &gi), _) in dm.rows_mut().into_iter().zip(gv.iter()).zip(0..) {
                    r.assign(&vv.mapv(|x| x * gi));
                }
                Self::accum(grads, *m, dm.into_dyn());
                Self::accum(grads, *v, mv.t().dot(&gv).into_dyn());
            }
            Op::Dot(a, b) => {
                let g0 = g[[0]];
                Self::accum(grads, *a, val(*b).mapv(|x| x * g0));
                Self::accum(grads, *b, val(*a).mapv(|x| x * g0));
            }
            Op::Concat(a, b) => {
                let la = val(*a).len();
                let gv = g.view().into_dimensionality::<Ix1>().unwrap();
                let da = Array1::from_iter(gv.iter().take(la).cloned());
                let db = Array1::from_iter(gv.iter().skip(la).cloned());
                Self::accum(grads, *a, da.into_dyn());
                Self::accum(grads, *b, db.into_dyn());
            }
            Op::Select(v, idx) => {
                let mut dv = val(*v).mapv(|_| 0.0);
                dv[[*idx]] = g[[0]];
                Self::accum(grads, *v, dv);
            }
            Op::ScatterAdd(v, idx, s) => {
                Self::accum(grads, *v, g.clone());
                Self::accum(grads, *s, ArrayD::from_elem(IxDyn(&[1]), g[[*idx]]));
            }
            Op::SoftmaxCols(m) => {
                let y = self.nodes[i].value.view().into_dimensionality::<Ix2>().unwrap();
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dm = Array2::<f64>::zeros(y.raw_dim());
                for c in 0..y.ncols() {
                    let yc = y.column(c);
                    let gc = gv.column(c);
                    let inner = yc.dot(&gc);
                    for t in 0..y.nrows() {
                        dm[[t, c]] = yc[t] * (gc[t] - inner);
                    }
                }
                Self::accum(grads, *m, dm.into_dyn());
            }
            Op::LogSoftmax(v) => {
                let y = self.nodes[i].value.view().into_dimensionality::<Ix1>().unwrap();
                let gv = g.view().into_dimensionality::<Ix1>().unwrap();
                let gsum = gv.sum();
                let dv = Array1::from_iter(
                    y.iter().zip(gv.iter()).map(|(&yi, &gi)| gi - yi.exp() * gsum),
                );
                Self::accum(grads, *v, dv.into_dyn());
            }
            Op::NormalizeVec(v) => {
                let x = val(*v).view().into_dimensionality::<Ix1>().unwrap();
                let n = x.dot(&x).sqrt();
                if n < NORM_EPS {
                    return;
                }
                let y = self.nodes[i].value.view().into_dimensionality::<Ix1>().unwrap();
                let gv = g.view().into_dimensionality::<Ix1>().unwrap();
                let inner = gv.dot(&y);
                let dv = Array1::from_iter(
                    gv.iter().zip(y.iter()).map(|(&gi, &yi)| (gi - inner * yi) / n),
                );
                Self::accum(grads, *v, dv.into_dyn());
            }
            Op::NormalizeRows(m) => {
                let x = val(*m).view().into_dimensionality::<Ix2>().unwrap();
                let y = self.nodes[i].value.view().into_dimensionality::<Ix2>().unwrap();
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dm = Array2::<f64>::zeros(x.raw_dim());
                for r in 0..x.nrows() {
                    let xr = x.row(r);
                    let n = xr.dot(&xr).sqrt();
                    if n < NORM_EPS {
                        dm.row_mut(r).assign(&gv.row(r));
                        continue;
                    }
                    let yr = y.row(r);
                    let gr = gv.row(r);
                    let inner = gr.dot(&yr);
                    for c in 0..x.ncols() {
                        dm[[r, c]] = (gr[c] - inner * yr[c]) / n;
                    }
                }
                Self::accum(grads, *m, dm.into_dyn());
            }
            Op::SafeRatio(num, den) => {
                let nv = val(*num).view().into_dimensionality::<Ix1>().unwrap();
                let dv = val(*den).view().into_dimensionality::<Ix1>().unwrap();
                let gv = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut dn = Array1::<f64>::zeros(nv.len());
                let mut dd = Array1::<f64>::zeros(nv.len());
                for t in 0..nv.len() {
                    if dv[t].abs() >= RATIO_EPS {
                        dn[t] = gv[t] / dv[t];
                        dd[t] = -gv[t] * nv[t] / (dv[t] * dv[t]);
                    }
                }
                Self::accum(grads, *num, dn.into_dyn());
                Self::accum(grads, *den, dd.into_dyn());
            }
            Op::Interp(v, taps) => {
                let gv = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut dv = val(*v).mapv(|_| 0.0);
                for (j, tap) in taps.iter().enumerate() {
                    dv[[tap.i0]] += tap.w0 * gv[j];
                    dv[[tap.i1]] += tap.w1 * gv[j];
                }
                Self::accum(grads, *v, dv);
            }
            Op::StackRows(rows) => {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                for (t, &r) in rows.iter().enumerate() {
                    Self::accum(grads, r, gv.row(t).to_owned().into_dyn());
                }
            }
            Op::Conv1d { x, w, b, pad } => {
                let xv = val(*x).view().into_dimensionality::<Ix2>().unwrap();
                let wv = val(*w).view().into_dimensionality::<Ix3>().unwrap();
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let (t_len, c_in) = (xv.nrows(), xv.ncols());
                let (c_out, _, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
                let half = (k - 1) / 2;
                let mut dx = Array2::<f64>::zeros(xv.raw_dim());
                let mut dw = ArrayD::<f64>::zeros(val(*w).raw_dim());
                let mut db = Array1::<f64>::zeros(c_out);
                for t in 0..t_len {
                    for o in 0..c_out {
                        let gt = gv[[t, o]];
                        db[o] += gt;
                        for dk in 0..k {
                            let s = t as isize + dk as isize - half as isize;
                            let s = match pad {
                                Pad::Zero => {
                                    if s < 0 || s >= t_len as isize {
                                        continue;
                                    }
                                    s as usize
                                }
                                Pad::Circular => s.rem_euclid(t_len as isize) as usize,
                            };
                            for ci in 0..c_in {
                                dx[[s, ci]] += gt * wv[[o, ci, dk]];
                                dw[[o, ci, dk]] += gt * xv[[s, ci]];
                            }
                        }
                    }
                }
                Self::accum(grads, *x, dx.into_dyn());
                Self::accum(grads, *w, dw);
                Self::accum(grads, *b, db.into_dyn());
            }
            Op::Conv2d { x, w, b, stride } => {
                let xv = val(*x).view().into_dimensionality::<Ix3>().unwrap();
                let wv = val(*w).view().into_dimensionality::<Ix4>().unwrap();
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let c_in = xv.shape()[0];
                let (c_out, kh, kw) = (wv.shape()[0], wv.shape()[2], wv.shape()[3]);
                let (oh, ow) = (gv.shape()[1], gv.shape()[2]);
                let mut dx = ArrayD::<f64>::zeros(val(*x).raw_dim());
                let mut dw = ArrayD::<f64>::zeros(val(*w).raw_dim());
                let mut db = Array1::<f64>::zeros(c_out);
                for o in 0..c_out {
                    for i2 in 0..oh {
                        for j in 0..ow {
                            let gt = gv[[o, i2, j]];
                            db[o] += gt;
                            for ci in 0..c_in {
                                for a in 0..kh {
                                    for bb in 0..kw {
                                        dx[[ci, i2 * stride + a, j * stride + bb]] +=
                                            gt * wv[[o, ci, a, bb]];
                                        dw[[o, ci, a, bb]] +=
                                            gt * xv[[ci, i2 * stride + a, j * stride + bb]];
                                    }
                                }
                            }
                        }
                    }
                }
                Self::accum(grads, *x, dx);
                Self::accum(grads, *w, dw);
                Self::accum(grads, *b, db.into_dyn());
            }
            Op::MeanSpatial(x) => {
                let xv = val(*x).view().into_dimensionality::<Ix3>().unwrap();
                let gv = g.view().into_dimensionality::<Ix1>().unwrap();
                let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let scale = 1.0 / (h * w) as f64;
                let mut dx = ArrayD::<f64>::zeros(val(*x).raw_dim());
                for ci in 0..c {
                    let d = gv[ci] * scale;
                    for i2 in 0..h {
                        for j in 0..w {
                            dx[[ci, i2, j]] = d;
                        }
                    }
                }
                Self::accum(grads, *x, dx);
            }
        }
    }
}

pub mod finite_diff {
    //! Central finite differences for verifying tape gradients.

    /// Numerical gradient of `f` at `point` via central differences.
    pub fn central_grad<F>(mut f: F, point: &[f64], step: f64) -> Vec<f64>
    where
        F: FnMut(&[f64]) -> f64,
    {
        let mut perturbed = point.to_vec();
        let mut out = Vec::with_capacity(point.len());
        for i in 0..point.len() {
            perturbed[i] = point[i] + step;
            let fp = f(&perturbed);
            perturbed[i] = point[i] - step;
            let fm = f(&perturbed);
            perturbed[i] = point[i];
            out.push((fp - fm) / (2.0 * step));
        }
        out
    }

    /// Largest per-component relative error between two gradient vectors,
    /// with components below unit scale compared absolutely.
    pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
        assert_eq!(analytic.len(), numeric.len());
        analytic
            .iter()
            .zip(numeric.iter())
            .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
            .fold(0.0, f64::max)
    }
}
