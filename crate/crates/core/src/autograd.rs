//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value on a [`Tape`] is a 2-D matrix; vectors are `1×d` rows and
//! scalars are `1×1`. Operations record their inputs and
//! [`Tape::backward`] walks the record in reverse. The op set is the one the
//! models in this crate need and nothing more.

use ndarray::{Array2, Axis, Zip};
use std::cell::{Ref, RefCell};

pub type Mat = Array2<f64>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum UnaryKind {
    Tanh,
    Sigmoid,
    Relu,
    LeakyRelu(f64),
    Softplus,
    Exp,
    Log,
    Square,
    Scale(f64),
    AddConst(f64),
    Clamp(f64, f64),
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Transpose(usize),
    Binary(BinKind, usize, usize),
    Unary(UnaryKind, usize),
    SoftmaxRows {
        input: usize,
        weight: Option<usize>,
        // exp(s - c) / Z, masked; needed for the weight gradient
        normalized_exp: Mat,
    },
    LogSoftmaxRows(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize),
    GatherRows(usize, Vec<usize>),
    SumAll(usize),
    SumRows(usize),
    SumCols(usize),
    Select(usize, usize, usize),
    GatedAdjacency {
        node: usize,
        edge: usize,
        edges: Vec<(usize, usize)>,
    },
}

struct Node {
    value: Mat,
    op: Op,
}

/// Recording of a computation. Interior mutability lets ops take `&self`,
/// so expressions can be nested freely.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of a scalar with respect to every value on the tape.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn sum_to_shape(g: Mat, shape: (usize, usize)) -> Mat {
    let mut g = g;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Mat, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    /// Records an input value (parameter or constant).
    pub fn leaf(&self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_leaf(&self, x: f64) -> Var {
        self.leaf(Array2::from_elem((1, 1), x))
    }

    pub fn row_leaf(&self, xs: &[f64]) -> Var {
        self.leaf(Array2::from_shape_vec((1, xs.len()), xs.to_vec()).expect("row shape"))
    }

    pub fn value(&self, v: Var) -> Ref<'_, Mat> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.dim(), (1, 1));
        val[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&*self.value(b));
        self.push(out, Op::MatMul(a.0, b.0))
    }

    /// `a · bᵀ`; applies a weight stored as `out × in` to row-major inputs.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(out, Op::MatMulNt(a.0, b.0))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        self.push(out, Op::Transpose(a.0))
    }

    fn binary(&self, kind: BinKind, a: Var, b: Var) -> Var {
        let out = {
            let (va, vb) = (self.value(a), self.value(b));
            match kind {
                BinKind::Add => &*va + &*vb,
                BinKind::Sub => &*va - &*vb,
                BinKind::Mul => &*va * &*vb,
                BinKind::Div => &*va / &*vb,
            }
        };
        self.push(out, Op::Binary(kind, a.0, b.0))
    }

    /// Elementwise sum with row/column/scalar broadcasting on either side.
    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary(BinKind::Div, a, b)
    }

    fn unary(&self, kind: UnaryKind, a: Var) -> Var {
        let out = self.value(a).mapv(|x| match kind {
            UnaryKind::Tanh => x.tanh(),
            UnaryKind::Sigmoid => sigmoid(x),
            UnaryKind::Relu => x.max(0.0),
            UnaryKind::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            UnaryKind::Softplus => softplus(x),
            UnaryKind::Exp => x.exp(),
            UnaryKind::Log => x.ln(),
            UnaryKind::Square => x * x,
            UnaryKind::Scale(c) => c * x,
            UnaryKind::AddConst(c) => x + c,
            UnaryKind::Clamp(lo, hi) => x.clamp(lo, hi),
        });
        self.push(out, Op::Unary(kind, a.0))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(UnaryKind::Tanh, a)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        self.unary(UnaryKind::LeakyRelu(slope), a)
    }

    pub fn softplus(&self, a: Var) -> Var {
        self.unary(UnaryKind::Softplus, a)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn ln(&self, a: Var) -> Var {
        self.unary(UnaryKind::Log, a)
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(UnaryKind::Square, a)
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.unary(UnaryKind::Scale(c), a)
    }

    pub fn add_const(&self, a: Var, c: f64) -> Var {
        self.unary(UnaryKind::AddConst(c), a)
    }

    /// Clamp with pass-through gradient inside `[lo, hi]` and zero outside.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(UnaryKind::Clamp(lo, hi), a)
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&self, s: Var) -> Var {
        self.softmax_rows_impl(s, None, None)
    }

    /// Row-wise softmax restricted to entries where `mask` is nonzero.
    pub fn masked_softmax_rows(&self, s: Var, mask: &Mat) -> Var {
        self.softmax_rows_impl(s, None, Some(mask))
    }

    /// `α_ij = w_ij·exp(s_ij) / Σ_k w_ik·exp(s_ik)`, differentiable in both
    /// the scores and the nonnegative weights. Zero weight masks an entry
    /// out exactly. Rows with no positive weight come out all-zero.
    pub fn weighted_softmax_rows(&self, s: Var, w: Var) -> Var {
        self.softmax_rows_impl(s, Some(w), None)
    }

    fn softmax_rows_impl(&self, s: Var, w: Option<Var>, mask: Option<&Mat>) -> Var {
        let (out, normalized_exp) = {
            let sv = self.value(s);
            let (r, c) = sv.dim();
            let wv = w.map(|w| self.value(w).to_owned());
            let mut out = Array2::zeros((r, c));
            let mut nexp = Array2::zeros((r, c));
            for i in 0..r {
                let active = |j: usize| -> bool {
                    let m_ok = mask.is_none_or(|m| m[[i, j]] != 0.0);
                    let w_ok = wv.as_ref().is_none_or(|w| w[[i, j]] > 0.0);
                    m_ok && w_ok
                };
                let mut shift = f64::NEG_INFINITY;
                for j in 0..c {
                    if active(j) {
                        shift = shift.max(sv[[i, j]]);
                    }
                }
                if shift == f64::NEG_INFINITY {
                    continue;
                }
                let mut z = 0.0;
                for j in 0..c {
                    if active(j) {
                        let e = (sv[[i, j]] - shift).exp();
                        let wij = wv.as_ref().map_or(1.0, |w| w[[i, j]]);
                        nexp[[i, j]] = e;
                        out[[i, j]] = wij * e;
                        z += wij * e;
                    }
                }
                if z > 0.0 {
                    for j in 0..c {
                        out[[i, j]] /= z;
                        nexp[[i, j]] /= z;
                    }
                }
            }
            (out, nexp)
        };
        self.push(
            out,
            Op::SoftmaxRows {
                input: s.0,
                weight: w.map(|w| w.0),
                normalized_exp,
            },
        )
    }

    pub fn log_softmax_rows(&self, s: Var) -> Var {
        let out = {
            let sv = self.value(s);
            let mut out = sv.to_owned();
            for mut row in out.rows_mut() {
                let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                row.mapv_inplace(|x| x - lse);
            }
            out
        };
        self.push(out, Op::LogSoftmaxRows(s.0))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let out = {
            let vals: Vec<_> = parts.iter().map(|p| self.value(*p)).collect();
            let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
            ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ")
        };
        self.push(out, Op::ConcatCols(parts.iter().map(|p| p.0).collect()))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let out = {
            let vals: Vec<_> = parts.iter().map(|p| self.value(*p)).collect();
            let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("concat_rows: column counts differ")
        };
        self.push(out, Op::ConcatRows(parts.iter().map(|p| p.0).collect()))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(ndarray::s![.., start..end]).to_owned();
        self.push(out, Op::SliceCols(a.0, start))
    }

    pub fn gather_rows(&self, a: Var, idx: &[usize]) -> Var {
        let out = self.value(a).select(Axis(0), idx);
        self.push(out, Op::GatherRows(a.0, idx.to_vec()))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(out, Op::SumAll(a.0))
    }

    /// Sum of each row, as an `n×1` column.
    pub fn sum_rows(&self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(out, Op::SumRows(a.0))
    }

    /// Sum over rows, as a `1×c` row.
    pub fn sum_cols(&self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(out, Op::SumCols(a.0))
    }

    pub fn mean_rows(&self, a: Var) -> Var {
        let n = self.shape(a).0.max(1);
        let s = self.sum_cols(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn select(&self, a: Var, r: usize, c: usize) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a)[[r, c]]);
        self.push(out, Op::Select(a.0, r, c))
    }

    /// Symmetric `n×n` matrix with unit diagonal and, for each undirected
    /// edge `k = (i, j)`, entries `edge[k]·node[i]·node[j]`. `node` is `n×1`
    /// and `edge` is `|E|×1`.
    pub fn gated_adjacency(&self, node: Var, edge: Var, edges: &[(usize, usize)]) -> Var {
        let out = {
            let nv = self.value(node);
            let ev = self.value(edge);
            let n = nv.nrows();
            let mut out = Array2::eye(n);
            for (k, &(i, j)) in edges.iter().enumerate() {
                let w = ev[[k, 0]] * nv[[i, 0]] * nv[[j, 0]];
                out[[i, j]] = w;
                out[[j, i]] = w;
            }
            out
        };
        self.push(
            out,
            Op::GatedAdjacency {
                node: node.0,
                edge: edge.0,
                edges: edges.to_vec(),
            },
        )
    }

    /// Gradients of the `1×1` value `loss` with respect to every tape entry.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.dim(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Mat>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));

        fn acc(grads: &mut [Option<Mat>], idx: usize, g: Mat) {
            match &mut grads[idx] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let g_ref = &g;
            let y = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&nodes[*b].value.t());
                    let gb = nodes[*a].value.t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulNt(a, b) => {
                    let ga = g.dot(&nodes[*b].value);
                    let gb = g.t().dot(&nodes[*a].value);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::Binary(kind, a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    let (ga, gb) = match kind {
                        BinKind::Add => (g.clone(), g.clone()),
                        BinKind::Sub => (g.clone(), -g_ref),
                        BinKind::Mul => (&g * vb, &g * va),
                        BinKind::Div => {
                            let ga = &g / vb;
                            let gb = -(&g * va) / (vb * vb);
                            (ga, gb)
                        }
                    };
                    acc(&mut grads, *a, sum_to_shape(ga, va.dim()));
                    acc(&mut grads, *b, sum_to_shape(gb, vb.dim()));
                }
                Op::Unary(kind, a) => {
                    let x = &nodes[*a].value;
                    let mut ga = g.clone();
                    Zip::from(&mut ga).and(x).and(y).for_each(|g, &x, &y| {
                        *g *= match kind {
                            UnaryKind::Tanh => 1.0 - y * y,
                            UnaryKind::Sigmoid => y * (1.0 - y),
                            UnaryKind::Relu => {
                                if x > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::LeakyRelu(slope) => {
                                if x > 0.0 {
                                    1.0
                                } else {
                                    *slope
                                }
                            }
                            UnaryKind::Softplus => sigmoid(x),
                            UnaryKind::Exp => y,
                            UnaryKind::Log => 1.0 / x,
                            UnaryKind::Square => 2.0 * x,
                            UnaryKind::Scale(c) => *c,
                            UnaryKind::AddConst(_) => 1.0,
                            UnaryKind::Clamp(lo, hi) => {
                                if x >= *lo && x <= *hi {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows {
                    input,
                    weight,
                    normalized_exp,
                } => {
                    // dot_i = Σ_k α_ik g_ik
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let centered = &g - &dot;
                    acc(&mut grads, *input, y * &centered);
                    if let Some(w) = weight {
                        acc(&mut grads, *w, normalized_exp * &centered);
                    }
                }
                Op::LogSoftmaxRows(a) => {
                    let p = y.mapv(f64::exp);
                    let gsum = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, *a, &g - &(p * gsum));
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = nodes[*p].value.ncols();
                        let slice = g.slice(ndarray::s![.., start..start + w]).to_owned();
                        acc(&mut grads, *p, slice);
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let h = nodes[*p].value.nrows();
                        let slice = g.slice(ndarray::s![start..start + h, ..]).to_owned();
                        acc(&mut grads, *p, slice);
                        start += h;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(nodes[*a].value.dim());
                    let w = g.ncols();
                    ga.slice_mut(ndarray::s![.., *start..*start + w]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let mut ga = Array2::zeros(nodes[*a].value.dim());
                    for (r, &src) in idx.iter().enumerate() {
                        let mut row = ga.row_mut(src);
                        row += &g.row(r);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let ga = Array2::from_elem(nodes[*a].value.dim(), g[[0, 0]]);
                    acc(&mut grads, *a, ga);
                }
                Op::SumRows(a) => {
                    let ga = g
                        .broadcast(nodes[*a].value.dim())
                        .expect("sum_rows broadcast")
                        .to_owned();
                    acc(&mut grads, *a, ga);
                }
                Op::SumCols(a) => {
                    let ga = g
                        .broadcast(nodes[*a].value.dim())
                        .expect("sum_cols broadcast")
                        .to_owned();
                    acc(&mut grads, *a, ga);
                }
                Op::Select(a, r, c) => {
                    let mut ga = Array2::zeros(nodes[*a].value.dim());
                    ga[[*r, *c]] = g[[0, 0]];
                    acc(&mut grads, *a, ga);
                }
                Op::GatedAdjacency { node, edge, edges } => {
                    let nv = &nodes[*node].value;
                    let ev = &nodes[*edge].value;
                    let mut gn = Array2::zeros(nv.dim());
                    let mut ge = Array2::zeros(ev.dim());
                    for (k, &(i, j)) in edges.iter().enumerate() {
                        let total = g[[i, j]] + g[[j, i]];
                        ge[[k, 0]] += total * nv[[i, 0]] * nv[[j, 0]];
                        gn[[i, 0]] += total * ev[[k, 0]] * nv[[j, 0]];
                        gn[[j, 0]] += total * ev[[k, 0]] * nv[[i, 0]];
                    }
                    acc(&mut grads, *node, gn);
                    acc(&mut grads, *edge, ge);
                }
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }
}
