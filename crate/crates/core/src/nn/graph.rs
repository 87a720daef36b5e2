//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in execution
//! order. [`Graph::backward`] walks the tape in reverse and returns the
//! gradient of a scalar output with respect to every node that requires one.
//! A graph is single-threaded and meant to live for one forward/backward pass.

use std::cell::RefCell;
use std::ops;

use super::gemm::{gemm, MatRef};
use super::{NnError, Tensor};

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBroadcast(usize, usize),
    MulBroadcast(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Softplus(usize),
    Clamp(usize, f64, f64),
    Softmax(usize),
    LayerNorm { x: usize, gain: usize, shift: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    SumAll(usize),
    MeanAll(usize),
    Minimum(usize, usize),
    SliceCols { x: usize, start: usize },
    ConcatCols(usize, usize),
    GatherRows { x: usize, rows: Vec<usize> },
    SplitHeads { x: usize, batch: usize, seq: usize, heads: usize },
    MergeHeads { x: usize, batch: usize, seq: usize, heads: usize },
    Reshape(usize),
    BceWithLogits { logits: usize, targets: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording tape for one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub(crate) fn get_id(&self, id: usize) -> Option<&Tensor> {
        self.grads.get(id).and_then(Option::as_ref)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf whose gradient is tracked.
    pub fn input(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Gradient of the scalar `loss` with respect to every tracked node.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        let seed_shape = nodes[loss.id].value.shape().to_vec();
        grads[loss.id] = Some(Tensor::full(&seed_shape, 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[id].take() else { continue };
            backprop(&nodes, &mut grads, id, &gout);
            grads[id] = Some(gout);
        }
        Gradients { grads }
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].requires_grad {
        return;
    }
    let g = grads[id].get_or_insert_with(|| Tensor::zeros(nodes[id].value.shape()));
    f(g.data_mut());
}

fn backprop(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, gout: &Tensor) {
    let go = gout.data();
    let out = nodes[id].value.data();
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |g| add_into(g, go));
            accumulate(nodes, grads, *b, |g| add_into(g, go));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |g| add_into(g, go));
            accumulate(nodes, grads, *b, |g| {
                for (x, d) in g.iter_mut().zip(go) {
                    *x -= d;
                }
            });
        }
        Op::Mul(a, b) => {
            let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
            accumulate(nodes, grads, *a, |g| {
                for i in 0..g.len() {
                    g[i] += go[i] * vb[i];
                }
            });
            accumulate(nodes, grads, *b, |g| {
                for i in 0..g.len() {
                    g[i] += go[i] * va[i];
                }
            });
        }
        Op::AddBroadcast(a, b) => {
            accumulate(nodes, grads, *a, |g| add_into(g, go));
            accumulate(nodes, grads, *b, |g| {
                let n = g.len();
                for (i, d) in go.iter().enumerate() {
                    g[i % n] += d;
                }
            });
        }
        Op::MulBroadcast(a, b) => {
            let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
            let n = vb.len();
            accumulate(nodes, grads, *a, |g| {
                for i in 0..g.len() {
                    g[i] += go[i] * vb[i % n];
                }
            });
            accumulate(nodes, grads, *b, |g| {
                for (i, d) in go.iter().enumerate() {
                    g[i % n] += d * va[i];
                }
            });
        }
        Op::Scale(a, c) => accumulate(nodes, grads, *a, |g| {
            for (x, d) in g.iter_mut().zip(go) {
                *x += c * d;
            }
        }),
        Op::AddScalar(a) | Op::Reshape(a) => accumulate(nodes, grads, *a, |g| add_into(g, go)),
        Op::MatMul { a, b, ta, tb } => matmul_backward(nodes, grads, id, *a, *b, *ta, *tb, go),
        Op::Relu(a) => accumulate(nodes, grads, *a, |g| {
            for i in 0..g.len() {
                if out[i] > 0.0 {
                    g[i] += go[i];
                }
            }
        }),
        Op::Tanh(a) => accumulate(nodes, grads, *a, |g| {
            for i in 0..g.len() {
                g[i] += go[i] * (1.0 - out[i] * out[i]);
            }
        }),
        Op::Sigmoid(a) => accumulate(nodes, grads, *a, |g| {
            for i in 0..g.len() {
                g[i] += go[i] * out[i] * (1.0 - out[i]);
            }
        }),
        Op::Exp(a) => accumulate(nodes, grads, *a, |g| {
            for i in 0..g.len() {
                g[i] += go[i] * out[i];
            }
        }),
        Op::Log(a) => {
            let va = nodes[*a].value.data();
            accumulate(nodes, grads, *a, |g| {
                for i in 0..g.len() {
                    g[i] += go[i] / va[i];
                }
            })
        }
        Op::Softplus(a) => {
            let va = nodes[*a].value.data();
            accumulate(nodes, grads, *a, |g| {
                for i in 0..g.len() {
                    g[i] += go[i] * sigmoid(va[i]);
                }
            })
        }
        Op::Clamp(a, lo, hi) => {
            let va = nodes[*a].value.data();
            accumulate(nodes, grads, *a, |g| {
                for i in 0..g.len() {
                    if va[i] >= *lo && va[i] <= *hi {
                        g[i] += go[i];
                    }
                }
            })
        }
        Op::Softmax(a) => {
            let d = nodes[id].value.last_dim();
            accumulate(nodes, grads, *a, |g| {
                for r in 0..out.len() / d {
                    let (y, dy) = (&out[r * d..(r + 1) * d], &go[r * d..(r + 1) * d]);
                    let dot: f64 = y.iter().zip(dy).map(|(p, q)| p * q).sum();
                    for j in 0..d {
                        g[r * d + j] += y[j] * (dy[j] - dot);
                    }
                }
            })
        }
        Op::LayerNorm { x, gain, shift, xhat, rstd } => {
            let d = nodes[id].value.last_dim();
            let gv = nodes[*gain].value.data();
            accumulate(nodes, grads, *gain, |g| {
                for i in 0..go.len() {
                    g[i % d] += go[i] * xhat[i];
                }
            });
            accumulate(nodes, grads, *shift, |g| {
                for i in 0..go.len() {
                    g[i % d] += go[i];
                }
            });
            accumulate(nodes, grads, *x, |g| {
                let mut dxhat = vec![0.0; d];
                for r in 0..go.len() / d {
                    let base = r * d;
                    let mut mean_dx = 0.0;
                    let mut mean_dx_xh = 0.0;
                    for j in 0..d {
                        dxhat[j] = go[base + j] * gv[j];
                        mean_dx += dxhat[j];
                        mean_dx_xh += dxhat[j] * xhat[base + j];
                    }
                    mean_dx /= d as f64;
                    mean_dx_xh /= d as f64;
                    for j in 0..d {
                        g[base + j] += rstd[r] * (dxhat[j] - mean_dx - xhat[base + j] * mean_dx_xh);
                    }
                }
            });
        }
        Op::SumAll(a) => accumulate(nodes, grads, *a, |g| {
            for x in g.iter_mut() {
                *x += go[0];
            }
        }),
        Op::MeanAll(a) => accumulate(nodes, grads, *a, |g| {
            let s = go[0] / g.len() as f64;
            for x in g.iter_mut() {
                *x += s;
            }
        }),
        Op::Minimum(a, b) => {
            let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
            accumulate(nodes, grads, *a, |g| {
                for i in 0..g.len() {
                    if va[i] <= vb[i] {
                        g[i] += go[i];
                    }
                }
            });
            accumulate(nodes, grads, *b, |g| {
                for i in 0..g.len() {
                    if va[i] > vb[i] {
                        g[i] += go[i];
                    }
                }
            });
        }
        Op::SliceCols { x, start } => {
            let w = nodes[id].value.last_dim();
            let src = nodes[*x].value.last_dim();
            accumulate(nodes, grads, *x, |g| {
                for r in 0..go.len() / w {
                    for j in 0..w {
                        g[r * src + start + j] += go[r * w + j];
                    }
                }
            })
        }
        Op::ConcatCols(a, b) => {
            let wa = nodes[*a].value.last_dim();
            let wb = nodes[*b].value.last_dim();
            let w = wa + wb;
            accumulate(nodes, grads, *a, |g| {
                for r in 0..go.len() / w {
                    for j in 0..wa {
                        g[r * wa + j] += go[r * w + j];
                    }
                }
            });
            accumulate(nodes, grads, *b, |g| {
                for r in 0..go.len() / w {
                    for j in 0..wb {
                        g[r * wb + j] += go[r * w + wa + j];
                    }
                }
            });
        }
        Op::GatherRows { x, rows } => {
            let d = nodes[id].value.last_dim();
            accumulate(nodes, grads, *x, |g| {
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..d {
                        g[r * d + j] += go[k * d + j];
                    }
                }
            })
        }
        Op::SplitHeads { x, batch, seq, heads } => {
            let dk = nodes[id].value.last_dim();
            accumulate(nodes, grads, *x, |g| {
                for_each_head_index(*batch, *seq, *heads, dk, |src, dst| g[src] += go[dst])
            })
        }
        Op::MergeHeads { x, batch, seq, heads } => {
            let dk = nodes[*x].value.last_dim();
            accumulate(nodes, grads, *x, |g| {
                for_each_head_index(*batch, *seq, *heads, dk, |merged, split| g[split] += go[merged])
            })
        }
        Op::BceWithLogits { logits, targets } => {
            let z = nodes[*logits].value.data();
            let n = z.len() as f64;
            accumulate(nodes, grads, *logits, |g| {
                for i in 0..g.len() {
                    g[i] += go[0] * (sigmoid(z[i]) - targets[i]) / n;
                }
            })
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn matmul_backward(
    nodes: &[Node],
    grads: &mut [Option<Tensor>],
    id: usize,
    a: usize,
    b: usize,
    ta: bool,
    tb: bool,
    go: &[f64],
) {
    let (av, bv) = (&nodes[a].value, &nodes[b].value);
    let (batch, am, ak, bm, bk) = mat_dims(av, bv);
    let (m, n) = {
        let s = nodes[id].value.shape();
        (s[s.len() - 2], s[s.len() - 1])
    };
    let a_stride = am * ak;
    let b_stride = if bv.shape().len() == 3 { bm * bk } else { 0 };
    let c_stride = m * n;
    // C = A' B' with A' = op(A), B' = op(B); dA' = dC B'^T, dB' = A'^T dC.
    accumulate(nodes, grads, a, |g| {
        for p in 0..batch {
            let gc = MatRef::row_major(&go[p * c_stride..], m, n);
            let bp = MatRef::row_major(&bv.data()[p * b_stride..], bm, bk).t_if(tb);
            let gslice = &mut g[p * a_stride..(p + 1) * a_stride];
            if ta {
                // dA = (dC B'^T)^T = B' dC^T
                gemm(1.0, bp, gc.t(), 1.0, gslice);
            } else {
                gemm(1.0, gc, bp.t(), 1.0, gslice);
            }
        }
    });
    let bshared = bv.shape().len() == 2 && batch > 1;
    accumulate(nodes, grads, b, |g| {
        for p in 0..batch {
            let gc = MatRef::row_major(&go[p * c_stride..], m, n);
            let ap = MatRef::row_major(&av.data()[p * a_stride..], am, ak).t_if(ta);
            let off = if bshared { 0 } else { p * b_stride };
            let gslice = &mut g[off..off + bm * bk];
            if tb {
                gemm(1.0, gc.t(), ap, 1.0, gslice);
            } else {
                gemm(1.0, ap.t(), gc, 1.0, gslice);
            }
        }
    });
}

/// (batch, a_rows, a_cols, b_rows, b_cols) of stored (untransposed) operands.
fn mat_dims(a: &Tensor, b: &Tensor) -> (usize, usize, usize, usize, usize) {
    let sa = a.shape();
    let sb = b.shape();
    let batch = if sa.len() == 3 { sa[0] } else { 1 };
    let (am, ak) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (bm, bk) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    (batch, am, ak, bm, bk)
}

/// Visits (merged index `[B*N, H*dk]`, split index `[B*H, N, dk]`) pairs.
fn for_each_head_index(batch: usize, seq: usize, heads: usize, dk: usize, mut f: impl FnMut(usize, usize)) {
    let d = heads * dk;
    for b in 0..batch {
        for h in 0..heads {
            for t in 0..seq {
                let merged = (b * seq + t) * d + h * dk;
                let split = ((b * heads + h) * seq + t) * dk;
                for j in 0..dk {
                    f(merged + j, split + j);
                }
            }
        }
    }
}

fn add_into(g: &mut [f64], d: &[f64]) {
    for (x, y) in g.iter_mut().zip(d) {
        *x += y;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: shape mismatch");
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    /// Copy of the recorded value.
    pub fn value(&self) -> Tensor {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<T>(&self, f: impl FnOnce(&Tensor) -> T) -> T {
        f(&self.graph.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|v| v.shape().to_vec())
    }

    pub fn item(&self) -> f64 {
        self.with_value(Tensor::item)
    }

    fn unary(self, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Var<'g> {
        let out = self.with_value(f);
        let rg = self.graph.rg(self.id);
        self.graph.push(out, op, rg)
    }

    fn binary(self, other: Var<'g>, op: Op, f: impl FnOnce(&Tensor, &Tensor) -> Tensor) -> Var<'g> {
        let g = self.graph;
        let out = {
            let nodes = g.nodes.borrow();
            f(&nodes[self.id].value, &nodes[other.id].value)
        };
        let rg = g.rg(self.id) || g.rg(other.id);
        g.push(out, op, rg)
    }

    fn zip(self, other: Var<'g>, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'g> {
        self.binary(other, op, |a, b| {
            same_shape(a, b, "elementwise");
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        })
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        self.zip(other, Op::Add(self.id, other.id), |x, y| x + y)
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        self.zip(other, Op::Sub(self.id, other.id), |x, y| x - y)
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        self.zip(other, Op::Mul(self.id, other.id), |x, y| x * y)
    }

    pub fn minimum(self, other: Var<'g>) -> Var<'g> {
        self.zip(other, Op::Minimum(self.id, other.id), f64::min)
    }

    fn check_suffix(a: &Tensor, b: &Tensor) {
        let (sa, sb) = (a.shape(), b.shape());
        let ok = sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb;
        assert!(ok, "broadcast: {sb:?} is not a suffix of {sa:?}");
    }

    /// `self + other` where `other`'s shape is a trailing suffix of `self`'s.
    pub fn add_broadcast(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, Op::AddBroadcast(self.id, other.id), |a, b| {
            Self::check_suffix(a, b);
            let n = b.len();
            let bd = b.data();
            let data = a.data().iter().enumerate().map(|(i, x)| x + bd[i % n]).collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        })
    }

    /// `self * other` where `other`'s shape is a trailing suffix of `self`'s.
    pub fn mul_broadcast(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, Op::MulBroadcast(self.id, other.id), |a, b| {
            Self::check_suffix(a, b);
            let n = b.len();
            let bd = b.data();
            let data = a.data().iter().enumerate().map(|(i, x)| x * bd[i % n]).collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        })
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        self.unary(Op::Scale(self.id, c), |a| a.map(|x| c * x))
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        self.unary(Op::AddScalar(self.id), |a| a.map(|x| x + c))
    }

    /// Matrix product of 2-D operands, or batched product of 3-D operands
    /// (a 2-D right operand is shared across the batch). `ta`/`tb`
    /// transpose the trailing two dimensions.
    pub fn matmul_t(self, other: Var<'g>, ta: bool, tb: bool) -> Var<'g> {
        let op = Op::MatMul { a: self.id, b: other.id, ta, tb };
        self.binary(other, op, |a, b| {
            let (batch, am, ak, bm, bk) = mat_dims(a, b);
            assert!(a.shape().len() >= 2 && b.shape().len() >= 2, "matmul needs matrices");
            if b.shape().len() == 3 {
                assert_eq!(a.shape().len(), 3, "matmul: batched rhs needs batched lhs");
                assert_eq!(b.shape()[0], batch, "matmul: batch mismatch");
            }
            let (m, k) = if ta { (ak, am) } else { (am, ak) };
            let (k2, n) = if tb { (bk, bm) } else { (bm, bk) };
            assert_eq!(k, k2, "matmul: inner dimension mismatch {:?} x {:?}", a.shape(), b.shape());
            let b_stride = if b.shape().len() == 3 { bm * bk } else { 0 };
            let mut out = vec![0.0; batch * m * n];
            for p in 0..batch {
                let ap = MatRef::row_major(&a.data()[p * am * ak..], am, ak).t_if(ta);
                let bp = MatRef::row_major(&b.data()[p * b_stride..], bm, bk).t_if(tb);
                gemm(1.0, ap, bp, 0.0, &mut out[p * m * n..(p + 1) * m * n]);
            }
            let shape = if a.shape().len() == 3 { vec![batch, m, n] } else { vec![m, n] };
            Tensor::from_parts(shape, out)
        })
    }

    pub fn matmul(self, other: Var<'g>) -> Var<'g> {
        self.matmul_t(other, false, false)
    }

    pub fn relu(self) -> Var<'g> {
        self.unary(Op::Relu(self.id), |a| a.map(|x| x.max(0.0)))
    }

    pub fn tanh(self) -> Var<'g> {
        self.unary(Op::Tanh(self.id), |a| a.map(f64::tanh))
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(Op::Sigmoid(self.id), |a| a.map(sigmoid))
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(Op::Exp(self.id), |a| a.map(f64::exp))
    }

    pub fn ln(self) -> Var<'g> {
        self.unary(Op::Log(self.id), |a| a.map(f64::ln))
    }

    /// `ln(1 + e^x)`, computed stably.
    pub fn softplus(self) -> Var<'g> {
        self.unary(Op::Softplus(self.id), |a| a.map(softplus))
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'g> {
        self.unary(Op::Clamp(self.id, lo, hi), |a| a.map(|x| x.clamp(lo, hi)))
    }

    /// Softmax over the trailing dimension.
    pub fn softmax(self) -> Var<'g> {
        self.unary(Op::Softmax(self.id), softmax_rows)
    }

    /// Layer normalization over the trailing dimension with per-feature
    /// `gain` and `shift` (both shaped `[d]`).
    pub fn layer_norm(self, gain: Var<'g>, shift: Var<'g>) -> Var<'g> {
        let g = self.graph;
        let (out, xhat, rstd) = {
            let nodes = g.nodes.borrow();
            let x = &nodes[self.id].value;
            let gv = nodes[gain.id].value.data();
            let sv = nodes[shift.id].value.data();
            let d = x.last_dim();
            assert_eq!(gv.len(), d, "layer_norm gain size");
            assert_eq!(sv.len(), d, "layer_norm shift size");
            let rows = x.rows();
            let mut xhat = vec![0.0; x.len()];
            let mut rstd = vec![0.0; rows];
            let mut out = vec![0.0; x.len()];
            for r in 0..rows {
                let row = x.row(r);
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let rs = 1.0 / (var + LN_EPS).sqrt();
                rstd[r] = rs;
                for j in 0..d {
                    let h = (row[j] - mean) * rs;
                    xhat[r * d + j] = h;
                    out[r * d + j] = h * gv[j] + sv[j];
                }
            }
            (Tensor::from_parts(x.shape().to_vec(), out), xhat, rstd)
        };
        let rg = g.rg(self.id) || g.rg(gain.id) || g.rg(shift.id);
        g.push(out, Op::LayerNorm { x: self.id, gain: gain.id, shift: shift.id, xhat, rstd }, rg)
    }

    pub fn sum(self) -> Var<'g> {
        self.unary(Op::SumAll(self.id), |a| Tensor::scalar(a.data().iter().sum()))
    }

    pub fn mean(self) -> Var<'g> {
        self.unary(Op::MeanAll(self.id), |a| Tensor::scalar(a.data().iter().sum::<f64>() / a.len() as f64))
    }

    /// Columns `start..start + len` of a matrix (trailing dimension).
    pub fn slice_cols(self, start: usize, len: usize) -> Var<'g> {
        self.unary(Op::SliceCols { x: self.id, start }, |a| {
            let d = a.last_dim();
            assert!(start + len <= d, "slice_cols out of range");
            let rows = a.rows();
            let mut data = Vec::with_capacity(rows * len);
            for r in 0..rows {
                data.extend_from_slice(&a.row(r)[start..start + len]);
            }
            let mut shape = a.shape().to_vec();
            *shape.last_mut().unwrap() = len;
            Tensor::from_parts(shape, data)
        })
    }

    /// Horizontal concatenation of two 2-D tensors with equal row counts.
    pub fn concat_cols(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, Op::ConcatCols(self.id, other.id), |a, b| {
            assert_eq!(a.rows(), b.rows(), "concat_cols row mismatch");
            let (wa, wb) = (a.last_dim(), b.last_dim());
            let mut data = Vec::with_capacity(a.len() + b.len());
            for r in 0..a.rows() {
                data.extend_from_slice(a.row(r));
                data.extend_from_slice(b.row(r));
            }
            Tensor::from_parts(vec![a.rows(), wa + wb], data)
        })
    }

    /// Selects rows of a matrix (trailing dimension kept).
    pub fn gather_rows(self, rows: &[usize]) -> Var<'g> {
        let rows = rows.to_vec();
        let idx = rows.clone();
        self.unary(Op::GatherRows { x: self.id, rows }, move |a| {
            let d = a.last_dim();
            let mut data = Vec::with_capacity(idx.len() * d);
            for &r in &idx {
                data.extend_from_slice(a.row(r));
            }
            Tensor::from_parts(vec![idx.len(), d], data)
        })
    }

    /// `[batch*seq, heads*dk]` to `[batch*heads, seq, dk]`.
    pub fn split_heads(self, batch: usize, seq: usize, heads: usize) -> Var<'g> {
        self.unary(Op::SplitHeads { x: self.id, batch, seq, heads }, |a| {
            assert_eq!(a.rows(), batch * seq, "split_heads rows");
            let d = a.last_dim();
            assert_eq!(d % heads, 0, "split_heads: width not divisible by heads");
            let dk = d / heads;
            let mut out = vec![0.0; a.len()];
            let src = a.data();
            for_each_head_index(batch, seq, heads, dk, |m, s| out[s] = src[m]);
            Tensor::from_parts(vec![batch * heads, seq, dk], out)
        })
    }

    /// Inverse of [`Var::split_heads`].
    pub fn merge_heads(self, batch: usize, seq: usize, heads: usize) -> Var<'g> {
        self.unary(Op::MergeHeads { x: self.id, batch, seq, heads }, |a| {
            let dk = a.last_dim();
            assert_eq!(a.len(), batch * seq * heads * dk, "merge_heads size");
            let mut out = vec![0.0; a.len()];
            let src = a.data();
            for_each_head_index(batch, seq, heads, dk, |m, s| out[m] = src[s]);
            Tensor::from_parts(vec![batch * seq, heads * dk], out)
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let shape = shape.to_vec();
        self.unary(Op::Reshape(self.id), move |a| a.clone().reshaped(&shape).expect("reshape: element count mismatch"))
    }

    /// Mean binary cross-entropy of `sigmoid(self)` against `targets`.
    pub fn bce_with_logits(self, targets: &[f64]) -> Var<'g> {
        let t = targets.to_vec();
        let op = Op::BceWithLogits { logits: self.id, targets: targets.to_vec() };
        self.unary(op, move |z| {
            assert_eq!(z.len(), t.len(), "bce: target count mismatch");
            // -[y ln s(z) + (1-y) ln(1 - s(z))] = softplus(z) - y z
            let total: f64 = z.data().iter().zip(&t).map(|(&zi, &yi)| softplus(zi) - yi * zi).sum();
            Tensor::scalar(total / z.len() as f64)
        })
    }
}

pub(crate) fn softmax_rows(a: &Tensor) -> Tensor {
    let d = a.last_dim();
    let mut out = a.data().to_vec();
    for row in out.chunks_mut(d) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    Tensor::from_parts(a.shape().to_vec(), out)
}

impl<'g> ops::Add for Var<'g> {
    type Output = Var<'g>;
    fn add(self, rhs: Var<'g>) -> Var<'g> {
        Var::add(self, rhs)
    }
}

impl<'g> ops::Sub for Var<'g> {
    type Output = Var<'g>;
    fn sub(self, rhs: Var<'g>) -> Var<'g> {
        Var::sub(self, rhs)
    }
}

impl<'g> ops::Mul for Var<'g> {
    type Output = Var<'g>;
    fn mul(self, rhs: Var<'g>) -> Var<'g> {
        Var::mul(self, rhs)
    }
}

impl<'g> ops::Mul<f64> for Var<'g> {
    type Output = Var<'g>;
    fn mul(self, rhs: f64) -> Var<'g> {
        self.scale(rhs)
    }
}

impl<'g> ops::Neg for Var<'g> {
    type Output = Var<'g>;
    fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }
}

/// Checks that a tensor has exactly the given shape.
pub fn expect_shape(t: &Tensor, shape: &[usize], what: &str) -> Result<(), NnError> {
    if t.shape() == shape {
        Ok(())
    } else {
        Err(NnError::Shape(format!("{what}: expected {shape:?}, got {:?}", t.shape())))
    }
}
