//! Reverse-mode automatic differentiation over `f64` ndarrays.
//!
//! A [`Tape`] records each forward operation together with a closure that
//! routes the output gradient back to the operation's inputs. Calling
//! [`Tape::backward`] on a scalar node replays those closures in reverse
//! topological order (which is just reverse insertion order).
//!
//! The op set is deliberately small and fused where a composite would bloat
//! the graph (attention, normalization, convolutions). Every backward rule is
//! covered by finite-difference tests in this module, and the full model
//! objectives are audited end-to-end in the acceptance suite.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn};

use crate::linalg;

pub type Arr = ArrayD<f64>;

/// Gradient accumulator passed to backward closures.
pub struct GradSink<'a> {
    grads: &'a mut Vec<Option<Arr>>,
}

impl GradSink<'_> {
    pub fn add(&mut self, idx: usize, contrib: Arr) {
        match &mut self.grads[idx] {
            Some(g) => *g += &contrib,
            slot @ None => *slot = Some(contrib),
        }
    }
}

type BackFn = Box<dyn Fn(&Arr, &mut GradSink)>;

struct Node {
    value: Rc<Arr>,
    back: Option<BackFn>,
}

/// Records a computation graph; cheap to create per forward pass and dropped
/// afterwards. Not `Sync`: one tape per logical thread of control.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

/// Gradients of one scalar node with respect to every node on the tape.
pub struct Gradients {
    grads: Vec<Option<Arr>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Arr> {
        self.grads[v.idx].as_ref()
    }
}

pub fn scalar(v: f64) -> Arr {
    Arr::from_elem(IxDyn(&[]), v)
}

fn as2(a: &Arr) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("expected 2-d value")
}

fn as1(a: &Arr) -> ndarray::ArrayView1<'_, f64> {
    a.view().into_dimensionality::<Ix1>().expect("expected 1-d value")
}

fn as3(a: &Arr) -> ndarray::ArrayView3<'_, f64> {
    a.view().into_dimensionality::<Ix3>().expect("expected 3-d value")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Arr, back: Option<BackFn>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), back });
        Var { tape: self, idx: nodes.len() - 1 }
    }

    /// Insert a leaf. Gradients accumulate here but do not propagate further.
    pub fn leaf(&self, value: Arr) -> Var<'_> {
        self.push(value, None)
    }

    pub fn leaf2(&self, value: Array2<f64>) -> Var<'_> {
        self.leaf(value.into_dyn())
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.idx];
        assert_eq!(root.value.len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Arr>> = std::iter::repeat_with(|| None).take(nodes.len()).collect();
        grads[loss.idx] = Some(Arr::ones(root.value.raw_dim()));
        for i in (0..=loss.idx).rev() {
            if grads[i].is_none() {
                continue;
            }
            if let Some(back) = &nodes[i].back {
                let g = grads[i].clone().unwrap();
                back(&g, &mut GradSink { grads: &mut grads });
            }
        }
        Gradients { grads }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Arr> {
        Rc::clone(&self.tape.nodes.borrow()[self.idx].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on non-scalar");
        *v.iter().next().unwrap()
    }

    // ---- elementwise ----

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "add shape mismatch");
        let val = &*a + &*b;
        let (ia, ib) = (self.idx, other.idx);
        self.tape.push(
            val,
            Some(Box::new(move |g, sink| {
                sink.add(ia, g.clone());
                sink.add(ib, g.clone());
            })),
        )
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "sub shape mismatch");
        let val = &*a - &*b;
        let (ia, ib) = (self.idx, other.idx);
        self.tape.push(
            val,
            Some(Box::new(move |g, sink| {
                sink.add(ia, g.clone());
                sink.add(ib, g.mapv(|x| -x));
            })),
        )
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
        let val = &*a * &*b;
        let (ia, ib) = (self.idx, other.idx);
        self.tape.push(
            val,
            Some(Box::new(move |g, sink| {
                sink.add(ia, g * &*b);
                sink.add(ib, g * &*a);
            })),
        )
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let val = self.value().mapv(|x| c * x);
        let ia = self.idx;
        self.tape.push(val, Some(Box::new(move |g, sink| sink.add(ia, g.mapv(|x| c * x)))))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let val = self.value().mapv(|x| x + c);
        let ia = self.idx;
        self.tape.push(val, Some(Box::new(move |g, sink| sink.add(ia, g.clone()))))
    }

    pub fn abs(self) -> Var<'t> {
        let a = self.value();
        let val = a.mapv(f64::abs);
        let ia = self.idx;
        self.tape.push(
            val,
            Some(Box::new(move |g, sink| {
                sink.add(ia, g * &a.mapv(|x| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 }));
            })),
        )
    }

    pub fn gelu(self) -> Var<'t> {
        // tanh form; the derivative below is exact for this expression.
        const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const C3: f64 = 0.044715;
        let a = self.value();
        let val = a.mapv(|x| {
            let u = K * (x + C3 * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        });
        let ia = self.idx;
        self.tape.push(
            val,
            Some(Box::new(move |g, sink| {
                let d = a.mapv(|x| {
                    let u = K * (x + C3 * x * x * x);
                    let t = u.tanh();
                    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * K * (1.0 + 3.0 * C3 * x * x)
                });
                sink.add(ia, g * &d);
            })),
        )
    }

    /// Sigmoid squeezed into [eps, 1-eps] so downstream logs stay finite.
    pub fn sigmoid_bounded(self, eps: f64) -> Var<'t> {
        let a = self.value();
        let val = a.mapv(|x| eps + (1.0 - 2.0 * eps) / (1.0 + (-x).exp()));
        let ia = self.idx;
        self.tape.push(
            val,
            Some(Box::new(move |g, sink| {
                let d = a.mapv(|x| {
                    let s = 1.0 / (1.0 + (-x).exp());
                    (1.0 - 2.0 * eps) * s * (1.0 - s)
                });
                sink.add(ia, g * &d);
            })),
        )
    }

    pub fn ln(self) -> Var<'t> {
        let a = self.value();
        let val = a.mapv(f64::ln);
        let ia = self.idx;
        self.tape.push(
            val,
            Some(Box::new(move |g, sink| {
                sink.add(ia, g / &*a);
            })),
        )
    }

    // ---- reductions ----

    pub fn sum_all(self) -> Var<'t> {
        let a = self.value();
        let val = scalar(a.sum());
        let ia = self.idx;
        let shape = a.raw_dim();
        self.tape.push(
            val,
            Some(Box::new(move |g, sink| {
                let gv = *g.iter().next().unwrap();
                sink.add(ia, Arr::from_elem(shape.clone(), gv));
            })),
        )
    }

    pub fn mean_all(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Column means of a 2-d value: m×n → n.
    pub fn mean_rows(self) -> Var<'t> {
        let a = self.value();
        let a2 = as2(&a);
        let m = a2.nrows() as f64;
        let val = a2.mean_axis(Axis(0)).unwrap().into_dyn();
        let ia = self.idx;
        let (rows, cols) = (a2.nrows(), a2.ncols());
        self.tape.push(
            val,
            Some(Box::new(move |g, sink| {
                let g1 = as1(g);
                let mut out = Array2::<f64>::zeros((rows, cols));
                for r in 0..rows {
                    for c in 0..cols {
                        out[[r, c]] = g1[c] / m;
                    }
                }
                sink.add(ia, out.into_dyn());
            })),
        )
    }

    pub fn dot_vec(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let (a1, b1) = (as1(&a), as1(&b));
        let val = scalar(a1.dot(&b1));
        let (ia, ib) = (self.idx, other.idx);
        self.tape.push(
            val,
            Some(Box::new(move |g, sink| {
                let gv = *g.iter().next().unwrap();
                sink.add(ia, b.mapv(|x| gv * x));
                sink.add(ib, a.mapv(|x| gv * x));
            })),
        )
    }

    // ---- linear algebra ----

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let (a2, b2) = (as2(&a), as2(&b));
        assert_eq!(a2.ncols(), b2.nrows(), "matmul inner dim mismatch");
        let val = a2.dot(&b2).into_dyn();
        let (ia, ib) = (self.idx, other.idx);
        self.tape.push(
            val,
            Some(Box::new(move |g, sink| {
                let g2 = as2(g);
                let (a2, b2) = (as2(&a), as2(&b));
                sink.add(ia, g2.dot(&b2.t()).into_dyn());
                sink.add(ib, a2.t().dot(&g2).into_dyn());
            })),
        )
    }

    pub fn transpose(self) -> Var<'t> {
        let a = self.value();
        let val = as2(&a).t().to_owned().into_dyn();
        let ia = self.idx;
        self.tape.push(
            val,
            Some(Box::new(move |g, sink| {
                sink.add(ia, as2(g).t().to_owned().into_dyn());
            })),
        )
    }

    /// Matrix inverse of a square 2-d value.
    pub fn inverse(self) -> Var<'t> {
        let a = self.value();
        let inv = linalg::invert(&as2(&a).to_owned()).expect("inverse: singular matrix");
        let inv_rc = Rc::new(inv.clone());
        let ia = self.idx;
        self.tape.push(
            inv.into_dyn(),
            Some(Box::new(move |g, sink| {
                // d(A^{-1}) rule: dA = -Yᵀ G Yᵀ with Y = A^{-1}.
                let y = &*inv_rc;
                let g2 = as2(g);
                let da = -y.t().dot(&g2).dot(&y.t());
                sink.add(ia, da.into_dyn());
            })),
        )
    }

    pub fn add_diag(self, lambda: f64) -> Var<'t> {
        let a = self.value();
        let mut val = as2(&a).to_owned();
        for i in 0..val.nrows().min(val.ncols()) {
            val[[i, i]] += lambda;
        }
        let ia = self.idx;
        self.tape.push(val.into_dyn(), Some(Box::new(move |g, sink| sink.add(ia, g.clone()))))
    }

    /// Softmax along each row of a 2-d value.
    pub fn softmax_rows(self) -> Var<'t> {
        let a = self.value();
        let p = softmax_rows_plain(&as2(&a).to_owned());
        let p_rc = Rc::new(p.clone());
        let ia = self.idx;
        self.tape.push(
            p.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g2 = as2(g);
                let p = &*p_rc;
                let mut out = Array2::<f64>::zeros(p.raw_dim());
                for r in 0..p.nrows() {
                    let mut dot = 0.0;
                    for c in 0..p.ncols() {
                        dot += g2[[r, c]] * p[[r, c]];
                    }
                    for c in 0..p.ncols() {
                        out[[r, c]] = p[[r, c]] * (g2[[r, c]] - dot);
                    }
                }
                sink.add(ia, out.into_dyn());
            })),
        )
    }

    /// Broadcast-add a length-n vector to every row of an m×n value.
    pub fn add_row_vector(self, v: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), v.value());
        let a2 = as2(&a).to_owned();
        let b1 = as1(&b);
        assert_eq!(a2.ncols(), b1.len(), "add_row_vector width mismatch");
        let val = &a2 + &b1.view().insert_axis(Axis(0));
        let (ia, ib) = (self.idx, v.idx);
        self.tape.push(
            val.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g2 = as2(g);
                sink.add(ia, g.clone());
                sink.add(ib, g2.sum_axis(Axis(0)).into_dyn());
            })),
        )
    }

    // ---- structural ----

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let a = self.value();
        assert_eq!(a.len(), shape.iter().product::<usize>(), "reshape element count mismatch");
        let flat: Vec<f64> = a.iter().cloned().collect();
        let val = Arr::from_shape_vec(IxDyn(shape), flat).unwrap();
        let ia = self.idx;
        let orig = a.raw_dim();
        self.tape.push(
            val,
            Some(Box::new(move |g, sink| {
                let flat: Vec<f64> = g.iter().cloned().collect();
                sink.add(ia, Arr::from_shape_vec(orig.clone(), flat).unwrap());
            })),
        )
    }

    pub fn select_rows(self, idxs: &[usize]) -> Var<'t> {
        let a = self.value();
        let a2 = as2(&a);
        let mut val = Array2::<f64>::zeros((idxs.len(), a2.ncols()));
        for (r, &i) in idxs.iter().enumerate() {
            val.row_mut(r).assign(&a2.row(i));
        }
        let ia = self.idx;
        let idxs = idxs.to_vec();
        let (rows, cols) = (a2.nrows(), a2.ncols());
        self.tape.push(
            val.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g2 = as2(g);
                let mut out = Array2::<f64>::zeros((rows, cols));
                for (r, &i) in idxs.iter().enumerate() {
                    for c in 0..cols {
                        out[[i, c]] += g2[[r, c]];
                    }
                }
                sink.add(ia, out.into_dyn());
            })),
        )
    }

    pub fn slice_cols(self, from: usize, to: usize) -> Var<'t> {
        let a = self.value();
        let a2 = as2(&a);
        let val = a2.slice(ndarray::s![.., from..to]).to_owned();
        let ia = self.idx;
        let (rows, cols) = (a2.nrows(), a2.ncols());
        self.tape.push(
            val.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g2 = as2(g);
                let mut out = Array2::<f64>::zeros((rows, cols));
                for r in 0..rows {
                    for (k, c) in (from..to).enumerate() {
                        out[[r, c]] = g2[[r, k]];
                    }
                }
                sink.add(ia, out.into_dyn());
            })),
        )
    }

    /// Row-major off-diagonal entries of an n×n value as a 1×n(n-1) row.
    pub fn offdiag_to_row(self) -> Var<'t> {
        let a = self.value();
        let a2 = as2(&a);
        let n = a2.nrows();
        let mut flat = Vec::with_capacity(n * (n - 1));
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    flat.push(a2[[i, j]]);
                }
            }
        }
        let val = Array2::from_shape_vec((1, n * (n - 1)), flat).unwrap();
        let ia = self.idx;
        self.tape.push(
            val.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g2 = as2(g);
                let mut out = Array2::<f64>::zeros((n, n));
                let mut k = 0;
                for i in 0..n {
                    for j in 0..n {
                        if i != j {
                            out[[i, j]] = g2[[0, k]];
                            k += 1;
                        }
                    }
                }
                sink.add(ia, out.into_dyn());
            })),
        )
    }
}

fn softmax_rows_plain(a: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros(a.raw_dim());
    for (r, row) in a.rows().into_iter().enumerate() {
        let mx = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let mut sum = 0.0;
        for (c, &x) in row.iter().enumerate() {
            let e = (x - mx).exp();
            out[[r, c]] = e;
            sum += e;
        }
        for c in 0..row.len() {
            out[[r, c]] /= sum;
        }
    }
    out
}

// ---- multi-input / fused operations (free functions) ----

/// Assemble an n×n zero-diagonal matrix from n column vectors, one per target
/// column, each of length n-1 (sources in ascending index order skipping the
/// target itself).
pub fn columns_to_offdiag<'t>(tape: &'t Tape, cols: &[Var<'t>]) -> Var<'t> {
    let n = cols.len();
    let mut val = Array2::<f64>::zeros((n, n));
    let vals: Vec<Rc<Arr>> = cols.iter().map(|c| c.value()).collect();
    for (i, cv) in vals.iter().enumerate() {
        let c1 = as2(cv);
        assert_eq!(c1.nrows(), n - 1, "column length must be n-1");
        for (r, j) in (0..n).filter(|&j| j != i).enumerate() {
            val[[j, i]] = c1[[r, 0]];
        }
    }
    let idxs: Vec<usize> = cols.iter().map(|c| c.idx).collect();
    tape.push(
        val.into_dyn(),
        Some(Box::new(move |g, sink| {
            let g2 = as2(g);
            for (i, &ci) in idxs.iter().enumerate() {
                let mut gc = Array2::<f64>::zeros((g2.nrows() - 1, 1));
                for (r, j) in (0..g2.nrows()).filter(|&j| j != i).enumerate() {
                    gc[[r, 0]] = g2[[j, i]];
                }
                sink.add(ci, gc.into_dyn());
            }
        })),
    )
}

/// Concatenate 3-d values along the channel axis: each [c_i, n, l] → [Σc, n, l].
pub fn concat_channels<'t>(tape: &'t Tape, parts: &[Var<'t>]) -> Var<'t> {
    let vals: Vec<Rc<Arr>> = parts.iter().map(|p| p.value()).collect();
    let views: Vec<_> = vals.iter().map(|v| as3(v)).collect();
    let (n, l) = (views[0].dim().1, views[0].dim().2);
    let total: usize = views.iter().map(|v| v.dim().0).sum();
    let mut val = ndarray::Array3::<f64>::zeros((total, n, l));
    let mut offset = 0;
    for v in &views {
        let c = v.dim().0;
        val.slice_mut(ndarray::s![offset..offset + c, .., ..]).assign(v);
        offset += c;
    }
    let idxs: Vec<usize> = parts.iter().map(|p| p.idx).collect();
    let sizes: Vec<usize> = views.iter().map(|v| v.dim().0).collect();
    tape.push(
        val.into_dyn(),
        Some(Box::new(move |g, sink| {
            let g3 = as3(g);
            let mut offset = 0;
            for (&idx, &c) in idxs.iter().zip(&sizes) {
                let part = g3.slice(ndarray::s![offset..offset + c, .., ..]).to_owned();
                sink.add(idx, part.into_dyn());
                offset += c;
            }
        })),
    )
}

/// Concatenate 2-d values along columns: each m×k_i → m×Σk.
pub fn concat_cols<'t>(tape: &'t Tape, parts: &[Var<'t>]) -> Var<'t> {
    let vals: Vec<Rc<Arr>> = parts.iter().map(|p| p.value()).collect();
    let views: Vec<_> = vals.iter().map(|v| as2(v)).collect();
    let rows = views[0].nrows();
    let total: usize = views.iter().map(|v| v.ncols()).sum();
    let mut val = Array2::<f64>::zeros((rows, total));
    let mut offset = 0;
    for v in &views {
        val.slice_mut(ndarray::s![.., offset..offset + v.ncols()]).assign(v);
        offset += v.ncols();
    }
    let idxs: Vec<usize> = parts.iter().map(|p| p.idx).collect();
    let sizes: Vec<usize> = views.iter().map(|v| v.ncols()).collect();
    tape.push(
        val.into_dyn(),
        Some(Box::new(move |g, sink| {
            let g2 = as2(g);
            let mut offset = 0;
            for (&idx, &k) in idxs.iter().zip(&sizes) {
                let part = g2.slice(ndarray::s![.., offset..offset + k]).to_owned();
                sink.add(idx, part.into_dyn());
                offset += k;
            }
        })),
    )
}

/// Which axis an attention block mixes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnAxis {
    /// Mix across ROIs, independently per time index.
    Roi,
    /// Mix across time, independently per ROI.
    Time,
}

/// Scaled dot-product attention over one axis of per-head tensors shaped
/// [k, n, l]. Queries/keys/values must already be projected.
pub fn attention_axis<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>, axis: AttnAxis, scale: f64) -> Var<'t> {
    let tape = q.tape;
    let (qv, kv, vv) = (q.value(), k.value(), v.value());
    let (q3, k3, v3) = (as3(&qv), as3(&kv), as3(&vv));
    let (ch, n, l) = q3.dim();
    assert_eq!(k3.dim(), (ch, n, l));
    assert_eq!(v3.dim(), (ch, n, l));

    let slices = match axis {
        AttnAxis::Roi => l,
        AttnAxis::Time => n,
    };
    // tokens per slice
    let tokens = match axis {
        AttnAxis::Roi => n,
        AttnAxis::Time => l,
    };

    let gather = |src: &ndarray::ArrayView3<f64>, s: usize| -> Array2<f64> {
        let mut m = Array2::<f64>::zeros((tokens, ch));
        for t in 0..tokens {
            for c in 0..ch {
                let val = match axis {
                    AttnAxis::Roi => src[[c, t, s]],
                    AttnAxis::Time => src[[c, s, t]],
                };
                m[[t, c]] = val;
            }
        }
        m
    };

    let mut out = ndarray::Array3::<f64>::zeros((ch, n, l));
    let mut probs: Vec<Array2<f64>> = Vec::with_capacity(slices);
    for s in 0..slices {
        let qs = gather(&q3, s);
        let ks = gather(&k3, s);
        let vs = gather(&v3, s);
        let scores = qs.dot(&ks.t()).mapv(|x| x / scale);
        let p = softmax_rows_plain(&scores);
        let o = p.dot(&vs);
        for t in 0..tokens {
            for c in 0..ch {
                match axis {
                    AttnAxis::Roi => out[[c, t, s]] = o[[t, c]],
                    AttnAxis::Time => out[[c, s, t]] = o[[t, c]],
                }
            }
        }
        probs.push(p);
    }

    let (qi, ki, vi) = (q.idx, k.idx, v.idx);
    let probs = Rc::new(probs);
    tape.push(
        out.into_dyn(),
        Some(Box::new(move |g, sink| {
            let g3 = as3(g);
            let (q3, k3, v3) = (as3(&qv), as3(&kv), as3(&vv));
            let mut gq = ndarray::Array3::<f64>::zeros((ch, n, l));
            let mut gk = gq.clone();
            let mut gv = gq.clone();
            let gather = |src: &ndarray::ArrayView3<f64>, s: usize| -> Array2<f64> {
                let mut m = Array2::<f64>::zeros((tokens, ch));
                for t in 0..tokens {
                    for c in 0..ch {
                        let val = match axis {
                            AttnAxis::Roi => src[[c, t, s]],
                            AttnAxis::Time => src[[c, s, t]],
                        };
                        m[[t, c]] = val;
                    }
                }
                m
            };
            for s in 0..slices {
                let p = &probs[s];
                let qs = gather(&q3, s);
                let ks = gather(&k3, s);
                let vs = gather(&v3, s);
                let mut go = Array2::<f64>::zeros((tokens, ch));
                for t in 0..tokens {
                    for c in 0..ch {
                        go[[t, c]] = match axis {
                            AttnAxis::Roi => g3[[c, t, s]],
                            AttnAxis::Time => g3[[c, s, t]],
                        };
                    }
                }
                let dv = p.t().dot(&go);
                let dp = go.dot(&vs.t());
                // softmax backward per row
                let mut ds = Array2::<f64>::zeros((tokens, tokens));
                for r in 0..tokens {
                    let mut dot = 0.0;
                    for c in 0..tokens {
                        dot += dp[[r, c]] * p[[r, c]];
                    }
                    for c in 0..tokens {
                        ds[[r, c]] = p[[r, c]] * (dp[[r, c]] - dot) / scale;
                    }
                }
                let dq = ds.dot(&ks);
                let dk = ds.t().dot(&qs);
                for t in 0..tokens {
                    for c in 0..ch {
                        match axis {
                            AttnAxis::Roi => {
                                gq[[c, t, s]] += dq[[t, c]];
                                gk[[c, t, s]] += dk[[t, c]];
                                gv[[c, t, s]] += dv[[t, c]];
                            }
                            AttnAxis::Time => {
                                gq[[c, s, t]] += dq[[t, c]];
                                gk[[c, s, t]] += dk[[t, c]];
                                gv[[c, s, t]] += dv[[t, c]];
                            }
                        }
                    }
                }
            }
            sink.add(qi, gq.into_dyn());
            sink.add(ki, gk.into_dyn());
            sink.add(vi, gv.into_dyn());
        })),
    )
}

/// Per-channel normalization over the (n, l) extent of a [c, n, l] value with
/// learned per-channel gain and bias.
pub fn instance_norm<'t>(x: Var<'t>, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Var<'t> {
    let tape = x.tape;
    let xv = x.value();
    let x3 = as3(&xv);
    let (ch, n, l) = x3.dim();
    let gv = gain.value();
    let bv = bias.value();
    let g1 = as1(&gv);
    let b1 = as1(&bv);
    assert_eq!(g1.len(), ch);

    let m = (n * l) as f64;
    let mut out = ndarray::Array3::<f64>::zeros((ch, n, l));
    let mut xhat = ndarray::Array3::<f64>::zeros((ch, n, l));
    let mut sigmas = vec![0.0; ch];
    for c in 0..ch {
        let plane = x3.index_axis(Axis(0), c);
        let mean = plane.sum() / m;
        let var = plane.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / m;
        let sigma = (var + eps).sqrt();
        sigmas[c] = sigma;
        for i in 0..n {
            for j in 0..l {
                let xh = (plane[[i, j]] - mean) / sigma;
                xhat[[c, i, j]] = xh;
                out[[c, i, j]] = g1[c] * xh + b1[c];
            }
        }
    }
    let xhat = Rc::new(xhat);
    let (xi, gi, bi) = (x.idx, gain.idx, bias.idx);
    tape.push(
        out.into_dyn(),
        Some(Box::new(move |g, sink| {
            let g3 = as3(g);
            let gn = as1(&gv);
            let mut dx = ndarray::Array3::<f64>::zeros((ch, n, l));
            let mut dgain = Array1::<f64>::zeros(ch);
            let mut dbias = Array1::<f64>::zeros(ch);
            for c in 0..ch {
                let mut sum_g = 0.0;
                let mut sum_gx = 0.0;
                for i in 0..n {
                    for j in 0..l {
                        let gg = g3[[c, i, j]];
                        sum_g += gg;
                        sum_gx += gg * xhat[[c, i, j]];
                        dgain[c] += gg * xhat[[c, i, j]];
                        dbias[c] += gg;
                    }
                }
                let mean_g = sum_g / m;
                let mean_gx = sum_gx / m;
                for i in 0..n {
                    for j in 0..l {
                        dx[[c, i, j]] =
                            gn[c] / sigmas[c] * (g3[[c, i, j]] - mean_g - xhat[[c, i, j]] * mean_gx);
                    }
                }
            }
            sink.add(xi, dx.into_dyn());
            sink.add(gi, dgain.into_dyn());
            sink.add(bi, dbias.into_dyn());
        })),
    )
}

/// Per-row normalization of an m×n value with learned per-column gain/bias.
pub fn norm_rows<'t>(x: Var<'t>, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Var<'t> {
    let tape = x.tape;
    let xv = x.value();
    let x2 = as2(&xv).to_owned();
    let gv = gain.value();
    let bv = bias.value();
    let (rows, cols) = x2.dim();
    let g1 = as1(&gv);
    let b1 = as1(&bv);
    assert_eq!(g1.len(), cols);

    let m = cols as f64;
    let mut out = Array2::<f64>::zeros((rows, cols));
    let mut xhat = Array2::<f64>::zeros((rows, cols));
    let mut sigmas = vec![0.0; rows];
    for r in 0..rows {
        let row = x2.row(r);
        let mean = row.sum() / m;
        let var = row.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / m;
        let sigma = (var + eps).sqrt();
        sigmas[r] = sigma;
        for c in 0..cols {
            let xh = (row[c] - mean) / sigma;
            xhat[[r, c]] = xh;
            out[[r, c]] = g1[c] * xh + b1[c];
        }
    }
    let xhat = Rc::new(xhat);
    let (xi, gi, bi) = (x.idx, gain.idx, bias.idx);
    tape.push(
        out.into_dyn(),
        Some(Box::new(move |g, sink| {
            let g2 = as2(g);
            let gn = as1(&gv);
            let mut dx = Array2::<f64>::zeros((rows, cols));
            let mut dgain = Array1::<f64>::zeros(cols);
            let mut dbias = Array1::<f64>::zeros(cols);
            for r in 0..rows {
                let mut mean_u = 0.0;
                let mut mean_ux = 0.0;
                for c in 0..cols {
                    let u = g2[[r, c]] * gn[c];
                    mean_u += u;
                    mean_ux += u * xhat[[r, c]];
                    dgain[c] += g2[[r, c]] * xhat[[r, c]];
                    dbias[c] += g2[[r, c]];
                }
                mean_u /= m;
                mean_ux /= m;
                for c in 0..cols {
                    let u = g2[[r, c]] * gn[c];
                    dx[[r, c]] = (u - mean_u - xhat[[r, c]] * mean_ux) / sigmas[r];
                }
            }
            sink.add(xi, dx.into_dyn());
            sink.add(gi, dgain.into_dyn());
            sink.add(bi, dbias.into_dyn());
        })),
    )
}

/// 1-d convolution along the last axis of a [c_in, n, l] value, kernel width 3,
/// zero padding 1. Output length is l for stride 1 and ceil(l/2) for stride 2.
/// Weights are [c_out, c_in, 3], bias [c_out]. ROIs never mix.
pub fn conv1d<'t>(x: Var<'t>, w: Var<'t>, b: Var<'t>, stride: usize) -> Var<'t> {
    assert!(stride == 1 || stride == 2, "conv1d supports stride 1 or 2");
    let tape = x.tape;
    let (xv, wv, bv) = (x.value(), w.value(), b.value());
    let x3 = as3(&xv);
    let w3 = as3(&wv);
    let b1 = as1(&bv);
    let (cin, n, l) = x3.dim();
    let (cout, cin_w, k) = w3.dim();
    assert_eq!(cin, cin_w, "conv1d channel mismatch");
    assert_eq!(k, 3, "conv1d kernel width must be 3");
    assert_eq!(b1.len(), cout);
    let lout = (l - 1) / stride + 1;

    let mut out = ndarray::Array3::<f64>::zeros((cout, n, lout));
    for o in 0..cout {
        for r in 0..n {
            for j in 0..lout {
                let mut acc = b1[o];
                let base = (j * stride) as isize - 1;
                for i in 0..cin {
                    for t in 0..3usize {
                        let pos = base + t as isize;
                        if pos >= 0 && (pos as usize) < l {
                            acc += w3[[o, i, t]] * x3[[i, r, pos as usize]];
                        }
                    }
                }
                out[[o, r, j]] = acc;
            }
        }
    }
    let (xi, wi, bi) = (x.idx, w.idx, b.idx);
    tape.push(
        out.into_dyn(),
        Some(Box::new(move |g, sink| {
            let g3 = as3(g);
            let x3 = as3(&xv);
            let w3 = as3(&wv);
            let mut dx = ndarray::Array3::<f64>::zeros((cin, n, l));
            let mut dw = ndarray::Array3::<f64>::zeros((cout, cin, 3));
            let mut db = Array1::<f64>::zeros(cout);
            for o in 0..cout {
                for r in 0..n {
                    for j in 0..lout {
                        let gg = g3[[o, r, j]];
                        db[o] += gg;
                        let base = (j * stride) as isize - 1;
                        for i in 0..cin {
                            for t in 0..3usize {
                                let pos = base + t as isize;
                                if pos >= 0 && (pos as usize) < l {
                                    dx[[i, r, pos as usize]] += gg * w3[[o, i, t]];
                                    dw[[o, i, t]] += gg * x3[[i, r, pos as usize]];
                                }
                            }
                        }
                    }
                }
            }
            sink.add(xi, dx.into_dyn());
            sink.add(wi, dw.into_dyn());
            sink.add(bi, db.into_dyn());
        })),
    )
}

/// Transposed 1-d convolution along time, stride 2, kernel width 3, weights
/// [c_in, c_out, 3], bias [c_out]. The full stride-2 output (length 2l+1) is
/// cropped starting at offset 1 down to `target_len`, which inverts the
/// padding used by [`conv1d`] with stride 2.
pub fn conv1d_transpose<'t>(x: Var<'t>, w: Var<'t>, b: Var<'t>, target_len: usize) -> Var<'t> {
    let tape = x.tape;
    let (xv, wv, bv) = (x.value(), w.value(), b.value());
    let x3 = as3(&xv);
    let w3 = as3(&wv);
    let b1 = as1(&bv);
    let (cin, n, l) = x3.dim();
    let (cin_w, cout, k) = w3.dim();
    assert_eq!(cin, cin_w, "conv1d_transpose channel mismatch");
    assert_eq!(k, 3);
    assert_eq!(b1.len(), cout);
    let full = 2 * l + 1;
    assert!(
        target_len + 1 <= full,
        "conv1d_transpose target length {} too large for input length {}",
        target_len,
        l
    );

    let mut out = ndarray::Array3::<f64>::zeros((cout, n, target_len));
    for o in 0..cout {
        for r in 0..n {
            for j in 0..l {
                for t in 0..3usize {
                    let m = 2 * j + t; // position in the full output
                    if m >= 1 && m - 1 < target_len {
                        for i in 0..cin {
                            out[[o, r, m - 1]] += w3[[i, o, t]] * x3[[i, r, j]];
                        }
                    }
                }
            }
            for m in 0..target_len {
                out[[o, r, m]] += b1[o];
            }
        }
    }
    let (xi, wi, bi) = (x.idx, w.idx, b.idx);
    tape.push(
        out.into_dyn(),
        Some(Box::new(move |g, sink| {
            let g3 = as3(g);
            let x3 = as3(&xv);
            let w3 = as3(&wv);
            let mut dx = ndarray::Array3::<f64>::zeros((cin, n, l));
            let mut dw = ndarray::Array3::<f64>::zeros((cin, cout, 3));
            let mut db = Array1::<f64>::zeros(cout);
            for o in 0..cout {
                for r in 0..n {
                    for m in 0..target_len {
                        db[o] += g3[[o, r, m]];
                    }
                    for j in 0..l {
                        for t in 0..3usize {
                            let m = 2 * j + t;
                            if m >= 1 && m - 1 < target_len {
                                let gg = g3[[o, r, m - 1]];
                                for i in 0..cin {
                                    dx[[i, r, j]] += gg * w3[[i, o, t]];
                                    dw[[i, o, t]] += gg * x3[[i, r, j]];
                                }
                            }
                        }
                    }
                }
            }
            sink.add(xi, dx.into_dyn());
            sink.add(wi, dw.into_dyn());
            sink.add(bi, db.into_dyn());
        })),
    )
}

/// Depthwise width-3 convolution applied to every row of an m×n value with a
/// single shared kernel and scalar bias; zero padding keeps the length.
pub fn conv1d_rows<'t>(x: Var<'t>, kernel: Var<'t>, bias: Var<'t>) -> Var<'t> {
    let tape = x.tape;
    let (xv, kv, bv) = (x.value(), kernel.value(), bias.value());
    let x2 = as2(&xv);
    let k1 = as1(&kv);
    assert_eq!(k1.len(), 3);
    let b = *bv.iter().next().unwrap();
    let (rows, cols) = x2.dim();
    let mut out = Array2::<f64>::zeros((rows, cols));
    for r in 0..rows {
        for j in 0..cols {
            let mut acc = b;
            for t in 0..3usize {
                let pos = j as isize + t as isize - 1;
                if pos >= 0 && (pos as usize) < cols {
                    acc += k1[t] * x2[[r, pos as usize]];
                }
            }
            out[[r, j]] = acc;
        }
    }
    let (xi, ki, bi) = (x.idx, kernel.idx, bias.idx);
    tape.push(
        out.into_dyn(),
        Some(Box::new(move |g, sink| {
            let g2 = as2(g);
            let x2 = as2(&xv);
            let k1 = as1(&kv);
            let mut dx = Array2::<f64>::zeros((rows, cols));
            let mut dk = Array1::<f64>::zeros(3);
            let mut db = 0.0;
            for r in 0..rows {
                for j in 0..cols {
                    let gg = g2[[r, j]];
                    db += gg;
                    for t in 0..3usize {
                        let pos = j as isize + t as isize - 1;
                        if pos >= 0 && (pos as usize) < cols {
                            dx[[r, pos as usize]] += gg * k1[t];
                            dk[t] += gg * x2[[r, pos as usize]];
                        }
                    }
                }
            }
            sink.add(xi, dx.into_dyn());
            sink.add(ki, dk.into_dyn());
            sink.add(bi, scalar(db));
        })),
    )
}

/// Add a per-channel bias to a [c, n, l] value.
pub fn add_bias_channels<'t>(x: Var<'t>, b: Var<'t>) -> Var<'t> {
    let tape = x.tape;
    let (xv, bv) = (x.value(), b.value());
    let x3 = as3(&xv);
    let b1 = as1(&bv);
    let (ch, n, l) = x3.dim();
    assert_eq!(b1.len(), ch);
    let mut out = x3.to_owned();
    for c in 0..ch {
        for i in 0..n {
            for j in 0..l {
                out[[c, i, j]] += b1[c];
            }
        }
    }
    let (xi, bi) = (x.idx, b.idx);
    tape.push(
        out.into_dyn(),
        Some(Box::new(move |g, sink| {
            let g3 = as3(g);
            let mut db = Array1::<f64>::zeros(ch);
            for c in 0..ch {
                db[c] = g3.index_axis(Axis(0), c).sum();
            }
            sink.add(xi, g.clone());
            sink.add(bi, db.into_dyn());
        })),
    )
}

/// Average pooling with window/stride 2 along each row of an m×n value; a
/// trailing odd element forms its own window, so the output width is ceil(n/2).
pub fn avg_pool2_rows(x: Var<'_>) -> Var<'_> {
    let tape = x.tape;
    let xv = x.value();
    let x2 = as2(&xv);
    let (rows, cols) = x2.dim();
    let out_cols = cols.div_ceil(2);
    let mut out = Array2::<f64>::zeros((rows, out_cols));
    for r in 0..rows {
        for j in 0..out_cols {
            let a = x2[[r, 2 * j]];
            if 2 * j + 1 < cols {
                out[[r, j]] = 0.5 * (a + x2[[r, 2 * j + 1]]);
            } else {
                out[[r, j]] = a;
            }
        }
    }
    let xi = x.idx;
    tape.push(
        out.into_dyn(),
        Some(Box::new(move |g, sink| {
            let g2 = as2(g);
            let mut dx = Array2::<f64>::zeros((rows, cols));
            for r in 0..rows {
                for j in 0..out_cols {
                    if 2 * j + 1 < cols {
                        dx[[r, 2 * j]] += 0.5 * g2[[r, j]];
                        dx[[r, 2 * j + 1]] += 0.5 * g2[[r, j]];
                    } else {
                        dx[[r, 2 * j]] += g2[[r, j]];
                    }
                }
            }
            sink.add(xi, dx.into_dyn());
        })),
    )
}

/// Negative log-likelihood of class `target` under softmax of a 1-d logit
/// vector.
pub fn cross_entropy_logits(logits: Var<'_>, target: usize) -> Var<'_> {
    let tape = logits.tape;
    let lv = logits.value();
    let l1 = as1(&lv);
    assert!(target < l1.len(), "class index out of range");
    let mx = l1.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let lse = mx + l1.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln();
    let val = scalar(lse - l1[target]);
    let li = logits.idx;
    tape.push(
        val,
        Some(Box::new(move |g, sink| {
            let gv = *g.iter().next().unwrap();
            let l1 = as1(&lv);
            let mx = l1.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let denom: f64 = l1.iter().map(|&x| (x - mx).exp()).sum();
            let mut dl = Array1::<f64>::zeros(l1.len());
            for (i, &x) in l1.iter().enumerate() {
                let p = (x - mx).exp() / denom;
                dl[i] = gv * (p - if i == target { 1.0 } else { 0.0 });
            }
            sink.add(li, dl.into_dyn());
        })),
    )
}

/// View of raw values with no gradient flow (useful for diagnostics).
pub fn detach(v: &Var) -> Arr {
    (*v.value()).clone()
}
