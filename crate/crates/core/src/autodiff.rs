//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s together with a
//! closure computing the vector-Jacobian product. Graphs are cheap to create;
//! build a fresh one per step. A graph created with [`Graph::no_grad`] only
//! evaluates values.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::tensor::{self, ConvGeom, Tensor};

type BackFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Result<Vec<Option<Tensor>>>>;

struct Node {
    op: &'static str,
    value: Arc<Tensor>,
    parents: Vec<usize>,
    back: Option<BackFn>,
    requires_grad: bool,
}

/// Operation tape.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, usize>>,
    record: bool,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, usize>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads[v.id].as_ref()
    }

    /// Gradient of a parameter, `None` if it did not influence the loss.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|&n| self.grads[n].as_ref())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            record: true,
        }
    }

    /// A graph that evaluates but never records backward closures.
    pub fn no_grad() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops all recorded nodes.
    pub fn reset(&self) {
        self.nodes.borrow_mut().clear();
        self.params.borrow_mut().clear();
    }

    fn leaf(&self, op: &'static str, value: Arc<Tensor>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value,
            parents: Vec::new(),
            back: None,
            requires_grad: requires_grad && self.record,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf("constant", Arc::new(value), false)
    }

    /// A free leaf that receives a gradient.
    pub fn variable(&self, value: Tensor) -> Var<'_> {
        self.leaf("variable", Arc::new(value), true)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&self, set: &ParamSet, id: ParamId) -> Var<'_> {
        if let Some(&n) = self.params.borrow().get(&id) {
            return Var { graph: self, id: n };
        }
        let v = self.leaf("param", set.shared(id), true);
        self.params.borrow_mut().insert(id, v.id);
        v
    }

    fn push<'g>(
        &'g self,
        op: &'static str,
        value: Tensor,
        parents: &[Var<'g>],
        back: impl Fn(&Tensor, &[&Tensor], &Tensor) -> Result<Vec<Option<Tensor>>> + 'static,
    ) -> Result<Var<'g>> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite(op.to_string()));
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = self.record && parents.iter().any(|p| nodes[p.id].requires_grad);
        nodes.push(Node {
            op,
            value: Arc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            back: if requires_grad {
                Some(Box::new(back))
            } else {
                None
            },
            requires_grad,
        });
        Ok(Var {
            graph: self,
            id: nodes.len() - 1,
        })
    }

    /// Reverse pass from a scalar `loss`. Each node is visited once, in reverse
    /// creation order (a valid reverse topological order).
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(back) = &node.back else { continue };
            let Some(g) = grads[id].as_ref() else { continue };
            let pvals: Vec<&Tensor> = node.parents.iter().map(|&p| &*nodes[p].value).collect();
            let pgrads = back(g, &pvals, &node.value)?;
            debug_assert_eq!(pgrads.len(), node.parents.len(), "{}", node.op);
            for (&p, pg) in node.parents.iter().zip(pgrads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients {
            grads,
            params: self.params.borrow().clone(),
        })
    }
}

fn need_matrix(v: &Tensor, op: &str) -> Result<(usize, usize)> {
    v.dims2()
        .map_err(|_| Error::dim(format!("{op} expects a matrix, got {:?}", v.shape())))
}

#[allow(clippy::should_implement_trait)]
impl<'g> Var<'g> {
    pub fn value(&self) -> Arc<Tensor> {
        Arc::clone(&self.graph.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    fn unary(
        self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Var<'g>> {
        let out = self.value().map(f);
        self.graph.push(op, out, &[self], move |g, p, y| {
            let mut gx = g.clone();
            for ((gv, &x), &yv) in gx.data_mut().iter_mut().zip(p[0].data()).zip(y.data()) {
                *gv *= df(x, yv);
            }
            Ok(vec![Some(gx)])
        })
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        let out = self.value().zip_map(&other.value(), |a, b| a + b)?;
        self.graph.push("add", out, &[self, other], |g, _, _| {
            Ok(vec![Some(g.clone()), Some(g.clone())])
        })
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        let out = self.value().zip_map(&other.value(), |a, b| a - b)?;
        self.graph.push("sub", out, &[self, other], |g, _, _| {
            Ok(vec![Some(g.clone()), Some(g.scale(-1.0))])
        })
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        let out = self.value().zip_map(&other.value(), |a, b| a * b)?;
        self.graph.push("mul", out, &[self, other], |g, p, _| {
            Ok(vec![
                Some(g.zip_map(p[1], |a, b| a * b)?),
                Some(g.zip_map(p[0], |a, b| a * b)?),
            ])
        })
    }

    pub fn scale(self, c: f64) -> Result<Var<'g>> {
        let out = self.value().scale(c);
        self.graph
            .push("scale", out, &[self], move |g, _, _| Ok(vec![Some(g.scale(c))]))
    }

    /// `x + v` where `v[n]` is broadcast so that flat element `i` of `x` reads
    /// `v[(i / inner) % n]`. `inner = 1` broadcasts along the last axis.
    pub fn bcast_add(self, v: Var<'g>, inner: usize) -> Result<Var<'g>> {
        let x = self.value();
        let vv = v.value();
        let n = vv.numel();
        check_bcast(&x, n, inner)?;
        let mut out = (*x).clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += vv.data()[(i / inner) % n];
        }
        self.graph.push("bcast_add", out, &[self, v], move |g, _, _| {
            let mut gv = vec![0.0; n];
            for (i, &gi) in g.data().iter().enumerate() {
                gv[(i / inner) % n] += gi;
            }
            Ok(vec![Some(g.clone()), Some(Tensor::new(vec![n], gv)?)])
        })
    }

    /// Broadcast multiply, same indexing as [`Var::bcast_add`].
    pub fn bcast_mul(self, v: Var<'g>, inner: usize) -> Result<Var<'g>> {
        let x = self.value();
        let vv = v.value();
        let n = vv.numel();
        check_bcast(&x, n, inner)?;
        let mut out = (*x).clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o *= vv.data()[(i / inner) % n];
        }
        self.graph.push("bcast_mul", out, &[self, v], move |g, p, _| {
            let (x, vv) = (p[0], p[1]);
            let mut gx = g.clone();
            let mut gv = vec![0.0; n];
            for (i, gi) in gx.data_mut().iter_mut().enumerate() {
                let j = (i / inner) % n;
                gv[j] += *gi * x.data()[i];
                *gi *= vv.data()[j];
            }
            Ok(vec![Some(gx), Some(Tensor::new(vec![n], gv)?)])
        })
    }

    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        let out = tensor::matmul(&self.value(), &other.value())?;
        self.graph.push("matmul", out, &[self, other], |g, p, _| {
            Ok(vec![
                Some(tensor::matmul_nt(g, p[1])?),
                Some(tensor::matmul_tn(p[0], g)?),
            ])
        })
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(self, other: Var<'g>) -> Result<Var<'g>> {
        let out = tensor::matmul_nt(&self.value(), &other.value())?;
        self.graph.push("matmul_nt", out, &[self, other], |g, p, _| {
            Ok(vec![
                Some(tensor::matmul(g, p[1])?),
                Some(tensor::matmul_tn(g, p[0])?),
            ])
        })
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(self, other: Var<'g>) -> Result<Var<'g>> {
        let out = tensor::matmul_tn(&self.value(), &other.value())?;
        self.graph.push("matmul_tn", out, &[self, other], |g, p, _| {
            Ok(vec![
                Some(tensor::matmul_nt(p[1], g)?),
                Some(tensor::matmul(p[0], g)?),
            ])
        })
    }

    pub fn gelu(self) -> Result<Var<'g>> {
        self.unary("gelu", tensor::gelu, |x, _| tensor::gelu_grad(x))
    }

    pub fn silu(self) -> Result<Var<'g>> {
        self.unary("silu", tensor::silu, |x, _| tensor::silu_grad(x))
    }

    pub fn abs(self) -> Result<Var<'g>> {
        self.unary("abs", f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    /// Clamp to `[lo, hi]`; the gradient passes wherever the input lies inside
    /// the closed interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Result<Var<'g>> {
        self.unary("clamp", move |x| x.clamp(lo, hi), move |x, _| {
            if (lo..=hi).contains(&x) {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Normalizes each contiguous block of `block` values to zero mean and
    /// unit variance.
    pub fn normalize(self, block: usize, eps: f64) -> Result<Var<'g>> {
        let (out, inv_std) = tensor::normalize_blocks(&self.value(), block, eps)?;
        self.graph.push("normalize", out, &[self], move |g, _, y| {
            let mut gx = vec![0.0; g.numel()];
            let n = block as f64;
            for (b, inv) in inv_std.iter().enumerate() {
                let r = b * block..(b + 1) * block;
                let gb = &g.data()[r.clone()];
                let yb = &y.data()[r.clone()];
                let mean_g = gb.iter().sum::<f64>() / n;
                let mean_gy = gb.iter().zip(yb).map(|(a, b)| a * b).sum::<f64>() / n;
                for ((o, &gi), &yi) in gx[r].iter_mut().zip(gb).zip(yb) {
                    *o = inv * (gi - mean_g - yi * mean_gy);
                }
            }
            Ok(vec![Some(Tensor::new(g.shape().to_vec(), gx)?)])
        })
    }

    /// Layer norm over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(self, gamma: Var<'g>, beta: Var<'g>, eps: f64) -> Result<Var<'g>> {
        let d = *self.shape().last().unwrap_or(&1);
        self.normalize(d, eps)?
            .bcast_mul(gamma, 1)?
            .bcast_add(beta, 1)
    }

    /// Group norm of a `[L, C]` matrix: `groups` contiguous feature groups per row.
    pub fn group_norm(self, groups: usize, gamma: Var<'g>, beta: Var<'g>, eps: f64) -> Result<Var<'g>> {
        let c = *self.shape().last().unwrap_or(&1);
        if groups == 0 || c % groups != 0 {
            return Err(Error::dim(format!(
                "{c} features not divisible into {groups} groups"
            )));
        }
        self.normalize(c / groups, eps)?
            .bcast_mul(gamma, 1)?
            .bcast_add(beta, 1)
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'g>> {
        let x = self.value();
        let out = tensor::softmax(&x, x.shape().len() - 1)?;
        self.graph.push("softmax", out, &[self], |g, _, y| {
            let d = y.last_dim();
            let mut gx = g.clone();
            for (gr, yr) in gx.data_mut().chunks_mut(d).zip(y.data().chunks(d)) {
                let s: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for (gv, &yv) in gr.iter_mut().zip(yr) {
                    *gv = yv * (*gv - s);
                }
            }
            Ok(vec![Some(gx)])
        })
    }

    /// Mean negative log-likelihood of `targets` under `softmax(self)`, over
    /// rows where `mask` is set. `self` is `[T, k]` logits.
    pub fn masked_cross_entropy(self, targets: &[usize], mask: &[bool]) -> Result<Var<'g>> {
        let logits = self.value();
        let (t, k) = need_matrix(&logits, "masked_cross_entropy")?;
        if targets.len() != t || mask.len() != t {
            return Err(Error::dim("targets/mask length differs from logits rows"));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::usage("cross entropy over zero masked positions"));
        }
        if let Some(&bad) = targets.iter().find(|&&c| c >= k) {
            return Err(Error::Vocabulary(format!("target {bad} outside {k} classes")));
        }
        let probs = tensor::softmax(&logits, 1)?;
        let mut loss = 0.0;
        for r in 0..t {
            if mask[r] {
                let row = logits.row(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                loss += lse - row[targets[r]];
            }
        }
        let n = count as f64;
        let targets = targets.to_vec();
        let mask = mask.to_vec();
        self.graph
            .push("masked_cross_entropy", Tensor::scalar(loss / n), &[self], move |g, _, _| {
                let scale = g.data()[0] / n;
                let mut gx = Tensor::zeros(&[t, k]);
                for r in 0..t {
                    if mask[r] {
                        let gr = gx.row_mut(r);
                        for (o, &p) in gr.iter_mut().zip(probs.row(r)) {
                            *o = p * scale;
                        }
                        gr[targets[r]] -= scale;
                    }
                }
                Ok(vec![Some(gx)])
            })
    }

    pub fn sum(self) -> Result<Var<'g>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.graph
            .push("sum", Tensor::scalar(x.sum()), &[self], move |g, _, _| {
                Ok(vec![Some(Tensor::full(&shape, g.data()[0]))])
            })
    }

    pub fn mean(self) -> Result<Var<'g>> {
        let n = self.value().numel() as f64;
        self.sum()?.scale(1.0 / n)
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'g>> {
        let x = self.value();
        let (r, c) = need_matrix(&x, "slice_cols")?;
        if start + len > c || len == 0 {
            return Err(Error::dim(format!("column slice {start}+{len} out of {c}")));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&x.row(i)[start..start + len]);
        }
        self.graph
            .push("slice_cols", Tensor::new(vec![r, len], out)?, &[self], move |g, _, _| {
                let mut gx = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    gx.row_mut(i)[start..start + len].copy_from_slice(g.row(i));
                }
                Ok(vec![Some(gx)])
            })
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'g>> {
        let x = self.value();
        let (r, c) = need_matrix(&x, "slice_rows")?;
        if start + len > r || len == 0 {
            return Err(Error::dim(format!("row slice {start}+{len} out of {r}")));
        }
        let out = x.data()[start * c..(start + len) * c].to_vec();
        self.graph
            .push("slice_rows", Tensor::new(vec![len, c], out)?, &[self], move |g, _, _| {
                let mut gx = vec![0.0; r * c];
                gx[start * c..(start + len) * c].copy_from_slice(g.data());
                Ok(vec![Some(Tensor::new(vec![r, c], gx)?)])
            })
    }

    pub fn reverse_rows(self) -> Result<Var<'g>> {
        let x = self.value();
        let (r, c) = need_matrix(&x, "reverse_rows")?;
        let rev = move |t: &Tensor| {
            let mut out = Vec::with_capacity(r * c);
            for i in (0..r).rev() {
                out.extend_from_slice(t.row(i));
            }
            Tensor::new(vec![r, c], out)
        };
        let out = rev(&x)?;
        self.graph
            .push("reverse_rows", out, &[self], move |g, _, _| Ok(vec![Some(rev(g)?)]))
    }

    /// Rotates consecutive feature pairs `(2j, 2j+1)` of row `r` by angle
    /// `(pos0 + r)·theta[j]`. An odd trailing feature is left unrotated.
    pub fn rotate(self, pos0: usize, theta: Arc<Vec<f64>>) -> Result<Var<'g>> {
        let x = self.value();
        need_matrix(&x, "rotate")?;
        let out = rotate_rows(&x, pos0, &theta, 1.0);
        self.graph.push("rotate", out, &[self], move |g, _, _| {
            Ok(vec![Some(rotate_rows(g, pos0, &theta, -1.0))])
        })
    }

    /// Rows of `self` (a `[R, d]` table) selected by `idx`.
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'g>> {
        let table = self.value();
        let (r, c) = need_matrix(&table, "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::dim(format!("row index {bad} outside table of {r} rows")));
        }
        if idx.is_empty() {
            return Err(Error::dim("gather of zero rows"));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(table.row(i));
        }
        let idx = idx.to_vec();
        let n = idx.len();
        self.graph
            .push("gather_rows", Tensor::new(vec![n, c], out)?, &[self], move |g, _, _| {
                let mut gt = Tensor::zeros(&[r, c]);
                for (k, &i) in idx.iter().enumerate() {
                    for (a, b) in gt.row_mut(i).iter_mut().zip(g.row(k)) {
                        *a += b;
                    }
                }
                Ok(vec![Some(gt)])
            })
    }

    pub fn conv2d(self, kernels: Var<'g>, stride: usize, pad: usize) -> Result<Var<'g>> {
        let x = self.value();
        let k = kernels.value();
        let (geom, c_out) = ConvGeom::new(&x, &k, stride, pad)?;
        let out = tensor::conv2d(&x, &k, stride, pad)?;
        self.graph.push("conv2d", out, &[self, kernels], move |g, p, _| {
            let cols = tensor::im2col(p[0], &geom);
            let gmat = g.clone().reshape(&[c_out, geom.ho * geom.wo])?;
            let wmat = p[1].clone().reshape(&[c_out, cols.shape()[0]])?;
            let gw = tensor::matmul_nt(&gmat, &cols)?.reshape(p[1].shape())?;
            let gcols = tensor::matmul_tn(&wmat, &gmat)?;
            Ok(vec![Some(tensor::col2im(&gcols, &geom)), Some(gw)])
        })
    }

    /// Nearest-neighbour 2× upsampling of `[C, H, W]`.
    pub fn upsample2x(self) -> Result<Var<'g>> {
        let x = self.value();
        let (c, h, w) = match x.shape()[..] {
            [c, h, w] => (c, h, w),
            _ => return Err(Error::dim("upsample2x expects [C,H,W]")),
        };
        let mut out = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + xx] = x.data()[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        self.graph.push(
            "upsample2x",
            Tensor::new(vec![c, 2 * h, 2 * w], out)?,
            &[self],
            move |g, _, _| {
                let mut gx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            gx[(ch * h + y / 2) * w + xx / 2] += g.data()[(ch * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                Ok(vec![Some(Tensor::new(vec![c, h, w], gx)?)])
            },
        )
    }
}

fn check_bcast(x: &Tensor, n: usize, inner: usize) -> Result<()> {
    if inner == 0 || n == 0 || x.numel() % (n * inner) != 0 {
        return Err(Error::dim(format!(
            "cannot broadcast {n} values with stride {inner} over {:?}",
            x.shape()
        )));
    }
    Ok(())
}

/// Pairwise rotation by `sign·(pos0 + r)·theta[j]`; `sign = -1` inverts it.
pub fn rotate_rows(x: &Tensor, pos0: usize, theta: &[f64], sign: f64) -> Tensor {
    let d = x.last_dim();
    let mut out = x.clone();
    for (r, row) in out.data_mut().chunks_mut(d).enumerate() {
        rotate_slice(row, (pos0 + r) as f64, theta, sign);
    }
    out
}

/// In-place pairwise rotation of one row at position `pos`.
pub fn rotate_slice(row: &mut [f64], pos: f64, theta: &[f64], sign: f64) {
    for (j, &th) in theta.iter().enumerate() {
        let (s, c) = (sign * pos * th).sin_cos();
        let (a, b) = (row[2 * j], row[2 * j + 1]);
        row[2 * j] = a * c - b * s;
        row[2 * j + 1] = a * s + b * c;
    }
}

/// Concatenates matrices along columns.
pub fn concat_cols<'g>(parts: &[Var<'g>]) -> Result<Var<'g>> {
    let first = parts.first().ok_or_else(|| Error::dim("concat of nothing"))?;
    let vals: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let rows = need_matrix(&vals[0], "concat_cols")?.0;
    let mut widths = Vec::with_capacity(vals.len());
    for v in &vals {
        let (r, c) = need_matrix(v, "concat_cols")?;
        if r != rows {
            return Err(Error::dim("concat_cols row counts differ"));
        }
        widths.push(c);
    }
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(rows * total);
    for i in 0..rows {
        for v in &vals {
            out.extend_from_slice(v.row(i));
        }
    }
    first.graph.push(
        "concat_cols",
        Tensor::new(vec![rows, total], out)?,
        parts,
        move |g, _, _| {
            let mut off = 0;
            let mut grads = Vec::with_capacity(widths.len());
            for &w in &widths {
                let mut part = Vec::with_capacity(rows * w);
                for i in 0..rows {
                    part.extend_from_slice(&g.row(i)[off..off + w]);
                }
                grads.push(Some(Tensor::new(vec![rows, w], part)?));
                off += w;
            }
            Ok(grads)
        },
    )
}

/// Concatenates tensors along the first axis (all trailing dims equal).
pub fn concat_rows<'g>(parts: &[Var<'g>]) -> Result<Var<'g>> {
    let first = parts.first().ok_or_else(|| Error::dim("concat of nothing"))?;
    let vals: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let tail = vals[0].shape()[1..].to_vec();
    let mut lens = Vec::with_capacity(vals.len());
    for v in &vals {
        if v.shape()[1..] != tail[..] {
            return Err(Error::dim("concat_rows trailing dims differ"));
        }
        lens.push(v.numel());
    }
    let rows: usize = vals.iter().map(|v| v.shape()[0]).sum();
    let mut shape = vec![rows];
    shape.extend_from_slice(&tail);
    let data: Vec<f64> = vals.iter().flat_map(|v| v.data().iter().copied()).collect();
    let shapes: Vec<Vec<usize>> = vals.iter().map(|v| v.shape().to_vec()).collect();
    first
        .graph
        .push("concat_rows", Tensor::new(shape, data)?, parts, move |g, _, _| {
            let mut off = 0;
            let mut grads = Vec::with_capacity(lens.len());
            for (len, shape) in lens.iter().zip(&shapes) {
                grads.push(Some(Tensor::new(shape.clone(), g.data()[off..off + len].to_vec())?));
                off += len;
            }
            Ok(grads)
        })
}
