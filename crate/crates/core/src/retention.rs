//! Multi-scale retention.
//!
//! A retention head maps `x[T, d_head]` to `o[T, d_head]` with
//!
//! ```text
//! o_n = Q_n · Σ_{m≤n} γ^{n−m} K_mᵀ V_m
//! ```
//!
//! where `Q` and `K` are rotated pairwise by their absolute position. The same
//! quantity has three equivalent evaluation orders:
//!
//! * parallel: `((Q Kᵀ) ⊙ D) V` with the causal decay matrix `D`;
//! * recurrent: `S_n = γ S_{n−1} + K_nᵀ V_n`, `o_n = Q_n S_n`, constant cost per token;
//! * chunkwise: parallel inside fixed-size chunks, recurrent state carried across them.
//!
//! [`MsrLayer`] runs one head per feature slice, group-normalizes the
//! concatenation, applies a swish gate and an output projection.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat_cols, concat_rows, rotate_slice, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{truncated_normal, ParamId, ParamSet};
use crate::tensor::{self, Tensor};

/// Variance floor inside group and layer normalization.
pub const NORM_EPS: f64 = 1e-6;

const ROTATION_BASE: f64 = 10_000.0;

/// Decay rate of head `index`: `1 − 2^(−5−index)`.
pub fn head_gamma(index: usize) -> f64 {
    1.0 - 2f64.powi(-5 - index as i32)
}

/// Rotation frequencies `base^(−2j/d_head)` for `j < d_head/2`.
pub fn rotation_freqs(d_head: usize) -> Vec<f64> {
    (0..d_head / 2)
        .map(|j| ROTATION_BASE.powf(-2.0 * j as f64 / d_head as f64))
        .collect()
}

/// Causal decay matrix: `D[n][m] = γ^{n−m}` for `n ≥ m`, zero above the diagonal.
pub fn decay_matrix(gamma: f64, len: usize) -> Tensor {
    Tensor::from_fn(&[len, len], |i| {
        let (n, m) = (i / len, i % len);
        if n >= m {
            gamma.powi((n - m) as i32)
        } else {
            0.0
        }
    })
}

/// How a retention layer evaluates a whole sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Paradigm {
    Parallel,
    /// Chunkwise recurrent with the given chunk length.
    Chunkwise(usize),
}

impl std::fmt::Display for Paradigm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Paradigm::Parallel => write!(f, "parallel"),
            Paradigm::Chunkwise(b) => write!(f, "chunkwise:{b}"),
        }
    }
}

impl std::str::FromStr for Paradigm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "parallel" {
            return Ok(Paradigm::Parallel);
        }
        if let Some(b) = s.strip_prefix("chunkwise:") {
            let b: usize = b
                .parse()
                .map_err(|_| Error::Config(format!("bad chunk size in {s:?}")))?;
            if b == 0 {
                return Err(Error::Config("chunk size must be positive".into()));
            }
            return Ok(Paradigm::Chunkwise(b));
        }
        Err(Error::Config(format!(
            "unknown paradigm {s:?} (expected parallel or chunkwise:B)"
        )))
    }
}

impl Serialize for Paradigm {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Paradigm {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Parallel retention on already projected `q, k, v` (`[T, d_head]` each),
/// with the first row at absolute position `pos0`.
pub fn parallel_qkv<'g>(
    q: Var<'g>,
    k: Var<'g>,
    v: Var<'g>,
    gamma: f64,
    theta: &Arc<Vec<f64>>,
    pos0: usize,
) -> Result<Var<'g>> {
    let t = q.shape()[0];
    let g = q.graph();
    let qr = q.rotate(pos0, Arc::clone(theta))?;
    let kr = k.rotate(pos0, Arc::clone(theta))?;
    qr.matmul_nt(kr)?
        .mul(g.constant(decay_matrix(gamma, t)))?
        .matmul(v)
}

/// Chunkwise retention on projected `q, k, v`. `prefix` is the state
/// summarizing everything before `pos0` (zero when `None`). Returns the
/// outputs and the state after the last row.
#[allow(clippy::too_many_arguments)]
pub fn chunkwise_qkv<'g>(
    q: Var<'g>,
    k: Var<'g>,
    v: Var<'g>,
    gamma: f64,
    theta: &Arc<Vec<f64>>,
    pos0: usize,
    chunk: usize,
    prefix: Option<Var<'g>>,
) -> Result<(Var<'g>, Var<'g>)> {
    let shape = q.shape();
    let (t, dh) = (shape[0], shape[1]);
    if chunk == 0 {
        return Err(Error::usage("chunk length must be positive"));
    }
    let g = q.graph();
    let qr = q.rotate(pos0, Arc::clone(theta))?;
    let kr = k.rotate(pos0, Arc::clone(theta))?;
    let mut state = prefix;
    let mut outs = Vec::with_capacity(t.div_ceil(chunk));
    let mut start = 0;
    while start < t {
        let b = chunk.min(t - start);
        let qc = qr.slice_rows(start, b)?;
        let kc = kr.slice_rows(start, b)?;
        let vc = v.slice_rows(start, b)?;
        let mut out = qc
            .matmul_nt(kc)?
            .mul(g.constant(decay_matrix(gamma, b)))?
            .matmul(vc)?;
        let key_decay = Tensor::from_fn(&[b], |j| gamma.powi((b - 1 - j) as i32));
        let mut next = kc.bcast_mul(g.constant(key_decay), dh)?.matmul_tn(vc)?;
        if let Some(s) = state {
            let query_decay = Tensor::from_fn(&[b], |j| gamma.powi(j as i32 + 1));
            let cross = qc.bcast_mul(g.constant(query_decay), dh)?.matmul(s)?;
            out = out.add(cross)?;
            next = next.add(s.scale(gamma.powi(b as i32))?)?;
        }
        outs.push(out);
        state = Some(next);
        start += b;
    }
    let state = state.ok_or_else(|| Error::dim("chunkwise retention over zero rows"))?;
    Ok((concat_rows(&outs)?, state))
}

/// Recurrent state of one retention head.
#[derive(Debug, Clone, PartialEq)]
pub struct RetentionState {
    /// `Σ_{m<step} γ^{step−1−m} K_mᵀ V_m`, `d_head × d_head`.
    pub s: Tensor,
    /// Number of tokens consumed.
    pub step: usize,
}

impl RetentionState {
    pub fn new(d_head: usize) -> Self {
        Self {
            s: Tensor::zeros(&[d_head, d_head]),
            step: 0,
        }
    }

    /// Output for a token with projections `q, k, v` at position `step`.
    /// When `commit` is set the token is absorbed into the state.
    pub fn advance(&mut self, q: &[f64], k: &[f64], v: &[f64], gamma: f64, theta: &[f64], commit: bool) -> Vec<f64> {
        let dh = q.len();
        let pos = self.step as f64;
        let mut qr = q.to_vec();
        let mut kr = k.to_vec();
        rotate_slice(&mut qr, pos, theta, 1.0);
        rotate_slice(&mut kr, pos, theta, 1.0);
        let mut out = vec![0.0; dh];
        if commit {
            let s = self.s.data_mut();
            for i in 0..dh {
                let row = &mut s[i * dh..(i + 1) * dh];
                for (sv, &vv) in row.iter_mut().zip(v) {
                    *sv = gamma * *sv + kr[i] * vv;
                }
            }
            tensor::vecmat(&qr, &self.s, &mut out);
            self.step += 1;
        } else {
            // o = γ·(q S) + (q·k) v, without touching S
            tensor::vecmat(&qr, &self.s, &mut out);
            let qk = tensor::dot(&qr, &kr);
            for (o, &vv) in out.iter_mut().zip(v) {
                *o = gamma * *o + qk * vv;
            }
        }
        out
    }

    /// Bytes held by the state; independent of `step`.
    pub fn size_bytes(&self) -> usize {
        self.s.numel() * std::mem::size_of::<f64>()
    }
}

/// Parameters of a single retention head in value form.
#[derive(Debug, Clone)]
pub struct RetentionHeadParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub gamma: f64,
    pub theta: Arc<Vec<f64>>,
}

impl RetentionHeadParams {
    pub fn new(w_q: Tensor, w_k: Tensor, w_v: Tensor, gamma: f64) -> Result<Self> {
        let (r, c) = w_q.dims2()?;
        if r != c || w_k.shape() != w_q.shape() || w_v.shape() != w_q.shape() {
            return Err(Error::dim("retention projections must be equal square matrices"));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::usage(format!("decay {gamma} outside (0, 1)")));
        }
        Ok(Self {
            w_q,
            w_k,
            w_v,
            gamma,
            theta: Arc::new(rotation_freqs(r)),
        })
    }

    pub fn random(d_head: usize, gamma: f64, std: f64, rng: &mut impl Rng) -> Self {
        let mut m = || truncated_normal(&[d_head, d_head], std, rng);
        let (q, k, v) = (m(), m(), m());
        Self::new(q, k, v, gamma).expect("valid shapes")
    }

    pub fn d_head(&self) -> usize {
        self.w_q.shape()[0]
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let (t, c) = x.dims2()?;
        if c != self.d_head() {
            return Err(Error::dim(format!(
                "retention input has {c} features, head expects {}",
                self.d_head()
            )));
        }
        Ok(t)
    }

    fn project<'g>(&self, g: &'g Graph, x: &Tensor) -> Result<(Var<'g>, Var<'g>, Var<'g>)> {
        let xv = g.constant(x.clone());
        Ok((
            xv.matmul(g.constant(self.w_q.clone()))?,
            xv.matmul(g.constant(self.w_k.clone()))?,
            xv.matmul(g.constant(self.w_v.clone()))?,
        ))
    }

    pub fn parallel(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let g = Graph::no_grad();
        let (q, k, v) = self.project(&g, x)?;
        Ok((*parallel_qkv(q, k, v, self.gamma, &self.theta, 0)?.value()).clone())
    }

    pub fn chunkwise(&self, x: &Tensor, chunk: usize) -> Result<Tensor> {
        let t = self.check_input(x)?;
        if chunk == 0 || chunk > t {
            return Err(Error::usage(format!("chunk {chunk} outside 1..={t}")));
        }
        let g = Graph::no_grad();
        let (q, k, v) = self.project(&g, x)?;
        let (out, _) = chunkwise_qkv(q, k, v, self.gamma, &self.theta, 0, chunk, None)?;
        Ok((*out.value()).clone())
    }

    /// One recurrent step: `S' = γS + K_nᵀV_n`, `o_n = Q_n S'`.
    pub fn recurrent_step(&self, x_n: &[f64], state: &mut RetentionState) -> Result<Vec<f64>> {
        let dh = self.d_head();
        if x_n.len() != dh || state.s.shape() != [dh, dh] {
            return Err(Error::dim("recurrent step dimension mismatch"));
        }
        let mut q = vec![0.0; dh];
        let mut k = vec![0.0; dh];
        let mut v = vec![0.0; dh];
        tensor::vecmat(x_n, &self.w_q, &mut q);
        tensor::vecmat(x_n, &self.w_k, &mut k);
        tensor::vecmat(x_n, &self.w_v, &mut v);
        Ok(state.advance(&q, &k, &v, self.gamma, &self.theta, true))
    }

    /// Runs [`Self::recurrent_step`] over every row from an empty state.
    pub fn recurrent(&self, x: &Tensor) -> Result<(Tensor, RetentionState)> {
        let t = self.check_input(x)?;
        let mut state = RetentionState::new(self.d_head());
        let mut out = Vec::with_capacity(x.numel());
        for n in 0..t {
            out.extend(self.recurrent_step(x.row(n), &mut state)?);
        }
        Ok((Tensor::new(x.shape().to_vec(), out)?, state))
    }
}

/// How an [`MsrLayer`] evaluates its retention heads.
pub enum RetentionMode<'a, 'g> {
    Parallel,
    Chunkwise {
        chunk: usize,
        /// Per-head states before the first row.
        prefix: Option<&'a [Var<'g>]>,
    },
}

#[derive(Debug, Clone)]
struct HeadIds {
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
}

/// Multi-scale retention layer: per-head retention over feature slices,
/// group norm across heads, swish gate, output projection.
#[derive(Debug, Clone)]
pub struct MsrLayer {
    heads: Vec<HeadIds>,
    gn_gain: ParamId,
    gn_bias: ParamId,
    w_gate: ParamId,
    w_out: ParamId,
    gammas: Vec<f64>,
    theta: Arc<Vec<f64>>,
    d: usize,
}

impl MsrLayer {
    /// Registers the layer's parameters under `prefix`.
    pub fn new(set: &mut ParamSet, prefix: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::dim(format!("{d} features not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let std = 0.02;
        let head_ids = (0..heads)
            .map(|i| HeadIds {
                w_q: set.add(format!("{prefix}.h{i}.wq"), truncated_normal(&[dh, dh], std, rng)),
                w_k: set.add(format!("{prefix}.h{i}.wk"), truncated_normal(&[dh, dh], std, rng)),
                w_v: set.add(format!("{prefix}.h{i}.wv"), truncated_normal(&[dh, dh], std, rng)),
            })
            .collect();
        Ok(Self {
            heads: head_ids,
            gn_gain: set.add(format!("{prefix}.gn.g"), Tensor::full(&[d], 1.0)),
            gn_bias: set.add(format!("{prefix}.gn.b"), Tensor::zeros(&[d])),
            w_gate: set.add(format!("{prefix}.wg"), truncated_normal(&[d, d], std, rng)),
            w_out: set.add(format!("{prefix}.wo"), truncated_normal(&[d, d], std, rng)),
            gammas: (0..heads).map(head_gamma).collect(),
            theta: Arc::new(rotation_freqs(dh)),
            d,
        })
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn d_head(&self) -> usize {
        self.d / self.heads.len()
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }

    pub fn out_projection(&self) -> ParamId {
        self.w_out
    }

    pub fn value_projection(&self, head: usize) -> ParamId {
        self.heads[head].w_v
    }

    /// Value-form parameters of head `i`.
    pub fn head_params(&self, set: &ParamSet, i: usize) -> RetentionHeadParams {
        let h = &self.heads[i];
        RetentionHeadParams {
            w_q: set.get(h.w_q).clone(),
            w_k: set.get(h.w_k).clone(),
            w_v: set.get(h.w_v).clone(),
            gamma: self.gammas[i],
            theta: Arc::clone(&self.theta),
        }
    }

    /// Applies the layer to `x[T, d]` whose first row sits at position `pos0`.
    /// In chunkwise mode the per-head final states are returned as well.
    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        set: &ParamSet,
        x: Var<'g>,
        mode: &RetentionMode<'_, 'g>,
        pos0: usize,
    ) -> Result<(Var<'g>, Option<Vec<Var<'g>>>)> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.d {
            return Err(Error::dim(format!("msr expects [T, {}], got {shape:?}", self.d)));
        }
        let dh = self.d_head();
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut states = Vec::new();
        for (i, h) in self.heads.iter().enumerate() {
            let xi = if self.heads.len() == 1 { x } else { x.slice_cols(i * dh, dh)? };
            let q = xi.matmul(g.param(set, h.w_q))?;
            let k = xi.matmul(g.param(set, h.w_k))?;
            let v = xi.matmul(g.param(set, h.w_v))?;
            let o = match mode {
                RetentionMode::Parallel => parallel_qkv(q, k, v, self.gammas[i], &self.theta, pos0)?,
                RetentionMode::Chunkwise { chunk, prefix } => {
                    let p = prefix.map(|p| p[i]);
                    let (o, s) = chunkwise_qkv(q, k, v, self.gammas[i], &self.theta, pos0, *chunk, p)?;
                    states.push(s);
                    o
                }
            };
            outs.push(o);
        }
        let heads = if outs.len() == 1 { outs[0] } else { concat_cols(&outs)? };
        let normed = heads.group_norm(
            self.heads.len(),
            g.param(set, self.gn_gain),
            g.param(set, self.gn_bias),
            NORM_EPS,
        )?;
        let gate = x.matmul(g.param(set, self.w_gate))?.silu()?;
        let y = gate.mul(normed)?.matmul(g.param(set, self.w_out))?;
        let states = match mode {
            RetentionMode::Parallel => None,
            RetentionMode::Chunkwise { .. } => Some(states),
        };
        Ok((y, states))
    }

    /// Single-row evaluation against recurrent per-head states. With
    /// `commit` the row is absorbed into the states; otherwise they are left
    /// untouched and the row acts as a read-only probe at position `step`.
    pub fn step_row(&self, set: &ParamSet, x: &[f64], states: &mut [RetentionState], commit: bool) -> Vec<f64> {
        let dh = self.d_head();
        let mut heads = vec![0.0; self.d];
        let mut q = vec![0.0; dh];
        let mut k = vec![0.0; dh];
        let mut v = vec![0.0; dh];
        for (i, h) in self.heads.iter().enumerate() {
            let xi = &x[i * dh..(i + 1) * dh];
            tensor::vecmat(xi, set.get(h.w_q), &mut q);
            tensor::vecmat(xi, set.get(h.w_k), &mut k);
            tensor::vecmat(xi, set.get(h.w_v), &mut v);
            let o = states[i].advance(&q, &k, &v, self.gammas[i], &self.theta, commit);
            heads[i * dh..(i + 1) * dh].copy_from_slice(&o);
        }
        let mut normed = vec![0.0; self.d];
        for (src, dst) in heads.chunks(dh).zip(normed.chunks_mut(dh)) {
            tensor::normalize_slice(src, dst, NORM_EPS);
        }
        let (gain, bias) = (set.get(self.gn_gain).data(), set.get(self.gn_bias).data());
        let mut gate = vec![0.0; self.d];
        tensor::vecmat(x, set.get(self.w_gate), &mut gate);
        for j in 0..self.d {
            gate[j] = tensor::silu(gate[j]) * (normed[j] * gain[j] + bias[j]);
        }
        let mut y = vec![0.0; self.d];
        tensor::vecmat(&gate, set.get(self.w_out), &mut y);
        y
    }

    /// Fresh zero states, one per head.
    pub fn empty_states(&self) -> Vec<RetentionState> {
        (0..self.heads.len()).map(|_| RetentionState::new(self.d_head())).collect()
    }
}
