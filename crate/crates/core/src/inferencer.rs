//! Pixel-by-pixel completion with recurrent retention states.
//!
//! A session embeds the masked sequence once, freezes the backward tower's
//! activations on it and summarizes it into per-layer forward states. Each
//! masked position, in raster order, is then predicted from a probe row
//! (its positional embedding) evaluated against those states and fused with
//! the frozen backward output at that position; the sampled color is
//! absorbed into the forward states. A step therefore costs the same no
//! matter how many pixels were generated before it.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{concat_rows, Graph};
use crate::biretnet::BiRetNet;
use crate::error::{Error, Result};
use crate::image::{Grid, ImageTensor, IndexGrid};
use crate::retention::{Paradigm, RetentionState};
use crate::rng;
use crate::sequencer::PixelSequence;
use crate::tensor::{self, Tensor};

/// How a color is drawn from a predicted distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SamplingPolicy {
    /// Most probable color; ties go to the lowest index.
    Top1,
    /// Sample among the `k` most probable colors after tempering.
    TopK { k: usize, temperature: f64 },
}

impl fmt::Display for SamplingPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SamplingPolicy::Top1 => write!(f, "top1"),
            SamplingPolicy::TopK { k, temperature } => write!(f, "topk:{k}:{temperature}"),
        }
    }
}

impl FromStr for SamplingPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "top1" {
            return Ok(SamplingPolicy::Top1);
        }
        let bad = || Error::usage(format!("policy {s:?} is neither top1 nor topk:K:T"));
        let rest = s.strip_prefix("topk:").ok_or_else(bad)?;
        let (k, t) = rest.split_once(':').ok_or_else(bad)?;
        let k: usize = k.parse().map_err(|_| bad())?;
        let temperature: f64 = t.parse().map_err(|_| bad())?;
        if k == 0 || !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::usage("topk needs K ≥ 1 and a positive temperature"));
        }
        Ok(SamplingPolicy::TopK { k, temperature })
    }
}

impl SamplingPolicy {
    pub fn sample(&self, dist: &[f64], rng: &mut impl Rng) -> usize {
        match *self {
            SamplingPolicy::Top1 => argmax(dist),
            SamplingPolicy::TopK { k, temperature } => {
                let mut order: Vec<usize> = (0..dist.len()).collect();
                // stable: equal probabilities keep ascending index order
                order.sort_by(|&a, &b| dist[b].partial_cmp(&dist[a]).expect("finite"));
                order.truncate(k.min(dist.len()));
                let mut w: Vec<f64> = order.iter().map(|&i| dist[i].max(1e-300).ln() / temperature).collect();
                tensor::softmax_slice(&mut w);
                let mut u: f64 = rng.random();
                for (&i, &wi) in order.iter().zip(&w) {
                    if u < wi {
                        return i;
                    }
                    u -= wi;
                }
                *order.last().expect("k ≥ 1")
            }
        }
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Result of one decoding step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub position: usize,
    pub color: usize,
    /// Predicted distribution over the palette, before tempering.
    pub dist: Vec<f64>,
}

/// Decoding state for one image. Single-writer; clone to branch.
#[derive(Debug, Clone)]
pub struct InferenceSession<'m> {
    model: &'m BiRetNet,
    seq: PixelSequence,
    tokens: Vec<usize>,
    queue: Vec<usize>,
    cursor: usize,
    /// Per layer, per head.
    states: Vec<Vec<RetentionState>>,
    /// Backward-tower activations on the initial sequence: layer inputs then output.
    backward: Vec<Tensor>,
    policy: SamplingPolicy,
    rng: ChaCha8Rng,
}

impl<'m> InferenceSession<'m> {
    /// Builds the frozen backward activations and the forward states of the
    /// initial sequence.
    pub fn new(model: &'m BiRetNet, seq: &PixelSequence, policy: SamplingPolicy, seed: u64) -> Result<Self> {
        let g = Graph::no_grad();
        let x0 = model.embed(&g, seq)?;
        let t = seq.len();
        let tower = model.forward_blocks();
        let (_, states) = tower.forward_chunkwise(&g, model.params(), x0, t, 0, None)?;
        let states = states
            .iter()
            .map(|layer| {
                layer
                    .iter()
                    .map(|s| RetentionState {
                        s: (*s.value()).clone(),
                        step: t,
                    })
                    .collect()
            })
            .collect();
        let reversed = reverse_rows(&x0.value());
        let backward = model
            .backward_blocks()
            .activations(model.params(), &reversed)?
            .iter()
            .map(reverse_rows)
            .collect();
        Ok(Self {
            model,
            seq: seq.clone(),
            tokens: seq.tokens().to_vec(),
            queue: seq.masked_positions(),
            cursor: 0,
            states,
            backward,
            policy,
            rng: rng::stream(seed, rng::SAMPLING),
        })
    }

    /// Next position to fill, if any.
    pub fn next_position(&self) -> Option<usize> {
        self.queue.get(self.cursor).copied()
    }

    pub fn remaining(&self) -> usize {
        self.queue.len() - self.cursor
    }

    /// Tokens so far: originals where unmasked, samples where filled.
    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn states(&self) -> &[Vec<RetentionState>] {
        &self.states
    }

    /// Frozen backward-tower activations.
    pub fn backward_activations(&self) -> &[Tensor] {
        &self.backward
    }

    /// Positions filled so far with their colors.
    pub fn committed(&self) -> Vec<(usize, usize)> {
        self.queue[..self.cursor].iter().map(|&p| (p, self.tokens[p])).collect()
    }

    fn check_position(&self, j: usize) -> Result<()> {
        match self.next_position() {
            Some(p) if p == j => Ok(()),
            Some(p) => Err(Error::usage(format!("position {j} out of order; next masked position is {p}"))),
            None => Err(Error::usage(format!("position {j} requested but no masked positions remain"))),
        }
    }

    /// Distribution at `j` without changing the session.
    pub fn peek(&self, j: usize) -> Result<Vec<f64>> {
        self.check_position(j)?;
        Ok(self.probe(j))
    }

    fn probe(&self, j: usize) -> Vec<f64> {
        let set = self.model.params();
        let mut h = set.get(self.model.embedding().positions()).row(j).to_vec();
        let mut scratch = self.states.clone();
        for (b, s) in self.model.forward_blocks().blocks().iter().zip(scratch.iter_mut()) {
            h = b.step_row(set, &h, s, false);
        }
        let xb = self.backward.last().expect("output activations").row(j);
        self.model.head().predict_row(set, &h, xb)
    }

    fn commit(&mut self, j: usize, color: usize) {
        let set = self.model.params();
        let mut h = self.model.embedding().token(set, color, j);
        for (b, s) in self.model.forward_blocks().blocks().iter().zip(self.states.iter_mut()) {
            h = b.step_row(set, &h, s, true);
        }
        self.tokens[j] = color;
        self.cursor += 1;
    }

    /// Predicts, samples and absorbs the pixel at `j`, which must be the next
    /// masked position in raster order.
    pub fn step(&mut self, j: usize) -> Result<StepOutput> {
        self.check_position(j)?;
        let dist = self.probe(j);
        let color = self.policy.sample(&dist, &mut self.rng);
        self.commit(j, color);
        Ok(StepOutput { position: j, color, dist })
    }

    /// Like [`Self::step`] but absorbs `color` instead of sampling.
    pub fn step_forced(&mut self, j: usize, color: usize) -> Result<StepOutput> {
        self.check_position(j)?;
        if color >= self.model.config().k {
            return Err(Error::Vocabulary(format!("color {color} outside palette")));
        }
        let dist = self.probe(j);
        self.commit(j, color);
        Ok(StepOutput { position: j, color, dist })
    }

    pub fn sequence(&self) -> &PixelSequence {
        &self.seq
    }
}

fn reverse_rows(x: &Tensor) -> Tensor {
    let (t, _) = x.dims2().expect("matrix");
    Tensor::from_rows(&(0..t).rev().map(|r| x.row(r).to_vec()).collect::<Vec<_>>()).expect("rows")
}

/// Filled grid plus the distribution predicted at each masked position.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub grid: IndexGrid,
    pub steps: Vec<StepOutput>,
}

impl Completion {
    /// Per-pixel entropy scaled by `ln k`; zero at unmasked pixels.
    pub fn entropy_map(&self, k: usize) -> ImageTensor {
        let side = self.grid.height();
        let mut h = vec![0.0; side * side];
        for s in &self.steps {
            let e: f64 = s.dist.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
            h[s.position] = e / (k as f64).ln().max(f64::MIN_POSITIVE);
        }
        ImageTensor::from_fn(side, side, 1, |r, c, _| h[r * side + c])
    }
}

/// Fills every masked position in raster order.
pub fn complete(model: &BiRetNet, seq: &PixelSequence, policy: SamplingPolicy, seed: u64) -> Result<Completion> {
    let mut session = InferenceSession::new(model, seq, policy, seed)?;
    let mut steps = Vec::with_capacity(session.remaining());
    while let Some(j) = session.next_position() {
        steps.push(session.step(j)?);
    }
    Ok(Completion {
        grid: Grid::new(seq.side(), seq.side(), session.tokens().to_vec())?,
        steps,
    })
}

/// One-shot variant: every masked position predicted at once from the
/// unmasked context only.
pub fn complete_simultaneous(model: &BiRetNet, seq: &PixelSequence, policy: SamplingPolicy, seed: u64) -> Result<Completion> {
    let probs = model.predict(seq, Paradigm::Parallel)?;
    let mut rng = rng::stream(seed, rng::SAMPLING);
    let mut tokens = seq.tokens().to_vec();
    let steps = seq
        .masked_positions()
        .into_iter()
        .map(|p| {
            let dist = probs.row(p).to_vec();
            let color = policy.sample(&dist, &mut rng);
            tokens[p] = color;
            StepOutput { position: p, color, dist }
        })
        .collect();
    Ok(Completion {
        grid: Grid::new(seq.side(), seq.side(), tokens)?,
        steps,
    })
}

fn stack(rows: &[Vec<f64>]) -> Result<Tensor> {
    Tensor::from_rows(rows)
}

/// Recomputes the distribution at `j` from scratch: the forward tower runs in
/// parallel form over the initial embedding, one row per committed pixel and
/// the probe row; its last row is fused with the backward tower's output on
/// the initial embedding.
pub fn oracle_distribution(model: &BiRetNet, seq: &PixelSequence, committed: &[(usize, usize)], j: usize) -> Result<Vec<f64>> {
    let g = Graph::no_grad();
    let set = model.params();
    let x0 = model.embed(&g, seq)?;
    let emb = model.embedding();
    let mut rows: Vec<Vec<f64>> = committed.iter().map(|&(p, c)| emb.token(set, c, p)).collect();
    rows.push(set.get(emb.positions()).row(j).to_vec());
    let x = concat_rows(&[x0, g.constant(stack(&rows)?)])?;
    let xf = model.forward_tower(&g, x, Paradigm::Parallel)?;
    let xb = model.backward_tower(&g, x0, Paradigm::Parallel)?;
    let last = xf.shape()[0] - 1;
    Ok(model.head().predict_row(set, xf.value().row(last), xb.value().row(j)))
}

/// Per-step recomputation over the generated context: the initial sequence
/// is summarized once, then every step re-runs the forward tower over all
/// generated rows plus the probe. Work per step grows with the number of
/// pixels already generated.
#[derive(Debug, Clone)]
pub struct RecomputeBaseline<'m> {
    model: &'m BiRetNet,
    t: usize,
    prefix: Vec<Vec<Tensor>>,
    backward_out: Tensor,
}

impl<'m> RecomputeBaseline<'m> {
    pub fn new(model: &'m BiRetNet, seq: &PixelSequence) -> Result<Self> {
        let g = Graph::no_grad();
        let x0 = model.embed(&g, seq)?;
        let t = seq.len();
        let (_, states) = model.forward_blocks().forward_chunkwise(&g, model.params(), x0, t, 0, None)?;
        let prefix = states
            .iter()
            .map(|l| l.iter().map(|s| (*s.value()).clone()).collect())
            .collect();
        let backward_out = (*model.backward_tower(&g, x0, Paradigm::Parallel)?.value()).clone();
        Ok(Self {
            model,
            t,
            prefix,
            backward_out,
        })
    }

    /// Distribution at `j` after `committed` pixels were generated.
    pub fn distribution(&self, committed: &[(usize, usize)], j: usize) -> Result<Vec<f64>> {
        let g = Graph::no_grad();
        let set = self.model.params();
        let emb = self.model.embedding();
        let mut rows: Vec<Vec<f64>> = committed.iter().map(|&(p, c)| emb.token(set, c, p)).collect();
        rows.push(set.get(emb.positions()).row(j).to_vec());
        let n = rows.len();
        let x = g.constant(stack(&rows)?);
        let prefix: Vec<Vec<_>> = self
            .prefix
            .iter()
            .map(|l| l.iter().map(|s| g.constant(s.clone())).collect())
            .collect();
        let (xf, _) = self
            .model
            .forward_blocks()
            .forward_chunkwise(&g, set, x, n, self.t, Some(&prefix))?;
        Ok(self.model.head().predict_row(set, xf.value().row(n - 1), self.backward_out.row(j)))
    }
}
