//! Bidirectional retention network: two independent stacks of
//! pre-norm MSR + FFN blocks, one over the raster sequence and one over its
//! reversal, fused additively into per-pixel color distributions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{truncated_normal, ParamId, ParamSet};
use crate::retention::{MsrLayer, Paradigm, RetentionMode, RetentionState, NORM_EPS};
use crate::rng;
use crate::sequencer::{Embedding, PixelSequence};
use crate::tensor::{self, Tensor};

const INIT_STD: f64 = 0.02;

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Retention heads per layer.
    pub heads: usize,
    /// Embedding width.
    pub d: usize,
    /// Blocks per direction.
    pub layers: usize,
    /// Low-resolution image side; sequences have `side²` tokens.
    pub side: usize,
    /// Palette size.
    pub k: usize,
}

impl ModelConfig {
    /// Default desk-scale model.
    pub const DESK: ModelConfig = ModelConfig {
        heads: 4,
        d: 64,
        layers: 4,
        side: 16,
        k: 32,
    };
    /// Published face-dataset scale.
    pub const CELEBA: ModelConfig = ModelConfig {
        heads: 8,
        d: 512,
        layers: 30,
        side: 48,
        k: 512,
    };
    /// Published natural-image scale.
    pub const IMAGENET: ModelConfig = ModelConfig {
        heads: 8,
        d: 1024,
        layers: 35,
        side: 32,
        k: 512,
    };

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::DESK),
            "celeba" => Ok(Self::CELEBA),
            "imagenet" => Ok(Self::IMAGENET),
            _ => Err(Error::Config(format!(
                "unknown preset {name:?} (desk, celeba, imagenet)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d == 0 || self.side == 0 || self.k == 0 {
            return Err(Error::Config("heads, d, side and k must be positive".into()));
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!("d = {} not divisible by {} heads", self.d, self.heads)));
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        self.side * self.side
    }

    /// Trainable scalars implied by the configuration.
    pub fn param_count(&self) -> usize {
        let (d, h, k, n) = (self.d, self.heads, self.k, self.layers);
        let embed = (k + 1) * d + self.seq_len() * d;
        let block = 10 * d * d + 3 * d * d / h + 11 * d;
        let head = 2 * d + d * k + k;
        embed + 2 * n * block + head
    }
}

/// `Y = MSR(LN(X)) + X`, `X' = FFN(LN(Y)) + Y`.
#[derive(Debug, Clone)]
pub struct Block {
    ln1: (ParamId, ParamId),
    msr: MsrLayer,
    ln2: (ParamId, ParamId),
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

fn layer_norm_params(set: &mut ParamSet, prefix: &str, d: usize) -> (ParamId, ParamId) {
    (
        set.add(format!("{prefix}.g"), Tensor::full(&[d], 1.0)),
        set.add(format!("{prefix}.b"), Tensor::zeros(&[d])),
    )
}

fn layer_norm_row(set: &ParamSet, ln: (ParamId, ParamId), x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    tensor::normalize_slice(x, &mut y, NORM_EPS);
    for ((v, g), b) in y.iter_mut().zip(set.get(ln.0).data()).zip(set.get(ln.1).data()) {
        *v = *v * g + b;
    }
    y
}

impl Block {
    fn new(set: &mut ParamSet, prefix: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.d;
        let ln1 = layer_norm_params(set, &format!("{prefix}.ln1"), d);
        let msr = MsrLayer::new(set, &format!("{prefix}.msr"), d, cfg.heads, rng)?;
        let ln2 = layer_norm_params(set, &format!("{prefix}.ln2"), d);
        Ok(Self {
            ln1,
            msr,
            ln2,
            w1: set.add(format!("{prefix}.ffn.w1"), truncated_normal(&[d, 4 * d], INIT_STD, rng)),
            b1: set.add(format!("{prefix}.ffn.b1"), Tensor::zeros(&[4 * d])),
            w2: set.add(format!("{prefix}.ffn.w2"), truncated_normal(&[4 * d, d], INIT_STD, rng)),
            b2: set.add(format!("{prefix}.ffn.b2"), Tensor::zeros(&[d])),
        })
    }

    pub fn msr(&self) -> &MsrLayer {
        &self.msr
    }

    /// Output projections of both residual branches.
    pub fn branch_outputs(&self) -> [ParamId; 3] {
        [self.msr.out_projection(), self.w2, self.b2]
    }

    fn forward<'g>(
        &self,
        g: &'g Graph,
        set: &ParamSet,
        x: Var<'g>,
        mode: &RetentionMode<'_, 'g>,
        pos0: usize,
    ) -> Result<(Var<'g>, Option<Vec<Var<'g>>>)> {
        let ln = |x: Var<'g>, p: (ParamId, ParamId)| x.layer_norm(g.param(set, p.0), g.param(set, p.1), NORM_EPS);
        let (m, states) = self.msr.forward(g, set, ln(x, self.ln1)?, mode, pos0)?;
        let y = m.add(x)?;
        let d = y.shape()[1];
        let h = ln(y, self.ln2)?
            .matmul(g.param(set, self.w1))?
            .bcast_add(g.param(set, self.b1), 1)?
            .gelu()?;
        let f = h.matmul(g.param(set, self.w2))?.bcast_add(g.param(set, self.b2), 1)?;
        debug_assert_eq!(f.shape()[1], d);
        Ok((f.add(y)?, states))
    }

    /// Single-row evaluation against recurrent states; see [`MsrLayer::step_row`].
    pub fn step_row(&self, set: &ParamSet, x: &[f64], states: &mut [RetentionState], commit: bool) -> Vec<f64> {
        let m = self.msr.step_row(set, &layer_norm_row(set, self.ln1, x), states, commit);
        let y: Vec<f64> = m.iter().zip(x).map(|(a, b)| a + b).collect();
        let z = layer_norm_row(set, self.ln2, &y);
        let mut h = vec![0.0; set.get(self.b1).numel()];
        tensor::vecmat(&z, set.get(self.w1), &mut h);
        for (v, b) in h.iter_mut().zip(set.get(self.b1).data()) {
            *v = tensor::gelu(*v + b);
        }
        let mut f = vec![0.0; y.len()];
        tensor::vecmat(&h, set.get(self.w2), &mut f);
        f.iter()
            .zip(set.get(self.b2).data())
            .zip(&y)
            .map(|((f, b), y)| f + b + y)
            .collect()
    }
}

/// One direction's stack of blocks.
#[derive(Debug, Clone)]
pub struct Tower {
    blocks: Vec<Block>,
}

/// Per-layer, per-head states after a chunkwise pass.
pub type TowerStates<'g> = Vec<Vec<Var<'g>>>;

impl Tower {
    fn new(set: &mut ParamSet, prefix: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let blocks = (0..cfg.layers)
            .map(|l| Block::new(set, &format!("{prefix}.l{l}"), cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Applies every block to `x` whose first row sits at position `pos0`.
    pub fn forward<'g>(&self, g: &'g Graph, set: &ParamSet, x: Var<'g>, paradigm: Paradigm, pos0: usize) -> Result<Var<'g>> {
        match paradigm {
            Paradigm::Parallel => {
                let mut h = x;
                for b in &self.blocks {
                    h = b.forward(g, set, h, &RetentionMode::Parallel, pos0)?.0;
                }
                Ok(h)
            }
            Paradigm::Chunkwise(chunk) => Ok(self.forward_chunkwise(g, set, x, chunk, pos0, None)?.0),
        }
    }

    /// Chunkwise pass continuing from `prefix` (per-layer states summarizing
    /// everything before `pos0`). Also returns the per-layer final states.
    pub fn forward_chunkwise<'g>(
        &self,
        g: &'g Graph,
        set: &ParamSet,
        x: Var<'g>,
        chunk: usize,
        pos0: usize,
        prefix: Option<&TowerStates<'g>>,
    ) -> Result<(Var<'g>, TowerStates<'g>)> {
        let mut h = x;
        let mut states = Vec::with_capacity(self.blocks.len());
        for (l, b) in self.blocks.iter().enumerate() {
            let mode = RetentionMode::Chunkwise {
                chunk,
                prefix: prefix.map(|p| p[l].as_slice()),
            };
            let (out, s) = b.forward(g, set, h, &mode, pos0)?;
            states.push(s.expect("chunkwise mode returns states"));
            h = out;
        }
        Ok((h, states))
    }

    /// Per-layer inputs and the final output of a parallel pass, as values.
    pub fn activations(&self, set: &ParamSet, x: &Tensor) -> Result<Vec<Tensor>> {
        let g = Graph::no_grad();
        let mut h = g.constant(x.clone());
        let mut acts = vec![x.clone()];
        for b in &self.blocks {
            h = b.forward(&g, set, h, &RetentionMode::Parallel, 0)?.0;
            acts.push((*h.value()).clone());
        }
        Ok(acts)
    }
}

/// Final normalization and projection to palette logits.
#[derive(Debug, Clone)]
pub struct FusionHead {
    ln: (ParamId, ParamId),
    fc_w: ParamId,
    fc_b: ParamId,
}

impl FusionHead {
    pub fn logits<'g>(&self, g: &'g Graph, set: &ParamSet, xf: Var<'g>, xb: Var<'g>) -> Result<Var<'g>> {
        xf.add(xb)?
            .layer_norm(g.param(set, self.ln.0), g.param(set, self.ln.1), NORM_EPS)?
            .matmul(g.param(set, self.fc_w))?
            .bcast_add(g.param(set, self.fc_b), 1)
    }

    /// Distribution for one row pair.
    pub fn predict_row(&self, set: &ParamSet, xf: &[f64], xb: &[f64]) -> Vec<f64> {
        let sum: Vec<f64> = xf.iter().zip(xb).map(|(a, b)| a + b).collect();
        let z = layer_norm_row(set, self.ln, &sum);
        let mut logits = set.get(self.fc_b).data().to_vec();
        let mut proj = vec![0.0; logits.len()];
        tensor::vecmat(&z, set.get(self.fc_w), &mut proj);
        for (l, p) in logits.iter_mut().zip(&proj) {
            *l += p;
        }
        tensor::softmax_slice(&mut logits);
        logits
    }

    pub fn bias(&self) -> ParamId {
        self.fc_b
    }

    pub fn weight(&self) -> ParamId {
        self.fc_w
    }
}

/// Complete model: parameters plus their layout.
#[derive(Debug, Clone)]
pub struct BiRetNet {
    config: ModelConfig,
    params: ParamSet,
    embedding: Embedding,
    forward: Tower,
    backward: Tower,
    head: FusionHead,
}

impl BiRetNet {
    /// Freshly initialized model; weights come from the `init` stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, rng::INIT);
        let mut params = ParamSet::new();
        let embedding = Embedding::new(&mut params, config.k, config.d, config.seq_len(), &mut rng);
        let forward = Tower::new(&mut params, "fwd", &config, &mut rng)?;
        let backward = Tower::new(&mut params, "bwd", &config, &mut rng)?;
        let d = config.d;
        let head = FusionHead {
            ln: layer_norm_params(&mut params, "head.ln", d),
            fc_w: params.add("head.fc.w", truncated_normal(&[d, config.k], INIT_STD, &mut rng)),
            fc_b: params.add("head.fc.b", Tensor::zeros(&[config.k])),
        };
        Ok(Self {
            config,
            params,
            embedding,
            forward,
            backward,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn embedding(&self) -> &Embedding {
        &self.embedding
    }

    pub fn forward_blocks(&self) -> &Tower {
        &self.forward
    }

    pub fn backward_blocks(&self) -> &Tower {
        &self.backward
    }

    pub fn head(&self) -> &FusionHead {
        &self.head
    }

    fn check_seq(&self, seq: &PixelSequence) -> Result<()> {
        if seq.side() != self.config.side {
            return Err(Error::dim(format!(
                "sequence side {} does not match model side {}",
                seq.side(),
                self.config.side
            )));
        }
        Ok(())
    }

    pub fn embed<'g>(&self, g: &'g Graph, seq: &PixelSequence) -> Result<Var<'g>> {
        self.check_seq(seq)?;
        self.embedding.forward(g, &self.params, seq)
    }

    pub fn forward_tower<'g>(&self, g: &'g Graph, x: Var<'g>, paradigm: Paradigm) -> Result<Var<'g>> {
        self.forward.forward(g, &self.params, x, paradigm, 0)
    }

    /// `reverse ∘ tower(backward params) ∘ reverse`.
    pub fn backward_tower<'g>(&self, g: &'g Graph, x: Var<'g>, paradigm: Paradigm) -> Result<Var<'g>> {
        self.backward
            .forward(g, &self.params, x.reverse_rows()?, paradigm, 0)?
            .reverse_rows()
    }

    pub fn fuse_logits<'g>(&self, g: &'g Graph, xf: Var<'g>, xb: Var<'g>) -> Result<Var<'g>> {
        if xf.shape() != xb.shape() {
            return Err(Error::dim("forward and backward streams differ in shape"));
        }
        self.head.logits(g, &self.params, xf, xb)
    }

    pub fn fuse_predict<'g>(&self, g: &'g Graph, xf: Var<'g>, xb: Var<'g>) -> Result<Var<'g>> {
        self.fuse_logits(g, xf, xb)?.softmax()
    }

    /// Logits `[side², k]` for the whole sequence.
    pub fn logits<'g>(&self, g: &'g Graph, seq: &PixelSequence, paradigm: Paradigm) -> Result<Var<'g>> {
        let x = self.embed(g, seq)?;
        let xf = self.forward_tower(g, x, paradigm)?;
        let xb = self.backward_tower(g, x, paradigm)?;
        self.fuse_logits(g, xf, xb)
    }

    /// Per-position distributions predicted from the unmasked context.
    pub fn predict(&self, seq: &PixelSequence, paradigm: Paradigm) -> Result<Tensor> {
        let g = Graph::no_grad();
        Ok((*self.logits(&g, seq, paradigm)?.softmax()?.value()).clone())
    }

    /// Replaces all parameter values; names and shapes must match.
    pub fn load_params(&mut self, other: &ParamSet) -> Result<()> {
        self.params.assign_from(other)
    }
}
