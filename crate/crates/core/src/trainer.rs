//! Masked-token training of the completion model with Adam.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::biretnet::{BiRetNet, ModelConfig};
use crate::checkpoint::{Checkpoint, Header};
use crate::error::{Error, Result};
use crate::image::IndexGrid;
use crate::inferencer::argmax;
use crate::palette::Palette;
use crate::params::ParamSet;
use crate::retention::Paradigm;
use crate::rng;
use crate::sequencer::{sample_training_mask, PixelSequence};
use crate::tensor::Tensor;

pub const MODEL_KIND: &str = "biretnet";

/// Optimization hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    /// Per-sample mask ratio is drawn uniformly from this range.
    pub mask_ratio: (f64, f64),
    pub paradigm: Paradigm,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 disables periodic saves.
    pub checkpoint_every: u64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 8,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            steps: 1000,
            mask_ratio: (0.2, 0.7),
            paradigm: Paradigm::Parallel,
            seed: 0,
            checkpoint_every: 0,
            clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.mask_ratio;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(Error::Config(format!("mask ratio range ({lo}, {hi}) must lie inside (0, 1)")));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::Config("Adam betas must lie in [0, 1) and eps be positive".into()));
        }
        if self.clip_norm <= 0.0 {
            return Err(Error::Config("clip norm must be positive".into()));
        }
        Ok(())
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainMetrics {
    pub step: u64,
    pub loss: f64,
    /// Top-1 accuracy over masked positions.
    pub acc: f64,
    pub ms_per_step: f64,
}

/// Adam moments, one pair per parameter, held at `f32` precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params.ids().map(|id| Tensor::zeros(params.get(id).shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// Clips `grads` to global norm `clip` and applies one update.
    /// Returns the pre-clip norm.
    pub fn step(&mut self, params: &mut ParamSet, grads: &mut [Tensor], cfg: &TrainConfig) -> f64 {
        let norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        if norm > cfg.clip_norm {
            let s = cfg.clip_norm / norm;
            for g in grads.iter_mut() {
                *g = g.scale(s);
            }
        }
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            let p = params.get_mut(id);
            for (((p, m), v), &g) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *m = (b1 * *m + (1.0 - b1) * g) as f32 as f64;
                *v = (b2 * *v + (1.0 - b2) * g * g) as f32 as f64;
                let step = cfg.lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
                *p = (*p - step) as f32 as f64;
            }
        }
        norm
    }
}

/// Mean negative log-likelihood of `targets` at masked positions of the
/// per-position distributions `probs[T, k]`.
pub fn mlm_loss(probs: &Tensor, targets: &[usize], mask: &[bool]) -> Result<f64> {
    let (t, k) = probs.dims2()?;
    if targets.len() != t || mask.len() != t {
        return Err(Error::dim("targets and mask must match prediction rows"));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for p in (0..t).filter(|&p| mask[p]) {
        if targets[p] >= k {
            return Err(Error::Vocabulary(format!("target {} outside {k} classes", targets[p])));
        }
        total -= probs.row(p)[targets[p]].ln();
        n += 1;
    }
    if n == 0 {
        return Err(Error::usage("loss needs at least one masked position"));
    }
    Ok(total / n as f64)
}

/// Loss of the model on `input` scored against `targets`; the two differ
/// only when masked inputs hold arbitrary colors.
pub fn masked_loss(model: &BiRetNet, input: &PixelSequence, targets: &[usize], paradigm: Paradigm) -> Result<f64> {
    let g = Graph::no_grad();
    model
        .logits(&g, input, paradigm)?
        .masked_cross_entropy(targets, input.mask())?
        .value()
        .item()
}

/// Model, optimizer and position in the schedule.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: BiRetNet,
    pub adam: Adam,
    pub cfg: TrainConfig,
    pub step: u64,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = BiRetNet::new(model_cfg, cfg.seed)?;
        let adam = Adam::new(model.params());
        Ok(Self {
            model,
            adam,
            cfg,
            step: 0,
        })
    }

    /// Loss and gradients averaged over `batch`, without updating anything.
    pub fn loss_and_grads(&self, batch: &[PixelSequence]) -> Result<(f64, f64, Vec<Tensor>)> {
        let params = self.model.params();
        let mut grads: Vec<Tensor> = params.ids().map(|id| Tensor::zeros(params.get(id).shape())).collect();
        let (mut loss, mut hits, mut total) = (0.0, 0usize, 0usize);
        let scale = 1.0 / batch.len() as f64;
        for (i, seq) in batch.iter().enumerate() {
            let g = Graph::new();
            let logits = self.model.logits(&g, seq, self.cfg.paradigm)?;
            let l = logits.masked_cross_entropy(seq.tokens(), seq.mask())?;
            let lv = l.value().item()?;
            if !lv.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss {lv} at step {} on batch item {i} ({} masked positions)",
                    self.step,
                    seq.num_masked()
                )));
            }
            let lg = logits.value();
            for p in seq.masked_positions() {
                total += 1;
                hits += usize::from(argmax(lg.row(p)) == seq.tokens()[p]);
            }
            loss += lv * scale;
            let gr = g.backward(l)?;
            for (acc, id) in grads.iter_mut().zip(params.ids()) {
                if let Some(gp) = gr.param(id) {
                    for (a, &b) in acc.data_mut().iter_mut().zip(gp.data()) {
                        *a += b * scale;
                    }
                }
            }
        }
        Ok((loss, hits as f64 / total.max(1) as f64, grads))
    }

    /// One Adam update on `batch`.
    pub fn train_step(&mut self, batch: &[PixelSequence]) -> Result<TrainMetrics> {
        if batch.is_empty() {
            return Err(Error::usage("empty batch"));
        }
        let start = Instant::now();
        let (loss, acc, mut grads) = self.loss_and_grads(batch)?;
        if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
            let id = self.model.params().ids().nth(bad).expect("index in range");
            return Err(Error::Training(format!(
                "non-finite gradient for {} at step {}",
                self.model.params().name(id),
                self.step
            )));
        }
        let cfg = self.cfg.clone();
        self.adam.step(self.model.params_mut(), &mut grads, &cfg);
        self.step += 1;
        Ok(TrainMetrics {
            step: self.step,
            loss,
            acc,
            ms_per_step: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Batch for step `step`: images and masks drawn from streams keyed by
    /// `(seed, step)`, so a resumed run sees the same data.
    pub fn sample_batch(&self, data: &[IndexGrid], step: u64) -> Result<Vec<PixelSequence>> {
        if data.is_empty() {
            return Err(Error::usage("empty dataset"));
        }
        let mut r = rng::indexed(self.cfg.seed, rng::MASKS, step);
        (0..self.cfg.batch)
            .map(|_| {
                let grid = &data[r.random_range(0..data.len())];
                let mask = sample_training_mask(grid.height(), self.cfg.mask_ratio, &mut r);
                PixelSequence::from_grids(grid, &mask)
            })
            .collect()
    }

    pub fn to_checkpoint(&self, palette: Option<&Palette>) -> Checkpoint {
        let mut c = Checkpoint::new(Header {
            kind: MODEL_KIND.into(),
            config: serde_json::json!({ "model": self.model.config(), "train": self.cfg }),
            palette_hash: palette.map(Palette::hash),
            step: self.step,
            seed: self.cfg.seed,
        });
        c.push_params("", self.model.params());
        if let Some(p) = palette {
            c.push("palette", p.centroids().iter().flatten().map(|&v| v as f32).collect());
        }
        for (prefix, moments) in [("opt.m/", &self.adam.m), ("opt.v/", &self.adam.v)] {
            for (id, t) in self.model.params().ids().zip(moments) {
                let vals = t.data().iter().map(|&v| v as f32).collect();
                c.push(format!("{prefix}{}", self.model.params().name(id)), vals);
            }
        }
        c
    }

    /// Restores model, optimizer and step from a training checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.header.kind != MODEL_KIND {
            return Err(Error::Config(format!("checkpoint holds a {}, not a {MODEL_KIND}", ckpt.header.kind)));
        }
        let cfg: TrainConfig = serde_json::from_value(ckpt.header.config["train"].clone())
            .map_err(|e| Error::Config(format!("bad train config in checkpoint: {e}")))?;
        let mut t = Self::new(model_config(ckpt)?, cfg)?;
        ckpt.fill_params("", t.model.params_mut())?;
        if ckpt.array(&format!("opt.m/{}", t.model.params().name(t.model.params().ids().next().expect("params")))).is_some() {
            t.adam.m = ckpt.tensors_like("opt.m/", t.model.params())?;
            t.adam.v = ckpt.tensors_like("opt.v/", t.model.params())?;
        }
        t.step = ckpt.header.step;
        t.adam.t = t.step;
        Ok(t)
    }
}

/// Model configuration stored in a completion-model checkpoint.
pub fn model_config(ckpt: &Checkpoint) -> Result<ModelConfig> {
    serde_json::from_value(ckpt.header.config["model"].clone())
        .map_err(|e| Error::Config(format!("bad model config in checkpoint: {e}")))
}

/// Rebuilds the model (without optimizer state) from a checkpoint.
pub fn load_model(ckpt: &Checkpoint) -> Result<BiRetNet> {
    if ckpt.header.kind != MODEL_KIND {
        return Err(Error::Config(format!("checkpoint holds a {}, not a {MODEL_KIND}", ckpt.header.kind)));
    }
    let mut m = BiRetNet::new(model_config(ckpt)?, ckpt.header.seed)?;
    ckpt.fill_params("", m.params_mut())?;
    Ok(m)
}

/// Palette stored alongside a model, if any.
pub fn stored_palette(ckpt: &Checkpoint) -> Result<Option<Palette>> {
    let Some(vals) = ckpt.array("palette") else {
        return Ok(None);
    };
    let cols = vals
        .chunks_exact(3)
        .map(|c| [c[0] as f64, c[1] as f64, c[2] as f64])
        .collect();
    let p = Palette::new(cols)?;
    if let Some(h) = &ckpt.header.palette_hash {
        if *h != p.hash() {
            return Err(Error::format(0, "stored palette does not match its hash"));
        }
    }
    Ok(Some(p))
}

/// Where [`train_loop`] writes its outputs.
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub dir: PathBuf,
}

impl TrainOutputs {
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("model.rckpt")
    }

    pub fn periodic_checkpoint(&self, step: u64) -> PathBuf {
        self.dir.join(format!("step_{step:06}.rckpt"))
    }
}

fn append_metrics(path: &Path, rows: &[TrainMetrics]) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str("step,loss,acc,ms_per_step\n");
    }
    for m in rows {
        text.push_str(&format!("{},{:.6},{:.4},{:.3}\n", m.step, m.loss, m.acc, m.ms_per_step));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Runs `trainer` until `trainer.cfg.steps`, optionally logging metrics and
/// writing checkpoints under `out`.
pub fn train_loop(
    trainer: &mut Trainer,
    data: &[IndexGrid],
    palette: Option<&Palette>,
    out: Option<&TrainOutputs>,
) -> Result<Vec<TrainMetrics>> {
    if data.is_empty() {
        return Err(Error::usage("training needs at least one image"));
    }
    let side = trainer.model.config().side;
    if let Some(g) = data.iter().find(|g| g.height() != side || g.width() != side) {
        return Err(Error::dim(format!(
            "training grid is {}×{}, model expects {side}×{side}",
            g.height(),
            g.width()
        )));
    }
    if let Some(o) = out {
        fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
    }
    let mut log = Vec::new();
    while trainer.step < trainer.cfg.steps {
        let batch = trainer.sample_batch(data, trainer.step)?;
        let m = trainer.train_step(&batch)?;
        if let Some(o) = out {
            append_metrics(&o.metrics(), std::slice::from_ref(&m))?;
            let every = trainer.cfg.checkpoint_every;
            if every > 0 && trainer.step % every == 0 {
                trainer.to_checkpoint(palette).save(o.periodic_checkpoint(trainer.step))?;
            }
        }
        log.push(m);
    }
    if let Some(o) = out {
        trainer.to_checkpoint(palette).save(o.final_checkpoint())?;
    }
    Ok(log)
}
