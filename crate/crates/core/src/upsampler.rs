//! Guided upsampling of a completed low-resolution image.
//!
//! The completed image is bilinearly upscaled, stacked with the known part of
//! the original and the mask, and a small encoder/residual/decoder CNN
//! predicts a correction. The final convolution starts at zero, so an
//! untrained network returns the bilinear upscale. Known pixels are always
//! copied from the original.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{concat_rows, Graph, Var};
use crate::checkpoint::{Checkpoint, Header};
use crate::error::{Error, Result};
use crate::image::{ImageTensor, MaskGrid};
use crate::params::{truncated_normal, ParamId, ParamSet};
use crate::rng;
use crate::sequencer::{downsample, sample_training_mask};
use crate::tensor::Tensor;
use crate::trainer::{Adam, TrainConfig, TrainMetrics};

pub const UPSAMPLER_KIND: &str = "upsampler";

const GN_EPS: f64 = 1e-5;

/// Resamples `img` to `height × width` with half-pixel centers; samples
/// beyond the border repeat the edge.
pub fn bilinear_upscale(img: &ImageTensor, height: usize, width: usize) -> Result<ImageTensor> {
    if height < img.height() || width < img.width() {
        return Err(Error::usage(format!(
            "cannot upscale {}×{} to smaller {height}×{width}",
            img.height(),
            img.width()
        )));
    }
    let axis = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ys = axis(height, img.height());
    let xs = axis(width, img.width());
    Ok(ImageTensor::from_fn(height, width, img.channels(), |r, c, ch| {
        let (y0, y1, fy) = ys[r];
        let (x0, x1, fx) = xs[c];
        let top = img.get(y0, x0, ch) * (1.0 - fx) + img.get(y0, x1, ch) * fx;
        let bot = img.get(y1, x0, ch) * (1.0 - fx) + img.get(y1, x1, ch) * fx;
        top * (1.0 - fy) + bot * fy
    }))
}

/// Channel widths, residual-block count and group-norm groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpsamplerConfig {
    pub widths: [usize; 2],
    pub blocks: usize,
    pub groups: usize,
}

impl Default for UpsamplerConfig {
    fn default() -> Self {
        Self {
            widths: [32, 64],
            blocks: 4,
            groups: 8,
        }
    }
}

impl UpsamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let [a, b] = self.widths;
        if a == 0 || b == 0 || self.groups == 0 || b % self.groups != 0 {
            return Err(Error::Config(format!(
                "upsampler widths {a},{b} must be positive with the second divisible by {} groups",
                self.groups
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct ResBlock {
    c1: Conv,
    gn1: (ParamId, ParamId),
    c2: Conv,
    gn2: (ParamId, ParamId),
}

/// Input channels: upscaled prior, known original, mask.
const IN_CHANNELS: usize = 7;

#[derive(Debug, Clone)]
pub struct UpsamplerParams {
    config: UpsamplerConfig,
    params: ParamSet,
    enc: [Conv; 2],
    res: Vec<ResBlock>,
    dec: [Conv; 2],
}

impl UpsamplerParams {
    pub fn new(config: UpsamplerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, rng::INIT);
        let mut set = ParamSet::new();
        let mut conv = |set: &mut ParamSet, name: &str, c_out: usize, c_in: usize, zero: bool| {
            let shape = [c_out, c_in, 3, 3];
            let w = if zero {
                Tensor::zeros(&shape)
            } else {
                truncated_normal(&shape, (1.0 / (9 * c_in) as f64).sqrt(), &mut r)
            };
            Conv {
                w: set.add(format!("{name}.w"), w),
                b: set.add(format!("{name}.b"), Tensor::zeros(&[c_out])),
            }
        };
        let [w0, w1] = config.widths;
        let enc = [conv(&mut set, "enc1", w0, IN_CHANNELS, false), conv(&mut set, "enc2", w1, w0, false)];
        let mut res = Vec::with_capacity(config.blocks);
        for i in 0..config.blocks {
            let c1 = conv(&mut set, &format!("res{i}.c1"), w1, w1, false);
            let gn1 = norm(&mut set, &format!("res{i}.gn1"), w1);
            let c2 = conv(&mut set, &format!("res{i}.c2"), w1, w1, false);
            let gn2 = norm(&mut set, &format!("res{i}.gn2"), w1);
            res.push(ResBlock { c1, gn1, c2, gn2 });
        }
        let dec = [conv(&mut set, "dec1", w0, w1, false), conv(&mut set, "dec2", 3, w0, true)];
        set.round_to_f32();
        Ok(Self {
            config,
            params: set,
            enc,
            res,
            dec,
        })
    }

    pub fn config(&self) -> &UpsamplerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Unclamped-then-clamped prediction `clamp(up + delta, 0, 1)` as `[3, H, W]`.
    fn predict<'g>(&self, g: &'g Graph, up: &ImageTensor, orig: &ImageTensor, mask: &MaskGrid) -> Result<Var<'g>> {
        check_shapes(up, orig, mask)?;
        let (h, w) = (orig.height(), orig.width());
        let m = Tensor::new(vec![1, h, w], mask.data().iter().map(|&b| b as u8 as f64).collect())?;
        let known = orig.to_chw().zip_map(
            &Tensor::from_fn(&[3, h, w], |i| m.data()[i % (h * w)]),
            |x, mi| x * (1.0 - mi),
        )?;
        let up_v = g.constant(up.to_chw());
        let x = concat_rows(&[up_v, g.constant(known), g.constant(m)])?;
        let set = &self.params;
        let conv = |x: Var<'g>, c: Conv, stride: usize| -> Result<Var<'g>> {
            let y = x.conv2d(g.param(set, c.w), stride, 1)?;
            let hw = y.shape()[1] * y.shape()[2];
            y.bcast_add(g.param(set, c.b), hw)
        };
        let gn = |x: Var<'g>, p: (ParamId, ParamId)| -> Result<Var<'g>> {
            let s = x.shape();
            let hw = s[1] * s[2];
            x.normalize(s[0] / self.config.groups * hw, GN_EPS)?
                .bcast_mul(g.param(set, p.0), hw)?
                .bcast_add(g.param(set, p.1), hw)
        };
        let mut z = conv(x, self.enc[0], 2)?.gelu()?;
        z = conv(z, self.enc[1], 2)?.gelu()?;
        for b in &self.res {
            let y = gn(conv(z, b.c1, 1)?, b.gn1)?.gelu()?;
            let y = gn(conv(y, b.c2, 1)?, b.gn2)?;
            z = y.add(z)?;
        }
        z = conv(z.upsample2x()?, self.dec[0], 1)?.gelu()?;
        let delta = conv(z.upsample2x()?, self.dec[1], 1)?;
        up_v.add(delta)?.clamp(0.0, 1.0)
    }

    /// Refined full-resolution image with known pixels copied from `original`.
    pub fn refine(&self, upscaled: &ImageTensor, original: &ImageTensor, mask: &MaskGrid) -> Result<ImageTensor> {
        let g = Graph::no_grad();
        let pred = ImageTensor::from_chw(&self.predict(&g, upscaled, original, mask)?.value())?;
        Ok(composite(&pred, original, mask))
    }

    /// Mean absolute error over masked pixels, or over the whole image when
    /// nothing is masked.
    pub fn loss<'g>(&self, g: &'g Graph, sample: &UpsampleSample) -> Result<Var<'g>> {
        let (h, w) = (sample.truth.height(), sample.truth.width());
        let up = bilinear_upscale(&sample.low, h, w)?;
        let pred = self.predict(g, &up, &sample.truth, &sample.mask)?;
        let weights = region_weights(&sample.mask);
        let wt = Tensor::from_fn(&[3, h, w], |i| weights[i % (h * w)] / 3.0);
        pred.sub(g.constant(sample.truth.to_chw()))?.abs()?.mul(g.constant(wt))?.sum()
    }

    pub fn to_checkpoint(&self, step: u64, seed: u64) -> Checkpoint {
        let mut c = Checkpoint::new(Header {
            kind: UPSAMPLER_KIND.into(),
            config: serde_json::to_value(self.config).expect("plain struct"),
            palette_hash: None,
            step,
            seed,
        });
        c.push_params("", &self.params);
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.header.kind != UPSAMPLER_KIND {
            return Err(Error::format(0, format!("checkpoint kind {:?} is not {UPSAMPLER_KIND}", ckpt.header.kind)));
        }
        let config: UpsamplerConfig = serde_json::from_value(ckpt.header.config.clone())
            .map_err(|e| Error::format(0, format!("bad upsampler config: {e}")))?;
        let mut net = Self::new(config, 0)?;
        ckpt.fill_params("", &mut net.params)?;
        Ok(net)
    }
}

fn norm(set: &mut ParamSet, name: &str, c: usize) -> (ParamId, ParamId) {
    (
        set.add(format!("{name}.g"), Tensor::full(&[c], 1.0)),
        set.add(format!("{name}.b"), Tensor::zeros(&[c])),
    )
}

fn check_shapes(up: &ImageTensor, orig: &ImageTensor, mask: &MaskGrid) -> Result<()> {
    let (h, w) = (orig.height(), orig.width());
    if up.height() != h || up.width() != w || mask.height() != h || mask.width() != w {
        return Err(Error::dim(format!(
            "upscaled {}×{}, original {h}×{w} and mask {}×{} must agree",
            up.height(),
            up.width(),
            mask.height(),
            mask.width()
        )));
    }
    if up.channels() != 3 || orig.channels() != 3 {
        return Err(Error::dim("upsampler images must be RGB"));
    }
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::dim(format!("upsampler needs sides divisible by 4, got {h}×{w}")));
    }
    Ok(())
}

fn region_weights(mask: &MaskGrid) -> Vec<f64> {
    let n = mask.count();
    if n == 0 {
        let all = mask.data().len() as f64;
        vec![1.0 / all; mask.data().len()]
    } else {
        mask.data().iter().map(|&m| if m { 1.0 / n as f64 } else { 0.0 }).collect()
    }
}

/// `pred` at masked pixels, `original` elsewhere.
pub fn composite(pred: &ImageTensor, original: &ImageTensor, mask: &MaskGrid) -> ImageTensor {
    let c = original.channels();
    ImageTensor::from_fn(original.height(), original.width(), c, |r, col, ch| {
        if *mask.get(r, col) {
            pred.get(r, col, ch)
        } else {
            original.get(r, col, ch)
        }
    })
}

/// Mean absolute error over masked pixels (whole image when none are masked).
pub fn masked_l1(a: &ImageTensor, b: &ImageTensor, mask: &MaskGrid) -> f64 {
    let w = region_weights(mask);
    let c = a.channels();
    a.data()
        .chunks(c)
        .zip(b.data().chunks(c))
        .zip(&w)
        .map(|((x, y), wi)| wi * x.iter().zip(y).map(|(p, q)| (p - q).abs()).sum::<f64>() / c as f64)
        .sum()
}

/// One training example: ground truth, its low-resolution stand-in and a
/// full-resolution mask.
#[derive(Debug, Clone, PartialEq)]
pub struct UpsampleSample {
    pub truth: ImageTensor,
    pub low: ImageTensor,
    pub mask: MaskGrid,
}

/// Pairs each image with its area-downsampled version at `side`; masks are
/// drawn per step by [`train_upsampler`].
pub fn toy_samples(images: &[ImageTensor], side: usize) -> Result<Vec<UpsampleSample>> {
    images
        .iter()
        .map(|img| {
            Ok(UpsampleSample {
                truth: img.clone(),
                low: downsample(img, side)?,
                mask: MaskGrid::filled(img.height(), img.width(), false),
            })
        })
        .collect()
}

/// Batch for `step`: samples in rotating order, each with a fresh mask drawn
/// from `cfg.mask_ratio` (kept as-is when the range is `(0, 0)`).
pub fn upsample_batch(data: &[UpsampleSample], cfg: &TrainConfig, step: u64) -> Vec<UpsampleSample> {
    let mut r = rng::indexed(cfg.seed, rng::MASKS, step);
    (0..cfg.batch)
        .map(|i| {
            let mut s = data[(step as usize * cfg.batch + i) % data.len()].clone();
            if cfg.mask_ratio.1 > 0.0 && s.truth.height() == s.truth.width() {
                s.mask = sample_training_mask(s.truth.height(), cfg.mask_ratio, &mut r);
            }
            s
        })
        .collect()
}

/// Adam on the L1 objective; `cfg.paradigm` is ignored.
pub fn train_upsampler(net: &mut UpsamplerParams, data: &[UpsampleSample], cfg: &TrainConfig) -> Result<Vec<TrainMetrics>> {
    // (0, 0) means "keep the stored masks"
    let keep = cfg.mask_ratio == (0.0, 0.0);
    TrainConfig {
        mask_ratio: if keep { (0.5, 0.5) } else { cfg.mask_ratio },
        ..cfg.clone()
    }
    .validate()?;
    if data.is_empty() {
        return Err(Error::Training("upsampler training set is empty".into()));
    }
    let mut adam = Adam::new(&net.params);
    let mut out = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let t0 = Instant::now();
        let batch = upsample_batch(data, cfg, step);
        let mut grads: Vec<Tensor> = net.params.ids().map(|id| Tensor::zeros(net.params.get(id).shape())).collect();
        let mut total = 0.0;
        for s in &batch {
            let g = Graph::new();
            let loss = net.loss(&g, s)?;
            total += loss.value().item()?;
            let gr = g.backward(loss)?;
            for (acc, id) in grads.iter_mut().zip(net.params.ids()) {
                if let Some(t) = gr.param(id) {
                    acc.add_assign(t);
                }
            }
        }
        let n = batch.len() as f64;
        for gt in grads.iter_mut() {
            *gt = gt.scale(1.0 / n);
        }
        let loss = total / n;
        if !loss.is_finite() || grads.iter().any(|t| !t.is_finite()) {
            return Err(Error::Training(format!("non-finite upsampler loss or gradient at step {step}")));
        }
        adam.step(&mut net.params, &mut grads, cfg);
        out.push(TrainMetrics {
            step: step + 1,
            loss,
            acc: f64::NAN,
            ms_per_step: t0.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::smooth_images;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const MICRO: UpsamplerConfig = UpsamplerConfig {
        widths: [4, 8],
        blocks: 1,
        groups: 2,
    };

    fn random_image(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::from_fn(h, w, 3, |_, _, _| r.random())
    }

    #[test]
    fn bilinear_constant_and_midpoint() {
        let c = ImageTensor::filled(3, 5, &[0.2, 0.4, 0.9]);
        let up = bilinear_upscale(&c, 7, 11).unwrap();
        assert!(up.max_abs_diff(&ImageTensor::filled(7, 11, &[0.2, 0.4, 0.9])) < 1e-15);
        let checker = ImageTensor::new(2, 2, 1, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let up = bilinear_upscale(&checker, 3, 3).unwrap();
        assert!((up.get(1, 1, 0) - 0.5).abs() < 1e-15);
        for (r, c) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(up.get(r, c, 0), checker.get(r / 2, c / 2, 0));
        }
        assert!(bilinear_upscale(&checker, 1, 3).is_err());
    }

    #[test]
    fn bilinear_doubling_matches_weights() {
        // exact doubling: each output sits a quarter pixel from its source,
        // weights 3/4 and 1/4 toward the nearer neighbour, edges clamped
        let img = random_image(4, 4, 1);
        let up = bilinear_upscale(&img, 8, 8).unwrap();
        let tap = |o: usize| -> (usize, usize, f64) {
            let src = o / 2;
            if o % 2 == 0 {
                (src.saturating_sub(1), src, if src == 0 { 1.0 } else { 0.75 })
            } else {
                ((src + 1).min(3), src, if src == 3 { 1.0 } else { 0.75 })
            }
        };
        for r in 0..8 {
            for c in 0..8 {
                let (ya, yb, wy) = tap(r);
                let (xa, xb, wx) = tap(c);
                for ch in 0..3 {
                    let v = wy * (wx * img.get(yb, xb, ch) + (1.0 - wx) * img.get(yb, xa, ch))
                        + (1.0 - wy) * (wx * img.get(ya, xb, ch) + (1.0 - wx) * img.get(ya, xa, ch));
                    assert!((up.get(r, c, ch) - v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn fresh_net_returns_blended_upscale() {
        let net = UpsamplerParams::new(MICRO, 3).unwrap();
        let orig = random_image(8, 8, 4);
        let up = bilinear_upscale(&random_image(4, 4, 5), 8, 8).unwrap();
        let mask = MaskGrid::from_fn(8, 8, |r, c| r > 2 && c < 5);
        let out = net.refine(&up, &orig, &mask).unwrap();
        assert_eq!(out, composite(&up, &orig, &mask));
        assert_eq!(net.refine(&up, &orig, &MaskGrid::filled(8, 8, false)).unwrap(), orig);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let net = UpsamplerParams::new(MICRO, 3).unwrap();
        let a = random_image(8, 8, 1);
        let b = random_image(8, 12, 2);
        assert!(net.refine(&a, &b, &MaskGrid::filled(8, 8, true)).is_err());
        let odd = random_image(6, 6, 3);
        assert!(net.refine(&odd, &odd, &MaskGrid::filled(6, 6, true)).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let mut net = UpsamplerParams::new(MICRO, 7).unwrap();
        let before = net.params().clone();
        let data = toy_samples(&smooth_images(2, 8, 8, 1), 4).unwrap();
        let cfg = TrainConfig {
            batch: 2,
            lr: 0.0,
            steps: 3,
            ..TrainConfig::default()
        };
        train_upsampler(&mut net, &data, &cfg).unwrap();
        for id in before.ids() {
            assert_eq!(before.get(id), net.params().get(id));
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut net = UpsamplerParams::new(MICRO, 8).unwrap();
        let data = toy_samples(&smooth_images(2, 8, 8, 2), 4).unwrap();
        let cfg = TrainConfig {
            batch: 2,
            lr: 1e-2,
            steps: 2,
            ..TrainConfig::default()
        };
        train_upsampler(&mut net, &data, &cfg).unwrap();
        let ckpt = net.to_checkpoint(2, 0);
        let back = UpsamplerParams::from_checkpoint(&Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.to_checkpoint(2, 0), ckpt);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let net = UpsamplerParams::new(MICRO, 9).unwrap();
        let mut net = net;
        // move the zero-initialized head off zero so every path carries signal
        let mut r = ChaCha8Rng::seed_from_u64(10);
        for id in net.params().ids().collect::<Vec<_>>() {
            for v in net.params_mut().get_mut(id).data_mut() {
                *v += r.random_range(-0.05..0.05);
            }
        }
        let sample = UpsampleSample {
            truth: random_image(8, 8, 11),
            low: random_image(4, 4, 12),
            mask: MaskGrid::from_fn(8, 8, |r, c| (r + c) % 3 == 0),
        };
        let g = Graph::new();
        let loss = net.loss(&g, &sample).unwrap();
        let grads = g.backward(loss).unwrap();
        let ids: Vec<_> = net.params().ids().collect();
        for id in ids {
            let an = grads.param(id).unwrap().clone();
            for i in (0..an.numel()).step_by(7) {
                let eval = |net: &UpsamplerParams| net.loss(&Graph::no_grad(), &sample).unwrap().value().item().unwrap();
                let h = 1e-6;
                let mut p = net.clone();
                p.params_mut().get_mut(id).data_mut()[i] += h;
                let mut m = net.clone();
                m.params_mut().get_mut(id).data_mut()[i] -= h;
                let fd = (eval(&p) - eval(&m)) / (2.0 * h);
                let a = an.data()[i];
                assert!((fd - a).abs() <= 1e-4 * fd.abs().max(a.abs()).max(1e-3), "{} [{i}]: {fd} vs {a}", net.params().name(id));
            }
        }
    }
}
