//! Plain-text `key = value` pipeline configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! errors. Keys left out keep their defaults.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::biretnet::ModelConfig;
use crate::error::{Error, Result};
use crate::inferencer::SamplingPolicy;
use crate::retention::Paradigm;
use crate::sequencer::{MaskKind, MaskSpec};
use crate::trainer::TrainConfig;
use crate::upsampler::UpsamplerConfig;

/// File locations used by a pipeline run; all optional.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub palette: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub upsampler: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub upsampler: UpsamplerConfig,
    pub mask: MaskSpec,
    pub policy: SamplingPolicy,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            model: ModelConfig::DESK,
            train: TrainConfig::default(),
            upsampler: UpsamplerConfig::default(),
            mask: MaskSpec::new(MaskKind::Center, 0.5, 0),
            policy: SamplingPolicy::Top1,
        }
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn pair(key: &str, v: &str) -> Result<(f64, f64)> {
    let (a, b) = v
        .split_once(',')
        .ok_or_else(|| Error::Config(format!("{key}: expected two comma-separated numbers")))?;
    Ok((num(key, a.trim())?, num(key, b.trim())?))
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip(e))))?;
        }
        Ok(cfg)
    }

    /// Assigns one key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let path = || Some(PathBuf::from(v));
        match key {
            "paths.data" => self.paths.data = path(),
            "paths.palette" => self.paths.palette = path(),
            "paths.checkpoint" => self.paths.checkpoint = path(),
            "paths.upsampler" => self.paths.upsampler = path(),
            "paths.out" => self.paths.out = path(),
            "model.heads" => self.model.heads = num(key, v)?,
            "model.d" => self.model.d = num(key, v)?,
            "model.layers" => self.model.layers = num(key, v)?,
            "model.side" => self.model.side = num(key, v)?,
            "model.k" => self.model.k = num(key, v)?,
            "model.preset" => self.model = ModelConfig::preset(v).map_err(|e| Error::Config(strip(e)))?,
            "train.batch" => self.train.batch = num(key, v)?,
            "train.lr" => self.train.lr = num(key, v)?,
            "train.beta1" => self.train.beta1 = num(key, v)?,
            "train.beta2" => self.train.beta2 = num(key, v)?,
            "train.eps" => self.train.eps = num(key, v)?,
            "train.steps" => self.train.steps = num(key, v)?,
            "train.mask_ratio" => self.train.mask_ratio = pair(key, v)?,
            "train.paradigm" => self.train.paradigm = v.parse::<Paradigm>().map_err(|e| Error::Config(strip(e)))?,
            "train.seed" => self.train.seed = num(key, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = num(key, v)?,
            "train.clip_norm" => self.train.clip_norm = num(key, v)?,
            "upsampler.widths" => {
                let (a, b) = v
                    .split_once(',')
                    .ok_or_else(|| Error::Config(format!("{key}: expected two widths")))?;
                self.upsampler.widths = [num(key, a.trim())?, num(key, b.trim())?];
            }
            "upsampler.blocks" => self.upsampler.blocks = num(key, v)?,
            "upsampler.groups" => self.upsampler.groups = num(key, v)?,
            "mask.kind" => self.mask.kind = v.parse().map_err(|e| Error::Config(strip(e)))?,
            "mask.ratio" => self.mask.ratio = num(key, v)?,
            "mask.region" => self.mask.region = if v == "auto" { None } else { Some(num(key, v)?) },
            "mask.seed" => self.mask.seed = num(key, v)?,
            "policy" => self.policy = v.parse().map_err(|e| Error::Config(strip(e)))?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every key, one per line, in a fixed order; `parse` inverts it.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let p = &self.paths;
        for (k, v) in [
            ("data", &p.data),
            ("palette", &p.palette),
            ("checkpoint", &p.checkpoint),
            ("upsampler", &p.upsampler),
            ("out", &p.out),
        ] {
            if let Some(v) = v {
                let _ = writeln!(s, "paths.{k} = {}", v.display());
            }
        }
        let m = &self.model;
        let t = &self.train;
        let u = &self.upsampler;
        let _ = writeln!(s, "model.heads = {}", m.heads);
        let _ = writeln!(s, "model.d = {}", m.d);
        let _ = writeln!(s, "model.layers = {}", m.layers);
        let _ = writeln!(s, "model.side = {}", m.side);
        let _ = writeln!(s, "model.k = {}", m.k);
        let _ = writeln!(s, "train.batch = {}", t.batch);
        let _ = writeln!(s, "train.lr = {:?}", t.lr);
        let _ = writeln!(s, "train.beta1 = {:?}", t.beta1);
        let _ = writeln!(s, "train.beta2 = {:?}", t.beta2);
        let _ = writeln!(s, "train.eps = {:?}", t.eps);
        let _ = writeln!(s, "train.steps = {}", t.steps);
        let _ = writeln!(s, "train.mask_ratio = {:?}, {:?}", t.mask_ratio.0, t.mask_ratio.1);
        let _ = writeln!(s, "train.paradigm = {}", t.paradigm);
        let _ = writeln!(s, "train.seed = {}", t.seed);
        let _ = writeln!(s, "train.checkpoint_every = {}", t.checkpoint_every);
        let _ = writeln!(s, "train.clip_norm = {:?}", t.clip_norm);
        let _ = writeln!(s, "upsampler.widths = {}, {}", u.widths[0], u.widths[1]);
        let _ = writeln!(s, "upsampler.blocks = {}", u.blocks);
        let _ = writeln!(s, "upsampler.groups = {}", u.groups);
        let _ = writeln!(s, "mask.kind = {}", self.mask.kind);
        let _ = writeln!(s, "mask.ratio = {:?}", self.mask.ratio);
        match self.mask.region {
            Some(r) => {
                let _ = writeln!(s, "mask.region = {r}");
            }
            None => {
                let _ = writeln!(s, "mask.region = auto");
            }
        }
        let _ = writeln!(s, "mask.seed = {}", self.mask.seed);
        let _ = writeln!(s, "policy = {}", self.policy);
        s
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), strip(e))))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.serialize()).map_err(|e| Error::io(path, e))
    }

    /// Checks value ranges and that every input file named exists.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.upsampler.validate()?;
        let p = &self.paths;
        for f in [&p.data, &p.palette, &p.checkpoint, &p.upsampler].into_iter().flatten() {
            if !f.exists() {
                return Err(Error::Config(format!("{} does not exist", f.display())));
            }
        }
        Ok(())
    }
}

/// Message of an error without its kind prefix.
fn strip(e: Error) -> String {
    match e {
        Error::Config(m) | Error::Usage(m) | Error::Dimension(m) | Error::Vocabulary(m) => m,
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert_eq, prop_oneof, proptest, Just};
    use proptest::strategy::Strategy;

    #[test]
    fn defaults_round_trip_and_comments_are_skipped() {
        let c = PipelineConfig::default();
        assert_eq!(PipelineConfig::parse(&c.serialize()).unwrap(), c);
        let c = PipelineConfig::parse("# note\n\nmodel.d = 32\n  train.lr=0.5  \n").unwrap();
        assert_eq!(c.model.d, 32);
        assert_eq!(c.train.lr, 0.5);
    }

    #[test]
    fn bad_lines_name_their_line() {
        let e = PipelineConfig::parse("model.d = 8\nmodel.q = 1\n").unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        assert!(PipelineConfig::parse("model.d 8").is_err());
        assert!(PipelineConfig::parse("model.d = eight").is_err());
        assert!(PipelineConfig::parse("policy = top3").is_err());
    }

    #[test]
    fn readme_example_parses() {
        let readme = include_str!("../../../README.md");
        let block = readme.split("```\nmodel.preset").nth(1).expect("config example present");
        let text = format!("model.preset{}", block.split("```").next().unwrap());
        let c = PipelineConfig::parse(&text).unwrap();
        assert_eq!(c.model.side, 32);
        assert_eq!(c.mask.kind, MaskKind::RandomStroke);
        c.train.validate().unwrap();
    }

    #[test]
    fn preset_key_sets_all_dimensions() {
        let c = PipelineConfig::parse("model.preset = celeba").unwrap();
        assert_eq!(c.model, ModelConfig::CELEBA);
    }

    #[test]
    fn missing_files_fail_validation() {
        let mut c = PipelineConfig::default();
        c.validate().unwrap();
        c.paths.checkpoint = Some(PathBuf::from("/nonexistent/model.rckpt"));
        assert!(c.validate().unwrap_err().to_string().contains("/nonexistent/model.rckpt"));
    }

    fn finite() -> impl Strategy<Value = f64> {
        any::<f64>().prop_filter("finite", |v| v.is_finite())
    }

    fn word() -> impl Strategy<Value = Option<PathBuf>> {
        proptest::option::of("[a-zA-Z0-9_./-]{1,20}".prop_map(PathBuf::from))
    }

    proptest! {
        #[test]
        fn serialize_then_parse_is_identity(
            dims in (1usize..9, 1usize..512, 1usize..40, 1usize..64, 1usize..600),
            lr in finite(), b1 in finite(), eps in finite(), ratio in (finite(), finite()),
            steps in any::<u64>(), seed in any::<u64>(), chunk in 1usize..100,
            kind in 0usize..5, region in proptest::option::of(1usize..64),
            policy in prop_oneof![Just(SamplingPolicy::Top1), (1usize..20, 0.01f64..10.0).prop_map(|(k, temperature)| SamplingPolicy::TopK { k, temperature })],
            data in word(), out in word(),
        ) {
            let mut c = PipelineConfig {
                model: ModelConfig { heads: dims.0, d: dims.1, layers: dims.2, side: dims.3, k: dims.4 },
                ..PipelineConfig::default()
            };
            c.train.lr = lr;
            c.train.beta1 = b1;
            c.train.eps = eps;
            c.train.mask_ratio = ratio;
            c.train.steps = steps;
            c.train.seed = seed;
            c.train.paradigm = if chunk % 2 == 0 { Paradigm::Chunkwise(chunk) } else { Paradigm::Parallel };
            c.mask = MaskSpec { kind: MaskKind::ALL[kind], ratio: ratio.0, region, seed };
            c.policy = policy;
            c.paths.data = data;
            c.paths.out = out;
            prop_assert_eq!(PipelineConfig::parse(&c.serialize()).unwrap(), c);
        }
    }
}
