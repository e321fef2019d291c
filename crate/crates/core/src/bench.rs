//! Per-pixel decoding latency against mask ratio.
//!
//! Two methods fill the same masked image in raster order:
//!
//! - `recurrent`: [`InferenceSession`] steps, constant work per pixel.
//! - `recompute`: [`RecomputeBaseline`], which re-runs the forward tower
//!   over every generated pixel at each step.
//!
//! The baseline is teacher-forced on the recurrent run's colors and must
//! agree with it before anything is timed. Per-rep figures are mean
//! milliseconds per generated pixel; session setup is excluded for both.
//! The baseline times an evenly spaced subset of steps, which keeps the
//! average context length of the full run.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::biretnet::{BiRetNet, ModelConfig};
use crate::error::{Error, Result};
use crate::inferencer::{argmax, InferenceSession, RecomputeBaseline, SamplingPolicy};
use crate::rng;
use crate::sequencer::{gen_mask, MaskKind, MaskSpec, PixelSequence};

pub const METHODS: [&str; 2] = ["recurrent", "recompute"];
pub const CSV_HEADER: &str = "method,mask_ratio,median_ms,p25_ms,p75_ms";

/// Distribution agreement required by the correctness gate.
pub const GATE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub ratios: Vec<f64>,
    /// Timed repetitions per ratio and method; at least 5.
    pub reps: usize,
    /// Untimed repetitions run first.
    pub warmup: usize,
    /// Baseline steps timed per repetition.
    pub baseline_steps: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            ratios: vec![0.1, 0.25, 0.5, 0.75],
            reps: 9,
            warmup: 1,
            baseline_steps: 12,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reps < 5 {
            return Err(Error::usage(format!("bench needs at least 5 repetitions, got {}", self.reps)));
        }
        if self.baseline_steps == 0 {
            return Err(Error::usage("baseline_steps must be positive"));
        }
        if let Some(r) = self.ratios.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return Err(Error::usage(format!("mask ratio {r} outside [0, 1)")));
        }
        Ok(())
    }
}

/// Summary for one method at one mask ratio, in ms per generated pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub method: &'static str,
    pub mask_ratio: f64,
    pub median_ms: f64,
    pub p25_ms: f64,
    pub p75_ms: f64,
}

/// Deterministic part of a ratio's workload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Workload {
    pub mask_ratio_bits: u64,
    pub steps: usize,
    /// SHA-256 of the generated colors.
    pub output_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRun {
    pub model: ModelConfig,
    pub config: BenchConfig,
    pub timer_resolution: Duration,
    pub rows: Vec<BenchRow>,
    pub workloads: Vec<Workload>,
}

/// Smallest nonzero gap between successive clock reads.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..200 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

/// Linear-interpolated quantile of sorted values.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn summarize(method: &'static str, ratio: f64, mut samples: Vec<f64>) -> BenchRow {
    samples.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    BenchRow {
        method,
        mask_ratio: ratio,
        median_ms: quantile(&samples, 0.5),
        p25_ms: quantile(&samples, 0.25),
        p75_ms: quantile(&samples, 0.75),
    }
}

/// Evenly spaced step indices, at most `n` of them, out of `total`.
pub fn spaced_indices(total: usize, n: usize) -> Vec<usize> {
    let n = n.min(total);
    (0..n).map(|i| ((2 * i + 1) * total) / (2 * n)).collect()
}

struct Case {
    ratio: f64,
    seq: PixelSequence,
    /// Recurrent run's (position, color) sequence.
    committed: Vec<(usize, usize)>,
    probes: Vec<usize>,
}

fn build_case(model: &BiRetNet, ratio: f64, seed: u64, index: u64, probes: usize) -> Result<Case> {
    let cfg = model.config();
    let mut r = rng::indexed(seed, rng::SAMPLING, index);
    let tokens = (0..cfg.seq_len()).map(|_| r.random_range(0..cfg.k)).collect();
    let mask = gen_mask(&MaskSpec::new(MaskKind::RandomRect, ratio, seed ^ index), cfg.side)?;
    let seq = PixelSequence::new(tokens, mask.into_data(), cfg.side)?;
    let mut session = InferenceSession::new(model, &seq, SamplingPolicy::Top1, seed)?;
    let baseline = RecomputeBaseline::new(model, &seq)?;
    let mut committed = Vec::with_capacity(seq.num_masked());
    let mut dists = Vec::with_capacity(seq.num_masked());
    while let Some(j) = session.next_position() {
        let out = session.step(j)?;
        committed.push((j, out.color));
        dists.push(out.dist);
    }
    let probes = spaced_indices(committed.len(), probes);
    for &i in &probes {
        let (j, color) = committed[i];
        let d = baseline.distribution(&committed[..i], j)?;
        let gap = d.iter().zip(&dists[i]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if gap > GATE_TOL || argmax(&d) != color {
            return Err(Error::Bench(format!(
                "methods disagree at ratio {ratio}, step {i}: max gap {gap:e}"
            )));
        }
    }
    Ok(Case {
        ratio,
        seq,
        committed,
        probes,
    })
}

fn time_recurrent(model: &BiRetNet, case: &Case, seed: u64) -> Result<f64> {
    let mut session = InferenceSession::new(model, &case.seq, SamplingPolicy::Top1, seed)?;
    let mut total = Duration::ZERO;
    for &(j, color) in &case.committed {
        let t0 = Instant::now();
        let out = session.step(j)?;
        total += t0.elapsed();
        debug_assert_eq!(out.color, color);
    }
    Ok(per_step_ms(total, case.committed.len()))
}

fn time_recompute(model: &BiRetNet, case: &Case) -> Result<f64> {
    let baseline = RecomputeBaseline::new(model, &case.seq)?;
    let mut total = Duration::ZERO;
    for &i in &case.probes {
        let (j, _) = case.committed[i];
        let t0 = Instant::now();
        let d = baseline.distribution(&case.committed[..i], j)?;
        total += t0.elapsed();
        std::hint::black_box(d);
    }
    Ok(per_step_ms(total, case.probes.len()))
}

fn per_step_ms(total: Duration, steps: usize) -> f64 {
    if steps == 0 {
        0.0
    } else {
        total.as_secs_f64() * 1e3 / steps as f64
    }
}

/// Gates, then times both methods at every ratio. Repetitions are
/// interleaved across ratios so slow drift hits all of them alike.
pub fn run_bench(model: &BiRetNet, cfg: &BenchConfig) -> Result<BenchRun> {
    cfg.validate()?;
    let resolution = timer_resolution();
    let cases = cfg
        .ratios
        .iter()
        .enumerate()
        .map(|(i, &r)| build_case(model, r, cfg.seed, i as u64, cfg.baseline_steps))
        .collect::<Result<Vec<_>>>()?;
    let mut samples = vec![[Vec::new(), Vec::new()]; cases.len()];
    for rep in 0..cfg.warmup + cfg.reps {
        for (c, s) in cases.iter().zip(samples.iter_mut()) {
            let rec = time_recurrent(model, c, cfg.seed)?;
            let base = time_recompute(model, c)?;
            if rep >= cfg.warmup {
                s[0].push(rec);
                s[1].push(base);
            }
        }
    }
    let mut rows = Vec::with_capacity(2 * cases.len());
    for (c, s) in cases.iter().zip(samples) {
        let [rec, base] = s;
        rows.push(summarize(METHODS[0], c.ratio, rec));
        rows.push(summarize(METHODS[1], c.ratio, base));
    }
    let floor = resolution.as_secs_f64() * 1e3 * 10.0;
    if let Some(r) = rows.iter().find(|r| r.median_ms > 0.0 && r.median_ms < floor) {
        return Err(Error::Bench(format!(
            "{} step at ratio {} takes {:.2e} ms, under 10× the timer resolution {:?}; use a larger L",
            r.method, r.mask_ratio, r.median_ms, resolution
        )));
    }
    let workloads = cases
        .iter()
        .map(|c| {
            let mut h = Sha256::new();
            for &(p, col) in &c.committed {
                h.update((p as u64).to_le_bytes());
                h.update((col as u64).to_le_bytes());
            }
            Workload {
                mask_ratio_bits: c.ratio.to_bits(),
                steps: c.committed.len(),
                output_hash: h.finalize().iter().map(|b| format!("{b:02x}")).collect(),
            }
        })
        .collect();
    Ok(BenchRun {
        model: *model.config(),
        config: cfg.clone(),
        timer_resolution: resolution,
        rows,
        workloads,
    })
}

pub fn csv(rows: &[BenchRow]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:.6},{:.6},{:.6}", r.method, r.mask_ratio, r.median_ms, r.p25_ms, r.p75_ms);
    }
    s
}

/// Whitespace-separated columns for gnuplot: one line per ratio, then
/// median/p25/p75 for each method in [`METHODS`] order.
pub fn gnuplot_data(rows: &[BenchRow]) -> String {
    let mut s = String::from("# mask_ratio");
    for m in METHODS {
        let _ = write!(s, " {m}_median {m}_p25 {m}_p75");
    }
    s.push('\n');
    let mut ratios: Vec<f64> = Vec::new();
    for r in rows {
        if !ratios.contains(&r.mask_ratio) {
            ratios.push(r.mask_ratio);
        }
    }
    for ratio in ratios {
        let _ = write!(s, "{ratio}");
        for m in METHODS {
            match rows.iter().find(|r| r.method == m && r.mask_ratio == ratio) {
                Some(r) => {
                    let _ = write!(s, " {:.6} {:.6} {:.6}", r.median_ms, r.p25_ms, r.p75_ms);
                }
                None => s.push_str(" NaN NaN NaN"),
            }
        }
        s.push('\n');
    }
    s
}

pub fn workload_csv(workloads: &[Workload]) -> String {
    let mut s = String::from("mask_ratio,steps,output_sha256\n");
    for w in workloads {
        let _ = writeln!(s, "{},{},{}", f64::from_bits(w.mask_ratio_bits), w.steps, w.output_hash);
    }
    s
}

/// Files written by [`emit_report`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportPaths {
    pub csv: PathBuf,
    pub dat: PathBuf,
    pub workload: PathBuf,
}

/// Writes `bench.csv`, `bench.dat` and `workload.csv` into `dir`.
pub fn emit_report(run: &BenchRun, dir: impl AsRef<Path>) -> Result<ReportPaths> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = ReportPaths {
        csv: dir.join("bench.csv"),
        dat: dir.join("bench.dat"),
        workload: dir.join("workload.csv"),
    };
    for (p, body) in [
        (&paths.csv, csv(&run.rows)),
        (&paths.dat, gnuplot_data(&run.rows)),
        (&paths.workload, workload_csv(&run.workloads)),
    ] {
        fs::write(p, body).map_err(|e| Error::io(p, e))?;
    }
    Ok(paths)
}
